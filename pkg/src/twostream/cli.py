"""Command-line entry point: ``twostream synth|preprocess|train|evaluate|report``.

Exit codes: 0 success, 1 generic failure, 2 invalid configuration (the
offending field is named), 3 model/data stream mismatch, 4 single-class
labels during evaluation, 5 training aborted on a non-finite loss.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as _dt
import hashlib
import json
import math
import sys
from pathlib import Path

import click
import numpy as np
import tomli

from . import io, synth
from .evaluation import (SingleClassError, StreamMismatchError, evaluate, write_summary_json,
                         write_svg, write_trace_csv)
from .models import ModelKind, load_checkpoint
from .preprocessing import (CLIP_LEN, AnnotationTrack, ClipBatch, PreprocessConfig, Streams, load_video,
                            prepare_streams, test_clips)
from .training import ConfigError, TrainConfig, TrainingAborted, train

EXIT_CONFIG = 2
EXIT_MISMATCH = 3
EXIT_SINGLE_CLASS = 4
EXIT_ABORTED = 5
RUN_MANIFEST = "run.json"


# ---------------------------------------------------------------------------
# run manifests


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def data_hash(path) -> str:
    """SHA-256 over relative names and contents of a file or directory, excluding run manifests."""
    path = Path(path)
    h = hashlib.sha256()
    files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
    for f in files:
        if f.name == RUN_MANIFEST:
            continue
        rel = f.name if f == path else f.relative_to(path).as_posix()
        h.update(rel.encode() + b"\0")
        h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


@dataclasses.dataclass(frozen=True)
class RunManifest:
    command: str
    config: dict
    config_hash: str
    data_hash: str
    outputs: dict
    started: str
    finished: str

    @property
    def run_id(self) -> str:
        return self.config_hash[:12] + "-" + self.data_hash[:12]

    def write(self, directory) -> Path:
        path = Path(directory) / RUN_MANIFEST
        d = dataclasses.asdict(self)
        d["run_id"] = self.run_id
        path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        d = json.loads(Path(path).read_text())
        d.pop("run_id", None)
        return cls(**d)


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _manifest(command, config, data, outputs, started) -> RunManifest:
    return RunManifest(command, config, config_hash(config), data_hash(data) if data else "",
                       {k: str(v) for k, v in outputs.items()}, started, _now())


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _read_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        _fail(1, f"file not found: {path}")
    except tomli.TOMLDecodeError as exc:
        _fail(EXIT_CONFIG, f"{path}: invalid TOML ({exc})")


# ---------------------------------------------------------------------------
# commands


@click.group()
def main():
    """Two-stream autoencoder anomaly detection on short video clips."""


def synth_spec_from_dict(raw: dict, seed: int | None = None) -> synth.SynthSpec:
    """SynthSpec from a TOML table; ``anomaly = {kind, fraction, length}`` spreads intervals evenly."""
    raw = dict(raw.get("synth", raw))
    auto = raw.pop("anomaly", None)
    if seed is not None:
        raw["seed"] = seed
    known = {f.name for f in dataclasses.fields(synth.SynthSpec)}
    for key in raw:
        if key not in known:
            raise ConfigError(key, "unknown synth key")
    if auto is not None:
        if raw.get("intervals"):
            raise ConfigError("anomaly", "give either 'anomaly' or explicit 'intervals', not both")
        n = raw.get("n_frames", synth.SynthSpec.n_frames)
        raw["intervals"] = [dataclasses.asdict(iv) for iv in synth.spaced_intervals(
            n, auto.get("kind", "conspicuous"), auto.get("fraction", 0.2), auto.get("length", 100),
            seed=raw.get("seed", synth.SynthSpec.seed))]
    try:
        return synth.SynthSpec.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError("intervals" if "interval" in str(exc) else "synth", str(exc)) from None


@main.command("synth")
@click.option("--spec", "spec_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="Overrides the seed in the spec file.")
def synth_cmd(spec_path, out_dir, seed):
    """Render a synthetic video with annotations."""
    started = _now()
    if not Path(spec_path).exists():
        _fail(1, f"spec file not found: {spec_path}")
    try:
        spec = synth_spec_from_dict(_read_toml(spec_path), seed)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    out = Path(out_dir)
    video = synth.generate(spec)
    synth.write_video(video, out)
    _manifest("synth", spec.to_dict(), out, {"frames": out}, started).write(out)
    click.echo(f"wrote {spec.n_frames} frames to {out}")


def save_streams(path, streams: Streams, labels: list[str] | None, fps: float) -> Path:
    arrays = {"gray": streams.gray, "fps": np.float64(fps)}
    if streams.flow is not None:
        arrays["flow"] = streams.flow
    if labels is not None:
        arrays["labels"] = np.array(labels)
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_streams(path) -> tuple[Streams, list[str] | None]:
    with np.load(path) as z:
        flow = z["flow"] if "flow" in z.files else None
        labels = [str(s) for s in z["labels"]] if "labels" in z.files else None
        return Streams(z["gray"], flow, str(path)), labels


@main.command("preprocess")
@click.option("--data", "data_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--gamma", type=float, default=0.8, show_default=True)
@click.option("--no-flow", is_flag=True, help="Keep only the grayscale stream.")
def preprocess_cmd(data_dir, out_path, gamma, no_flow):
    """Resize, brighten, compute flow and crop a frame directory into an .npz of streams."""
    started = _now()
    if gamma <= 0:
        _fail(EXIT_CONFIG, f"gamma: must be positive (got {gamma})")
    seq, track = load_video(data_dir)
    streams = prepare_streams(seq, PreprocessConfig(gamma=gamma))
    if no_flow:
        streams = Streams(streams.gray, None, streams.source)
    out = save_streams(out_path, streams, None if track is None else track.labels, seq.fps)
    cfg = {"gamma": gamma, "flow": not no_flow}
    _manifest("preprocess", cfg, data_dir, {"streams": out}, started).write(out.parent)
    click.echo(f"wrote {len(streams)} frames of streams to {out}")


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None, help="Overrides the config seed (default 17).")
@click.option("--data", "data_dir", default=None, help="Overrides train_data.")
@click.option("--out", "out_dir", default=None, help="Overrides out_dir.")
@click.option("--epochs", type=int, default=None, help="Overrides epochs.")
def train_cmd(config_path, seed, data_dir, out_dir, epochs):
    """Train a model; writes model.ckpt, train_log.csv and run.json to out_dir."""
    started = _now()
    if not Path(config_path).exists():
        _fail(1, f"config file not found: {config_path}")
    raw = _read_toml(config_path)
    raw = dict(raw.get("train", raw))
    for key, value in (("seed", seed), ("train_data", data_dir), ("out_dir", out_dir),
                       ("epochs", epochs)):
        if value is not None:
            raw[key] = value
    try:
        config = TrainConfig.from_dict(raw)
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    if not config.train_data or not Path(config.train_data).is_dir():
        _fail(1, f"training data directory not found: {config.train_data!r}")

    def progress(r):
        click.echo(f"epoch {r.epoch:3d}  train {r.train_loss:.6f}  val {r.val_loss:.6f}  "
                   f"({r.seconds:.1f}s)")

    try:
        result = train(config, on_epoch=progress)
    except TrainingAborted as exc:
        _fail(EXIT_ABORTED, f"{exc}; last good checkpoint: {exc.checkpoint}")
    except ValueError as exc:
        _fail(1, str(exc))
    losses = np.r_[result.log.column("train_loss"), result.log.column("img_loss")]
    if not np.all(np.isfinite(losses)):
        _fail(1, "training produced non-finite losses")
    out = Path(config.out_dir)
    outputs = {"checkpoint": result.checkpoint, "log": out / "train_log.csv"}
    _manifest("train", config.to_dict(), config.train_data, outputs, started).write(out)
    click.echo(f"checkpoint: {result.checkpoint}")


def _evaluation_clips(data, target: str, kind: ModelKind) -> ClipBatch:
    data = Path(data)
    if data.is_file():
        streams, labels = load_streams(data)
    else:
        seq, track = load_video(data)
        streams, labels = prepare_streams(seq), None if track is None else track.labels
    if labels is None:
        raise ValueError(f"{data}: no annotations to score against")
    if streams.flow is None:
        if "flow" in kind.streams:
            raise StreamMismatchError(
                f"{kind.value} expects gray and flow streams; {data} has gray only")
        # gray-only models never read the flow stream; keep ClipBatch shapes uniform
        streams = Streams(streams.gray, np.full(streams.gray.shape + (2,), 0.5, np.float32),
                          streams.source)
    return test_clips(streams, AnnotationTrack(labels), target)


@main.command("evaluate")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--target", required=True, type=click.Choice(io.BEHAVIOURS))
@click.option("--out", "out_dir", default=None, help="Output directory (default: next to checkpoint).")
@click.option("--kind", "expected_kind", default=None,
              help="Fail with exit 3 unless the checkpoint holds this model kind.")
def evaluate_cmd(checkpoint, data, target, out_dir, expected_kind):
    """Score test clips; writes summary.json, trace.csv and regularity.svg."""
    started = _now()
    if not Path(checkpoint).exists():
        _fail(1, f"checkpoint not found: {checkpoint}")
    kind, store = load_checkpoint(checkpoint)
    if expected_kind is not None and ModelKind.parse(expected_kind) is not kind:
        _fail(EXIT_MISMATCH, f"checkpoint holds {kind.value}, expected {expected_kind}")
    try:
        clips = _evaluation_clips(data, target, kind)
        report = evaluate((kind, store), clips)
    except StreamMismatchError as exc:
        _fail(EXIT_MISMATCH, str(exc))
    except SingleClassError as exc:
        _fail(EXIT_SINGLE_CLASS, f"cannot compute ROC/AUC: {exc}")
    except ValueError as exc:
        _fail(1, str(exc))
    if not math.isfinite(report.auc) or not np.all(np.isfinite(report.trace.errors)):
        _fail(1, "evaluation produced non-finite values")
    out = Path(out_dir) if out_dir else Path(checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    outputs = {
        "summary": write_summary_json(out / "summary.json", report,
                                      {"target": target, "checkpoint": str(checkpoint)}),
        "trace": write_trace_csv(out / "trace.csv", report.trace),
        "plot": write_svg(out / "regularity.svg", report.trace,
                          f"{kind.value} / {target}  AUC {report.auc:.3f}"),
    }
    cfg = {"checkpoint": data_hash(checkpoint), "target": target, "clip_len": CLIP_LEN}
    _manifest("evaluate", cfg, data, outputs, started).write(out)
    click.echo(f"AUC {report.auc:.4f}")


@main.command("report")
@click.option("--run", "runs", multiple=True, required=True, type=click.Path(exists=True, file_okay=False),
              help="Evaluation output directory (repeatable).")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def report_cmd(runs, out_path):
    """Collect summary.json files from several runs into one CSV keyed by model kind."""
    rows = []
    for run in runs:
        summary = Path(run) / "summary.json"
        if not summary.exists():
            _fail(1, f"{run}: no summary.json (run `evaluate` first)")
        d = json.loads(summary.read_text())
        rows.append({"kind": d["kind"], "target": d.get("target", ""), "auc": d["auc"],
                     "clips": d["clips"], "anomalous_clips": d["anomalous_clips"], "run": str(run)})
    out = Path(out_path)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    click.echo(f"wrote {len(rows)} rows to {out}")


if __name__ == "__main__":  # pragma: no cover
    main()
