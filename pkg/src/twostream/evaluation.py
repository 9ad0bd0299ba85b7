"""Reconstruction errors, regularity scores, ROC curves and report files."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import tensor as T
from .models import ModelKind, ParameterStore, build, classify, forward_autoencoder, load_checkpoint
from .preprocessing import ClipBatch


class SingleClassError(ValueError):
    """ROC analysis needs both anomalous and normal clips."""


class StreamMismatchError(ValueError):
    """The model's input streams are not available in the data."""


def clip_errors(gray, gray_hat, flow=None, flow_hat=None) -> np.ndarray:
    """Per-clip error: mean of per-stream RMSEs (gray RMSE alone without flow).

    Arrays are (B, ...) with matching shapes per stream.
    """
    gray, gray_hat = np.asarray(gray, np.float64), np.asarray(gray_hat, np.float64)
    if gray.shape != gray_hat.shape:
        raise ValueError(f"gray shapes differ: {gray.shape} vs {gray_hat.shape}")
    axes = tuple(range(1, gray.ndim))
    e = np.sqrt(np.mean((gray - gray_hat) ** 2, axis=axes))
    if flow is None and flow_hat is None:
        return e
    if flow is None or flow_hat is None:
        raise ValueError("flow and flow_hat must be given together")
    flow, flow_hat = np.asarray(flow, np.float64), np.asarray(flow_hat, np.float64)
    if flow.shape != flow_hat.shape:
        raise ValueError(f"flow shapes differ: {flow.shape} vs {flow_hat.shape}")
    ef = np.sqrt(np.mean((flow - flow_hat) ** 2, axis=tuple(range(1, flow.ndim))))
    return (e + ef) / 2


def clip_error(gray, gray_hat, flow=None, flow_hat=None) -> float:
    """Error of a single clip (no batch axis)."""
    add = (lambda a: None if a is None else np.asarray(a)[None])
    return float(clip_errors(add(gray), add(gray_hat), add(flow), add(flow_hat))[0])


def regularity(errors) -> np.ndarray:
    """``1 - (e - min) / (max - min)``; a constant trace maps to all ones."""
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        return e.copy()
    lo, hi = e.min(), e.max()
    if hi == lo:
        return np.ones_like(e)
    return 1.0 - (e - lo) / (hi - lo)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    auc_exact: Fraction


def roc_auc(scores, labels) -> RocCurve:
    """ROC by sweeping a threshold down through the distinct scores.

    Equal scores form one threshold step, i.e. one (possibly diagonal) segment.
    The trapezoid area is accumulated in integers, so it equals the
    Mann-Whitney pair count (ties counted one half) exactly.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be matching 1-D arrays")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    n_pos = int(y.sum())
    n_neg = int(len(y) - n_pos)
    if n_pos == 0:
        raise SingleClassError("labels contain no positive (anomalous) clips")
    if n_neg == 0:
        raise SingleClassError("labels contain no negative (normal) clips")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.r_[0, np.cumsum(y)[ends]].astype(np.int64)
    fp = np.r_[0, (ends + 1) - tp[1:]].astype(np.int64)
    twice_area = int(np.sum((fp[1:] - fp[:-1]) * (tp[1:] + tp[:-1])))
    exact = Fraction(twice_area, 2 * n_pos * n_neg)
    return RocCurve(fp / n_neg, tp / n_pos, np.r_[np.inf, s[ends]], twice_area / (2 * n_pos * n_neg),
                    exact)


def mann_whitney_auc(scores, labels) -> float:
    """Exhaustive pair counting: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    pos, neg = s[y], s[~y]
    greater = int((pos[:, None] > neg[None, :]).sum())
    ties = int((pos[:, None] == neg[None, :]).sum())
    return (2 * greater + ties) / (2 * len(pos) * len(neg))


# ---------------------------------------------------------------------------
# scoring a model


@dataclass
class RegularityTrace:
    errors: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    starts: np.ndarray

    @property
    def anomaly_scores(self) -> np.ndarray:
        return 1.0 - self.scores


@dataclass
class EvaluationReport:
    kind: ModelKind
    trace: RegularityTrace
    curve: RocCurve | None

    @property
    def auc(self) -> float:
        return float("nan") if self.curve is None else self.curve.auc

    def summary(self) -> dict:
        return {
            "kind": self.kind.value,
            "auc": self.auc,
            "clips": int(len(self.trace.errors)),
            "anomalous_clips": int(self.trace.labels.sum()),
            "error_min": float(self.trace.errors.min()) if len(self.trace.errors) else None,
            "error_max": float(self.trace.errors.max()) if len(self.trace.errors) else None,
        }


def score_clips(kind, store: ParameterStore, clips: ClipBatch, batch_size: int = 64) -> np.ndarray:
    """Raw per-clip error (autoencoders) or target probability (classifier)."""
    kind = ModelKind.parse(kind)
    spec, _ = build(kind, store.seed)
    if set(spec.param_shapes()) != set(store.values):
        raise ValueError(f"parameters do not match the {kind.value} architecture")
    params = store.tensors(requires_grad=False)
    out = np.empty(len(clips))
    for lo in range(0, len(clips), batch_size):
        sl = slice(lo, min(lo + batch_size, len(clips)))
        gray = clips.gray[sl]
        if kind is ModelKind.SUPERVISED:
            out[sl] = classify(spec, params, T.Tensor(gray)).data
            continue
        flow = clips.flow[sl] if "flow" in kind.streams else None
        rec = forward_autoencoder(spec, params, T.Tensor(gray), None if flow is None else T.Tensor(flow))
        out[sl] = clip_errors(gray, rec["gray"].data, flow, rec["flow"].data if flow is not None else None)
    return out


def evaluate(model, clips: ClipBatch, batch_size: int = 64) -> EvaluationReport:
    """``model`` is a checkpoint path or a ``(kind, ParameterStore)`` pair.

    Raises :class:`SingleClassError` when the labels hold only one class; the
    trace is still attached to the exception as ``.trace``.
    """
    kind, store = load_checkpoint(model) if isinstance(model, (str, Path)) else model
    kind = ModelKind.parse(kind)
    errors = score_clips(kind, store, clips, batch_size)
    trace = RegularityTrace(errors, regularity(errors), clips.labels.astype(bool), clips.starts.copy())
    try:
        curve = roc_auc(trace.anomaly_scores, trace.labels)
    except SingleClassError as exc:
        exc.trace = trace
        raise
    return EvaluationReport(kind, trace, curve)


# ---------------------------------------------------------------------------
# report files


def write_trace_csv(path, trace: RegularityTrace) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_index", "start_frame", "error", "regularity", "label"])
        for i, (st, e, s, lab) in enumerate(zip(trace.starts, trace.errors, trace.scores, trace.labels)):
            w.writerow([i, int(st), repr(float(e)), repr(float(s)), int(lab)])
    return path


def write_summary_json(path, report: EvaluationReport, extra: dict | None = None) -> Path:
    data = report.summary()
    if extra:
        data.update(extra)
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def _spans(labels: np.ndarray) -> list[tuple[int, int]]:
    out, start = [], None
    for i, lab in enumerate(labels):
        if lab and start is None:
            start = i
        elif not lab and start is not None:
            out.append((start, i))
            start = None
    if start is not None:
        out.append((start, len(labels)))
    return out


def write_svg(path, trace: RegularityTrace, title: str = "regularity", width: int = 800,
              height: int = 240) -> Path:
    """Line plot of the regularity trace; anomalous clip spans are shaded."""
    n = len(trace.scores)
    pad = 30
    pw, ph = width - 2 * pad, height - 2 * pad
    x = lambda i: pad + (pw * i / max(n - 1, 1))  # noqa: E731
    y = lambda s: pad + ph * (1 - s)  # noqa: E731
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{pad}" y="{pad - 10}" font-family="sans-serif" font-size="12">{escape(title)}</text>',
    ]
    step = pw / max(n - 1, 1)
    for a, b in _spans(trace.labels):
        x0 = x(a) - step / 2
        parts.append(f'<rect class="anomaly" x="{x0:.2f}" y="{pad}" width="{(b - a) * step:.2f}" '
                     f'height="{ph}" fill="#f4b6b6" opacity="0.6"/>')
    parts.append(f'<rect x="{pad}" y="{pad}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    if n:
        pts = " ".join(f"{x(i):.2f},{y(s):.2f}" for i, s in enumerate(trace.scores))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f4e9c" stroke-width="1.2"/>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path
