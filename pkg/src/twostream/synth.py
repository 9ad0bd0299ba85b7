"""Deterministic synthetic stand-in for single-animal home-cage video.

A bright Gaussian blob wanders smoothly over the floor region (bottom two
thirds). Its speed swings slowly between ``speed_floor * speed`` and
``speed``, so normal footage is never still. Two pseudo-anomalies can be
injected over given frame intervals:

* conspicuous ("hang"): the blob jumps to the top edge, stretched
  vertically, and stays put apart from a sub-pixel wobble;
* subtle ("groom"): the blob stops where it is, jitters by a fraction of a
  pixel, and its interior carries a fine grating whose phase and
  orientation change every frame. The flicker registers as weak,
  incoherent flow.

All other frames are labelled "walk".
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .preprocessing import AnnotationTrack, FrameSequence

KIND_LABELS = {"conspicuous": "hang", "subtle": "groom"}


@dataclass(frozen=True)
class AnomalyInterval:
    start: int
    end: int  # exclusive
    kind: str

    def __post_init__(self):
        if self.kind not in KIND_LABELS:
            raise ValueError(f"anomaly kind must be one of {sorted(KIND_LABELS)}, got {self.kind!r}")
        if self.end <= self.start:
            raise ValueError(f"empty anomaly interval [{self.start}, {self.end})")


@dataclass(frozen=True)
class SynthSpec:
    n_frames: int = 2000
    fps: float = 25.0
    seed: int = 17
    height: int = 64
    width: int = 64
    blob_sigma: float = 4.0
    blob_intensity: float = 0.65
    background: float = 0.12
    noise: float = 0.01
    speed: float = 4.0
    speed_period: float = 120.0
    speed_floor: float = 0.5
    turn: float = 0.2
    hang_stretch: float = 1.8
    hang_row: float = 0.12
    hang_wobble: float = 0.05
    groom_amplitude: float = 0.45
    groom_period: float = 10.0
    groom_jitter: float = 0.2
    intervals: tuple[AnomalyInterval, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "intervals", tuple(
            iv if isinstance(iv, AnomalyInterval) else AnomalyInterval(**iv)
            for iv in self.intervals
        ))
        if self.n_frames < 0:
            raise ValueError("n_frames must be non-negative")
        spans = sorted((iv.start, iv.end) for iv in self.intervals)
        for a, b in spans:
            if a < 0 or b > self.n_frames:
                raise ValueError(f"interval [{a}, {b}) lies outside [0, {self.n_frames})")
        for (a0, b0), (a1, b1) in zip(spans, spans[1:]):
            if a1 < b0:
                raise ValueError(f"anomaly intervals [{a0}, {b0}) and [{a1}, {b1}) overlap")

    @property
    def floor_rows(self) -> tuple[float, float]:
        return 0.45 * self.height, 0.80 * self.height

    @property
    def floor_cols(self) -> tuple[float, float]:
        return 0.15 * self.width, 0.85 * self.width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intervals"] = [asdict(iv) for iv in self.intervals]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["intervals"] = tuple(AnomalyInterval(**iv) for iv in d.get("intervals", ()))
        return cls(**d)


@dataclass
class SynthVideo:
    pixels: np.ndarray  # (N, H, W) uint8
    labels: list[str]
    centres: np.ndarray  # (N, 2) blob centre (row, col)
    spec: SynthSpec

    @property
    def sequence(self) -> FrameSequence:
        return FrameSequence(self.pixels.astype(np.float32) / 255.0, self.spec.fps, "synthetic")

    @property
    def track(self) -> AnnotationTrack:
        return AnnotationTrack(list(self.labels))


def _kind_per_frame(spec: SynthSpec) -> list[str | None]:
    kinds: list[str | None] = [None] * spec.n_frames
    for iv in spec.intervals:
        for i in range(iv.start, iv.end):
            kinds[i] = iv.kind
    return kinds


def _trajectory(spec: SynthSpec, kinds, rng: np.random.Generator) -> np.ndarray:
    r_lo, r_hi = spec.floor_rows
    c_lo, c_hi = spec.floor_cols
    pos = np.array([rng.uniform(r_lo, r_hi), rng.uniform(c_lo, c_hi)])
    heading = rng.uniform(0, 2 * np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    out = np.empty((spec.n_frames, 2))
    for i, kind in enumerate(kinds):
        turn = rng.normal(0.0, spec.turn)
        dphase = rng.normal(2 * np.pi / spec.speed_period, 0.3 * np.pi / spec.speed_period)
        if kind is None:
            heading += turn
            phase += dphase
            speed = spec.speed * (spec.speed_floor + (1 - spec.speed_floor) * 0.5 * (1 - np.cos(phase)))
            step = speed * np.array([np.sin(heading), np.cos(heading)])
            pos = pos + step
            # reflect off the floor boundary
            if not r_lo <= pos[0] <= r_hi:
                pos[0] = np.clip(pos[0], r_lo, r_hi)
                heading = -heading
            if not c_lo <= pos[1] <= c_hi:
                pos[1] = np.clip(pos[1], c_lo, c_hi)
                heading = np.pi - heading
        out[i] = pos
    return out


def render_frame(spec: SynthSpec, centre, kind, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    sy = sx = spec.blob_sigma
    cy, cx = centre
    if kind == "conspicuous":
        sy = spec.blob_sigma * spec.hang_stretch
        cy = spec.hang_row * h + rng.normal(0, spec.hang_wobble)
        cx = cx + rng.normal(0, spec.hang_wobble)
    elif kind == "subtle":
        cy = cy + rng.normal(0, spec.groom_jitter)
        cx = cx + rng.normal(0, spec.groom_jitter)
    blob = np.exp(-((rows - cy) ** 2 / (2 * sy * sy) + (cols - cx) ** 2 / (2 * sx * sx)))
    if kind == "subtle":
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        k = 2 * np.pi / spec.groom_period
        grating = np.cos(k * (np.cos(theta) * (cols - cx) + np.sin(theta) * (rows - cy)) + phase)
        blob = blob * (1 + spec.groom_amplitude * grating)
    img = spec.background + spec.blob_intensity * blob
    img = img + rng.normal(0, spec.noise, size=img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def generate(spec: SynthSpec) -> SynthVideo:
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_frames + 1)
    kinds = _kind_per_frame(spec)
    centres = _trajectory(spec, kinds, np.random.default_rng(seeds[0]))
    pixels = np.empty((spec.n_frames, spec.height, spec.width), dtype=np.uint8)
    for i in range(spec.n_frames):
        pixels[i] = render_frame(spec, centres[i], kinds[i], np.random.default_rng(seeds[i + 1]))
    labels = ["walk" if k is None else KIND_LABELS[k] for k in kinds]
    return SynthVideo(pixels, labels, centres, spec)


def write_video(video: SynthVideo, directory) -> Path:
    directory = Path(directory)
    io.write_frames(directory, video.pixels, video.spec.fps)
    io.write_annotations(directory / io.ANNOTATION_NAME, video.labels)
    return directory


def spaced_intervals(n_frames: int, kind: str, fraction: float, length: int = 100,
                     seed: int = 0, margin: int = 40) -> tuple[AnomalyInterval, ...]:
    """Evenly spread intervals of ``length`` frames covering about ``fraction`` of the video."""
    count = max(int(round(n_frames * fraction / length)), 1)
    slot = (n_frames - 2 * margin) // count
    if slot < length + 1:
        raise ValueError("too many anomaly frames for the video length")
    rng = np.random.default_rng(seed)
    out = []
    for j in range(count):
        lo = margin + j * slot
        start = lo + int(rng.integers(0, slot - length))
        out.append(AnomalyInterval(start, start + length, kind))
    return tuple(out)
