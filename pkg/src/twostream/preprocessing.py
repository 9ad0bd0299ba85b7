"""From raw grayscale frames plus per-frame behaviour labels to 8-frame clip batches.

Per video the order is: resize to 32x32, gamma-brighten, dense flow between
successive frames, map flow onto [0, 1], crop rows to 24x32. Clips are then
cut from the per-frame streams by source-frame index, so flow at clip frame
``t`` is always flow(t-1 -> t) at the native frame rate, for training and
test alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .flow import FlowParams, flow_to_stream, video_flow
from .imaging import resize_bilinear

FRAME_SIZE = (32, 32)
CROP_ROWS = 24
CLIP_LEN = 8
SUBSAMPLE = 5


@dataclass
class FrameSequence:
    frames: np.ndarray  # (N, H, W) float32 in [0, 1]
    fps: float = 25.0
    source: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3:
            raise ValueError(f"frames must be (N, H, W), got {self.frames.shape}")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class AnnotationTrack:
    labels: list[str]

    def __post_init__(self):
        bad = sorted({lab for lab in self.labels if lab not in io.BEHAVIOURS})
        if bad:
            raise ValueError(f"unknown behaviour labels {bad}; expected one of {io.BEHAVIOURS}")

    def __len__(self) -> int:
        return len(self.labels)

    def mask(self, target: str) -> np.ndarray:
        if target not in io.BEHAVIOURS:
            raise ValueError(f"unknown target behaviour {target!r}")
        return np.array([lab == target for lab in self.labels], dtype=bool)


@dataclass
class ClipBatch:
    gray: np.ndarray  # (B, 8, 24, 32, 1)
    flow: np.ndarray  # (B, 8, 24, 32, 2)
    labels: np.ndarray  # (B,) bool, True = anomalous
    frames: np.ndarray  # (B, 8) source frame indices
    source: str = ""
    flipped: np.ndarray = field(default=None)  # (B,) bool

    def __post_init__(self):
        if self.flipped is None:
            self.flipped = np.zeros(len(self.labels), dtype=bool)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def starts(self) -> np.ndarray:
        return self.frames[:, 0] if len(self.frames) else np.zeros(0, dtype=int)

    def subset(self, index) -> "ClipBatch":
        index = np.asarray(index)
        return ClipBatch(self.gray[index], self.flow[index], self.labels[index],
                         self.frames[index], self.source, self.flipped[index])

    @staticmethod
    def concat(batches: Sequence["ClipBatch"]) -> "ClipBatch":
        return ClipBatch(
            np.concatenate([b.gray for b in batches]),
            np.concatenate([b.flow for b in batches]),
            np.concatenate([b.labels for b in batches]),
            np.concatenate([b.frames for b in batches]),
            batches[0].source if batches else "",
            np.concatenate([b.flipped for b in batches]),
        )


# ---------------------------------------------------------------------------
# per-frame operations


def resize_grayscale(image: np.ndarray, size: tuple[int, int] = FRAME_SIZE) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.size == 0:
        raise ValueError("cannot resize an empty image")
    return resize_bilinear(image, size).astype(np.float32)


def gamma_correct(image: np.ndarray, gamma: float = 0.8) -> np.ndarray:
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    image = np.asarray(image, dtype=np.float32)
    return np.power(np.clip(image, 0.0, 1.0), np.float32(gamma)).astype(np.float32)


def center_crop(image: np.ndarray, rows: int = CROP_ROWS, axis: int = -2) -> np.ndarray:
    """Keep the central ``rows`` rows along ``axis`` (the H axis; -3 for (H, W, C) arrays)."""
    image = np.asarray(image)
    h = image.shape[axis]
    if h < rows:
        raise ValueError(f"cannot crop {rows} rows from an image with {h}")
    top = (h - rows) // 2
    return np.take(image, np.arange(top, top + rows), axis=axis)


def hflip_augment(gray: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mirror (..., H, W, C) clips left-right; the normalised u channel becomes 1 - u."""
    g = np.ascontiguousarray(gray[..., ::-1, :])
    f = np.ascontiguousarray(flow[..., ::-1, :])
    f[..., 0] = 1.0 - f[..., 0]
    return g, f


# ---------------------------------------------------------------------------
# clip construction


def _length(seq) -> int:
    return seq if isinstance(seq, (int, np.integer)) else len(seq)


def build_training_clips(seq, subsample: int = SUBSAMPLE, clip_len: int = CLIP_LEN) -> np.ndarray:
    """Keep every ``subsample``-th frame, cut into non-overlapping ``clip_len`` windows.

    Returns a (n_clips, clip_len) array of source frame indices. Sequences
    shorter than ``subsample * clip_len`` frames yield no clips.
    """
    n_frames = _length(seq)
    if n_frames < subsample * clip_len:
        return np.zeros((0, clip_len), dtype=int)
    kept = np.arange(0, n_frames, subsample)
    n = len(kept) // clip_len
    return kept[: n * clip_len].reshape(n, clip_len)


def build_test_clips(seq, clip_len: int = CLIP_LEN) -> np.ndarray:
    return build_training_clips(seq, subsample=1, clip_len=clip_len)


def label_clips(clips: np.ndarray, annotations: AnnotationTrack, target: str,
                rule: str = "any") -> np.ndarray:
    """Anomalous iff any (or, with ``rule='majority'``, most) source frames carry ``target``."""
    hits = annotations.mask(target)[np.asarray(clips, dtype=int)] if len(clips) else np.zeros((0, 1), bool)
    if rule == "any":
        return hits.any(axis=1)
    if rule == "majority":
        return hits.sum(axis=1) * 2 > hits.shape[1]
    raise ValueError(f"unknown labelling rule {rule!r}")


def filter_pseudo_anomaly(clips: np.ndarray, annotations: AnnotationTrack, target: str) -> np.ndarray:
    """Drop every clip that touches at least one ``target`` frame."""
    clips = np.asarray(clips, dtype=int)
    if len(clips) == 0:
        return clips
    return clips[~label_clips(clips, annotations, target, rule="any")]


def split_clips(n: int, val_fraction: float = 0.2, seed: int = 17) -> tuple[np.ndarray, np.ndarray]:
    """Seeded disjoint train/validation split of ``n`` clip positions."""
    if not 0 <= val_fraction < 1:
        raise ValueError(f"val_fraction must lie in [0, 1), got {val_fraction}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


# ---------------------------------------------------------------------------
# whole-video pipeline


@dataclass(frozen=True)
class PreprocessConfig:
    gamma: float = 0.8
    max_disp: float = 4.0
    flow: FlowParams = FlowParams()


@dataclass
class Streams:
    """Per-frame network inputs for one video, cropped to 24x32."""

    gray: np.ndarray  # (N, 24, 32) float32
    flow: np.ndarray  # (N, 24, 32, 2) float32
    source: str = ""

    def __len__(self) -> int:
        return len(self.gray)

    def clips(self, frames: np.ndarray, labels: np.ndarray | None = None) -> ClipBatch:
        frames = np.asarray(frames, dtype=int).reshape(-1, CLIP_LEN)
        if labels is None:
            labels = np.zeros(len(frames), dtype=bool)
        return ClipBatch(self.gray[frames][..., None], self.flow[frames],
                         np.asarray(labels, dtype=bool), frames, self.source)


def prepare_streams(seq: FrameSequence, config: PreprocessConfig = PreprocessConfig()) -> Streams:
    if len(seq) == 0:
        return Streams(np.zeros((0, CROP_ROWS, FRAME_SIZE[1]), np.float32),
                       np.zeros((0, CROP_ROWS, FRAME_SIZE[1], 2), np.float32), seq.source)
    small = gamma_correct(resize_grayscale(seq.frames, FRAME_SIZE), config.gamma)
    flow = flow_to_stream(video_flow(small, config.flow), config.max_disp)
    flow[0] = 0.5  # no predecessor: neutral, zero-motion value
    gray = center_crop(small)
    flow = center_crop(flow, axis=-3)
    return Streams(gray.astype(np.float32), flow.astype(np.float32), seq.source)


def load_video(directory) -> tuple[FrameSequence, AnnotationTrack | None]:
    directory = Path(directory)
    frames, fps = io.read_frames(directory)
    seq = FrameSequence(frames, fps, str(directory))
    ann_path = directory / io.ANNOTATION_NAME
    track = AnnotationTrack(io.read_annotations(ann_path, len(seq))) if ann_path.exists() else None
    return seq, track


def training_clips(streams: Streams, track: AnnotationTrack, target: str,
                   exclude_target: bool = True, subsample: int = SUBSAMPLE) -> ClipBatch:
    """Subsampled clips; autoencoders drop the target behaviour, classifiers keep it labelled."""
    clips = build_training_clips(len(streams), subsample)
    if exclude_target:
        clips = filter_pseudo_anomaly(clips, track, target)
    labels = label_clips(clips, track, target)
    return streams.clips(clips, labels)


def test_clips(streams: Streams, track: AnnotationTrack, target: str) -> ClipBatch:
    clips = build_test_clips(len(streams))
    return streams.clips(clips, label_clips(clips, track, target))


def augment(batch: ClipBatch) -> ClipBatch:
    """Original clips followed by their horizontal mirrors."""
    g, f = hflip_augment(batch.gray, batch.flow)
    mirrored = ClipBatch(g, f, batch.labels.copy(), batch.frames.copy(), batch.source,
                         np.ones(len(batch), dtype=bool))
    return ClipBatch.concat([batch, mirrored])
