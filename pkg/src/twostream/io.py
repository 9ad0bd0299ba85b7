"""On-disk formats: PGM frame directories, annotation intervals, flow dumps."""

from __future__ import annotations

import re
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BEHAVIOURS = ("drink", "eat", "groom", "hang", "rear", "rest", "micromovement", "walk")

FRAME_PATTERN = "frame_{:06d}.pgm"
MANIFEST_NAME = "manifest.txt"
ANNOTATION_NAME = "annotations.txt"


class FormatError(ValueError):
    pass


def write_pgm(path, image: np.ndarray) -> None:
    """Write an 8-bit binary (P5) PGM."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM images are 2-D, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise ValueError(f"PGM writer takes uint8 pixels, got {image.dtype}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(image).tobytes())


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path, normalize: bool = False) -> np.ndarray:
    """Read a binary (P5) PGM with maxval up to 65535.

    Returns the raw integer pixels, or float32 values in [0, 1] (divided by
    the file's maxval) with ``normalize=True``.
    """
    raw = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise FormatError(f"{path}: truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: maxval {maxval} outside 1..65535")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    n = w * h * dtype.itemsize
    if len(raw) - pos < n:
        raise FormatError(f"{path}: expected {n} pixel bytes, found {len(raw) - pos}")
    img = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    if normalize:
        return (img.astype(np.float32) / np.float32(maxval)).clip(0, 1)
    return img.astype(np.uint8) if maxval < 256 else img.astype(np.uint16)


def write_manifest(directory, fps: float, n_frames: int) -> None:
    Path(directory, MANIFEST_NAME).write_text(f"{fps:g}, {n_frames}\n")


def read_manifest(directory) -> tuple[float, int]:
    path = Path(directory, MANIFEST_NAME)
    parts = re.split(r"[,\s]+", path.read_text().strip())
    if len(parts) != 2:
        raise FormatError(f"{path}: expected 'fps, frame_count', got {path.read_text()!r}")
    return float(parts[0]), int(parts[1])


def write_frames(directory, frames: Iterable[np.ndarray], fps: float) -> int:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = 0
    for i, frame in enumerate(frames):
        write_pgm(directory / FRAME_PATTERN.format(i), frame)
        n = i + 1
    write_manifest(directory, fps, n)
    return n


def read_frames(directory) -> tuple[np.ndarray, float]:
    """Load the ``frame_%06d.pgm`` files listed by the manifest as (N, H, W) float32 in [0, 1]."""
    directory = Path(directory)
    fps, n = read_manifest(directory)
    frames = []
    for i in range(n):
        path = directory / FRAME_PATTERN.format(i)
        if not path.exists():
            raise FormatError(f"manifest lists {n} frames but {path} is missing")
        frames.append(read_pgm(path, normalize=True))
    if not frames:
        return np.zeros((0, 0, 0), dtype=np.float32), fps
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise FormatError(f"{directory}: frames have differing sizes {sorted(shapes)}")
    return np.stack(frames), fps


def intervals_from_labels(labels: Sequence[str]) -> list[tuple[int, int, str]]:
    out = []
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            out.append((start, i, labels[start]))
            start = i
    return out


def write_annotations(path, labels: Sequence[str]) -> None:
    lines = [f"{a} {b} {lab}" for a, b, lab in intervals_from_labels(labels)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_annotations(path, n_frames: int) -> list[str]:
    """Parse ``start end label`` lines (end exclusive) into a per-frame label list."""
    labels: list[str | None] = [None] * n_frames
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'start end label', got {line!r}")
        start, end, label = int(parts[0]), int(parts[1]), parts[2]
        if label not in BEHAVIOURS:
            raise FormatError(f"{path}:{lineno}: unknown behaviour {label!r}")
        if not 0 <= start < end <= n_frames:
            raise FormatError(f"{path}:{lineno}: interval [{start}, {end}) outside 0..{n_frames}")
        for i in range(start, end):
            if labels[i] is not None:
                raise FormatError(f"{path}:{lineno}: frame {i} labelled twice")
            labels[i] = label
    missing = [i for i, lab in enumerate(labels) if lab is None]
    if missing:
        raise FormatError(f"{path}: {len(missing)} frames unlabelled, first is {missing[0]}")
    return labels  # type: ignore[return-value]


def write_flo(path, u: np.ndarray, v: np.ndarray) -> None:
    """Dump one flow field: b"FLO1", int32 H, int32 W, interleaved float32 (u, v), little-endian."""
    if u.shape != v.shape or u.ndim != 2:
        raise ValueError(f"u and v must be equal 2-D arrays, got {u.shape} and {v.shape}")
    h, w = u.shape
    body = np.stack([u, v], axis=-1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(b"FLO1" + struct.pack("<ii", h, w))
        fh.write(body.tobytes())


def read_flo(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != b"FLO1":
        raise FormatError(f"{path}: bad flow magic {raw[:4]!r}")
    h, w = struct.unpack_from("<ii", raw, 4)
    body = np.frombuffer(raw, dtype="<f4", count=h * w * 2, offset=12).reshape(h, w, 2)
    return body[..., 0].astype(np.float32), body[..., 1].astype(np.float32)
