"""Silhouette containers, frame normalization and the on-disk ingestion format.

Frames are binary ``uint8`` arrays (1 = subject, 0 = background) of a fixed
64x64 size.  Videos keep their frames stacked in one ``(f, 64, 64)`` array so
downstream code can hand them to numpy/torch without copying frame by frame.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
from PIL import Image

from .errors import EmptyMask, ShapeMismatch

logger = logging.getLogger(__name__)

FRAME_SIZE = 64
FOREGROUND_THRESHOLD = 127


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    arr.setflags(write=False)
    return arr


def _check_binary(arr: np.ndarray) -> None:
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError("silhouette pixels must be 0 or 1")


@dataclass(frozen=True)
class SilhouetteFrame:
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.shape != (FRAME_SIZE, FRAME_SIZE):
            raise ShapeMismatch(f"frame must be {FRAME_SIZE}x{FRAME_SIZE}, got {pixels.shape}")
        _check_binary(pixels)
        object.__setattr__(self, "pixels", _readonly(pixels))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class SilhouetteVideo:
    """An ordered stack of normalized frames for one walking sequence."""

    pixels: np.ndarray
    subject_id: str
    sequence_id: str
    condition: str | None = None

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3 or pixels.shape[1:] != (FRAME_SIZE, FRAME_SIZE):
            raise ShapeMismatch(f"video must be (f, {FRAME_SIZE}, {FRAME_SIZE}), got {pixels.shape}")
        if pixels.shape[0] < 1:
            raise ValueError("video needs at least one frame")
        _check_binary(pixels)
        object.__setattr__(self, "pixels", _readonly(pixels))

    @classmethod
    def from_frames(cls, frames: Iterable[SilhouetteFrame], subject_id: str,
                    sequence_id: str, condition: str | None = None) -> "SilhouetteVideo":
        frames = list(frames)
        if not frames:
            raise ValueError("video needs at least one frame")
        return cls(np.stack([f.pixels for f in frames]), subject_id, sequence_id, condition)

    @property
    def frames(self) -> list[SilhouetteFrame]:
        return [SilhouetteFrame(p) for p in self.pixels]

    @property
    def video_id(self) -> str:
        return f"{self.subject_id}/{self.sequence_id}"

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def with_pixels(self, pixels: np.ndarray) -> "SilhouetteVideo":
        return SilhouetteVideo(pixels, self.subject_id, self.sequence_id, self.condition)

    def window(self, start: int | None, end: int | None) -> "SilhouetteVideo":
        return self.with_pixels(self.pixels[start:end])


@dataclass(frozen=True)
class GaitSignature:
    parts: np.ndarray

    def __post_init__(self):
        parts = np.asarray(self.parts, dtype=np.float64)
        if parts.ndim != 2:
            raise ShapeMismatch(f"signature must be (num_parts, embed_dim), got {parts.shape}")
        if not np.isfinite(parts).all():
            raise ValueError("signature has non-finite entries")
        parts = parts.copy()
        parts.setflags(write=False)
        object.__setattr__(self, "parts", parts)

    @property
    def num_parts(self) -> int:
        return self.parts.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.parts.shape[1]

    @property
    def flattened_view(self) -> np.ndarray:
        return self.parts.reshape(-1)


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def align_corners_index(n_in: int, n_out: int) -> np.ndarray:
    """Nearest source index for each output index, endpoints mapped to endpoints.

    Integer arithmetic computes ``floor(i * (n_in-1)/(n_out-1) + 1/2)`` exactly.
    """
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out, dtype=np.int64)
    i = np.arange(n_out, dtype=np.int64)
    return (2 * i * (n_in - 1) + (n_out - 1)) // (2 * (n_out - 1))


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of a binary mask followed by a 0.5 threshold."""
    mask = np.asarray(mask)
    rows = align_corners_index(mask.shape[0], out_h)
    cols = align_corners_index(mask.shape[1], out_w)
    out = mask[np.ix_(rows, cols)]
    return (out >= 0.5).astype(np.uint8)


def _normalize_once(mask: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1, c0, c1 = rows[0], rows[-1], cols[0], cols[-1]
    crop = mask[r0:r1 + 1, c0:c1 + 1]
    h, w = crop.shape
    side = max(h, w)
    out_h = max(1, (2 * h * FRAME_SIZE + side) // (2 * side))
    out_w = max(1, (2 * w * FRAME_SIZE + side) // (2 * side))
    scaled = resize_nearest(crop, out_h, out_w)
    canvas = np.zeros((FRAME_SIZE, FRAME_SIZE), dtype=np.uint8)
    top = (FRAME_SIZE - out_h) // 2
    left = (FRAME_SIZE - out_w) // 2
    canvas[top:top + out_h, left:left + out_w] = scaled
    return canvas


def normalize_frame(raw_mask: np.ndarray) -> SilhouetteFrame:
    """Crop to the subject, center horizontally and resize to 64x64.

    The bounding-box height maps to the full frame height and the width is
    padded symmetrically around the box center (masks wider than tall are
    fitted on width instead).  A downscale can drop the only foreground pixel
    of a border row, so the pass is repeated until the output is a fixed
    point; this takes at most three passes.
    """
    mask = (np.asarray(raw_mask) >= 0.5).astype(np.uint8)
    if mask.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D mask, got shape {mask.shape}")
    if not mask.any():
        raise EmptyMask("mask has no foreground pixel")
    out = _normalize_once(mask)
    for _ in range(4):
        nxt = _normalize_once(out)
        if np.array_equal(nxt, out):
            return SilhouetteFrame(out)
        out = nxt
    raise AssertionError("normalization did not reach a fixed point")  # unreachable


def normalize_video(raw_frames: Sequence[np.ndarray], subject_id: str, sequence_id: str,
                    condition: str | None = None) -> SilhouetteVideo:
    return SilhouetteVideo.from_frames([normalize_frame(f) for f in raw_frames],
                                       subject_id, sequence_id, condition)


def video_pixel_sum(video: SilhouetteVideo) -> int:
    return int(video.pixels.sum(dtype=np.int64))


# ---------------------------------------------------------------------------
# ingestion: root/<subject_id>/<sequence_id>/<frame_index>.png
# ---------------------------------------------------------------------------

def read_mask_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"))
    return (gray > FOREGROUND_THRESHOLD).astype(np.uint8)


def write_mask_png(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray((np.asarray(pixels) * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def load_video(seq_dir: Path, subject_id: str | None = None, sequence_id: str | None = None,
               condition: str | None = None) -> SilhouetteVideo:
    """Read one sequence directory.  Frames that are not 64x64 are normalized;
    empty raw frames are skipped, as released silhouette sets contain some."""
    seq_dir = Path(seq_dir)
    pngs = sorted(seq_dir.glob("*.png"), key=lambda p: int(p.stem))
    frames = []
    for p in pngs:
        mask = read_mask_png(p)
        if mask.shape == (FRAME_SIZE, FRAME_SIZE):
            frames.append(mask)
        elif mask.any():
            frames.append(normalize_frame(mask).pixels)
        else:
            logger.warning("skipping empty frame %s", p)
    if not frames:
        raise EmptyMask(f"no usable frames in {seq_dir}")
    return SilhouetteVideo(np.stack(frames), subject_id or seq_dir.parent.name,
                           sequence_id or seq_dir.name, condition)


def save_video(video: SilhouetteVideo, root: Path) -> Path:
    seq_dir = Path(root) / video.subject_id / video.sequence_id
    seq_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video.pixels):
        write_mask_png(seq_dir / f"{i:04d}.png", frame)
    return seq_dir


@dataclass
class SilhouetteDataset:
    """Videos keyed by ``subject_id/sequence_id`` plus the dataset metadata."""

    videos: dict[str, SilhouetteVideo]
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.videos)

    def __iter__(self) -> Iterator[SilhouetteVideo]:
        return iter(self.videos.values())

    def __getitem__(self, video_id: str) -> SilhouetteVideo:
        return self.videos[video_id]

    def __contains__(self, video_id: str) -> bool:
        return video_id in self.videos

    @property
    def subjects(self) -> list[str]:
        return sorted({v.subject_id for v in self.videos.values()})

    def split_subjects(self, split: str) -> list[str]:
        splits: Mapping[str, str] = self.metadata.get("splits", {})
        if not splits:
            return self.subjects
        return sorted(s for s, tag in splits.items() if tag == split)

    def subset(self, subjects: Iterable[str]) -> "SilhouetteDataset":
        keep = set(subjects)
        return SilhouetteDataset({k: v for k, v in self.videos.items() if v.subject_id in keep},
                                 self.metadata)


def load_dataset(root: Path) -> SilhouetteDataset:
    root = Path(root)
    meta_path = root / "metadata.json"
    metadata = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    conditions = metadata.get("conditions", {})
    videos = {}
    for subject_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for seq_dir in sorted(p for p in subject_dir.iterdir() if p.is_dir()):
            vid = f"{subject_dir.name}/{seq_dir.name}"
            videos[vid] = load_video(seq_dir, subject_dir.name, seq_dir.name, conditions.get(vid))
    return SilhouetteDataset(videos, metadata)
