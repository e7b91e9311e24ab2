"""Replayable synthetic occlusions on normalized silhouette videos.

Consistent classes (the same patch on every frame):

    0  none
    1  top-left corner      2  top-right corner
    3  bottom-left corner   4  bottom-right corner
    5  top removal          6  bottom removal   (visible rows stretched back to 64)
    7  left half            8  right half

Dynamic occlusions move a rectangle across the frame at constant velocity and
are never used as detector classes.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data_model import FRAME_SIZE, SilhouetteVideo, resize_nearest, round_half_up
from .errors import BadSpec, DuplicateEntry, EmptyClassSet, MissingVideo

NUM_CLASSES = 9
ALL_CLASSES = frozenset(range(NUM_CLASSES))
OCCLUDED_CLASSES = frozenset(range(1, NUM_CLASSES))
DYNAMIC_LABEL = -1

CONSISTENT_RATIO_RANGE = (0.20, 0.50)
HALF_RATIO = 0.50
SMALL_RECT_RANGE = (0.3, 0.5)
TALL_RECT_WIDTH_RANGE = (0.2, 0.4)
VELOCITY_RANGE = (0.5, 1.0)

SMALL_RECT = "small_rect"
TALL_RECT = "tall_rect"
LEFT_TO_RIGHT = "left_to_right"
RIGHT_TO_LEFT = "right_to_left"

MANIFEST_FIELDS = ["video_id", "class_id", "ratio", "shape", "height_ratio", "width_ratio",
                   "velocity", "direction", "initial_x", "rng_seed"]


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts (same on every platform)."""
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class DynamicPatchSpec:
    shape: str
    height_ratio: float
    width_ratio: float
    velocity: float
    direction: str
    initial_x: int

    def __post_init__(self):
        if self.shape not in (SMALL_RECT, TALL_RECT):
            raise BadSpec(f"unknown patch shape {self.shape!r}")
        if self.direction not in (LEFT_TO_RIGHT, RIGHT_TO_LEFT):
            raise BadSpec(f"unknown direction {self.direction!r}")
        if self.shape == TALL_RECT and self.height_ratio != 1.0:
            raise BadSpec("tall_rect patches span the full frame height")

    @property
    def width_px(self) -> int:
        return round_half_up(self.width_ratio * FRAME_SIZE)

    @property
    def height_px(self) -> int:
        return round_half_up(self.height_ratio * FRAME_SIZE)

    @property
    def sign(self) -> int:
        return 1 if self.direction == LEFT_TO_RIGHT else -1

    def x_at(self, t: int) -> int:
        return round_half_up(self.initial_x + self.sign * self.velocity * t)


@dataclass(frozen=True)
class OcclusionSpec:
    class_id: int
    ratio: float = 0.0
    dynamic: DynamicPatchSpec | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.class_id < NUM_CLASSES:
            raise BadSpec(f"class_id must be in 0..8, got {self.class_id}")
        if self.dynamic is not None and self.class_id != 0:
            raise BadSpec("dynamic specs carry class_id 0")

    @property
    def label(self) -> int:
        """Detector class label; dynamic occlusions have no class."""
        return DYNAMIC_LABEL if self.dynamic is not None else self.class_id

    @property
    def patch_px(self) -> int:
        return round_half_up(self.ratio * FRAME_SIZE)

    @property
    def patch_y(self) -> int:
        """Top row of a dynamic patch, fixed for the whole video.

        Derived from ``rng_seed`` so a manifest row fully determines it.
        """
        if self.dynamic is None or self.dynamic.shape == TALL_RECT:
            return 0
        rng = np.random.default_rng([self.rng_seed, 1])
        return int(rng.integers(0, FRAME_SIZE - self.dynamic.height_px + 1))


def legal_ratio_range(class_id: int) -> tuple[float, float]:
    if class_id == 0:
        return (0.0, 0.0)
    if class_id in (7, 8):
        return (HALF_RATIO, HALF_RATIO)
    return CONSISTENT_RATIO_RANGE


def sample_spec(allowed_classes: Iterable[int], rng_seed: int) -> OcclusionSpec:
    allowed = sorted(set(allowed_classes))
    if not allowed:
        raise EmptyClassSet("allowed_classes is empty")
    if not set(allowed) <= ALL_CLASSES:
        raise BadSpec(f"classes outside 0..8: {allowed}")
    rng = np.random.default_rng(rng_seed)
    class_id = int(allowed[rng.integers(len(allowed))])
    lo, hi = legal_ratio_range(class_id)
    ratio = float(rng.uniform(lo, hi)) if hi > lo else lo
    return OcclusionSpec(class_id, ratio, None, rng_seed)


def sample_dynamic_spec(rng_seed: int, shape: str | None = None) -> OcclusionSpec:
    rng = np.random.default_rng(rng_seed)
    picked = (SMALL_RECT, TALL_RECT)[rng.integers(2)]
    shape = shape or picked
    if shape == SMALL_RECT:
        height_ratio = float(rng.uniform(*SMALL_RECT_RANGE))
        width_ratio = float(rng.uniform(*SMALL_RECT_RANGE))
    else:
        rng.uniform(*SMALL_RECT_RANGE)  # keep the draw sequence shape-independent
        height_ratio = 1.0
        width_ratio = float(rng.uniform(*TALL_RECT_WIDTH_RANGE))
    velocity = float(rng.uniform(*VELOCITY_RANGE))
    direction = (LEFT_TO_RIGHT, RIGHT_TO_LEFT)[rng.integers(2)]
    width_px = round_half_up(width_ratio * FRAME_SIZE)
    initial_x = int(rng.integers(-width_px, FRAME_SIZE + 1))
    patch = DynamicPatchSpec(shape, height_ratio, width_ratio, velocity, direction, initial_x)
    return OcclusionSpec(0, 0.0, patch, rng_seed)


def consistent_mask(spec: OcclusionSpec) -> np.ndarray | None:
    """Boolean mask of zeroed pixels for the patch classes 1-4 and 7-8."""
    k = spec.patch_px
    m = np.zeros((FRAME_SIZE, FRAME_SIZE), dtype=bool)
    c = spec.class_id
    if c == 1:
        m[:k, :k] = True
    elif c == 2:
        m[:k, FRAME_SIZE - k:] = True
    elif c == 3:
        m[FRAME_SIZE - k:, :k] = True
    elif c == 4:
        m[FRAME_SIZE - k:, FRAME_SIZE - k:] = True
    elif c == 7:
        m[:, :FRAME_SIZE // 2] = True
    elif c == 8:
        m[:, FRAME_SIZE // 2:] = True
    else:
        return None
    return m


def apply_consistent(video: SilhouetteVideo, spec: OcclusionSpec) -> SilhouetteVideo:
    if spec.dynamic is not None:
        raise BadSpec("apply_consistent got a dynamic spec")
    c = spec.class_id
    if c == 0:
        return video
    pixels = video.pixels
    if c in (5, 6):
        k = spec.patch_px
        visible = pixels[:, k:, :] if c == 5 else pixels[:, :FRAME_SIZE - k, :]
        if visible.shape[1] == 0:
            out = np.zeros_like(pixels)
        else:
            out = np.stack([resize_nearest(f, FRAME_SIZE, FRAME_SIZE) for f in visible])
        return video.with_pixels(out)
    mask = consistent_mask(spec)
    out = pixels.copy()
    out[:, mask] = 0
    return video.with_pixels(out)


def dynamic_rect(spec: OcclusionSpec, t: int) -> tuple[int, int, int, int]:
    """Patch rectangle at frame ``t`` clipped to the frame, as (y0, y1, x0, x1)."""
    d = spec.dynamic
    x = d.x_at(t)
    y = spec.patch_y
    x0, x1 = max(x, 0), min(x + d.width_px, FRAME_SIZE)
    y0, y1 = max(y, 0), min(y + d.height_px, FRAME_SIZE)
    return y0, max(y0, y1), x0, max(x0, x1)


def apply_dynamic(video: SilhouetteVideo, spec: OcclusionSpec) -> SilhouetteVideo:
    if spec.dynamic is None:
        raise BadSpec("apply_dynamic needs a dynamic spec")
    out = video.pixels.copy()
    for t in range(len(video)):
        y0, y1, x0, x1 = dynamic_rect(spec, t)
        out[t, y0:y1, x0:x1] = 0
    return video.with_pixels(out)


def apply_occlusion(video: SilhouetteVideo, spec: OcclusionSpec) -> SilhouetteVideo:
    if spec.dynamic is not None:
        return apply_dynamic(video, spec)
    return apply_consistent(video, spec)


def occlude_pixels(pixels: np.ndarray, spec: OcclusionSpec) -> np.ndarray:
    """Array-level shortcut used by the training and evaluation hot paths."""
    return apply_occlusion(SilhouetteVideo(pixels, "_", "_"), spec).pixels


def occlude_batch(videos: Mapping[str, SilhouetteVideo],
                  manifest: Sequence[tuple[str, OcclusionSpec]]
                  ) -> tuple[list[SilhouetteVideo], list[int]]:
    seen = set()
    for vid, _ in manifest:
        if vid in seen:
            raise DuplicateEntry(f"video {vid!r} listed twice")
        if vid not in videos:
            raise MissingVideo(f"manifest names unknown video {vid!r}")
        seen.add(vid)
    uncovered = set(videos) - seen
    if uncovered:
        raise MissingVideo(f"videos missing from manifest: {sorted(uncovered)[:5]}")
    out = [apply_occlusion(videos[vid], spec) for vid, spec in manifest]
    return out, [spec.label for _, spec in manifest]


def _fmt(x) -> str:
    return "" if x is None else repr(x)


def write_manifest(path: Path, entries: Sequence[tuple[str, OcclusionSpec]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for vid, s in entries:
            d = s.dynamic
            w.writerow([vid, s.class_id, repr(float(s.ratio)),
                        d.shape if d else "", _fmt(d.height_ratio) if d else "",
                        _fmt(d.width_ratio) if d else "", _fmt(d.velocity) if d else "",
                        d.direction if d else "", d.initial_x if d else "", s.rng_seed])


def read_manifest(path: Path) -> list[tuple[str, OcclusionSpec]]:
    entries = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            dynamic = None
            if row["shape"]:
                dynamic = DynamicPatchSpec(row["shape"], float(row["height_ratio"]),
                                           float(row["width_ratio"]), float(row["velocity"]),
                                           row["direction"], int(row["initial_x"]))
            spec = OcclusionSpec(int(row["class_id"]), float(row["ratio"]), dynamic,
                                 int(row["rng_seed"]))
            entries.append((row["video_id"], spec))
    return entries
