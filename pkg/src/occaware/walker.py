"""Procedural silhouette walkers: an identity-bearing stand-in for real gait data.

Each subject is a 2-D stick figure (torso, head disc, two 2-segment legs, two
2-segment arms) whose joint angles follow sinusoids at the subject's stride
frequency.  Body proportions and motion dynamics both vary per subject, so a
recognizer can use shape and gait.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data_model import (FRAME_SIZE, SilhouetteDataset, SilhouetteVideo, normalize_frame,
                         save_video)
from .occlusion import derive_seed

GENERATOR_VERSION = "walker-1"
GALLERY, PROBE = "gallery", "probe"
CLEAN_CONDITION, JITTER_CONDITION = "controlled", "jitter"

_CANVAS = 220
_BODY_PX = 128.0


@dataclass(frozen=True)
class WalkerRegime:
    """Uniform sampling ranges for subject parameters."""

    name: str = "A"
    thigh: tuple[float, float] = (0.20, 0.28)
    shin: tuple[float, float] = (0.20, 0.28)
    upper_arm: tuple[float, float] = (0.14, 0.20)
    forearm: tuple[float, float] = (0.12, 0.18)
    torso_width: tuple[float, float] = (0.14, 0.22)
    stride_frequency: tuple[float, float] = (0.02, 0.08)
    stride_amplitude: tuple[float, float] = (0.30, 0.60)
    arm_swing_amplitude: tuple[float, float] = (0.20, 0.70)
    phase_offset: tuple[float, float] = (-0.6, 0.6)
    head_radius: tuple[float, float] = (0.08, 0.11)
    limb_thickness: float = 0.07


REGIMES = {
    "A": WalkerRegime(),
    # heavier build, slower cadence; the second "domain" for cross-domain checks
    "B": WalkerRegime(name="B", thigh=(0.22, 0.30), shin=(0.18, 0.26), torso_width=(0.18, 0.26),
                      stride_frequency=(0.02, 0.05), head_radius=(0.09, 0.12),
                      limb_thickness=0.085),
}


@dataclass(frozen=True)
class WalkerParams:
    subject_id: str
    limb_length_ratios: tuple[float, float, float, float]  # thigh, shin, upper arm, forearm
    torso_width_ratio: float
    stride_frequency: float  # cycles per frame
    stride_amplitude: float  # radians
    arm_swing_amplitude: float  # radians
    phase_offset: float  # radians, arm lag relative to the opposite leg
    head_radius_ratio: float
    limb_thickness_ratio: float = 0.05

    def __post_init__(self):
        ratios = (*self.limb_length_ratios, self.torso_width_ratio, self.head_radius_ratio,
                  self.limb_thickness_ratio)
        if not all(0.0 < r < 1.0 for r in ratios):
            raise ValueError("walker ratios must lie in (0, 1)")
        if not 0.02 <= self.stride_frequency <= 0.08:
            raise ValueError("stride_frequency must lie in [0.02, 0.08] cycles/frame")


def sample_subject(rng_seed: int, regime: WalkerRegime | str = "A",
                   subject_id: str | None = None) -> WalkerParams:
    if isinstance(regime, str):
        regime = REGIMES[regime]
    rng = np.random.default_rng(rng_seed)
    u = lambda lo_hi: float(rng.uniform(*lo_hi))  # noqa: E731
    limbs = (u(regime.thigh), u(regime.shin), u(regime.upper_arm), u(regime.forearm))
    return WalkerParams(
        subject_id=subject_id if subject_id is not None else f"subject-{rng_seed}",
        limb_length_ratios=limbs,
        torso_width_ratio=u(regime.torso_width),
        stride_frequency=u(regime.stride_frequency),
        stride_amplitude=u(regime.stride_amplitude),
        arm_swing_amplitude=u(regime.arm_swing_amplitude),
        phase_offset=u(regime.phase_offset),
        head_radius_ratio=u(regime.head_radius),
        limb_thickness_ratio=regime.limb_thickness,
    )


def _segment(origin, angle, length):
    # angle measured from straight down, positive towards the walking direction (+x)
    return (origin[0] + length * math.sin(angle), origin[1] + length * math.cos(angle))


def render_pose(params: WalkerParams, phase: float) -> np.ndarray:
    """Rasterize the figure at gait phase ``phase`` (radians) onto a raw canvas."""
    thigh, shin, upper_arm, forearm = (r * _BODY_PX for r in params.limb_length_ratios)
    head_r = params.head_radius_ratio * _BODY_PX
    torso_len = _BODY_PX - thigh - shin - 2 * head_r
    limb_w = max(2, round(params.limb_thickness_ratio * _BODY_PX))
    torso_w = max(limb_w, round(params.torso_width_ratio * _BODY_PX))

    hip = (_CANVAS / 2, _CANVAS * 0.55)
    neck = (hip[0] + 0.04 * torso_len, hip[1] - torso_len)  # slight forward lean
    shoulder = (neck[0], neck[1] + 0.08 * torso_len)
    head = (neck[0] + 0.1 * head_r, neck[1] - head_r)

    amp = params.stride_amplitude
    arm_amp = params.arm_swing_amplitude
    segments = []
    for side in (0.0, math.pi):
        p = phase + side
        thigh_angle = amp * math.sin(p)
        knee_flex = 1.1 * amp * max(0.0, math.sin(p + 1.2))
        knee = _segment(hip, thigh_angle, thigh)
        ankle = _segment(knee, thigh_angle - knee_flex, shin)
        segments += [(hip, knee), (knee, ankle)]
        arm_angle = -arm_amp * math.sin(p + params.phase_offset)
        elbow_flex = 0.25 + 0.6 * arm_amp * max(0.0, math.sin(p + params.phase_offset + math.pi))
        elbow = _segment(shoulder, arm_angle, upper_arm)
        wrist = _segment(elbow, arm_angle + elbow_flex, forearm)
        segments += [(shoulder, elbow), (elbow, wrist)]

    im = Image.new("L", (_CANVAS, _CANVAS), 0)
    draw = ImageDraw.Draw(im)
    draw.line([hip, neck], fill=255, width=torso_w)
    for a, b in segments:
        draw.line([a, b], fill=255, width=limb_w)
        for x, y in (a, b):
            r = limb_w / 2
            draw.ellipse([x - r, y - r, x + r, y + r], fill=255)
    for x, y, r in ((hip[0], hip[1], torso_w / 2), (neck[0], neck[1], torso_w / 2),
                    (head[0], head[1], head_r)):
        draw.ellipse([x - r, y - r, x + r, y + r], fill=255)
    return (np.asarray(im) > 127).astype(np.uint8)


def render_sequence(params: WalkerParams, num_frames: int, rng_seed: int,
                    sequence_id: str = "seq", condition: str | None = None) -> SilhouetteVideo:
    """Animate ``num_frames`` frames; the seed only picks the starting gait phase."""
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    start = float(np.random.default_rng(rng_seed).uniform(0.0, 2 * math.pi))
    step = 2 * math.pi * params.stride_frequency
    frames = [normalize_frame(render_pose(params, start + step * t)) for t in range(num_frames)]
    return SilhouetteVideo.from_frames(frames, params.subject_id, sequence_id, condition)


def jitter_video(video: SilhouetteVideo, noise: float, rng_seed: int) -> SilhouetteVideo:
    """Camera jitter: one zoom per sequence and a per-frame shift of up to 3 px.

    ``noise`` in [0, 1] scales both ranges (full range: zoom 0.9-1.1, shift 3 px).
    """
    if noise <= 0:
        return video
    rng = np.random.default_rng(rng_seed)
    scale = float(rng.uniform(1 - 0.1 * noise, 1 + 0.1 * noise))
    max_shift = int(round(3 * noise))
    shifts = rng.integers(-max_shift, max_shift + 1, size=(len(video), 2))
    c = (FRAME_SIZE - 1) / 2
    grid = np.arange(FRAME_SIZE)
    out = np.zeros_like(video.pixels)
    for t, frame in enumerate(video.pixels):
        dy, dx = shifts[t]
        rows = np.floor((grid - c - dy) / scale + c + 0.5).astype(int)
        cols = np.floor((grid - c - dx) / scale + c + 0.5).astype(int)
        valid_r = (rows >= 0) & (rows < FRAME_SIZE)
        valid_c = (cols >= 0) & (cols < FRAME_SIZE)
        sampled = frame[np.ix_(np.clip(rows, 0, FRAME_SIZE - 1), np.clip(cols, 0, FRAME_SIZE - 1))]
        sampled = sampled * valid_r[:, None] * valid_c[None, :]
        out[t] = sampled if sampled.any() else frame
    return video.with_pixels(out)


@dataclass
class DatasetPlan:
    num_subjects: int
    seqs_per_subject: int
    frames_per_seq: int
    condition_noise: float = 1.0
    rng_seed: int = 0
    num_test_subjects: int | None = None
    regime: str = "A"
    subject_prefix: str = "s"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if min(self.num_subjects, self.seqs_per_subject, self.frames_per_seq) < 1:
            raise ValueError("all dataset counts must be >= 1")
        if self.num_test_subjects is None:
            self.num_test_subjects = self.num_subjects // 3
        if not 0 <= self.num_test_subjects <= self.num_subjects:
            raise ValueError("num_test_subjects out of range")


def generate_dataset(plan: DatasetPlan) -> SilhouetteDataset:
    """Render the whole dataset in memory (deterministic in ``plan``)."""
    regime = REGIMES[plan.regime]
    videos: dict[str, SilhouetteVideo] = {}
    splits, roles, conditions, subject_seeds, sequence_seeds = {}, {}, {}, {}, {}
    num_train = plan.num_subjects - plan.num_test_subjects
    for i in range(plan.num_subjects):
        sid = f"{plan.subject_prefix}{i:03d}"
        sseed = derive_seed(plan.rng_seed, "subject", i)
        params = sample_subject(sseed, regime, subject_id=sid)
        subject_seeds[sid] = sseed
        splits[sid] = "train" if i < num_train else "test"
        for j in range(plan.seqs_per_subject):
            qid = f"q{j:02d}"
            qseed = derive_seed(sseed, "sequence", j)
            cond = CLEAN_CONDITION if j == 0 else JITTER_CONDITION
            video = render_sequence(params, plan.frames_per_seq, qseed, qid, cond)
            if j > 0:
                video = jitter_video(video, plan.condition_noise, derive_seed(qseed, "jitter"))
            vid = video.video_id
            videos[vid] = video
            roles[vid] = GALLERY if j == 0 else PROBE
            conditions[vid] = cond
            sequence_seeds[vid] = qseed
    metadata = {
        "generator_version": GENERATOR_VERSION,
        "plan": asdict(plan),
        "subjects": sorted(splits),
        "splits": splits,
        "roles": roles,
        "conditions": conditions,
        "subject_seeds": subject_seeds,
        "sequence_seeds": sequence_seeds,
    }
    return SilhouetteDataset(videos, metadata)


def build_dataset(out_dir: Path, num_subjects: int, seqs_per_subject: int, frames_per_seq: int,
                  condition_noise: float, rng_seed: int, **kwargs) -> SilhouetteDataset:
    """Render a dataset and write it as a PNG tree plus ``metadata.json``."""
    plan = DatasetPlan(num_subjects, seqs_per_subject, frames_per_seq, condition_noise,
                       rng_seed, **kwargs)
    dataset = generate_dataset(plan)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for video in dataset:
        save_video(video, out_dir)
    (out_dir / "metadata.json").write_text(json.dumps(dataset.metadata, indent=2, sort_keys=True))
    return dataset
