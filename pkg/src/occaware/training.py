"""End-to-end training of backbone + injector next to a frozen occlusion detector."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data_model import SilhouetteVideo
from .detector import OcclusionDetector, init_fan_in_uniform, weight_checksum
from .errors import DegenerateBatch, EmptyDataset, FrozenContractViolation, LabelOutOfRange
from .model import BetaCache, OcclusionAwareModel, embed_videos
from .occlusion import ALL_CLASSES, derive_seed, occlude_pixels, sample_spec

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    frames_per_clip: int = 30
    batch_subjects: int = 8  # Pn
    clips_per_subject: int = 8  # Kn
    learning_rate: float = 1e-4
    triplet_margin: float = 0.2
    loss_weights: tuple[float, float] = (1.0, 0.1)  # (triplet, cross-entropy)
    max_steps: int = 2000
    eval_every: int = 200
    rng_seed: int = 0
    occlusion_classes: tuple[int, ...] = tuple(sorted(ALL_CLASSES))
    val_fraction: float = 0.1
    steps_per_epoch: int = 100  # occlusion specs are redrawn once per epoch
    workers: int = 0
    allow_unfrozen_detector: bool = False  # negative control: optimize the detector too
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_json(cls, text: str, **overrides) -> "TrainConfig":
        data = {**json.loads(text), **{k: v for k, v in overrides.items() if v is not None}}
        for key in ("loss_weights", "occlusion_classes"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class TrainResult:
    model: OcclusionAwareModel
    classifier: nn.Linear
    log: list[dict]
    val_subjects: list[str]
    detector_checksum: str | None


def _check_batch(signatures: torch.Tensor, labels: torch.Tensor) -> None:
    if signatures.dim() != 3:
        raise DegenerateBatch(f"signatures must be (N, parts, E), got {tuple(signatures.shape)}")
    counts = torch.unique(labels, return_counts=True)[1]
    if len(counts) < 2 or int(counts.min()) < 2:
        raise DegenerateBatch("triplet mining needs >= 2 subjects with >= 2 clips each")


def _pairwise_distance(x: torch.Tensor) -> torch.Tensor:
    # (parts, N, E) -> (parts, N, N); clamped so identical clips keep a finite gradient
    sq = (x.unsqueeze(2) - x.unsqueeze(1)).pow(2).sum(-1)
    return sq.clamp_min(1e-12).sqrt()


def partwise_triplet_loss(signatures: torch.Tensor, labels: torch.Tensor,
                          margin: float = 0.2) -> torch.Tensor:
    """Batch-all triplet loss per part, averaged over non-zero terms, then over parts."""
    labels = torch.as_tensor(labels)
    _check_batch(signatures, labels)
    dist = _pairwise_distance(signatures.transpose(0, 1))
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool)
    valid = (same & ~eye)[:, :, None] & ~same[:, None, :]  # (a, p, n)
    terms = F.relu(dist[:, :, :, None] - dist[:, :, None, :] + margin) * valid
    nonzero = (terms > 0).sum(dim=(1, 2, 3)).clamp_min(1)
    return (terms.sum(dim=(1, 2, 3)) / nonzero).mean()


def id_cross_entropy(signatures: torch.Tensor, labels: torch.Tensor, head: nn.Module) -> torch.Tensor:
    labels = torch.as_tensor(labels)
    logits = head(signatures.reshape(len(signatures), -1))
    if len(labels) and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise LabelOutOfRange(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels.long())


def clip_indices(length: int, frames: int, rng: np.random.Generator) -> np.ndarray:
    """A contiguous random window; shorter videos repeat cyclically."""
    if length >= frames:
        start = int(rng.integers(0, length - frames + 1))
        return np.arange(start, start + frames)
    return np.arange(frames) % length


def sample_pk(subject_videos: dict[str, list[str]], pn: int, kn: int,
              rng: np.random.Generator) -> list[tuple[str, str]]:
    """Pn distinct subjects x Kn clips; videos are drawn with replacement."""
    subjects = sorted(subject_videos)
    if len(subjects) < pn:
        raise DegenerateBatch(f"need {pn} subjects per batch, only {len(subjects)} available")
    chosen = rng.choice(len(subjects), size=pn, replace=False)
    batch = []
    for i in chosen:
        sid = subjects[i]
        vids = subject_videos[sid]
        for _ in range(kn):
            batch.append((sid, vids[int(rng.integers(len(vids)))]))
    return batch


def split_validation(subjects: Sequence[str], fraction: float, seed: int) -> tuple[list[str], list[str]]:
    subjects = sorted(subjects)
    n_val = int(round(fraction * len(subjects)))
    if n_val == 0:
        return subjects, []
    perm = np.random.default_rng(derive_seed(seed, "val-split")).permutation(len(subjects))
    val = sorted(subjects[i] for i in perm[:n_val])
    return [s for s in subjects if s not in set(val)], val


def validation_rank1(model: OcclusionAwareModel, videos: Sequence[SilhouetteVideo], classes,
                     seed: int, cache: BetaCache | None) -> float | None:
    """Rank-1 with each subject's first sequence as gallery and the rest as probes."""
    from .evaluation import rank_retrieval
    by_subject: dict[str, list[SilhouetteVideo]] = {}
    for v in sorted(videos, key=lambda v: v.video_id):
        by_subject.setdefault(v.subject_id, []).append(v)
    gallery = [vs[0] for vs in by_subject.values()]
    probes = [v for vs in by_subject.values() for v in vs[1:]]
    if not probes:
        return None
    pixels, betas = [], []
    for v in gallery + probes:
        spec = sample_spec(classes, derive_seed(seed, "val-occ", v.video_id))
        occ = occlude_pixels(v.pixels, spec)
        pixels.append(occ)
        betas.append(cache.get(v.video_id, spec, occ) if cache is not None else None)
    sigs = embed_videos(model, pixels, betas)
    hits = rank_retrieval(sigs[len(gallery):], sigs[:len(gallery)],
                          [v.subject_id for v in gallery], 1, [v.subject_id for v in probes])
    return float(np.mean(hits))


def train_occluded(model: OcclusionAwareModel, detector: OcclusionDetector | None,
                   videos: Sequence[SilhouetteVideo], config: TrainConfig | None = None,
                   log_path: Path | None = None, beta_cache: BetaCache | None = None) -> TrainResult:
    """P x K batches of occluded 30-frame clips; triplet + identity losses; Adam."""
    config = config or TrainConfig()
    videos = list(videos)
    if not videos:
        raise EmptyDataset("no training videos")
    detector = detector if detector is not None else model.detector
    if model.needs_beta:
        if detector is None:
            raise FrozenContractViolation("an aware model needs a detector")
        if not detector.frozen and not config.allow_unfrozen_detector:
            raise FrozenContractViolation("the detector must be frozen before backbone training")
        model.__dict__["detector"] = detector
    checksum = weight_checksum(detector) if detector is not None else None
    joint = model.needs_beta and not detector.frozen
    if model.needs_beta and not joint and beta_cache is None:
        beta_cache = BetaCache(detector)

    subjects = sorted({v.subject_id for v in videos})
    train_subjects, val_subjects = split_validation(subjects, config.val_fraction, config.rng_seed)
    by_id = {v.video_id: v for v in videos}
    subject_videos: dict[str, list[str]] = {}
    for v in sorted(videos, key=lambda v: v.video_id):
        if v.subject_id in train_subjects:
            subject_videos.setdefault(v.subject_id, []).append(v.video_id)
    label_of = {s: i for i, s in enumerate(train_subjects)}
    val_videos = [v for v in videos if v.subject_id in set(val_subjects)]

    torch.manual_seed(config.rng_seed)
    parts, embed = model.backbone.signature_shape
    head = nn.Linear(parts * embed, len(train_subjects))
    init_fan_in_uniform(head, torch.Generator().manual_seed(derive_seed(config.rng_seed, "head")))
    params = list(model.parameters()) + list(head.parameters())
    if joint:
        params += list(detector.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    w_tri, w_ce = config.loss_weights
    classes = config.occlusion_classes

    log: list[dict] = []
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for step in range(config.max_steps):
            epoch = step // max(1, config.steps_per_epoch)
            rng = np.random.default_rng(derive_seed(config.rng_seed, "batch", step))
            batch = sample_pk(subject_videos, config.batch_subjects, config.clips_per_subject, rng)
            clips, betas, labels = [], [], []
            for sid, vid in batch:
                video = by_id[vid]
                idx = clip_indices(len(video), config.frames_per_clip, rng)
                spec = sample_spec(classes, derive_seed(config.rng_seed, "occ", epoch, vid))
                if beta_cache is not None:
                    occ = occlude_pixels(video.pixels, spec)
                    betas.append(beta_cache.get(vid, spec, occ)[idx])
                    clips.append(occ[idx])
                else:
                    clips.append(occlude_pixels(video.pixels[idx], spec))
                labels.append(label_of[sid])
            x = torch.from_numpy(np.stack(clips).astype(np.float32))
            y = torch.tensor(labels)
            beta = torch.from_numpy(np.stack(betas)) if betas else None
            if joint:
                n, f = x.shape[:2]
                beta = detector.features(x.reshape(n * f, 1, *x.shape[2:])).reshape(n, f, -1)
            model.train()
            sig = model(x, beta)
            loss_tri = partwise_triplet_loss(sig, y, config.triplet_margin)
            loss_ce = id_cross_entropy(sig, y, head)
            loss = w_tri * loss_tri + w_ce * loss_ce
            opt.zero_grad()
            loss.backward()
            opt.step()
            record = {"step": step, "loss_triplet": loss_tri.item(), "loss_ce": loss_ce.item(),
                      "val_rank1": None}
            last = step == config.max_steps - 1
            if val_videos and not joint and config.eval_every and ((step + 1) % config.eval_every == 0 or last):
                record["val_rank1"] = validation_rank1(model, val_videos, classes, config.rng_seed,
                                                       beta_cache)
                logger.info("step %d %s", step, record)
            log.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
    finally:
        if log_file is not None:
            log_file.close()

    if detector is not None and weight_checksum(detector) != checksum:
        raise FrozenContractViolation("detector weights changed during backbone training")
    return TrainResult(model, head, log, val_subjects, checksum)
