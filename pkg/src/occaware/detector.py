"""Occlusion-type classifier and the occlusion features it emits.

Three conv stages (3x3, stride 1, padding 1, ReLU, 2x2 max-pool; 32/64/128
channels), global average pooling, then FC1 128->64 (ReLU) and FC2 64->9.
FC2 only exists for training: the occlusion feature is the FC1 activation.
"""
from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data_model import FRAME_SIZE, SilhouetteFrame, SilhouetteVideo
from .errors import EmptyDataset, FrozenContractViolation, ShapeMismatch
from .occlusion import ALL_CLASSES, NUM_CLASSES, derive_seed, occlude_pixels, sample_spec

logger = logging.getLogger(__name__)

TRANSIENT, CUMULATIVE = "transient", "cumulative"


@dataclass(frozen=True)
class DetectorConfig:
    num_conv_layers: int = 3
    base_channels: int = 32
    max_channels: int = 128
    feature_dim: int = 64
    num_classes: int = NUM_CLASSES
    input_size: int = FRAME_SIZE
    widths: tuple[int, ...] | None = None  # explicit per-stage widths, for reduced nets

    def stage_widths(self) -> tuple[int, ...]:
        if self.widths is not None:
            return tuple(self.widths)
        return tuple(min(self.base_channels * 2 ** i, self.max_channels)
                     for i in range(self.num_conv_layers))


def init_fan_in_uniform(module: nn.Module, generator: torch.Generator) -> None:
    """Seeded U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every conv/linear layer."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            fan_in = m.weight[0].numel()
            bound = 1.0 / np.sqrt(fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)


class OcclusionDetector(nn.Module):

    def __init__(self, config: DetectorConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config or DetectorConfig()
        widths = self.config.stage_widths()
        chans = (1,) + widths
        self.convs = nn.ModuleList(nn.Conv2d(chans[i], chans[i + 1], 3, stride=1, padding=1)
                                   for i in range(len(widths)))
        self.fc1 = nn.Linear(widths[-1], self.config.feature_dim)
        self.fc2 = nn.Linear(self.config.feature_dim, self.config.num_classes)
        self.frozen = False
        init_fan_in_uniform(self, torch.Generator().manual_seed(seed))

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def train(self, mode: bool = True):
        # a frozen detector stays in inference mode whatever its parent does
        return super().train(mode and not self.frozen)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """(N, 1, H, W) or (N, H, W) frames -> (N, feature_dim) occlusion features."""
        if x.dim() == 3:
            x = x.unsqueeze(1)
        size = self.config.input_size
        if x.dim() != 4 or x.shape[1:] != (1, size, size):
            raise ShapeMismatch(f"detector expects (N, 1, {size}, {size}), got {tuple(x.shape)}")
        for conv in self.convs:
            x = F.max_pool2d(F.relu(conv(x)), 2)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return F.relu(self.fc1(x))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        feat = self.features(x)
        return feat, self.fc2(feat)

    def video_features(self, clips: torch.Tensor, chunk: int = 512) -> torch.Tensor:
        """(N, f, H, W) -> (N, f, feature_dim), evaluated without gradients."""
        n, f = clips.shape[:2]
        flat = clips.reshape(n * f, 1, *clips.shape[2:]).to(self.fc1.weight.dtype)
        with torch.no_grad():
            out = torch.cat([self.features(flat[i:i + chunk]) for i in range(0, n * f, chunk)])
        return out.reshape(n, f, -1)


def freeze(net: OcclusionDetector) -> OcclusionDetector:
    for p in net.parameters():
        p.requires_grad_(False)
    net.frozen = True
    net.eval()
    return net


def weight_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _frame_tensor(frame) -> torch.Tensor:
    pixels = frame.pixels if isinstance(frame, SilhouetteFrame) else np.asarray(frame)
    if pixels.shape != (FRAME_SIZE, FRAME_SIZE):
        raise ShapeMismatch(f"expected a {FRAME_SIZE}x{FRAME_SIZE} frame, got {pixels.shape}")
    return torch.from_numpy(pixels.astype(np.float32))[None, None]


def forward_frame(net: OcclusionDetector, frame) -> tuple[np.ndarray, np.ndarray]:
    x = _frame_tensor(frame).to(net.fc1.weight.dtype)
    with torch.no_grad():
        feat, logits = net(x)
    return feat[0].numpy(), logits[0].numpy()


@dataclass(frozen=True)
class OcclusionFeature:
    mode: str
    values: np.ndarray

    def __post_init__(self):
        if self.mode not in (TRANSIENT, CUMULATIVE):
            raise ValueError(f"unknown mode {self.mode!r}")
        want = 2 if self.mode == TRANSIENT else 1
        if np.ndim(self.values) != want:
            raise ShapeMismatch(f"{self.mode} feature must be {want}-D")


def extract_beta(net: OcclusionDetector, video: SilhouetteVideo | np.ndarray,
                 mode: str = TRANSIENT) -> OcclusionFeature:
    pixels = video.pixels if isinstance(video, SilhouetteVideo) else np.asarray(video)
    clips = torch.from_numpy(pixels.astype(np.float32))[None]
    transient = net.video_features(clips)[0].double().numpy()
    if mode == TRANSIENT:
        return OcclusionFeature(TRANSIENT, transient)
    if mode == CUMULATIVE:
        return OcclusionFeature(CUMULATIVE, transient.mean(axis=0))
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class DetectorTrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    frame_stride: int = 50  # one frame drawn from every window of this many frames
    val_fraction: float = 0.1
    val_draws: int = 4
    occlusion_classes: tuple[int, ...] = tuple(sorted(ALL_CLASSES))
    rng_seed: int = 0
    log_every_epochs: int = 10
    extra: dict = field(default_factory=dict)


def sample_frames(videos: Sequence[SilhouetteVideo], classes, seed: int, stride: int = 50,
                  one_per_video: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw frames (one per ``stride`` window, or one per video) and occlude each.

    Returns (occluded frames, labels, clean frames).
    """
    rng = np.random.default_rng(seed)
    frames, labels, clean = [], [], []
    for vi, video in enumerate(videos):
        n = len(video)
        if one_per_video:
            picks = [int(rng.integers(n))]
        else:
            picks = [int(rng.integers(s, min(s + stride, n))) for s in range(0, n, stride)]
        for k, t in enumerate(picks):
            spec = sample_spec(classes, derive_seed(seed, vi, k, "detector"))
            frame = video.pixels[t:t + 1]
            frames.append(occlude_pixels(frame, spec)[0])
            labels.append(spec.class_id)
            clean.append(frame[0])
    return np.stack(frames), np.asarray(labels), np.stack(clean)


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, labels)


def classify(net: OcclusionDetector, frames: np.ndarray, chunk: int = 512) -> np.ndarray:
    x = torch.from_numpy(frames.astype(np.float32)).to(net.fc1.weight.dtype)
    was_training = net.training
    net.eval()
    with torch.no_grad():
        preds = torch.cat([net(x[i:i + chunk])[1].argmax(1) for i in range(0, len(x), chunk)])
    net.train(was_training)
    return preds.numpy()


def train_detector(net: OcclusionDetector, videos: Sequence[SilhouetteVideo],
                   config: DetectorTrainConfig | None = None
                   ) -> tuple[OcclusionDetector, list[dict]]:
    """Adam + cross-entropy on occluded frames; returns the best-validation weights."""
    config = config or DetectorTrainConfig()
    if net.frozen:
        raise FrozenContractViolation("cannot train a frozen detector")
    videos = list(videos)
    if not videos:
        raise EmptyDataset("no training videos")
    rng = np.random.default_rng(config.rng_seed)
    order = rng.permutation(len(videos))
    n_val = int(round(config.val_fraction * len(videos))) if len(videos) > 1 else 0
    val_videos = [videos[i] for i in order[:n_val]]
    train_videos = [videos[i] for i in order[n_val:]]
    classes = config.occlusion_classes

    val_sets = [sample_frames(val_videos, classes, derive_seed(config.rng_seed, "val", d),
                              one_per_video=True)
                for d in range(config.val_draws)] if val_videos else []
    val_x = np.concatenate([v[0] for v in val_sets]) if val_sets else None
    val_y = np.concatenate([v[1] for v in val_sets]) if val_sets else None

    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
    torch.manual_seed(config.rng_seed)
    best_acc, best_state, log = -1.0, None, []
    for epoch in range(config.epochs):
        x_np, y_np, _ = sample_frames(train_videos, classes,
                                      derive_seed(config.rng_seed, "epoch", epoch),
                                      stride=config.frame_stride)
        perm = np.random.default_rng(derive_seed(config.rng_seed, "shuffle", epoch)).permutation(len(y_np))
        x = torch.from_numpy(x_np[perm].astype(np.float32)).to(net.fc1.weight.dtype)
        y = torch.from_numpy(y_np[perm]).long()
        net.train()
        correct, total_loss = 0, 0.0
        for i in range(0, len(y), config.batch_size):
            xb, yb = x[i:i + config.batch_size], y[i:i + config.batch_size]
            _, logits = net(xb)
            loss = cross_entropy(logits, yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(yb)
            correct += int((logits.argmax(1) == yb).sum())
        record = {"epoch": epoch, "train_loss": total_loss / len(y), "train_acc": correct / len(y)}
        if val_x is not None:
            record["val_acc"] = float((classify(net, val_x) == val_y).mean())
            score = record["val_acc"]
        else:
            score = record["train_acc"]
        if score > best_acc:
            best_acc, best_state = score, copy.deepcopy(net.state_dict())
        log.append(record)
        if epoch % config.log_every_epochs == 0 or epoch == config.epochs - 1:
            logger.info("detector epoch %d %s", epoch, record)
    if best_state is not None:
        net.load_state_dict(best_state)
    return net, log


def evaluate_detector(net: OcclusionDetector, videos: Sequence[SilhouetteVideo], classes=ALL_CLASSES,
                      seed: int = 0, draws: int = 1) -> dict:
    """Accuracy on one random frame per video per draw, plus the visibility ceiling.

    The ceiling is the best accuracy any classifier can reach on the same clean
    frames: a corner patch that covers no foreground leaves the frame identical
    to the unoccluded one.
    """
    xs, ys, cleans = [], [], []
    for d in range(draws):
        x, y, clean = sample_frames(videos, classes, derive_seed(seed, "eval", d), one_per_video=True)
        xs.append(x), ys.append(y), cleans.append(clean)
    x, y, clean = np.concatenate(xs), np.concatenate(ys), np.concatenate(cleans)
    preds = classify(net, x)
    return {"accuracy": float((preds == y).mean()), "num_samples": int(len(y)),
            "visibility_ceiling": visibility_ceiling(clean, classes)}


def corner_miss_probability(frame: np.ndarray, class_id: int) -> float:
    """P(a corner patch of a uniformly drawn ratio covers no foreground pixel)."""
    from .occlusion import OcclusionSpec, consistent_mask, legal_ratio_range
    lo, hi = legal_ratio_range(class_id)
    grid = np.linspace(lo, hi, 301)
    misses = [not frame[consistent_mask(OcclusionSpec(class_id, r))].any() for r in grid]
    return float(np.mean(misses))


def visibility_ceiling(clean_frames: np.ndarray, classes=ALL_CLASSES) -> float:
    """Upper bound on expected accuracy given invisible occlusions.

    For a clean frame x every class c can emit x itself with probability
    m_c(x) (m_0 = 1, m_c = corner miss probability for 1-4, 0 otherwise);
    the Bayes classifier then errs with probability sum_c m_c - max_c m_c
    per unit of class prior.  Distinct visible outputs are assumed separable,
    so the bound is optimistic.
    """
    classes = sorted(set(classes))
    errs = []
    for frame in clean_frames:
        m = [1.0 if c == 0 else corner_miss_probability(frame, c) if c in (1, 2, 3, 4) else 0.0
             for c in classes]
        errs.append(sum(m) - max(m))
    return float(1.0 - np.mean(errs) / len(classes))
