"""Backbone + optional awareness injector + frozen detector, as one recognizer."""
from __future__ import annotations

from dataclasses import asdict, replace

import numpy as np
import torch
from torch import nn

from .awareness import AwarenessInjector, Variant, make_injector
from .backbone import BackboneConfig, ReferenceBackbone
from .checkpoint import load_checkpoint, save_checkpoint
from .data_model import GaitSignature, SilhouetteVideo
from .detector import OcclusionDetector, weight_checksum
from .errors import CheckpointError, EmptyDataset, FrozenContractViolation, HookMismatch
from .occlusion import ALL_CLASSES, derive_seed, occlude_pixels, sample_spec

NO_VARIANT = "none"
VARIANT_CHOICES = (NO_VARIANT, *(v.value for v in Variant))


class OcclusionAwareModel(nn.Module):
    """Maps clips ``(N, f, 64, 64)`` to signatures ``(N, parts, E)``.

    ``beta_t`` may be passed precomputed; otherwise it is taken from the
    frozen detector on the same clips.
    """

    def __init__(self, backbone: nn.Module, injector: AwarenessInjector | None = None,
                 detector: OcclusionDetector | None = None):
        super().__init__()
        if injector is not None:
            missing = [h for h in injector.hook_names if h not in backbone.hooks]
            if missing:
                raise HookMismatch(f"backbone lacks hooks {missing}")
        self.backbone = backbone
        self.injector = injector
        # kept outside the module tree so optimizers and state_dict never see it
        self.__dict__["detector"] = detector

    @property
    def variant(self) -> str:
        return self.injector.variant.value if self.injector is not None else NO_VARIANT

    @property
    def needs_beta(self) -> bool:
        return self.injector is not None

    def beta_for(self, clips: torch.Tensor) -> torch.Tensor:
        if self.detector is None:
            raise HookMismatch("an aware model needs a detector or precomputed beta")
        if not self.detector.frozen:
            raise FrozenContractViolation("the detector must be frozen before use")
        return self.detector.video_features(clips)

    def forward(self, clips: torch.Tensor, beta_t: torch.Tensor | None = None) -> torch.Tensor:
        if self.injector is None:
            return self.backbone(clips)
        if beta_t is None:
            beta_t = self.beta_for(clips)
        beta_t = beta_t.to(self.backbone.conv1.weight.dtype if hasattr(self.backbone, "conv1")
                           else clips.dtype)
        return self.backbone(clips, lambda name, x: self.injector(name, x, beta_t))

    def embed_video(self, video: SilhouetteVideo | np.ndarray,
                    beta_t: np.ndarray | torch.Tensor | None = None) -> GaitSignature:
        pixels = video.pixels if isinstance(video, SilhouetteVideo) else np.asarray(video)
        clips = torch.from_numpy(pixels.astype(np.float32))[None]
        if beta_t is not None:
            beta_t = torch.as_tensor(np.asarray(beta_t, dtype=np.float32))[None]
        was_training = self.training
        self.eval()
        with torch.no_grad():
            out = self(clips, beta_t)[0]
        self.train(was_training)
        return GaitSignature(out.double().numpy())


def build_model(variant: str = NO_VARIANT, config: BackboneConfig | None = None,
                detector: OcclusionDetector | None = None, seed: int = 0,
                more_channels: bool = False, beta_scale: float = 1.0) -> OcclusionAwareModel:
    config = config or BackboneConfig()
    if variant not in VARIANT_CHOICES:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANT_CHOICES}")
    backbone = ReferenceBackbone(config, seed)
    if variant == NO_VARIANT:
        return OcclusionAwareModel(backbone, None, detector)
    injector = make_injector(variant, backbone.hooks, seed + 1, more_channels=more_channels,
                             beta_scale=beta_scale)
    if injector.early_out_channels is not None:
        backbone = ReferenceBackbone(replace(config, early_out_channels=injector.early_out_channels), seed)
    return OcclusionAwareModel(backbone, injector, detector)


def model_sidecar(model: OcclusionAwareModel) -> dict:
    cfg = asdict(model.backbone.config)
    cfg["channels"] = list(cfg["channels"])
    cfg["stage_pools"] = list(cfg["stage_pools"])
    return {
        "kind": "backbone",
        "variant": model.variant,
        "more_channels": bool(model.injector is not None and model.injector.more_channels),
        "beta_scale": float(model.injector.beta_scale) if model.injector is not None else None,
        "backbone_config": cfg,
        "detector_checksum": weight_checksum(model.detector) if model.detector is not None else None,
    }


def save_model(path, model: OcclusionAwareModel, extra_tensors: dict | None = None,
               extra_sidecar: dict | None = None) -> None:
    tensors = {f"backbone.{k}": v for k, v in model.backbone.state_dict().items()}
    if model.injector is not None:
        tensors.update({f"injector.{k}": v for k, v in model.injector.state_dict().items()})
    tensors.update(extra_tensors or {})
    save_checkpoint(path, tensors, {**model_sidecar(model), **(extra_sidecar or {})})


def load_model(path, detector: OcclusionDetector | None = None) -> tuple[OcclusionAwareModel, dict]:
    tensors, sidecar = load_checkpoint(path)
    if sidecar.get("kind") != "backbone":
        raise CheckpointError(f"{path} is not a backbone checkpoint")
    cfg = dict(sidecar["backbone_config"])
    cfg["channels"] = tuple(cfg["channels"])
    cfg["stage_pools"] = tuple(cfg["stage_pools"])
    config = BackboneConfig(**{k: v for k, v in cfg.items() if k != "early_out_channels"})
    model = build_model(sidecar["variant"], config, detector, more_channels=sidecar["more_channels"])
    for prefix, module in (("backbone.", model.backbone), ("injector.", model.injector)):
        if module is None:
            continue
        state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        module.load_state_dict(state)
    return model, sidecar


class BetaCache:
    """Memoized per-frame detector features of whole occluded videos.

    Exact for a frozen detector; keys are ``(video_id, spec)``.
    """

    def __init__(self, detector: OcclusionDetector):
        if not detector.frozen:
            raise FrozenContractViolation("only a frozen detector's features may be cached")
        self.detector = detector
        self._store: dict = {}

    def __len__(self) -> int:
        return len(self._store)

    def get(self, video_id: str, spec, occluded_pixels: np.ndarray) -> np.ndarray:
        key = (video_id, spec)
        if key not in self._store:
            clips = torch.from_numpy(occluded_pixels.astype(np.float32))[None]
            self._store[key] = self.detector.video_features(clips)[0].float().numpy()
        return self._store[key]


def estimate_beta_scale(detector: OcclusionDetector, videos, classes=tuple(sorted(ALL_CLASSES)),
                        seed: int = 0, max_videos: int = 32, cache: BetaCache | None = None) -> float:
    """1 / mean L2 norm of the cumulative beta over randomly occluded videos."""
    videos = sorted(videos, key=lambda v: v.video_id)[:max_videos]
    if not videos:
        raise EmptyDataset("no videos to estimate the beta scale from")
    cache = cache or BetaCache(detector)
    norms = []
    for v in videos:
        spec = sample_spec(classes, derive_seed(seed, "beta-scale", v.video_id))
        beta = cache.get(v.video_id, spec, occlude_pixels(v.pixels, spec))
        norms.append(float(np.linalg.norm(beta.mean(axis=0))))
    mean = float(np.mean(norms))
    return 1.0 / mean if mean > 0 else 1.0


def embed_videos(model: OcclusionAwareModel, pixels: list[np.ndarray],
                 betas: list[np.ndarray | None] | None = None, batch: int = 16) -> np.ndarray:
    """Signatures ``(len(pixels), parts, E)`` in float64; equal lengths are batched."""
    betas = betas or [None] * len(pixels)
    out: list = [None] * len(pixels)
    groups: dict[int, list[int]] = {}
    for i, p in enumerate(pixels):
        groups.setdefault(len(p), []).append(i)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for idx in groups.values():
            for s in range(0, len(idx), batch):
                chunk = idx[s:s + batch]
                clips = torch.from_numpy(np.stack([pixels[i] for i in chunk]).astype(np.float32))
                beta = None
                if model.needs_beta and betas[chunk[0]] is not None:
                    beta = torch.from_numpy(np.stack([betas[i] for i in chunk]).astype(np.float32))
                sig = model(clips, beta).double().numpy()
                for i, row in zip(chunk, sig):
                    out[i] = row
    model.train(was_training)
    return np.stack(out)
