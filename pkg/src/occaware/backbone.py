"""Gait recognition backbone with named injection points.

Any backbone used here is an ``nn.Module`` called as ``module(clips, inject)``
where ``clips`` is ``(N, f, H, W)`` and ``inject(hook_name, X)`` returns the
feature that replaces ``X`` at that hook.  The reference backbone follows that
contract natively; :func:`adapt_external` validates and wraps other models.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .detector import init_fan_in_uniform
from .errors import InvalidDeclaration, ShapeMismatch

EARLY_3D = "EARLY_3D"
DEEP_FLAT = "DEEP_FLAT"
HOOK_NAMES = (EARLY_3D, DEEP_FLAT)
BETA_DIM = 64

Injector = Callable[[str, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class HookPoint:
    """A declared injection point.

    ``feature_shape`` excludes the batch axis: ``(C, f, h, w)`` for EARLY_3D
    with ``f = None`` (clip length varies) and ``(num_parts, P)`` for DEEP_FLAT.
    """

    name: str
    feature_shape: tuple

    def matches(self, x: torch.Tensor) -> bool:
        shape = tuple(x.shape[1:])
        return len(shape) == len(self.feature_shape) and all(
            want is None or want == got for want, got in zip(self.feature_shape, shape))


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, int, int] = (32, 64, 128)
    num_parts: int = 16
    embed_dim: int = 64
    frame_size: int = 64
    input_pool: int = 1  # average-pool factor applied to the input frames
    stage_pools: tuple[int, int] = (2, 2)  # spatial max-pool after stages 1 and 2
    early_out_channels: int | None = None  # width of X' at EARLY_3D when an injector widens it

    @classmethod
    def compact(cls, **overrides) -> "BackboneConfig":
        """Reduced widths and resolution for single-core experiments."""
        base = cls(channels=(16, 64, 64), num_parts=4, embed_dim=32, input_pool=4,
                   stage_pools=(2, 2))
        return replace(base, **overrides)

    @property
    def early_hw(self) -> int:
        return self.frame_size // self.input_pool // self.stage_pools[0]

    @property
    def final_hw(self) -> int:
        return self.early_hw // self.stage_pools[1]


class ReferenceBackbone(nn.Module):
    """conv3d x3 -> temporal max -> horizontal strip pooling -> part-wise FC."""

    def __init__(self, config: BackboneConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = c = config or BackboneConfig()
        c1, c2, c3 = c.channels
        if c.final_hw < 1:
            raise ValueError("input too small for the configured pooling")
        self.conv1 = nn.Conv3d(1, c1, 3, padding=1)
        self.conv2 = nn.Conv3d(c1, c2, 3, padding=1)
        self.conv3 = nn.Conv3d(c.early_out_channels or c2, c3, 3, padding=1)
        fc = torch.empty(c.num_parts, c3, c.embed_dim)
        self.head = nn.Parameter(fc)
        g = torch.Generator().manual_seed(seed)
        init_fan_in_uniform(self, g)
        with torch.no_grad():
            bound = 1.0 / c3 ** 0.5
            self.head.uniform_(-bound, bound, generator=g)

    @property
    def hooks(self) -> dict[str, HookPoint]:
        c = self.config
        return {
            EARLY_3D: HookPoint(EARLY_3D, (c.channels[1], None, c.early_hw, c.early_hw)),
            DEEP_FLAT: HookPoint(DEEP_FLAT, (c.num_parts, c.channels[2])),
        }

    @property
    def signature_shape(self) -> tuple[int, int]:
        return (self.config.num_parts, self.config.embed_dim)

    def forward(self, clips: torch.Tensor, inject: Injector | None = None) -> torch.Tensor:
        c = self.config
        if clips.dim() != 4 or clips.shape[2:] != (c.frame_size, c.frame_size):
            raise ShapeMismatch(f"expected (N, f, {c.frame_size}, {c.frame_size}), "
                                f"got {tuple(clips.shape)}")
        x = clips.unsqueeze(1).to(self.conv1.weight.dtype)  # N, 1, f, H, W
        if c.input_pool > 1:
            x = F.avg_pool3d(x, (1, c.input_pool, c.input_pool))
        x = F.relu(self.conv1(x))
        x = F.max_pool3d(x, (1, c.stage_pools[0], c.stage_pools[0]))
        x = F.relu(self.conv2(x))
        if inject is not None:
            x = inject(EARLY_3D, x)
        x = F.max_pool3d(x, (1, c.stage_pools[1], c.stage_pools[1]))
        x = F.relu(self.conv3(x))
        x = x.max(dim=2).values  # temporal max: N, C, h, w
        x = horizontal_pyramid(x, c.num_parts)  # N, parts, C
        if inject is not None:
            x = inject(DEEP_FLAT, x)
        return torch.einsum("npc,pce->npe", x, self.head)


def horizontal_pyramid(x: torch.Tensor, num_parts: int) -> torch.Tensor:
    """Split rows into ``num_parts`` strips; each strip -> max + mean over its pixels."""
    n, ch, h, w = x.shape
    if h % num_parts == 0:
        strips = x.reshape(n, ch, num_parts, (h // num_parts) * w)
        pooled = strips.max(-1).values + strips.mean(-1)
    else:
        pooled = (F.adaptive_max_pool2d(x, (num_parts, 1)) + F.adaptive_avg_pool2d(x, (num_parts, 1)))
        pooled = pooled.squeeze(-1)
    return pooled.transpose(1, 2)


class ExternalBackbone(nn.Module):
    """Wraps a model following the ``module(clips, inject)`` contract.

    Declared hook shapes are checked at registration and again on every
    injection, so a model that lies about its shapes fails loudly.
    """

    def __init__(self, module: nn.Module, hooks: Mapping[str, tuple],
                 signature_shape: tuple[int, int] | None = None, beta_dim: int = BETA_DIM):
        super().__init__()
        self.module = module
        self._hooks = validate_hooks(hooks, beta_dim)
        self._signature_shape = signature_shape

    @property
    def hooks(self) -> dict[str, HookPoint]:
        return dict(self._hooks)

    @property
    def signature_shape(self):
        return self._signature_shape

    def forward(self, clips: torch.Tensor, inject: Injector | None = None) -> torch.Tensor:
        if inject is None:
            return self.module(clips, None)

        def checked(name: str, x: torch.Tensor) -> torch.Tensor:
            hook = self._hooks.get(name)
            if hook is None:
                return x
            if not hook.matches(x):
                raise ShapeMismatch(f"{name}: declared {hook.feature_shape}, got {tuple(x.shape[1:])}")
            return inject(name, x)

        return self.module(clips, checked)


def validate_hooks(hooks: Mapping[str, tuple], beta_dim: int = BETA_DIM) -> dict[str, HookPoint]:
    if not hooks:
        raise InvalidDeclaration("an external backbone must declare at least one hook")
    out = {}
    for name, shape in hooks.items():
        if name not in HOOK_NAMES:
            raise InvalidDeclaration(f"unknown hook {name!r}")
        shape = tuple(shape)
        if name == EARLY_3D:
            if len(shape) != 4 or any(s is not None and (not isinstance(s, int) or s < 1)
                                      for s in shape):
                raise InvalidDeclaration(f"EARLY_3D needs (C, f|None, h, w), got {shape}")
            if shape[0] != beta_dim:
                raise InvalidDeclaration(
                    f"EARLY_3D channel count {shape[0]} must equal the occlusion feature width {beta_dim}")
        else:
            if len(shape) != 2 or not all(isinstance(s, int) and s >= 1 for s in shape):
                raise InvalidDeclaration(f"DEEP_FLAT needs (num_parts, P), got {shape}")
        out[name] = HookPoint(name, shape)
    return out


def adapt_external(module: nn.Module, hooks: Mapping[str, tuple],
                   signature_shape: tuple[int, int] | None = None,
                   beta_dim: int = BETA_DIM) -> ExternalBackbone:
    return ExternalBackbone(module, hooks, signature_shape, beta_dim)
