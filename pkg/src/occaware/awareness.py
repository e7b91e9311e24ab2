"""Occlusion awareness modules: combine a backbone feature X with occlusion features.

Every injector receives the per-frame features ``beta_t`` of shape
``(N, f, 64)``; variants working on flat layers use their temporal mean.
"""
from __future__ import annotations

from enum import Enum
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BETA_DIM, DEEP_FLAT, EARLY_3D, HookPoint
from .detector import CUMULATIVE, TRANSIENT, init_fan_in_uniform
from .errors import ChannelMismatch, HookMismatch, ShapeMismatch


class Variant(str, Enum):
    GUIDED_ADD = "guided-add"
    LEARNABLE_3DCONV = "learnable-3dconv"
    DEFERRED_CONCAT = "deferred-concat"
    COMPLEX_DEFERRED_CONCAT = "complex-deferred-concat"
    CONV_PLUS_DEFERRED = "conv-plus-deferred"


VARIANT_HOOKS = {
    Variant.GUIDED_ADD: (EARLY_3D,),
    Variant.LEARNABLE_3DCONV: (EARLY_3D,),
    Variant.DEFERRED_CONCAT: (DEEP_FLAT,),
    Variant.COMPLEX_DEFERRED_CONCAT: (DEEP_FLAT,),
    Variant.CONV_PLUS_DEFERRED: (EARLY_3D, DEEP_FLAT),
}
HOOK_MODE = {EARLY_3D: TRANSIENT, DEEP_FLAT: CUMULATIVE}


def _batched(x: torch.Tensor, ndim: int) -> tuple[torch.Tensor, bool]:
    return (x.unsqueeze(0), True) if x.dim() == ndim - 1 else (x, False)


def guided_add(x: torch.Tensor, beta_t: torch.Tensor) -> torch.Tensor:
    """X'[c, t, i, j] = X[c, t, i, j] + beta_t[t, c]; batch axis optional."""
    x, squeeze = _batched(x, 5)
    beta_t, _ = _batched(beta_t, 3)
    n, ch, f = x.shape[:3]
    if ch != beta_t.shape[-1]:
        raise ChannelMismatch(f"guided add needs {beta_t.shape[-1]} channels, X has {ch}")
    if beta_t.shape[:2] != (n, f):
        raise ShapeMismatch(f"beta_t {tuple(beta_t.shape)} does not match X frames ({n}, {f})")
    out = x + beta_t.permute(0, 2, 1)[..., None, None].to(x.dtype)
    return out[0] if squeeze else out


class LearnableConv3d(nn.Module):
    """Concatenate broadcast beta_t to X on channels, then one 3x3x3 conv."""

    def __init__(self, in_channels: int, out_channels: int | None = None, beta_dim: int = BETA_DIM):
        super().__init__()
        self.in_channels = in_channels
        self.beta_dim = beta_dim
        self.out_channels = out_channels or in_channels
        self.conv = nn.Conv3d(in_channels + beta_dim, self.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, beta_t: torch.Tensor) -> torch.Tensor:
        x, squeeze = _batched(x, 5)
        beta_t, _ = _batched(beta_t, 3)
        n, ch, f, h, w = x.shape
        if ch != self.in_channels or beta_t.shape != (n, f, self.beta_dim):
            raise ShapeMismatch(f"X {tuple(x.shape)} / beta_t {tuple(beta_t.shape)} do not fit "
                                f"({self.in_channels} channels, {self.beta_dim}-d beta)")
        b = beta_t.permute(0, 2, 1)[..., None, None].expand(n, self.beta_dim, f, h, w)
        out = self.conv(torch.cat([x, b.to(x.dtype)], dim=1))
        return out[0] if squeeze else out


class DeferredConcat(nn.Module):
    """Per part: [X_part || beta_c] -> affine (simple) or affine-ReLU-affine (complex).

    One map is shared by all parts.
    """

    def __init__(self, part_dim: int, beta_dim: int = BETA_DIM, complex_: bool = False):
        super().__init__()
        self.part_dim = part_dim
        self.beta_dim = beta_dim
        self.fc1 = nn.Linear(part_dim + beta_dim, part_dim)
        self.fc2 = nn.Linear(part_dim, part_dim) if complex_ else None

    def forward(self, x: torch.Tensor, beta_c: torch.Tensor) -> torch.Tensor:
        x, squeeze = _batched(x, 3)
        beta_c, _ = _batched(beta_c, 2)
        n, parts, p = x.shape
        if p != self.part_dim or beta_c.shape != (n, self.beta_dim):
            raise ShapeMismatch(f"X {tuple(x.shape)} / beta_c {tuple(beta_c.shape)} do not fit "
                                f"({self.part_dim}-d parts, {self.beta_dim}-d beta)")
        b = beta_c[:, None, :].expand(n, parts, self.beta_dim).to(x.dtype)
        out = self.fc1(torch.cat([x, b], dim=-1))
        if self.fc2 is not None:
            out = self.fc2(F.relu(out))
        return out[0] if squeeze else out


class AwarenessInjector(nn.Module):
    """The configured combination of X and beta at one or two hook points."""

    def __init__(self, variant: Variant, hooks: Mapping[str, HookPoint], beta_dim: int = BETA_DIM,
                 more_channels: bool = False, beta_scale: float = 1.0):
        super().__init__()
        # fixed multiplier on beta; brings detector features to the backbone's scale
        self.register_buffer("beta_scale", torch.tensor(float(beta_scale)))
        self.variant = Variant(variant)
        self.hook_names = VARIANT_HOOKS[self.variant]
        self.beta_dim = beta_dim
        self.more_channels = more_channels
        self.early_out_channels = None
        self.early = None
        self.deep = None
        if EARLY_3D in self.hook_names:
            ch = hooks[EARLY_3D].feature_shape[0]
            if self.variant == Variant.GUIDED_ADD:
                if ch != beta_dim:
                    raise ChannelMismatch(f"guided add needs a {beta_dim}-channel EARLY_3D hook")
            else:
                out = ch + beta_dim if more_channels else ch
                self.early = LearnableConv3d(ch, out, beta_dim)
                self.early_out_channels = out if more_channels else None
        if DEEP_FLAT in self.hook_names:
            part_dim = hooks[DEEP_FLAT].feature_shape[1]
            self.deep = DeferredConcat(part_dim, beta_dim,
                                       complex_=self.variant == Variant.COMPLEX_DEFERRED_CONCAT)

    @property
    def detector_mode(self) -> dict[str, str]:
        return {h: HOOK_MODE[h] for h in self.hook_names}

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, hook: str, x: torch.Tensor, beta_t: torch.Tensor) -> torch.Tensor:
        if hook not in self.hook_names:
            return x
        beta_t = beta_t * self.beta_scale.to(beta_t.dtype)
        if hook == EARLY_3D:
            if self.variant == Variant.GUIDED_ADD:
                return guided_add(x, beta_t)
            return self.early(x, beta_t)
        return self.deep(x, beta_t.mean(dim=-2))


def make_injector(variant: Variant | str, backbone_hooks: Mapping[str, HookPoint], rng_seed: int = 0,
                  beta_dim: int = BETA_DIM, more_channels: bool = False,
                  beta_scale: float = 1.0) -> AwarenessInjector:
    variant = Variant(variant)
    missing = [h for h in VARIANT_HOOKS[variant] if h not in backbone_hooks]
    if missing:
        raise HookMismatch(f"{variant.value} needs hooks {missing} the backbone does not declare")
    if more_channels and variant not in (Variant.LEARNABLE_3DCONV, Variant.CONV_PLUS_DEFERRED):
        raise ValueError("more_channels only applies to the learnable 3-D conv")
    injector = AwarenessInjector(variant, backbone_hooks, beta_dim, more_channels, beta_scale)
    init_fan_in_uniform(injector, torch.Generator().manual_seed(rng_seed))
    return injector
