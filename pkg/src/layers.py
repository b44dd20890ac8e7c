"""Numerical building blocks shared by the manipulation and synthesis stages.

Functional ops come first; they are pure given an explicit rng. The `nn.Module`
wrappers below hold raw parameters in the equalized learning-rate form
(unit-normal init, scaled by 1/sqrt(fan_in) at call time) and delegate to them.

Conventions:
 - feature maps are [B, C, H, W]; masks are one-hot [B, R, H, W];
   region style matrices are [B, R, D].
 - EPS = 1e-8 guards every sqrt used as a divisor.
 - modulated ops use zero padding, stride 1 and "same" output size; resampling
   is always an explicit `resample_blur`.
"""
from __future__ import annotations
import math
from typing import Callable, Optional

import torch
from torch import nn
from torch.nn import functional as F

from .guardrails import DimensionError, guard_finite, guard_same_spatial

EPS = 1e-8
_BLUR_TAPS = (1.0, 2.0, 1.0)

Projection = Callable[[torch.Tensor], torch.Tensor]


def equalized_scale(weight: torch.Tensor, fan_in: int) -> torch.Tensor:
    if fan_in <= 0:
        raise DimensionError(f"fan_in must be positive, got {fan_in}")
    return weight * (1.0 / math.sqrt(fan_in))


def pixel_norm(v: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    dim = 1 if v.ndim > 1 else 0
    return v * torch.rsqrt(v.pow(2).mean(dim=dim, keepdim=True) + eps)


def fused_leaky_relu(h: torch.Tensor, bias: torch.Tensor, negative_slope: float = 0.2,
                     scale: float = math.sqrt(2.0)) -> torch.Tensor:
    if bias.numel() != h.shape[1]:
        raise DimensionError(f"bias has {bias.numel()} entries for {h.shape[1]} channels")
    shape = [1, -1] + [1] * (h.ndim - 2)
    return F.leaky_relu(h + bias.view(*shape), negative_slope) * scale


def _check_conv(h: torch.Tensor, weight: torch.Tensor) -> None:
    if h.ndim != 4 or weight.ndim != 4:
        raise DimensionError("expected 4-D feature map and 4-D kernel")
    if weight.shape[1] != h.shape[1]:
        raise DimensionError(f"kernel expects {weight.shape[1]} input channels, features have {h.shape[1]}")
    k = weight.shape[-1]
    if weight.shape[-2] != k or k % 2 == 0:
        raise DimensionError(f"kernel must be square with odd size, got {tuple(weight.shape[-2:])}")


def modulated_conv(h: torch.Tensor, weight: torch.Tensor, style: torch.Tensor,
                   demodulate: bool = True, eps: float = EPS) -> torch.Tensor:
    """conv(w, s*h) / sigma_E(w, s) with a per-channel style s of shape [B, Cin]."""
    _check_conv(h, weight)
    b, cin, height, width = h.shape
    if style.shape != (b, cin):
        raise DimensionError(f"style shape {tuple(style.shape)} does not match ({b}, {cin})")
    guard_finite("features", h)
    guard_finite("style", style)
    cout, _, k, _ = weight.shape
    w = weight.unsqueeze(0) * style.view(b, 1, cin, 1, 1)
    if demodulate:
        w = w * torch.rsqrt(w.pow(2).sum(dim=(2, 3, 4), keepdim=True) + eps)
    out = F.conv2d(h.reshape(1, b * cin, height, width), w.reshape(b * cout, cin, k, k),
                   padding=k // 2, groups=b)
    return out.view(b, cout, height, width)


def spatial_demodulated_conv(h: torch.Tensor, weight: torch.Tensor, s: torch.Tensor,
                             demodulate: bool = True, eps: float = EPS) -> torch.Tensor:
    """conv(w, s*h) / sqrt(conv(w^2, s^2) + eps) for a spatial style s of the same shape as h.

    s^2 is edge-padded, so a spatially uniform s gives exactly the ModConv result.
    """
    _check_conv(h, weight)
    if s.shape != h.shape:
        raise DimensionError(f"spatial style {tuple(s.shape)} does not match features {tuple(h.shape)}")
    guard_finite("features", h)
    guard_finite("spatial style", s)
    pad = weight.shape[-1] // 2
    out = F.conv2d(s * h, weight, padding=pad)
    if demodulate:
        s2 = s.pow(2)
        if pad:
            s2 = F.pad(s2, (pad, pad, pad, pad), mode="replicate")
        out = out * torch.rsqrt(F.conv2d(s2, weight.pow(2)) + eps)
    return out


def scatter_regions(region_values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """[B, R, C] per-region vectors painted through a one-hot mask -> [B, C, H, W]."""
    return torch.einsum("brc,brhw->bchw", region_values, mask)


def build_spatial_style(sm: Optional[torch.Tensor], mask: torch.Tensor, alpha_raw: torch.Tensor,
                        style_affine: Optional[Projection], mask_proj: Projection,
                        mask_only: bool = False) -> torch.Tensor:
    if mask_only:
        return mask_proj(mask)
    if sm is None or style_affine is None:
        raise DimensionError("style matrix and affine map are required unless mask_only")
    if sm.ndim != 3 or sm.shape[1] != mask.shape[1] or sm.shape[0] != mask.shape[0]:
        raise DimensionError(f"style matrix {tuple(sm.shape)} does not match mask {tuple(mask.shape)}")
    alpha = torch.sigmoid(alpha_raw)
    return alpha * scatter_regions(style_affine(sm), mask) + (1 - alpha) * mask_proj(mask)


def sac(h: torch.Tensor, weight: torch.Tensor, sm: Optional[torch.Tensor], mask: torch.Tensor,
        alpha_raw: torch.Tensor, style_affine: Optional[Projection], mask_proj: Projection,
        demodulate: bool = True, mask_only: bool = False, eps: float = EPS) -> torch.Tensor:
    """Semantically adaptive convolution: ModConv with s = a*scatter(A(sm), M) + (1-a)*P(M)."""
    guard_same_spatial(h, mask, "sac features/mask")
    s = build_spatial_style(sm, mask, alpha_raw, style_affine, mask_proj, mask_only)
    return spatial_demodulated_conv(h, weight, s, demodulate, eps)


def mask_average_pool(features: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean feature vector per mask region -> [B, R, C]; empty regions give zero rows."""
    guard_same_spatial(features, mask, "mask_average_pool")
    sums = torch.einsum("bchw,brhw->brc", features, mask)
    counts = mask.sum(dim=(2, 3)).unsqueeze(-1)
    return sums / counts.clamp(min=1.0)


def resample_mask(mask: torch.Tensor, size) -> torch.Tensor:
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask
    return F.interpolate(mask, size=tuple(size), mode="nearest")


def blur(h: torch.Tensor) -> torch.Tensor:
    taps = torch.tensor(_BLUR_TAPS, dtype=h.dtype, device=h.device)
    kernel = torch.outer(taps, taps)
    kernel = (kernel / kernel.sum()).expand(h.shape[1], 1, 3, 3)
    return F.conv2d(F.pad(h, (1, 1, 1, 1), mode="replicate"), kernel, groups=h.shape[1])


def resample_blur(h: torch.Tensor, direction: str) -> torch.Tensor:
    if direction == "up":
        return blur(F.interpolate(h, scale_factor=2, mode="nearest"))
    if direction == "down":
        if h.shape[-1] % 2 or h.shape[-2] % 2:
            raise DimensionError(f"down-sampling needs even dims, got {tuple(h.shape[-2:])}")
        return F.avg_pool2d(blur(h), 2)
    raise ValueError(f"unknown direction {direction!r}")


def noise_inject(h: torch.Tensor, strength: torch.Tensor, noise: Optional[torch.Tensor] = None,
                 generator: Optional[torch.Generator] = None) -> torch.Tensor:
    if noise is None:
        noise = torch.randn(h.shape[0], 1, h.shape[2], h.shape[3], generator=generator,
                            dtype=h.dtype, device=h.device)
    return h + strength.view(1, -1, 1, 1) * noise


class EqualConv2d(nn.Module):
    def __init__(self, in_channel: int, out_channel: int, kernel_size: int, stride: int = 1,
                 padding: int = 0, bias: bool = True, bias_init: float = 0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channel, in_channel, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.full((out_channel,), float(bias_init))) if bias else None
        self.fan_in = in_channel * kernel_size ** 2
        self.stride = stride
        self.padding = padding

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.conv2d(x, equalized_scale(self.weight, self.fan_in), bias=self.bias,
                        stride=self.stride, padding=self.padding)

    def __repr__(self):
        return (f"{self.__class__.__name__}({self.weight.shape[1]}, {self.weight.shape[0]},"
                f" {self.weight.shape[2]}, stride={self.stride}, padding={self.padding})")


class EqualLinear(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, bias: bool = True, bias_init: float = 0.0,
                 lr_mul: float = 1.0, activation: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_dim, in_dim).div_(lr_mul))
        self.bias = nn.Parameter(torch.full((out_dim,), float(bias_init))) if bias else None
        self.in_dim = in_dim
        self.lr_mul = lr_mul
        self.activation = activation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        weight = equalized_scale(self.weight, self.in_dim) * self.lr_mul
        bias = self.bias * self.lr_mul if self.bias is not None else None
        if self.activation:
            out = F.linear(x, weight)
            if bias is None:
                return F.leaky_relu(out, 0.2) * math.sqrt(2.0)
            flat = out.reshape(-1, out.shape[-1])
            return fused_leaky_relu(flat, bias).view_as(out)
        return F.linear(x, weight, bias=bias)


class FusedLeakyReLU(nn.Module):
    def __init__(self, channel: int):
        super().__init__()
        self.bias = nn.Parameter(torch.zeros(channel))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return fused_leaky_relu(h, self.bias)


class NoiseInjection(nn.Module):
    """Per-channel strength (init 0) times a single-channel unit-normal field."""

    def __init__(self, channel: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(channel))

    def forward(self, h: torch.Tensor, noise: Optional[torch.Tensor] = None,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
        return noise_inject(h, self.weight, noise=noise, generator=generator)


class ModulatedConv2d(nn.Module):
    def __init__(self, in_channel: int, out_channel: int, kernel_size: int, style_dim: int,
                 demodulate: bool = True, upsample: bool = False, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channel, in_channel, kernel_size, kernel_size))
        self.fan_in = in_channel * kernel_size ** 2
        self.modulation = EqualLinear(style_dim, in_channel, bias_init=1.0)
        self.bias = nn.Parameter(torch.zeros(out_channel)) if bias else None
        self.demodulate = demodulate
        self.upsample = upsample

    def forward(self, h: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            h = resample_blur(h, "up")
        out = modulated_conv(h, equalized_scale(self.weight, self.fan_in), self.modulation(style),
                             demodulate=self.demodulate)
        if self.bias is not None:
            out = out + self.bias.view(1, -1, 1, 1)
        return out


class SemanticAdaptiveConv2d(nn.Module):
    """SAC layer. `mask_only=True` is the SAC* variant: conditioning from the mask alone."""

    def __init__(self, in_channel: int, out_channel: int, kernel_size: int, num_classes: int,
                 style_dim: int, demodulate: bool = True, upsample: bool = False,
                 mask_only: bool = False, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channel, in_channel, kernel_size, kernel_size))
        self.fan_in = in_channel * kernel_size ** 2
        self.mask_proj = EqualConv2d(num_classes, in_channel, 1, bias_init=1.0)
        self.style_affine = None if mask_only else EqualLinear(style_dim, in_channel, bias_init=1.0)
        self.alpha_raw = nn.Parameter(torch.zeros(()))
        self.bias = nn.Parameter(torch.zeros(out_channel)) if bias else None
        self.demodulate = demodulate
        self.upsample = upsample
        self.mask_only = mask_only

    @property
    def alpha(self) -> torch.Tensor:
        return torch.sigmoid(self.alpha_raw)

    def conditioning(self, sm: Optional[torch.Tensor], mask: torch.Tensor) -> torch.Tensor:
        return build_spatial_style(sm, mask, self.alpha_raw, self.style_affine, self.mask_proj,
                                   self.mask_only)

    def forward(self, h: torch.Tensor, sm: Optional[torch.Tensor], mask: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            h = resample_blur(h, "up")
        mask = resample_mask(mask, h.shape[-2:])
        out = sac(h, equalized_scale(self.weight, self.fan_in), sm, mask, self.alpha_raw,
                  self.style_affine, self.mask_proj, demodulate=self.demodulate,
                  mask_only=self.mask_only)
        if self.bias is not None:
            out = out + self.bias.view(1, -1, 1, 1)
        return out
