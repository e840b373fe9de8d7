"""Strided 3D convolution stacks with GDN/IGDN nonlinearities.

Modules work on batched ``(N, C, D, H, W)`` tensors. The depth axis is the
angular axis of a row (8 views for the color transforms, 4 feature slices
for the disparity transforms); strides are ``(1, 2, 2)`` so only the spatial
axes are resampled.

The eight disparity transforms are evaluated as one grouped convolution
stack: channels are laid out group-major, so group ``g`` owns channels
``[g * c, (g + 1) * c)`` in every layer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

FULL_SCALE_BOTTLENECKS = (190, 320, 512, 720)
SPATIAL_STRIDE = (1, 2, 2)


@dataclass(frozen=True)
class TransformConfig:
    """Layer counts and widths for the color and disparity transforms.

    ``channels`` is the color bottleneck width. The full-scale values are
    listed in ``FULL_SCALE_BOTTLENECKS``; anything else is a desk-scale preset.
    """

    channels: int = 32
    hidden: int = 32
    disparity_channels: int = 8
    disparity_hidden: int = 8
    color_layers: int = 4
    disparity_layers: int = 3
    kernel: int = 3
    flow_limit: float = 16.0
    views: int = 8
    share_disparity: bool = False
    use_disparity: bool = True
    index_mode: str = "half"
    row_center: int = 3

    @property
    def full_scale(self) -> bool:
        return self.channels in FULL_SCALE_BOTTLENECKS

    @property
    def color_factor(self) -> int:
        return 2 ** self.color_layers

    @property
    def disparity_factor(self) -> int:
        return 2 ** self.disparity_layers

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransformConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class Conv3DLayer(nn.Module):
    """3D convolution with 'same'-style padding.

    ``mode="down"`` is a strided convolution (output extent ``ceil(n / s)``),
    ``mode="up"`` a strided transposed convolution (output extent ``n * s``).
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        mode: str = "down",
        stride: Tuple[int, int, int] = SPATIAL_STRIDE,
        kernel: int = 3,
        groups: int = 1,
    ):
        super().__init__()
        if mode not in ("down", "up"):
            raise ValueError(f"mode must be 'down' or 'up', got {mode!r}")
        if in_channels % groups or out_channels % groups:
            raise ValueError("channel counts must be divisible by groups")
        self.mode = mode
        self.stride = tuple(stride)
        self.kernel = kernel
        self.groups = groups
        self.in_channels = in_channels
        self.out_channels = out_channels
        k3 = (kernel,) * 3
        if mode == "down":
            shape = (out_channels, in_channels // groups) + k3
        else:
            shape = (in_channels, out_channels // groups) + k3
        fan_in = (in_channels // groups) * kernel ** 3
        self.weight = nn.Parameter(torch.randn(shape) * math.sqrt(2.0 / fan_in))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        pad = self.kernel // 2
        if self.mode == "down":
            return F.conv3d(x, self.weight, self.bias, self.stride, pad, groups=self.groups)
        out_pad = tuple(s - 1 for s in self.stride)
        return F.conv_transpose3d(
            x, self.weight, self.bias, self.stride, pad, out_pad, groups=self.groups
        )


class GDN(nn.Module):
    """Generalized divisive normalization, or its approximate inverse.

    ``y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2)`` (IGDN multiplies). With
    ``groups > 1`` gamma is block diagonal, one ``c x c`` block per group.
    beta and gamma are stored as squares of free parameters, beta floored at
    ``beta_min``.
    """

    def __init__(
        self,
        channels: int,
        inverse: bool = False,
        groups: int = 1,
        beta_min: float = 1e-6,
        gamma_init: float = 0.1,
    ):
        super().__init__()
        if channels % groups:
            raise ValueError("channels must be divisible by groups")
        self.inverse = inverse
        self.groups = groups
        self.channels = channels
        self.beta_min = beta_min
        c = channels // groups
        self.beta_param = nn.Parameter(torch.full((channels,), math.sqrt(1.0 - beta_min)))
        gamma = math.sqrt(gamma_init) * torch.eye(c)
        self.gamma_param = nn.Parameter(gamma.repeat(groups, 1, 1))

    @property
    def beta(self) -> torch.Tensor:
        return self.beta_param ** 2 + self.beta_min

    @property
    def gamma(self) -> torch.Tensor:
        return self.gamma_param ** 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        n = x.shape[0]
        g = self.groups
        c = self.channels // g
        xs = x.reshape(n, g, c, -1)
        norm = torch.matmul(self.gamma, xs * xs) + self.beta.view(g, c, 1)
        ys = xs * torch.sqrt(norm) if self.inverse else xs * torch.rsqrt(norm)
        return ys.reshape(x.shape)


class AnalysisTransform(nn.Module):
    """Down-convolutions with GDN between them; the last layer is linear."""

    def __init__(self, in_ch: int, hidden: int, out_ch: int, layers: int, kernel: int = 3, groups: int = 1):
        super().__init__()
        mods = []
        for k in range(layers):
            ci = in_ch if k == 0 else hidden
            co = out_ch if k == layers - 1 else hidden
            mods.append(Conv3DLayer(ci, co, "down", kernel=kernel, groups=groups))
            if k < layers - 1:
                mods.append(GDN(co, groups=groups))
        self.layers = nn.Sequential(*mods)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class SynthesisTransform(nn.Module):
    """Up-convolutions with IGDN between them; the output layer is linear."""

    def __init__(self, in_ch: int, hidden: int, out_ch: int, layers: int, kernel: int = 3, groups: int = 1):
        super().__init__()
        mods = []
        for k in range(layers):
            ci = in_ch if k == 0 else hidden
            co = out_ch if k == layers - 1 else hidden
            mods.append(Conv3DLayer(ci, co, "up", kernel=kernel, groups=groups))
            if k < layers - 1:
                mods.append(GDN(co, inverse=True, groups=groups))
        self.layers = nn.Sequential(*mods)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


def soft_clamp(x: torch.Tensor, limit: float) -> torch.Tensor:
    return limit * torch.tanh(x / limit)


class DisparityBank(nn.Module):
    """The per-view disparity analysis/synthesis pairs.

    Inputs are ``(N, G, 3, 4, H, W)`` feature tensors (G = number of views);
    outputs are latents ``(N, G, Cz, 4, H/8, W/8)`` and flows ``(N, G, 2, H, W)``.
    With ``shared=True`` a single transform pair serves every view.
    """

    def __init__(self, cfg: TransformConfig):
        super().__init__()
        self.views = cfg.views
        self.shared = cfg.share_disparity
        self.flow_limit = cfg.flow_limit
        self.latent_channels = cfg.disparity_channels
        g = 1 if self.shared else cfg.views
        self.analysis = AnalysisTransform(
            3 * g, cfg.disparity_hidden * g, cfg.disparity_channels * g,
            cfg.disparity_layers, cfg.kernel, groups=g,
        )
        self.synthesis = SynthesisTransform(
            cfg.disparity_channels * g, cfg.disparity_hidden * g, 2 * g,
            cfg.disparity_layers, cfg.kernel, groups=g,
        )

    def _fold(self, t: torch.Tensor) -> torch.Tensor:
        n, g = t.shape[:2]
        if self.shared:
            return t.reshape((n * g,) + t.shape[2:])
        return t.reshape((n, g * t.shape[2]) + t.shape[3:])

    def _unfold(self, t: torch.Tensor, n: int) -> torch.Tensor:
        g = self.views
        if self.shared:
            return t.reshape((n, g) + t.shape[1:])
        return t.reshape((n, g, t.shape[1] // g) + t.shape[2:])

    def analyze(self, features: torch.Tensor) -> torch.Tensor:
        n = features.shape[0]
        return self._unfold(self.analysis(self._fold(features)), n)

    def synthesize(self, latents: torch.Tensor) -> torch.Tensor:
        n = latents.shape[0]
        out = self._unfold(self.synthesis(self._fold(latents)), n)  # (N, G, 2, 4, H, W)
        return soft_clamp(out.mean(dim=3), self.flow_limit)


# ---------------------------------------------------------------------------
# Single-sample, channel-last helpers


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def to_ncdhw(x) -> torch.Tensor:
    """``(D, H, W, C)`` -> ``(1, C, D, H, W)``."""
    return _as_tensor(x).permute(3, 0, 1, 2).unsqueeze(0)


def from_ncdhw(x: torch.Tensor) -> torch.Tensor:
    """``(1, C, D, H, W)`` -> ``(D, H, W, C)``."""
    return x.squeeze(0).permute(1, 2, 3, 0)


def conv3d_forward(x, layer: Conv3DLayer) -> torch.Tensor:
    """Apply one layer to a channel-last ``(D, H, W, C_in)`` volume."""
    return from_ncdhw(layer(to_ncdhw(x).to(layer.weight.dtype)))


def gdn_forward(x, beta, gamma, inverse: bool = False) -> torch.Tensor:
    """GDN over the last axis of ``x`` with explicit ``beta`` (C,) and ``gamma`` (C, C)."""
    x = _as_tensor(x)
    beta = _as_tensor(beta).to(x.dtype)
    gamma = _as_tensor(gamma).to(x.dtype)
    if x.shape[-1] != beta.shape[0] or gamma.shape != (beta.shape[0],) * 2:
        raise ValueError("channel count mismatch between input and GDN parameters")
    norm = beta + torch.matmul(x * x, gamma.T)
    return x * torch.sqrt(norm) if inverse else x / torch.sqrt(norm)


def igdn_forward(x, beta, gamma) -> torch.Tensor:
    return gdn_forward(x, beta, gamma, inverse=True)


def _check_multiple(h: int, w: int, factor: int) -> None:
    if h % factor or w % factor:
        raise ValueError(f"spatial size {h}x{w} must be a multiple of {factor}")


def color_analysis(x, transform: AnalysisTransform) -> torch.Tensor:
    """``(8, h, w, 3)`` row -> ``(8, h/16, w/16, C)`` latent."""
    x = _as_tensor(x)
    n_down = sum(isinstance(m, Conv3DLayer) for m in transform.layers)
    _check_multiple(x.shape[1], x.shape[2], 2 ** n_down)
    return from_ncdhw(transform(to_ncdhw(x)))


def color_synthesis(y, transform: SynthesisTransform) -> torch.Tensor:
    """``(8, h/16, w/16, C)`` latent -> ``(8, h, w, 3)`` intermediate reconstruction."""
    return from_ncdhw(transform(to_ncdhw(y)))


def disparity_analysis(f, transform: AnalysisTransform) -> torch.Tensor:
    """``(4, h, w, 3)`` feature tensor -> ``(4, h/8, w/8, 8)`` latent (ungrouped transform)."""
    f = _as_tensor(f)
    n_down = sum(isinstance(m, Conv3DLayer) for m in transform.layers)
    _check_multiple(f.shape[1], f.shape[2], 2 ** n_down)
    return from_ncdhw(transform(to_ncdhw(f)))


def disparity_synthesis(z, transform: SynthesisTransform, flow_limit: float = 16.0) -> torch.Tensor:
    """``(4, h/8, w/8, 8)`` latent -> ``(h, w, 2)`` flow in pixels."""
    out = transform(to_ncdhw(z))  # (1, 2, 4, h, w)
    flow = soft_clamp(out.mean(dim=2), flow_limit)
    return flow.squeeze(0).permute(1, 2, 0)

