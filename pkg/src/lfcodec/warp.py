"""Backward bilinear warping with clamp-to-edge borders."""

from __future__ import annotations

import torch


def bilinear_warp(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``image`` at ``(s + dy, t + dx)`` for every output pixel ``(s, t)``.

    ``image`` is ``(N, C, H, W)`` and ``flow`` is ``(N, 2, H, W)`` holding
    ``(dx, dy)`` in pixels. Sample positions are clamped to the image, so the
    result is a convex combination of source pixels. Differentiable in both
    arguments.
    """
    if image.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError("expected image (N, C, H, W) and flow (N, 2, H, W)")
    n, c, h, w = image.shape
    if flow.shape[0] != n or flow.shape[2:] != (h, w):
        raise ValueError(f"flow shape {tuple(flow.shape)} does not match image {tuple(image.shape)}")
    dtype = image.dtype
    flow = flow.to(dtype)
    ys = torch.arange(h, dtype=dtype, device=image.device).view(1, h, 1)
    xs = torch.arange(w, dtype=dtype, device=image.device).view(1, 1, w)
    sy = (ys + flow[:, 1]).clamp(0, h - 1)
    sx = (xs + flow[:, 0]).clamp(0, w - 1)
    y0 = torch.floor(sy).detach()
    x0 = torch.floor(sx).detach()
    wy = sy - y0
    wx = sx - x0
    y0i = y0.long()
    x0i = x0.long()
    y1i = (y0i + 1).clamp(max=h - 1)
    x1i = (x0i + 1).clamp(max=w - 1)

    flat = image.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(n, 1, h * w).expand(n, c, h * w)
        return torch.gather(flat, 2, idx).view(n, c, h, w)

    wy = wy.unsqueeze(1)
    wx = wx.unsqueeze(1)
    top = gather(y0i, x0i) * (1 - wx) + gather(y0i, x1i) * wx
    bottom = gather(y1i, x0i) * (1 - wx) + gather(y1i, x1i) * wx
    return top * (1 - wy) + bottom * wy


def warp_image(image, flow) -> torch.Tensor:
    """Channel-last convenience form: ``(H, W, C)`` image, ``(H, W, 2)`` flow."""
    image = torch.as_tensor(image)
    flow = torch.as_tensor(flow)
    out = bilinear_warp(image.permute(2, 0, 1).unsqueeze(0), flow.permute(2, 0, 1).unsqueeze(0))
    return out.squeeze(0).permute(1, 2, 0)


def assemble_reconstruction(x_tilde: torch.Tensor, flows: torch.Tensor) -> torch.Tensor:
    """Warp each view slice by its own flow.

    ``x_tilde`` is ``(N, 3, V, H, W)`` and ``flows`` is ``(N, V, 2, H, W)``;
    slice ``i`` is warped only by ``flows[:, i]``.
    """
    n, c, v, h, w = x_tilde.shape
    if flows.dim() != 5 or flows.shape[1] != v:
        raise ValueError(f"expected {v} disparity maps, got {flows.shape[1] if flows.dim() == 5 else flows.shape}")
    imgs = x_tilde.permute(0, 2, 1, 3, 4).reshape(n * v, c, h, w)
    out = bilinear_warp(imgs, flows.reshape(n * v, 2, h, w))
    return out.reshape(n, v, c, h, w).permute(0, 2, 1, 3, 4)
