"""Layered synthetic light fields with known parallax.

Each scene is a textured background plus a few textured fronto-parallel
layers. Layer ``k`` moves by ``disparity[k]`` pixels per unit view offset, so
view ``(r, c)`` shows it shifted by ``disparity * (c - 3.5)`` horizontally and
``disparity * (r - 3.5)`` vertically (either component can be switched off).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .lfdata import LightFieldGrid, save_sai_grid


@dataclass(frozen=True)
class SceneSpec:
    h: int = 64
    w: int = 64
    views: int = 8
    parallax: str = "hv"  # any of "h", "v", "hv"
    n_layers: int = 3
    disparity_range: Tuple[float, float] = (-1.0, 1.0)
    texture_sigma: Tuple[float, float] = (4.0, 10.0)
    stripe_freq: Tuple[float, float] = (0.02, 0.08)  # cycles per pixel
    seed: int = 0


def _texture(rng: np.random.Generator, h: int, w: int, sigma: float, freq_range=(0.05, 0.2)) -> np.ndarray:
    base = rng.uniform(0.15, 0.85, size=3)
    noise = rng.standard_normal((h, w, 3))
    noise = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0))
    noise /= noise.std() + 1e-12
    tex = base + 0.12 * noise
    # a few oriented stripes give strong edges for disparity to latch onto
    yy, xx = np.mgrid[0:h, 0:w]
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(*freq_range)
    stripes = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy))
    tex += 0.08 * stripes[..., None] * rng.uniform(-1, 1, size=3)
    return np.clip(tex, 0.0, 1.0)


def _shape_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    ry, rx = rng.uniform(0.15, 0.35) * h, rng.uniform(0.15, 0.35) * w
    if rng.random() < 0.5:
        d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    else:
        d = np.maximum(np.abs(yy - cy) / ry, np.abs(xx - cx) / rx)
    # one-pixel soft edge, antialiased
    return np.clip((1.0 - d) * min(ry, rx), 0.0, 1.0)


def make_scene(spec: SceneSpec) -> LightFieldGrid:
    """Render a ``views x views`` grid for the given scene description."""
    rng = np.random.default_rng(spec.seed)
    n = spec.views
    center = (n - 1) / 2.0
    margin = int(np.ceil(max(abs(d) for d in spec.disparity_range) * center)) + 2
    H, W = spec.h + 2 * margin, spec.w + 2 * margin

    layers = []
    lo, hi = spec.disparity_range
    bg_disp = rng.uniform(lo, hi) * 0.5
    layers.append((bg_disp, _texture(rng, H, W, rng.uniform(*spec.texture_sigma), spec.stripe_freq), np.ones((H, W))))
    disps = sorted(rng.uniform(lo, hi, size=spec.n_layers))
    for d in disps:
        layers.append((d, _texture(rng, H, W, rng.uniform(*spec.texture_sigma), spec.stripe_freq), _shape_mask(rng, H, W)))

    use_h = "h" in spec.parallax
    use_v = "v" in spec.parallax
    views = np.empty((n, n, spec.h, spec.w, 3), dtype=np.float32)
    for r in range(n):
        for c in range(n):
            dy_unit = (r - center) if use_v else 0.0
            dx_unit = (c - center) if use_h else 0.0
            out = np.zeros((H, W, 3))
            for d, tex, mask in layers:
                shift = (d * dy_unit, d * dx_unit)
                t = ndimage.shift(tex, shift + (0.0,), order=1, mode="nearest")
                m = ndimage.shift(mask, shift, order=1, mode="nearest")[..., None]
                out = out * (1.0 - m) + t * m
            views[r, c] = out[margin:margin + spec.h, margin:margin + spec.w]
    return LightFieldGrid(np.clip(views, 0.0, 1.0))


def make_corpus(
    n_scenes: int, h: int = 64, w: int = 64, parallax: str = "hv", seed: int = 0, **kwargs
) -> List[LightFieldGrid]:
    return [make_scene(SceneSpec(h=h, w=w, parallax=parallax, seed=seed + k, **kwargs)) for k in range(n_scenes)]


def write_corpus(directory, grids, bit_depth: int = 8) -> Path:
    """Write grids as ``scene_XX/`` directories plus a ``manifest.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for k, grid in enumerate(grids):
        name = f"scene_{k:02d}"
        save_sai_grid(grid, directory / name, bit_depth=bit_depth)
        names.append(name)
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(names) + "\n")
    return manifest
