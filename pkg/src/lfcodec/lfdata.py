"""Light field ingestion: sub-aperture image grids, rows, feature tensors, patches.

Arrays are kept channel-last. A grid stores its views as ``views[r, c]`` where
``r`` is the vertical (v) view index and ``c`` the horizontal (u) view index.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import cv2
import numpy as np

ROW_VIEWS = 8
ROW_CENTER = 3
DEFAULT_PATTERN = "view_{r:02d}_{c:02d}.{ext}"
_NAME_RE = re.compile(r"^view_(\d+)_(\d+)\.(png|ppm)$", re.IGNORECASE)

# u, v position-index conventions for the feature tensor planes
INDEX_MODES = ("half", "zero", "one")


class LightFieldError(ValueError):
    """Raised for malformed light field inputs."""


@dataclass(frozen=True)
class LightFieldGrid:
    """A grid of RGB sub-aperture images with samples in [0, 1].

    ``views`` has shape ``(v_count, u_count, h, w, 3)``.
    """

    views: np.ndarray

    def __post_init__(self):
        v = self.views
        if v.ndim != 5 or v.shape[-1] != 3:
            raise LightFieldError(f"expected (V, U, h, w, 3) views, got {v.shape}")
        if v.shape[0] == 0 or v.shape[1] == 0:
            raise LightFieldError("light field grid is empty")
        v.setflags(write=False)

    @property
    def v_count(self) -> int:
        return self.views.shape[0]

    @property
    def u_count(self) -> int:
        return self.views.shape[1]

    @property
    def h(self) -> int:
        return self.views.shape[2]

    @property
    def w(self) -> int:
        return self.views.shape[3]

    def view(self, r: int, c: int) -> np.ndarray:
        return self.views[r, c]


@dataclass(frozen=True)
class SAIRow:
    """The eight views of one grid row, shape ``(8, h, w, 3)``."""

    sais: np.ndarray
    row_index: int

    def __post_init__(self):
        if self.sais.ndim != 4 or self.sais.shape[0] != ROW_VIEWS:
            raise LightFieldError(f"a row holds exactly {ROW_VIEWS} views, got {self.sais.shape}")


@dataclass(frozen=True)
class FeatureTensor:
    """Conditioning input of one disparity module, shape ``(4, h, w, 3)``.

    Slices: view i, row-center view, constant u plane, constant v plane.
    """

    slices: np.ndarray
    view_index: int
    row_index: int

    @property
    def u(self) -> float:
        return float(self.slices[2, 0, 0, 0])

    @property
    def v(self) -> float:
        return float(self.slices[3, 0, 0, 0])


@dataclass(frozen=True)
class PatchSample:
    patch_row: np.ndarray  # (8, p, p, 3)
    row_index: int
    offset: Tuple[int, int]


def _read_image(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise LightFieldError(f"cannot read image {path}")
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    elif img.shape[-1] == 4:
        img = img[..., :3]
    img = img[..., ::-1]  # BGR -> RGB
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise LightFieldError(f"unsupported sample type {img.dtype} in {path}")
    return np.ascontiguousarray(img, dtype=np.float32) / np.float32(scale)


def _scan_layout(directory: Path) -> Tuple[int, int, str]:
    rows, cols, exts = set(), set(), set()
    for name in os.listdir(directory):
        m = _NAME_RE.match(name)
        if m:
            rows.add(int(m.group(1)))
            cols.add(int(m.group(2)))
            exts.add(m.group(3).lower())
    if not rows:
        raise LightFieldError(f"no view_RR_CC images found in {directory}")
    if len(exts) > 1:
        raise LightFieldError(f"mixed image extensions in {directory}: {sorted(exts)}")
    return max(rows) + 1, max(cols) + 1, exts.pop()


def load_sai_grid(
    directory,
    v_count: Optional[int] = None,
    u_count: Optional[int] = None,
    pattern: str = DEFAULT_PATTERN,
    ext: Optional[str] = None,
) -> LightFieldGrid:
    """Load a row-major directory of sub-aperture images.

    The grid size is inferred from the highest indices present unless given.
    Both 8- and 16-bit PNG/PPM files are scaled to [0, 1].
    """
    directory = Path(directory)
    if v_count is None or u_count is None or ext is None:
        rows, cols, found_ext = _scan_layout(directory)
        v_count = v_count or rows
        u_count = u_count or cols
        ext = ext or found_ext

    views = None
    first = None
    for r in range(v_count):
        for c in range(u_count):
            path = directory / pattern.format(r=r, c=c, ext=ext)
            if not path.exists():
                raise LightFieldError(f"missing view ({r},{c}): {path.name}")
            img = _read_image(path)
            if views is None:
                first = path
                views = np.empty((v_count, u_count) + img.shape, dtype=np.float32)
            elif img.shape != views.shape[2:]:
                raise LightFieldError(
                    f"inconsistent dimensions: {path.name} is {img.shape[:2]}, "
                    f"{first.name} is {views.shape[2:4]}"
                )
            views[r, c] = img
    return LightFieldGrid(views)


def save_sai_grid(grid: LightFieldGrid, directory, bit_depth: int = 8, ext: str = "png") -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if bit_depth == 8:
        dtype, peak = np.uint8, 255.0
    elif bit_depth == 16:
        dtype, peak = np.uint16, 65535.0
    else:
        raise ValueError("bit_depth must be 8 or 16")
    for r in range(grid.v_count):
        for c in range(grid.u_count):
            img = np.clip(grid.views[r, c], 0.0, 1.0)
            img = np.round(img * peak).astype(dtype)[..., ::-1]
            path = directory / DEFAULT_PATTERN.format(r=r, c=c, ext=ext)
            if not cv2.imwrite(str(path), np.ascontiguousarray(img)):
                raise LightFieldError(f"failed to write {path}")


def center_crop_views(grid: LightFieldGrid, target: int = ROW_VIEWS) -> LightFieldGrid:
    if target > grid.v_count or target > grid.u_count:
        raise LightFieldError(
            f"cannot crop {grid.v_count}x{grid.u_count} views to {target}x{target}"
        )
    r0 = (grid.v_count - target) // 2
    c0 = (grid.u_count - target) // 2
    if r0 == 0 and c0 == 0 and grid.v_count == target and grid.u_count == target:
        return grid
    return LightFieldGrid(np.ascontiguousarray(grid.views[r0:r0 + target, c0:c0 + target]))


def _require_8x8(grid: LightFieldGrid) -> None:
    if grid.v_count != ROW_VIEWS or grid.u_count != ROW_VIEWS:
        raise LightFieldError(f"expected an 8x8 grid, got {grid.v_count}x{grid.u_count}")


def extract_row(grid: LightFieldGrid, r: int) -> SAIRow:
    _require_8x8(grid)
    if not 0 <= r < ROW_VIEWS:
        raise LightFieldError(f"row index {r} out of range [0, {ROW_VIEWS})")
    return SAIRow(grid.views[r], r)


def position_index(k: int, mode: str = "half") -> float:
    """Map a zero-based view index to its position-plane value."""
    if mode == "half":
        return k - (ROW_VIEWS - 1) / 2.0
    if mode == "zero":
        return float(k)
    if mode == "one":
        return float(k + 1)
    raise ValueError(f"unknown index mode {mode!r}; expected one of {INDEX_MODES}")


def build_feature_tensor(
    row: SAIRow, i: int, center: int = ROW_CENTER, index_mode: str = "half"
) -> FeatureTensor:
    if not 0 <= i < ROW_VIEWS:
        raise LightFieldError(f"view index {i} out of range [0, {ROW_VIEWS})")
    img = row.sais[i]
    slices = np.empty((4,) + img.shape, dtype=img.dtype)
    slices[0] = img
    slices[1] = row.sais[center]
    slices[2] = position_index(i, index_mode)
    slices[3] = position_index(row.row_index, index_mode)
    return FeatureTensor(slices, i, row.row_index)


def patch_windows(h: int, w: int, p: int, stride: int) -> List[Tuple[int, int]]:
    """Top-left offsets of all stride-aligned p x p windows inside an h x w image."""
    if p > h or p > w:
        raise LightFieldError(f"patch size {p} exceeds image size {h}x{w}")
    if stride < 1:
        raise LightFieldError("stride must be >= 1")
    return [(s0, t0) for s0 in range(0, h - p + 1, stride) for t0 in range(0, w - p + 1, stride)]


def iter_patches(grid: LightFieldGrid, p: int = 64, stride: int = 16) -> Iterator[PatchSample]:
    _require_8x8(grid)
    windows = patch_windows(grid.h, grid.w, p, stride)
    for r in range(ROW_VIEWS):
        for s0, t0 in windows:
            yield PatchSample(grid.views[r, :, s0:s0 + p, t0:t0 + p], r, (s0, t0))


def extract_patches(grid: LightFieldGrid, p: int = 64, stride: int = 16) -> List[PatchSample]:
    return list(iter_patches(grid, p, stride))


def read_manifest(path) -> List[Path]:
    """Grid directories listed one per line; relative entries resolve against the manifest."""
    path = Path(path)
    base = path.parent
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        entry = Path(line)
        out.append(entry if entry.is_absolute() else base / entry)
    return out


def load_manifest_grids(path, target: int = ROW_VIEWS) -> List[LightFieldGrid]:
    return [center_crop_views(load_sai_grid(d), target) for d in read_manifest(path)]


def stack_rows(grids: Sequence[LightFieldGrid]) -> np.ndarray:
    """All rows of all grids as one ``(N, 8, h, w, 3)`` array."""
    return np.concatenate([g.views for g in grids], axis=0)
