"""RD points and curves, codec evaluation, timing, and report files."""

from __future__ import annotations

import csv
import json
import os
import platform
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .codec import decode_lightfield, encode_lightfield
from .lfdata import LightFieldGrid
from .metrics import bits_per_pixel, ms_ssim_y, psnr_rgb, psnr_y

CURVE_FIELDS = ("bpp", "psnr_y", "msssim_y_db", "psnr_rgb")


@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr_y: float
    msssim_y_db: float
    psnr_rgb: float
    scene: str = ""

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError("bpp must be positive")


class RDCurve:
    """RD points of one codec, kept in strictly increasing bpp order."""

    def __init__(self, points: Iterable[RDPoint], name: str = ""):
        self.points: List[RDPoint] = sorted(points, key=lambda p: p.bpp)
        self.name = name
        bpps = [p.bpp for p in self.points]
        if any(b2 <= b1 for b1, b2 in zip(bpps, bpps[1:])):
            raise ValueError("RD curve bpp values must be strictly increasing")

    def __len__(self) -> int:
        return len(self.points)

    def rates(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    def quality(self, metric: str = "psnr_y") -> np.ndarray:
        return np.array([getattr(p, metric) for p in self.points])

    def with_metric(self, metric: str):
        """``(rates, quality)`` pair for :func:`bd_metrics` on another metric."""
        return self.rates(), self.quality(metric)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CURVE_FIELDS + ("scene",))
            for p in self.points:
                w.writerow([repr(getattr(p, f)) for f in CURVE_FIELDS] + [p.scene])
        return path

    @classmethod
    def from_csv(cls, path, name: Optional[str] = None) -> "RDCurve":
        """Read a curve CSV; metric columns other than ``bpp`` may be missing (NaN)."""
        path = Path(path)
        points = []
        with path.open() as fh:
            for row in csv.DictReader(fh):
                vals = {f: float(row[f]) if row.get(f) not in (None, "") else float("nan") for f in CURVE_FIELDS}
                points.append(RDPoint(scene=row.get("scene", "") or "", **vals))
        return cls(points, name or path.stem)


@dataclass
class EvalResult:
    point: RDPoint
    container: bytes
    reconstruction: LightFieldGrid
    encode_s: float
    decode_s: float


def evaluate_reconstruction(ref: LightFieldGrid, rec: LightFieldGrid, n_bytes: int, scene: str = "",
                            standard: str = "bt709") -> RDPoint:
    return RDPoint(
        bpp=bits_per_pixel(n_bytes, ref.h, ref.w, ref.u_count * ref.v_count),
        psnr_y=psnr_y(ref.views, rec.views, standard),
        msssim_y_db=ms_ssim_y(ref.views, rec.views, standard),
        psnr_rgb=psnr_rgb(ref.views, rec.views),
        scene=scene,
    )


def evaluate_codec(model, grid: LightFieldGrid, threads: int = 1, scene: str = "") -> EvalResult:
    t0 = time.perf_counter()
    data = encode_lightfield(grid, model, threads)
    t1 = time.perf_counter()
    rec = decode_lightfield(data, model, threads)
    t2 = time.perf_counter()
    return EvalResult(evaluate_reconstruction(grid, rec, len(data), scene), data, rec, t1 - t0, t2 - t1)


def hardware_string() -> str:
    return f"{platform.processor() or platform.machine()} ({os.cpu_count()} logical CPUs), {platform.system()}"


def benchmark_timing(grids: Sequence[LightFieldGrid], model, threads: int = 1) -> dict:
    """Wall-clock encode/decode averages over ``grids``."""
    if not grids:
        raise ValueError("benchmark needs at least one grid")
    model.frozen()  # build tables outside the timed region
    enc, dec = [], []
    for grid in grids:
        t0 = time.perf_counter()
        data = encode_lightfield(grid, model, threads)
        t1 = time.perf_counter()
        decode_lightfield(data, model, threads)
        t2 = time.perf_counter()
        enc.append(t1 - t0)
        dec.append(t2 - t1)
    return {
        "avg_encode_s": float(np.mean(enc)),
        "avg_decode_s": float(np.mean(dec)),
        "threads": threads,
        "grids": len(grids),
        "hardware": hardware_string(),
    }


def write_report(path, report: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


def point_dict(point: RDPoint) -> dict:
    return asdict(point)
