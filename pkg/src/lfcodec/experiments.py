"""Desk-scale training experiments on synthetic light fields, with a result cache.

Each run lives in ``<cache>/<name>-<key>/`` where ``key`` hashes the run
configuration together with the source of every module that influences
training. A finished run leaves ``result.json`` next to its checkpoint and
is reused on later calls; an unfinished one resumes from its checkpoint.
Set ``LFCODEC_RECOMPUTE=1`` to ignore finished results, and
``LFCODEC_CACHE`` to move the cache (default ``~/.cache/lfcodec``).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .codec import _row_tensor, padded_size
from .entropy import QuantizerMode, quantize
from .evaluate import evaluate_codec, point_dict
from .model import LFCodecModel, load_checkpoint
from .synthetic import SceneSpec, make_corpus, make_scene
from .training import CHECKPOINT_NAME, TrainConfig, train_loop

log = logging.getLogger(__name__)

LAMBDA_LO = 0.0005
LAMBDA_HI = 0.05
PSNR_FLOOR_DB = 28.0
SURROGATE_SOFT = 0.15
SURROGATE_HARD = 0.50

# modules whose source changes what a training run produces
_TRAINING_SOURCES = ("entropy", "lfdata", "model", "synthetic", "training", "transforms", "warp")


@dataclass(frozen=True)
class CorpusSpec:
    scenes: int = 5
    size: int = 96
    parallax: str = "hv"
    seed: int = 100
    heldout_seeds: Tuple[int, ...] = (999, 998)

    def train_grids(self):
        return make_corpus(self.scenes, h=self.size, w=self.size, parallax=self.parallax, seed=self.seed)

    def heldout_grids(self):
        return [make_scene(SceneSpec(h=self.size, w=self.size, parallax=self.parallax, seed=s)) for s in self.heldout_seeds]


@dataclass(frozen=True)
class RunSpec:
    name: str
    train: TrainConfig
    corpus: CorpusSpec = field(default_factory=CorpusSpec)

    def key(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"train": self.train.to_dict(), "corpus": asdict(self.corpus)}, sort_keys=True).encode())
        h.update(source_digest().encode())
        return h.hexdigest()[:16]


def source_digest() -> str:
    here = Path(__file__).parent
    h = hashlib.sha256()
    for name in _TRAINING_SOURCES:
        h.update((here / f"{name}.py").read_bytes())
    return h.hexdigest()


def cache_root() -> Path:
    return Path(os.environ.get("LFCODEC_CACHE", Path.home() / ".cache" / "lfcodec"))


def desk_config(lam: float, steps: int = 5000, **overrides) -> TrainConfig:
    """Settings shared by the desk-scale experiments: 32 channels, 64 px patches.

    Batch 4 and learning rate 1e-3 keep two 5,000-step runs inside a two
    hour single-core budget (about 0.4 s per step on one core).
    """
    base = dict(
        lam=lam, steps=steps, channels=32, hidden=32, patch_size=64, stride=16,
        batch_size=4, learning_rate=1e-3, seed=0, checkpoint_every=250,
    )
    base.update(overrides)
    return TrainConfig(**base)


def surrogate_rate_bpp(model: LFCodecModel, grid, seed: int = 0) -> float:
    """Training rate estimate (uniform noise) over all rows of a grid, in bpp."""
    ph = padded_size(grid.h, model.pad_multiple)
    pw = padded_size(grid.w, model.pad_multiple)
    gen = torch.Generator().manual_seed(seed)
    bits = 0.0
    with torch.no_grad():
        for r in range(grid.v_count):
            y, z = model.analyze(_row_tensor(grid.views[r], ph, pw), [r])
            y_n = quantize(y, QuantizerMode.NOISE, gen)
            z_n = quantize(z, QuantizerMode.NOISE, gen) if z is not None else None
            bits += float(model.latent_bits(y_n, z_n).sum())
    return bits / (grid.u_count * grid.v_count * grid.h * grid.w)


def run_experiment(spec: RunSpec, root: Optional[Path] = None, recompute: Optional[bool] = None) -> dict:
    """Train (or reuse) one model and evaluate it on the held-out grids."""
    root = Path(root) if root is not None else cache_root()
    if recompute is None:
        recompute = os.environ.get("LFCODEC_RECOMPUTE", "") not in ("", "0")
    run_dir = root / f"{spec.name}-{spec.key()}"
    result_path = run_dir / "result.json"
    if result_path.exists() and not recompute:
        log.info("reusing %s", run_dir)
        return json.loads(result_path.read_text())

    t0 = time.perf_counter()
    res = train_loop(spec.train, spec.corpus.train_grids(), run_dir, resume=not recompute, log_every=250)
    train_s = time.perf_counter() - t0
    model = res.model.eval()

    evals = []
    for k, grid in enumerate(spec.corpus.heldout_grids()):
        ev = evaluate_codec(model, grid, scene=f"heldout_{k}")
        mse = float(np.mean((ev.reconstruction.views.astype(np.float64) - grid.views) ** 2))
        evals.append({
            "point": point_dict(ev.point),
            "mse": mse,
            "surrogate_bpp": surrogate_rate_bpp(model, grid, seed=k),
            "encode_s": ev.encode_s,
            "decode_s": ev.decode_s,
        })
    last = res.records[-1]
    result = {
        "name": spec.name,
        "key": spec.key(),
        "train_config": spec.train.to_dict(),
        "corpus": asdict(spec.corpus),
        "train_seconds": train_s,
        "final_record": asdict(last),
        "heldout": evals,
        "bpp": float(np.mean([e["point"]["bpp"] for e in evals])),
        "psnr_y": float(np.mean([e["point"]["psnr_y"] for e in evals])),
        "mse": float(np.mean([e["mse"] for e in evals])),
        "surrogate_bpp": float(np.mean([e["surrogate_bpp"] for e in evals])),
        "checkpoint": str(run_dir / CHECKPOINT_NAME),
    }
    result_path.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def load_result_model(result: dict) -> LFCodecModel:
    model, _ = load_checkpoint(result["checkpoint"])
    return model.eval()


def rd_behavior_specs(steps: int = 5000) -> List[RunSpec]:
    corpus = CorpusSpec(parallax="hv")
    return [
        RunSpec("rd_lo", desk_config(LAMBDA_LO, steps), corpus),
        RunSpec("rd_hi", desk_config(LAMBDA_HI, steps), corpus),
    ]


def disparity_effect_specs(steps: int = 5000, lam: float = LAMBDA_HI) -> List[RunSpec]:
    """Full model against a color-only variant on purely vertical parallax."""
    corpus = CorpusSpec(parallax="v")
    full = desk_config(lam, steps)
    return [
        RunSpec("vpar_full", full, corpus),
        RunSpec("vpar_nodisp", replace(full, use_disparity=False), corpus),
    ]


def rd_behavior(steps: int = 5000, root: Optional[Path] = None) -> Dict[str, object]:
    lo, hi = (run_experiment(s, root) for s in rd_behavior_specs(steps))
    return {
        "lo": lo,
        "hi": hi,
        "bpp_increases": hi["bpp"] > lo["bpp"],
        "mse_decreases": hi["mse"] < lo["mse"],
        "psnr_floor_met": hi["psnr_y"] >= PSNR_FLOOR_DB,
        "train_seconds": lo["train_seconds"] + hi["train_seconds"],
    }


def disparity_effect(steps: int = 5000, root: Optional[Path] = None) -> Dict[str, object]:
    full, nodisp = (run_experiment(s, root) for s in disparity_effect_specs(steps))
    return {"full": full, "nodisp": nodisp, "full_beats_nodisp": full["mse"] < nodisp["mse"]}


def surrogate_gap(result: dict) -> float:
    """Relative gap between the noise-based rate and the coded bpp."""
    return abs(result["surrogate_bpp"] - result["bpp"]) / result["bpp"]
