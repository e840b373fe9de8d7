"""Joint rate-distortion training of the transforms and priors."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .entropy import QuantizerMode
from .lfdata import ROW_VIEWS, LightFieldGrid, PatchSample, load_manifest_grids, patch_windows
from .model import LFCodecModel, load_checkpoint, save_checkpoint
from .transforms import TransformConfig

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = (0.0005, 0.002, 0.01, 0.05)
# distortion is MSE on [0, 1] samples expressed on the 8-bit scale
DISTORTION_SCALE = 255.0 ** 2
CHECKPOINT_NAME = "checkpoint.npz"
LOG_NAME = "rd_log.csv"
CONFIG_NAME = "config.json"


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 0.01
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-7
    batch_size: int = 30
    steps: int = 1000
    seed: int = 0
    patch_size: int = 64
    stride: int = 16
    channels: int = 32
    hidden: int = 32
    disparity_hidden: int = 8
    use_disparity: bool = True
    share_disparity: bool = False
    index_mode: str = "half"
    distortion_scale: float = DISTORTION_SCALE
    checkpoint_every: int = 0
    lr_decay_steps: int = 0  # 0 disables the step decay
    lr_decay_factor: float = 0.1

    def __post_init__(self):
        for name in ("learning_rate", "adam_epsilon", "batch_size", "patch_size", "stride", "channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lam < 0 or self.steps < 0:
            raise ValueError("lambda and steps must be non-negative")
        if self.patch_size % 16:
            raise ValueError("patch size must be a multiple of 16")

    def transform_config(self) -> TransformConfig:
        return TransformConfig(
            channels=self.channels,
            hidden=self.hidden,
            disparity_hidden=self.disparity_hidden,
            use_disparity=self.use_disparity,
            share_disparity=self.share_disparity,
            index_mode=self.index_mode,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class RDRecord:
    step: int
    loss: float
    rate_bpp: float
    mse: float
    lam: float

    def row(self) -> list:
        return [self.step, repr(self.loss), repr(self.rate_bpp), repr(self.mse), repr(self.lam)]


class TrainingDiverged(RuntimeError):
    def __init__(self, record: RDRecord):
        super().__init__(f"non-finite loss at step {record.step}: {record}")
        self.record = record


@dataclass
class RDTerms:
    loss: torch.Tensor
    rate_bpp: torch.Tensor
    mse: torch.Tensor


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_epsilon
    )


def new_model(cfg: TrainConfig) -> LFCodecModel:
    torch.manual_seed(cfg.seed)
    return LFCodecModel(cfg.transform_config())


def step_generator(seed: int, step: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed((seed * 1_000_003 + step) % (2 ** 63))
    return g


def batch_from_patches(patches: Sequence[PatchSample]) -> Tuple[torch.Tensor, torch.Tensor]:
    """``(B, 3, 8, p, p)`` row tensor and ``(B,)`` row indices."""
    x = np.stack([p.patch_row for p in patches]).astype(np.float32)
    rows = torch.tensor([p.row_index for p in patches], dtype=torch.long)
    return torch.from_numpy(x).permute(0, 4, 1, 2, 3).contiguous(), rows


def rd_loss(
    model,
    x: torch.Tensor,
    rows,
    lam: float,
    generator: Optional[torch.Generator] = None,
    distortion_scale: float = DISTORTION_SCALE,
    distortion_mode=QuantizerMode.STE,
) -> RDTerms:
    """``L = rate_bpp + lam * distortion_scale * mse`` for a batch of rows.

    The rate is the estimated bits of noise-perturbed latents divided by the
    number of pixels (8 views x p x p per sample).
    """
    out = model.forward_train(x, rows, generator, distortion_mode=distortion_mode)
    n, _, v, h, w = x.shape
    rate = out["bits"].sum() / (n * v * h * w)
    mse = torch.mean((out["x_hat"] - x) ** 2)
    return RDTerms(rate + lam * distortion_scale * mse, rate, mse)


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_decay_steps > 0:
        return cfg.learning_rate * cfg.lr_decay_factor ** (step // cfg.lr_decay_steps)
    return cfg.learning_rate


def train_step(
    cfg: TrainConfig,
    model: LFCodecModel,
    optimizer: torch.optim.Optimizer,
    batch: Tuple[torch.Tensor, torch.Tensor],
    step: int,
    loss_fn: Callable = rd_loss,
) -> RDRecord:
    """One Adam update of all transform and prior parameters."""
    x, rows = batch
    for group in optimizer.param_groups:
        group["lr"] = _lr_at(cfg, step)
    gen = step_generator(cfg.seed, step)
    terms = loss_fn(model, x, rows, cfg.lam, gen, cfg.distortion_scale)
    record = RDRecord(step, terms.loss.item(), terms.rate_bpp.item(), terms.mse.item(), cfg.lam)
    if not all(math.isfinite(v) for v in (record.loss, record.rate_bpp, record.mse)):
        raise TrainingDiverged(record)
    optimizer.zero_grad(set_to_none=False)
    terms.loss.backward()
    optimizer.step()
    return record


class PatchSampler:
    """Seeded, resumable shuffling over every (grid, row, window) patch.

    Sample ``j`` of the stream comes from epoch ``j // n`` whose permutation
    depends only on ``(seed, epoch)``, so any step can be regenerated without
    replaying earlier ones.
    """

    def __init__(self, grids: Sequence[LightFieldGrid], patch_size: int, stride: int, seed: int):
        if not grids:
            raise ValueError("empty dataset")
        self.grids = list(grids)
        self.p = patch_size
        self.seed = seed
        index = []
        for g, grid in enumerate(self.grids):
            if grid.v_count != ROW_VIEWS or grid.u_count != ROW_VIEWS:
                raise ValueError("training grids must be 8x8")
            for r in range(ROW_VIEWS):
                for s0, t0 in patch_windows(grid.h, grid.w, patch_size, stride):
                    index.append((g, r, s0, t0))
        self.index = np.array(index, dtype=np.int64)
        self._perms: Dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.index)

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms = {epoch: np.random.default_rng([self.seed, epoch]).permutation(len(self.index))}
        return self._perms[epoch]

    def patch(self, j: int) -> PatchSample:
        n = len(self.index)
        g, r, s0, t0 = self.index[self._perm(j // n)[j % n]]
        p = self.p
        return PatchSample(self.grids[g].views[r, :, s0:s0 + p, t0:t0 + p], int(r), (int(s0), int(t0)))

    def batch(self, step: int, batch_size: int) -> Tuple[torch.Tensor, torch.Tensor]:
        start = step * batch_size
        return batch_from_patches([self.patch(j) for j in range(start, start + batch_size)])


@dataclass
class TrainResult:
    checkpoint: Path
    records: List[RDRecord] = field(default_factory=list)
    model: Optional[LFCodecModel] = None


def _read_log(path: Path, upto: int) -> List[RDRecord]:
    if not path.exists():
        return []
    out = []
    with path.open() as fh:
        for row in csv.DictReader(fh):
            rec = RDRecord(int(row["step"]), float(row["L"]), float(row["rate_bpp"]), float(row["mse"]), float(row["lambda"]))
            if rec.step < upto:
                out.append(rec)
    return out


def _write_log(path: Path, records: Sequence[RDRecord]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "L", "rate_bpp", "mse", "lambda"])
        for rec in records:
            w.writerow(rec.row())


def train_loop(
    cfg: TrainConfig,
    dataset,
    out_dir,
    resume: bool = True,
    stop_at: Optional[int] = None,
    log_every: int = 100,
) -> TrainResult:
    """Train from a manifest path or a list of grids, writing into ``out_dir``.

    ``out_dir`` receives ``checkpoint.npz`` (periodic and final),
    ``rd_log.csv`` (one record per step) and ``config.json``. With ``resume``
    an existing checkpoint there is continued from its recorded step.
    ``stop_at`` ends the run early (the schedule is still that of ``cfg.steps``).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grids = load_manifest_grids(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    sampler = PatchSampler(grids, cfg.patch_size, cfg.stride, cfg.seed)
    ckpt_path = out_dir / CHECKPOINT_NAME
    (out_dir / CONFIG_NAME).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    start = 0
    if resume and ckpt_path.exists():
        model, meta, optimizer = load_checkpoint(ckpt_path, lambda m: make_optimizer(m, cfg))
        start = int(meta["extra"].get("step", 0))
        log.info("resuming %s at step %d", out_dir, start)
    else:
        model = new_model(cfg)
        optimizer = make_optimizer(model, cfg)
    records = _read_log(out_dir / LOG_NAME, start)

    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    model.train()
    for step in range(start, end):
        rec = train_step(cfg, model, optimizer, sampler.batch(step, cfg.batch_size), step)
        records.append(rec)
        if log_every and step % log_every == 0:
            log.info("step %d L=%.5f rate=%.4f bpp mse=%.6f", step, rec.loss, rec.rate_bpp, rec.mse)
        if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < end:
            save_checkpoint(ckpt_path, model, cfg.lam, optimizer, {"step": step + 1, "train_config": cfg.to_dict()})
            _write_log(out_dir / LOG_NAME, records)
    model.eval()
    save_checkpoint(ckpt_path, model, cfg.lam, optimizer, {"step": end, "train_config": cfg.to_dict()})
    _write_log(out_dir / LOG_NAME, records)
    return TrainResult(ckpt_path, records, model)


def lambda_sweep(
    template: TrainConfig,
    lambdas: Sequence[float],
    dataset,
    heldout: LightFieldGrid,
    out_root,
    scene: str = "heldout",
):
    """Train one model per lambda and evaluate each on a held-out grid.

    Returns a list of ``(checkpoint_path, RDPoint)`` in the order of ``lambdas``.
    """
    from .evaluate import evaluate_codec

    if len(lambdas) < 2:
        raise ValueError("a lambda sweep needs at least two lambda values")
    out_root = Path(out_root)
    results = []
    for lam in lambdas:
        cfg = replace(template, lam=float(lam))
        res = train_loop(cfg, dataset, out_root / f"lambda_{lam:g}")
        point = evaluate_codec(res.model, heldout, scene=scene).point
        results.append((res.checkpoint, point))
    return results
