"""Factorized entropy models, quantization, and frozen CDF tables.

The prior is the univariate non-parametric density of the factorized-prior
line of work: per channel, a small monotone network maps a value to the
logit of its cumulative distribution. Integer likelihoods are
``c(v + 0.5) - c(v - 0.5)``.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LIKELIHOOD_BOUND = 1e-9
PRECISION = 16
TAIL_MASS = 1e-4
MAX_SUPPORT = 4096


class QuantizerMode(str, enum.Enum):
    NOISE = "noise"
    ROUND = "round"
    STE = "ste"


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def quantize(
    y: torch.Tensor, mode=QuantizerMode.ROUND, generator: Optional[torch.Generator] = None
) -> torch.Tensor:
    """Quantize, or apply a differentiable stand-in for training.

    ``NOISE`` adds uniform noise on [-0.5, 0.5); ``STE`` rounds in the forward
    pass and passes gradients straight through.
    """
    mode = QuantizerMode(mode)
    if mode is QuantizerMode.ROUND:
        return round_half_away(y)
    if mode is QuantizerMode.STE:
        return y + (round_half_away(y) - y).detach()
    noise = torch.rand(y.shape, generator=generator, dtype=y.dtype, device=y.device) - 0.5
    return y + noise


class _LowerBound(torch.autograd.Function):
    # gradients pass when they would push the input back above the bound
    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return torch.clamp_min(x, bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        pass_through = (x >= ctx.bound) | (grad < 0)
        return grad * pass_through.to(grad.dtype), None


def lower_bound(x: torch.Tensor, bound: float) -> torch.Tensor:
    return _LowerBound.apply(x, bound)


class FactorizedPrior(nn.Module):
    """Per-channel learned CDF ``c(v) = sigmoid(f_K(...f_1(v)))``.

    Each stage is ``softplus(H) @ x + b`` followed, except at the last stage,
    by the gate ``x + tanh(a) * tanh(x)``. Stage widths are
    ``1 -> 3 -> 3 -> 3 -> 1`` by default (four stages).
    """

    def __init__(
        self,
        channels: int,
        filters: Sequence[int] = (3, 3, 3),
        init_scale: float = 10.0,
        likelihood_bound: float = LIKELIHOOD_BOUND,
    ):
        super().__init__()
        self.channels = channels
        self.filters = tuple(filters)
        self.likelihood_bound = likelihood_bound
        dims = (1,) + self.filters + (1,)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for k in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[k + 1]))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[k + 1], dims[k]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[k + 1], 1) - 0.5))
            if k < len(dims) - 2:
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[k + 1], 1)))

    @property
    def stages(self) -> int:
        return len(self.matrices)

    def logits_cumulative(self, v: torch.Tensor) -> torch.Tensor:
        """``v`` has shape ``(C, 1, N)``; returns logits of the same shape and dtype."""
        logits = v
        dt = v.dtype
        for k in range(self.stages):
            logits = torch.matmul(F.softplus(self.matrices[k].to(dt)), logits) + self.biases[k].to(dt)
            if k < len(self.factors):
                logits = logits + torch.tanh(self.factors[k].to(dt)) * torch.tanh(logits)
        return logits

    def cdf(self, v: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits_cumulative(v))

    def _to_channel_rows(self, v: torch.Tensor):
        if v.dim() < 2 or v.shape[1] != self.channels:
            raise ValueError(f"expected channel axis 1 of size {self.channels}, got shape {tuple(v.shape)}")
        perm = (1, 0) + tuple(range(2, v.dim()))
        rows = v.permute(perm)
        return rows.reshape(self.channels, 1, -1), rows.shape, perm

    def likelihood(self, v: torch.Tensor, floor: bool = True) -> torch.Tensor:
        """Probability mass of the unit interval around each value.

        ``v`` has its channel axis at dimension 1, e.g. ``(N, C, D, H, W)``.
        """
        rows, shape, perm = self._to_channel_rows(v)
        lower = self.logits_cumulative(rows - 0.5)
        upper = self.logits_cumulative(rows + 0.5)
        # evaluate on the side of the median where the sigmoids are not saturated
        sign = -torch.sign(lower + upper).detach()
        lik = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
        if floor:
            lik = lower_bound(lik, self.likelihood_bound)
        inv = [0] * len(perm)
        for i, p in enumerate(perm):
            inv[p] = i
        return lik.reshape(shape).permute(inv)

    def forward(self, v: torch.Tensor) -> torch.Tensor:
        return self.likelihood(v)


def likelihood(v: torch.Tensor, prior: FactorizedPrior) -> torch.Tensor:
    return prior.likelihood(v)


def estimate_rate_bits(v: torch.Tensor, prior: FactorizedPrior) -> torch.Tensor:
    """``-sum(log2 likelihood(v))`` as a scalar tensor."""
    return -torch.log2(prior.likelihood(v)).sum()


# ---------------------------------------------------------------------------
# Frozen tables


@dataclass(frozen=True)
class QuantizedCDFTable:
    """Integer CDFs for range coding.

    Channel ``c`` codes the integers ``offsets[c] .. offsets[c] + sizes[c] - 1``
    directly; index ``sizes[c]`` is the escape symbol. ``cdf[c, k]`` is the
    cumulative count below index ``k``; rows are padded with ``2**precision``.
    """

    offsets: np.ndarray  # (C,) int64
    sizes: np.ndarray  # (C,) int64, number of in-support symbols
    cdf: np.ndarray  # (C, L) int64
    precision: int = PRECISION

    @property
    def channels(self) -> int:
        return int(self.offsets.shape[0])

    @property
    def total(self) -> int:
        return 1 << self.precision

    def freqs(self, c: int) -> np.ndarray:
        n = int(self.sizes[c])
        return np.diff(self.cdf[c, : n + 2])

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.offsets, self.sizes, self.cdf):
            h.update(np.ascontiguousarray(arr, dtype="<i8").tobytes())
        h.update(bytes([self.precision]))
        return h.hexdigest()

    def validate(self) -> None:
        for c in range(self.channels):
            n = int(self.sizes[c])
            row = self.cdf[c, : n + 2]
            if row[0] != 0 or row[-1] != self.total:
                raise ValueError(f"channel {c}: CDF must span [0, {self.total}]")
            if np.any(np.diff(row) < 1):
                raise ValueError(f"channel {c}: every symbol needs a count >= 1")


def quantize_pmf(pmf: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Integer counts summing to ``2**precision`` with every entry >= 1."""
    total = 1 << precision
    n = pmf.shape[0]
    if n > total:
        raise ValueError("more symbols than precision allows")
    pmf = np.maximum(np.asarray(pmf, dtype=np.float64), 0.0)
    pmf = pmf / pmf.sum()
    freq = np.maximum(np.round(pmf * total).astype(np.int64), 1)
    diff = total - int(freq.sum())
    order = np.argsort(-freq, kind="stable")
    k = 0
    while diff != 0:
        i = order[k % n]
        if diff > 0:
            freq[i] += diff
            diff = 0
        elif freq[i] > 1:
            take = min(freq[i] - 1, -diff)
            freq[i] -= take
            diff += take
        k += 1
    return freq


def _cdf64(prior: FactorizedPrior, v: np.ndarray) -> np.ndarray:
    """CDF of every channel at ``v`` (shape ``(C, N)``), in float64."""
    with torch.no_grad():
        t = torch.as_tensor(v, dtype=torch.float64).unsqueeze(1)
        return torch.sigmoid(prior.logits_cumulative(t)).squeeze(1).numpy()


def _quantiles(prior: FactorizedPrior, q: float, iters: int = 80) -> np.ndarray:
    c = prior.channels
    lo = np.full((c, 1), -float(1 << 15))
    hi = np.full((c, 1), float(1 << 15))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = _cdf64(prior, mid) < q
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)[:, 0]


def build_cdf_table(
    prior: FactorizedPrior,
    tail_mass: float = TAIL_MASS,
    precision: int = PRECISION,
    max_support: int = MAX_SUPPORT,
) -> QuantizedCDFTable:
    """Freeze a prior into integer CDFs with an escape symbol for the tails."""
    q_lo = _quantiles(prior, tail_mass / 2)
    q_hi = _quantiles(prior, 1.0 - tail_mass / 2)
    v_min = np.floor(q_lo + 0.5).astype(np.int64)
    v_max = np.ceil(q_hi - 0.5).astype(np.int64)
    v_max = np.maximum(v_max, v_min)
    # symmetric trim around the median if the support is too wide
    for c in np.nonzero(v_max - v_min + 1 > max_support)[0]:
        med = int(round(float(_quantiles(prior, 0.5)[c])))
        v_min[c] = med - max_support // 2
        v_max[c] = v_min[c] + max_support - 1
    sizes = v_max - v_min + 1
    width = int(sizes.max()) + 2
    cdf = np.full((prior.channels, width), 1 << precision, dtype=np.int64)
    edges = np.arange(width - 1, dtype=np.float64)[None, :] + (v_min[:, None] - 0.5)
    cum_all = _cdf64(prior, edges)
    for c in range(prior.channels):
        n = int(sizes[c])
        pmf = np.diff(cum_all[c, : n + 1])
        escape = max(1.0 - float(pmf.sum()), 0.0)
        freq = quantize_pmf(np.append(pmf, escape), precision)
        cdf[c, 0] = 0
        cdf[c, 1 : n + 2] = np.cumsum(freq)
    table = QuantizedCDFTable(v_min, sizes, cdf, precision)
    table.validate()
    return table


def uniform_table(channels: int, symbols: int, offset: int = 0, precision: int = PRECISION) -> QuantizedCDFTable:
    """Table with equal counts on ``symbols`` values (escape gets the leftover)."""
    total = 1 << precision
    each = (total - 1) // symbols
    freq = np.full(symbols + 1, each, dtype=np.int64)
    freq[-1] = total - each * symbols
    row = np.concatenate([[0], np.cumsum(freq)])
    cdf = np.tile(row, (channels, 1))
    return QuantizedCDFTable(
        np.full(channels, offset, dtype=np.int64), np.full(channels, symbols, dtype=np.int64), cdf, precision
    )


def table_from_pmfs(pmfs: Sequence[np.ndarray], offsets: Sequence[int], escape_mass: float = 1e-4,
                    precision: int = PRECISION) -> QuantizedCDFTable:
    """Build a table from explicit per-channel pmfs (used for tests and tools)."""
    sizes = np.array([len(p) for p in pmfs], dtype=np.int64)
    width = int(sizes.max()) + 2
    cdf = np.full((len(pmfs), width), 1 << precision, dtype=np.int64)
    for c, p in enumerate(pmfs):
        p = np.asarray(p, dtype=np.float64)
        p = p / p.sum() * (1.0 - escape_mass)
        freq = quantize_pmf(np.append(p, escape_mass), precision)
        cdf[c, 0] = 0
        cdf[c, 1 : len(p) + 2] = np.cumsum(freq)
    table = QuantizedCDFTable(np.asarray(offsets, dtype=np.int64), sizes, cdf, precision)
    table.validate()
    return table


def table_bits(symbols: np.ndarray, table: QuantizedCDFTable) -> float:
    """Ideal code length of ``symbols`` (channel axis 0) under the table, in bits."""
    symbols = np.asarray(symbols, dtype=np.int64)
    flat = symbols.reshape(table.channels, -1)
    bits = 0.0
    for c in range(table.channels):
        idx = flat[c] - table.offsets[c]
        n = int(table.sizes[c])
        esc = (idx < 0) | (idx >= n)
        idx = np.where(esc, n, idx)
        freq = table.cdf[c, idx + 1] - table.cdf[c, idx]
        bits += float(np.sum(table.precision - np.log2(freq))) + 16.0 * int(esc.sum())
    return bits
