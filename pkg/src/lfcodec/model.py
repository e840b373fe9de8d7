"""The disparity-aware light field autoencoder and its checkpoint format."""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .entropy import FactorizedPrior, QuantizedCDFTable, QuantizerMode, build_cdf_table, quantize
from .lfdata import position_index
from .transforms import AnalysisTransform, DisparityBank, SynthesisTransform, TransformConfig
from .warp import assemble_reconstruction

CHECKPOINT_FORMAT = "lfcodec-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class LFCodecModel(nn.Module):
    """Color autoencoder plus per-view disparity autoencoders.

    Row tensors are ``(N, 3, V, H, W)``: RGB channels, the V views of the row
    on the depth axis. ``row_index`` gives each sample's grid row.
    """

    def __init__(self, cfg: TransformConfig = TransformConfig()):
        super().__init__()
        self.cfg = cfg
        self.color_analysis = AnalysisTransform(3, cfg.hidden, cfg.channels, cfg.color_layers, cfg.kernel)
        self.color_synthesis = SynthesisTransform(cfg.channels, cfg.hidden, 3, cfg.color_layers, cfg.kernel)
        self.prior_c = FactorizedPrior(cfg.channels)
        if cfg.use_disparity:
            self.disparity = DisparityBank(cfg)
            self.prior_d = FactorizedPrior(cfg.disparity_channels)
        else:
            self.disparity = None
            self.prior_d = None
        self._frozen: Optional[Tuple[bytes, QuantizedCDFTable, Optional[QuantizedCDFTable]]] = None

    @property
    def pad_multiple(self) -> int:
        return max(self.cfg.color_factor, self.cfg.disparity_factor)

    def features(self, x: torch.Tensor, row_index: torch.Tensor) -> torch.Tensor:
        """Per-view feature tensors, ``(N, V, 3, 4, H, W)``."""
        n, _, v, h, w = x.shape
        views = x.permute(0, 2, 1, 3, 4)
        center = views[:, self.cfg.row_center : self.cfg.row_center + 1].expand_as(views)
        mode = self.cfg.index_mode
        u = torch.tensor([position_index(i, mode) for i in range(v)], dtype=x.dtype)
        u = u.view(1, v, 1, 1, 1).expand(n, v, 3, h, w)
        rows = torch.as_tensor(row_index).reshape(-1).tolist()
        vv = torch.tensor([position_index(int(r), mode) for r in rows], dtype=x.dtype)
        vv = vv.view(n, 1, 1, 1, 1).expand(n, v, 3, h, w)
        return torch.stack([views, center, u, vv], dim=3)

    def analyze(self, x: torch.Tensor, row_index) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
        y = self.color_analysis(x)
        z = self.disparity.analyze(self.features(x, row_index)) if self.disparity is not None else None
        return y, z

    def synthesize(self, y_hat: torch.Tensor, z_hat: Optional[torch.Tensor]):
        """Returns ``(x_tilde, flows, x_hat)``; flows is None without disparity modules."""
        x_tilde = self.color_synthesis(y_hat)
        if self.disparity is None:
            return x_tilde, None, x_tilde
        flows = self.disparity.synthesize(z_hat)
        return x_tilde, flows, assemble_reconstruction(x_tilde, flows)

    def latent_bits(self, y: torch.Tensor, z: Optional[torch.Tensor]) -> torch.Tensor:
        """Per-sample estimated bits of (already quantized or noisy) latents."""
        lik_y = self.prior_c.likelihood(y)
        bits = -torch.log2(lik_y).flatten(1).sum(1)
        if z is not None:
            n, g = z.shape[:2]
            lik_z = self.prior_d.likelihood(z.reshape((n * g,) + z.shape[2:]))
            bits = bits + -torch.log2(lik_z).reshape(n, -1).sum(1)
        return bits

    def forward_train(
        self,
        x: torch.Tensor,
        row_index,
        generator: Optional[torch.Generator] = None,
        distortion_mode=QuantizerMode.STE,
    ) -> Dict[str, torch.Tensor]:
        """Noisy latents for the rate term, ``distortion_mode`` latents for synthesis."""
        y, z = self.analyze(x, row_index)
        y_noisy = quantize(y, QuantizerMode.NOISE, generator)
        z_noisy = quantize(z, QuantizerMode.NOISE, generator) if z is not None else None
        bits = self.latent_bits(y_noisy, z_noisy)
        if QuantizerMode(distortion_mode) is QuantizerMode.NOISE:
            y_q, z_q = y_noisy, z_noisy
        else:
            y_q = quantize(y, distortion_mode)
            z_q = quantize(z, distortion_mode) if z is not None else None
        x_tilde, flows, x_hat = self.synthesize(y_q, z_q)
        return {"x_hat": x_hat, "x_tilde": x_tilde, "flows": flows, "bits": bits, "y": y, "z": z}

    # -- identity and frozen entropy tables -----------------------------------

    def model_id(self) -> bytes:
        """8-byte digest of the configuration and every parameter value."""
        h = hashlib.blake2b(digest_size=8)
        h.update(json.dumps(self.cfg.to_dict(), sort_keys=True).encode())
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().astype("<f4").tobytes())
        return h.digest()

    def frozen(self) -> Tuple[bytes, QuantizedCDFTable, Optional[QuantizedCDFTable]]:
        """``(model_id, color table, disparity table)``, rebuilt when parameters change."""
        mid = self.model_id()
        if self._frozen is None or self._frozen[0] != mid:
            table_c = build_cdf_table(self.prior_c)
            table_d = build_cdf_table(self.prior_d) if self.prior_d is not None else None
            self._frozen = (mid, table_c, table_d)
        return self._frozen


# ---------------------------------------------------------------------------
# Checkpoints
#
# An .npz archive: "__meta__" holds UTF-8 JSON (format name, version, transform
# config, lambda, model id, training bookkeeping); "param/<name>" holds each
# model tensor; optional "optim/<k>/<field>" hold optimizer moments.


def save_checkpoint(
    path,
    model: LFCodecModel,
    lam: Optional[float] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    extra: Optional[dict] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "lambda": lam,
        "model_id": model.model_id().hex(),
        "extra": extra or {},
    }
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        state = optimizer.state_dict()["state"]
        for k, st in state.items():
            for field, val in st.items():
                arrays[f"optim/{k}/{field}"] = torch.as_tensor(val).detach().cpu().numpy()
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__meta__" not in data:
            raise CheckpointError(f"{path}: not a checkpoint (no metadata)")
        meta = json.loads(bytes(data["__meta__"]).decode())
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown format {meta.get('format')!r}")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    return meta, arrays


def load_checkpoint(path, optimizer_factory=None):
    """Returns ``(model, meta)`` or ``(model, meta, optimizer)`` when a factory is given."""
    meta, arrays = read_checkpoint(path)
    model = LFCodecModel(TransformConfig.from_dict(meta["config"]))
    state = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    if model.model_id().hex() != meta["model_id"]:
        raise CheckpointError(f"{path}: stored model id does not match parameters")
    if optimizer_factory is None:
        return model, meta
    optimizer = optimizer_factory(model)
    osd = optimizer.state_dict()
    restored = {}
    for key, val in arrays.items():
        if key.startswith("optim/"):
            _, k, field = key.split("/")
            restored.setdefault(int(k), {})[field] = torch.from_numpy(val.copy())
    osd["state"] = restored
    optimizer.load_state_dict(osd)
    return model, meta, optimizer
