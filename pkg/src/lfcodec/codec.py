"""Encoding and decoding of whole light fields into the LFDA container.

Layout (all integers little-endian)::

    header   27 bytes  magic "LFDA", version u8, model_id 8 bytes,
                       u_count u8, v_count u8, h u16, w u16,
                       padded_h u16, padded_w u16, color_channels u16,
                       reserved 2 bytes
    row x 8            row_index u8, color_len u32, color bytes,
                       8 x (disp_len u32, disparity bytes)
    crc32    4 bytes   IEEE CRC-32 of every preceding byte

Each row payload is self-contained, so rows can be decoded in any order or
on their own.
"""

from __future__ import annotations

import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
import torch

from .entropy import round_half_away
from .lfdata import ROW_VIEWS, LightFieldGrid, SAIRow
from .model import LFCodecModel
from .rangecoder import range_decode, range_encode

MAGIC = b"LFDA"
VERSION = 1
_HEADER = struct.Struct("<4sB8sBBHHHHH2s")
HEADER_SIZE = _HEADER.size
CRC_SIZE = 4


class ContainerError(ValueError):
    """Malformed, truncated or corrupted container."""


class ModelMismatchError(ValueError):
    """The container was produced by a different model."""


@dataclass(frozen=True)
class ContainerHeader:
    model_id: bytes
    h: int
    w: int
    padded_h: int
    padded_w: int
    color_channels: int
    u_count: int = ROW_VIEWS
    v_count: int = ROW_VIEWS
    version: int = VERSION

    def pack(self) -> bytes:
        return _HEADER.pack(
            MAGIC, self.version, self.model_id, self.u_count, self.v_count,
            self.h, self.w, self.padded_h, self.padded_w, self.color_channels, b"\0\0",
        )

    @classmethod
    def unpack(cls, data: bytes) -> "ContainerHeader":
        if len(data) < HEADER_SIZE:
            raise ContainerError("truncated header")
        magic, version, mid, u, v, h, w, ph, pw, cc, _ = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ContainerError(f"bad magic {magic!r}")
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version}")
        if ph < h or pw < w or ph % 16 or pw % 16:
            raise ContainerError("padded dimensions inconsistent with image size")
        return cls(mid, h, w, ph, pw, cc, u, v, version)


@dataclass(frozen=True)
class RowPayload:
    row_index: int
    color: bytes
    disparity: Tuple[bytes, ...]

    def pack(self) -> bytes:
        parts = [struct.pack("<BI", self.row_index, len(self.color)), self.color]
        for stream in self.disparity:
            parts.append(struct.pack("<I", len(stream)))
            parts.append(stream)
        return b"".join(parts)

    @property
    def bits(self) -> int:
        return 8 * len(self.pack())

    @classmethod
    def unpack_from(cls, data: bytes, pos: int, views: int = ROW_VIEWS) -> Tuple["RowPayload", int]:
        def take(n: int) -> bytes:
            nonlocal pos
            if pos + n > len(data):
                raise ContainerError("row payload runs past the end of the container")
            chunk = bytes(data[pos:pos + n])
            pos += n
            return chunk

        row_index, color_len = struct.unpack("<BI", take(5))
        color = take(color_len)
        disp = []
        for _ in range(views):
            (n,) = struct.unpack("<I", take(4))
            disp.append(take(n))
        return cls(row_index, color, tuple(disp)), pos


def padded_size(n: int, multiple: int = 16) -> int:
    return -(-n // multiple) * multiple


def _row_tensor(sais: np.ndarray, ph: int, pw: int) -> torch.Tensor:
    """``(8, h, w, 3)`` -> replicate-padded ``(1, 3, 8, ph, pw)``."""
    v, h, w, _ = sais.shape
    x = np.pad(sais, ((0, 0), (0, ph - h), (0, pw - w), (0, 0)), mode="edge")
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).permute(3, 0, 1, 2).unsqueeze(0)


def _latent_shapes(header: ContainerHeader, model: LFCodecModel):
    cfg = model.cfg
    fc, fd = cfg.color_factor, cfg.disparity_factor
    y_shape = (header.color_channels, ROW_VIEWS, header.padded_h // fc, header.padded_w // fc)
    z_shape = (cfg.disparity_channels, 4, header.padded_h // fd, header.padded_w // fd)
    return y_shape, z_shape


def _to_symbols(t: torch.Tensor) -> np.ndarray:
    return round_half_away(t).to(torch.int64).numpy()


def encode_row(row, model: LFCodecModel, padded: Optional[Tuple[int, int]] = None, return_latents: bool = False):
    """Transform, quantize and entropy-code one row of eight views."""
    if isinstance(row, SAIRow):
        sais, r = row.sais, row.row_index
    else:
        sais, r = row
    _, h, w, _ = sais.shape
    ph, pw = padded or (padded_size(h, model.pad_multiple), padded_size(w, model.pad_multiple))
    _, table_c, table_d = model.frozen()
    x = _row_tensor(sais, ph, pw)
    with torch.no_grad():
        y, z = model.analyze(x, [r])
    y_hat = _to_symbols(y[0])
    color = range_encode(y_hat, table_c)
    z_hat = []
    disp = []
    for i in range(ROW_VIEWS):
        if z is None:
            disp.append(b"")
            continue
        zi = _to_symbols(z[0, i])
        z_hat.append(zi)
        disp.append(range_encode(zi, table_d))
    payload = RowPayload(r, color, tuple(disp))
    if return_latents:
        return payload, {"y_hat": y_hat, "z_hat": z_hat}
    return payload


def decode_row(payload: RowPayload, header: ContainerHeader, model: LFCodecModel, return_latents: bool = False):
    """Reconstruct the ``(8, h, w, 3)`` views of one row, clamped to [0, 1]."""
    mid, table_c, table_d = model.frozen()
    if mid != header.model_id:
        raise ModelMismatchError(
            f"container model id {header.model_id.hex()} does not match checkpoint {mid.hex()}"
        )
    if header.color_channels != model.cfg.channels:
        raise ModelMismatchError("color channel count differs from the model")
    y_shape, z_shape = _latent_shapes(header, model)
    y_hat = range_decode(payload.color, table_c, int(np.prod(y_shape))).reshape(y_shape)
    z_hat = []
    if model.disparity is not None:
        for stream in payload.disparity:
            z_hat.append(range_decode(stream, table_d, int(np.prod(z_shape))).reshape(z_shape))
    with torch.no_grad():
        y_t = torch.from_numpy(y_hat).float().unsqueeze(0)
        z_t = torch.from_numpy(np.stack(z_hat)).float().unsqueeze(0) if z_hat else None
        _, _, x_hat = model.synthesize(y_t, z_t)
    out = x_hat[0].permute(1, 2, 3, 0).numpy()[:, : header.h, : header.w]
    out = np.clip(out, 0.0, 1.0)
    if return_latents:
        return out, {"y_hat": y_hat, "z_hat": z_hat}
    return out


def _map(fn, items, threads: int):
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def encode_lightfield(grid: LightFieldGrid, model: LFCodecModel, threads: int = 1) -> bytes:
    """Encode an 8x8 grid; rows may be coded concurrently, output order is fixed."""
    if grid.views.size == 0:
        raise ValueError("cannot encode an empty light field")
    if grid.v_count != ROW_VIEWS or grid.u_count != ROW_VIEWS:
        raise ValueError(f"expected an 8x8 grid, got {grid.v_count}x{grid.u_count}")
    if grid.h > 0xFFFF or grid.w > 0xFFFF:
        raise ValueError("spatial size does not fit the container header")
    mid, _, _ = model.frozen()
    m = model.pad_multiple
    header = ContainerHeader(mid, grid.h, grid.w, padded_size(grid.h, m), padded_size(grid.w, m), model.cfg.channels)
    pad = (header.padded_h, header.padded_w)
    payloads = _map(lambda r: encode_row((grid.views[r], r), model, pad), range(ROW_VIEWS), threads)
    body = header.pack() + b"".join(p.pack() for p in payloads)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def parse_container(data: bytes) -> Tuple[ContainerHeader, Dict[int, RowPayload]]:
    """Validate the CRC and split the container into its header and row payloads."""
    if len(data) < HEADER_SIZE + CRC_SIZE:
        raise ContainerError("container too short")
    body, crc = data[:-CRC_SIZE], struct.unpack("<I", data[-CRC_SIZE:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ContainerError("CRC mismatch: container is corrupted")
    header = ContainerHeader.unpack(body)
    rows = {}
    pos = HEADER_SIZE
    for _ in range(header.v_count):
        payload, pos = RowPayload.unpack_from(body, pos, header.u_count)
        if payload.row_index in rows or payload.row_index >= header.v_count:
            raise ContainerError(f"invalid or duplicate row index {payload.row_index}")
        rows[payload.row_index] = payload
    if pos != len(body):
        raise ContainerError("trailing bytes after the last row payload")
    return header, rows


def decode_rows(
    data: bytes, model: LFCodecModel, rows: Optional[Iterable[int]] = None, threads: int = 1
) -> Dict[int, np.ndarray]:
    header, payloads = parse_container(data)
    wanted = sorted(payloads) if rows is None else list(rows)
    for r in wanted:
        if r not in payloads:
            raise ContainerError(f"row {r} not present")
    decoded = _map(lambda r: decode_row(payloads[r], header, model), wanted, threads)
    return dict(zip(wanted, decoded))


def decode_lightfield(data: bytes, model: LFCodecModel, threads: int = 1) -> LightFieldGrid:
    rows = decode_rows(data, model, threads=threads)
    return LightFieldGrid(np.stack([rows[r] for r in sorted(rows)]).astype(np.float32))


def container_accounting(data: bytes) -> Dict[str, int]:
    """Bit budget of a container split into header, payload and CRC."""
    header, payloads = parse_container(data)
    payload_bits = sum(p.bits for p in payloads.values())
    return {
        "header_bits": 8 * HEADER_SIZE,
        "payload_bits": payload_bits,
        "crc_bits": 8 * CRC_SIZE,
        "total_bits": 8 * len(data),
    }
