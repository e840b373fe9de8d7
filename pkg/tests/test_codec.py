import struct
import zlib

import numpy as np
import pytest
import torch

from lfcodec.codec import (
    HEADER_SIZE,
    ContainerError,
    ContainerHeader,
    ModelMismatchError,
    container_accounting,
    decode_lightfield,
    decode_row,
    decode_rows,
    encode_lightfield,
    encode_row,
    parse_container,
)
from lfcodec.entropy import table_bits
from lfcodec.lfdata import LightFieldGrid, extract_row
from lfcodec.metrics import bits_per_pixel
from lfcodec.model import CheckpointError, LFCodecModel, load_checkpoint, read_checkpoint, save_checkpoint
from lfcodec.synthetic import SceneSpec, make_scene
from lfcodec.transforms import Conv3DLayer, TransformConfig

SMALL = TransformConfig(channels=8, hidden=8, disparity_hidden=4)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return LFCodecModel(SMALL).eval()


@pytest.fixture(scope="module")
def grid():
    return make_scene(SceneSpec(h=40, w=36, seed=3))


@pytest.fixture(scope="module")
def container(model, grid):
    return encode_lightfield(grid, model)


def test_header_layout():
    hdr = ContainerHeader(b"\x01" * 8, 434, 625, 448, 640, 32)
    raw = hdr.pack()
    assert len(raw) == HEADER_SIZE == 27
    assert raw[:5] == b"LFDA\x01"
    assert struct.unpack_from("<HHHHH", raw, 15) == (434, 625, 448, 640, 32)
    assert ContainerHeader.unpack(raw) == hdr


@pytest.mark.parametrize(
    "mutate, match",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + b"\x02" + b[5:], "version"),
        (lambda b: b[:19] + struct.pack("<H", 100) + b[21:], "padded"),
    ],
)
def test_header_validation(mutate, match):
    raw = ContainerHeader(b"\0" * 8, 100, 100, 112, 112, 8).pack()
    with pytest.raises(ContainerError, match=match):
        ContainerHeader.unpack(mutate(raw))


def test_round_trip_shapes_and_range(model, grid, container):
    rec = decode_lightfield(container, model)
    assert rec.views.shape == grid.views.shape
    assert rec.views.min() >= 0.0 and rec.views.max() <= 1.0


def test_encode_deterministic(model, grid, container):
    assert encode_lightfield(grid, model) == container
    row = extract_row(grid, 2)
    assert encode_row(row, model).pack() == encode_row(row, model).pack()


def test_parallel_matches_serial(model, grid, container):
    assert encode_lightfield(grid, model, threads=8) == container
    serial = decode_lightfield(container, model, threads=1)
    parallel = decode_lightfield(container, model, threads=8)
    assert np.array_equal(serial.views, parallel.views)


def test_latents_survive_entropy_stage(model, grid):
    row = extract_row(grid, 4)
    payload, enc = encode_row(row, model, return_latents=True)
    mid = model.frozen()[0]
    hdr = ContainerHeader(mid, grid.h, grid.w, 48, 48, model.cfg.channels)
    _, dec = decode_row(payload, hdr, model, return_latents=True)
    np.testing.assert_array_equal(dec["y_hat"], enc["y_hat"])
    for a, b in zip(dec["z_hat"], enc["z_hat"]):
        np.testing.assert_array_equal(a, b)


def test_row_independence(model, container):
    full = decode_rows(container, model)
    only5 = decode_rows(container, model, rows=[5])
    assert list(only5) == [5]
    assert np.array_equal(only5[5], full[5])
    some = decode_rows(container, model, rows=[7, 0])
    assert np.array_equal(some[0], full[0]) and np.array_equal(some[7], full[7])


def test_row_payload_needs_no_other_rows(model, container):
    header, payloads = parse_container(container)
    alone = decode_row(payloads[3], header, model)
    assert np.array_equal(alone, decode_rows(container, model, rows=[3])[3])


def test_tampered_byte_fails_crc(container):
    bad = bytearray(container)
    bad[HEADER_SIZE + 10] ^= 0x40
    with pytest.raises(ContainerError, match="CRC"):
        parse_container(bytes(bad))


def test_truncated_container(container):
    with pytest.raises(ContainerError):
        parse_container(container[:-7])


def test_wrong_model_refused(grid, container):
    torch.manual_seed(1)
    other = LFCodecModel(SMALL)
    with pytest.raises(ModelMismatchError):
        decode_lightfield(container, other)


def test_accounting_identity(grid, container):
    acc = container_accounting(container)
    assert acc["total_bits"] == 8 * len(container)
    assert acc["header_bits"] + acc["payload_bits"] + acc["crc_bits"] == acc["total_bits"]
    bpp = bits_per_pixel(len(container), grid.h, grid.w)
    assert bpp * 64 * grid.h * grid.w == 8 * len(container)


def test_payload_close_to_table_estimate(model, grid):
    _, table_c, table_d = model.frozen()
    payload, lat = encode_row(extract_row(grid, 1), model, return_latents=True)
    est = table_bits(lat["y_hat"], table_c)
    assert 8 * len(payload.color) <= est * 1.001 + 64
    for stream, z in zip(payload.disparity, lat["z_hat"]):
        assert 8 * len(stream) <= table_bits(z, table_d) * 1.001 + 64


def test_zero_input_zero_bias_minimal_payload():
    torch.manual_seed(0)
    m = LFCodecModel(SMALL)
    with torch.no_grad():
        for mod in m.modules():
            if isinstance(mod, Conv3DLayer):
                mod.bias.zero_()
        for prior in (m.prior_c, m.prior_d):
            for mat in prior.matrices:
                mat.fill_(3.0)
            for b in prior.biases:
                b.zero_()
        # the position planes are nonzero even for a black row, so silence that branch
        m.disparity.analysis.layers[0].weight.zero_()
    grid = LightFieldGrid(np.zeros((8, 8, 32, 32, 3), dtype=np.float32))
    payload, lat = encode_row(extract_row(grid, 0), m, return_latents=True)
    assert not lat["y_hat"].any() and not any(z.any() for z in lat["z_hat"])
    assert 8 * len(payload.color) <= 32 + 64
    for stream in payload.disparity:
        assert 8 * len(stream) <= 32 + 64


def test_empty_and_wrong_grids(model):
    with pytest.raises(ValueError):
        encode_lightfield(LightFieldGrid(np.zeros((8, 8, 0, 0, 3), dtype=np.float32)), model)
    with pytest.raises(ValueError, match="8x8"):
        encode_lightfield(LightFieldGrid(np.zeros((4, 8, 16, 16, 3), dtype=np.float32)), model)


def test_padding_recorded(model, grid, container):
    header, _ = parse_container(container)
    assert (header.h, header.w, header.padded_h, header.padded_w) == (40, 36, 48, 48)


# --- checkpoints --------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, model, container):
    path = save_checkpoint(tmp_path / "m.npz", model, lam=0.01, extra={"step": 3})
    loaded, meta = load_checkpoint(path)
    assert loaded.model_id() == model.model_id()
    assert meta["lambda"] == 0.01 and meta["extra"]["step"] == 3
    assert np.array_equal(decode_lightfield(container, loaded).views, decode_lightfield(container, model).views)


def test_model_id_tracks_parameters(model):
    torch.manual_seed(0)
    m = LFCodecModel(model.cfg)
    before = m.model_id()
    with torch.no_grad():
        m.prior_c.biases[0][0, 0, 0] += 1e-3
    assert m.model_id() != before


def test_checkpoint_rejects_unknown_version(tmp_path, model):
    path = save_checkpoint(tmp_path / "m.npz", model)
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = bytes(arrays["__meta__"]).decode().replace('"version": 1', '"version": 99')
    arrays["__meta__"] = np.frombuffer(meta.encode(), dtype=np.uint8)
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(tmp_path / "bad.npz")


def test_checkpoint_detects_tampered_parameters(tmp_path, model):
    path = save_checkpoint(tmp_path / "m.npz", model)
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    key = next(k for k in arrays if k.startswith("param/"))
    arrays[key] = arrays[key] + 1.0
    np.savez(tmp_path / "bad.npz", **arrays)
    with pytest.raises(CheckpointError, match="model id"):
        load_checkpoint(tmp_path / "bad.npz")


def test_crc_is_ieee(container):
    assert struct.unpack("<I", container[-4:])[0] == zlib.crc32(container[:-4])
