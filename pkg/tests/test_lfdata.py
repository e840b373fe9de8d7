import numpy as np
import pytest

from lfcodec.lfdata import (
    LightFieldError,
    LightFieldGrid,
    build_feature_tensor,
    center_crop_views,
    extract_patches,
    extract_row,
    load_sai_grid,
    patch_windows,
    read_manifest,
    save_sai_grid,
)


def _grid(v, u, h=8, w=8, seed=0):
    rng = np.random.default_rng(seed)
    return LightFieldGrid(rng.random((v, u, h, w, 3), dtype=np.float32))


def _index_grid(n, h=4, w=4):
    # each view filled with a code for its (r, c) position
    views = np.zeros((n, n, h, w, 3), dtype=np.float32)
    for r in range(n):
        for c in range(n):
            views[r, c] = (r * 100 + c) / 10000.0
    return LightFieldGrid(views)


def _quantized(grid):
    return LightFieldGrid(np.round(grid.views * 255) / 255)


class TestLoad:
    def test_8x8_directory(self, tmp_path):
        g = _quantized(_grid(8, 8, 64, 64))
        save_sai_grid(g, tmp_path)
        assert len(list(tmp_path.glob("view_*.png"))) == 64
        loaded = load_sai_grid(tmp_path)
        assert (loaded.u_count, loaded.v_count, loaded.h, loaded.w) == (8, 8, 64, 64)

    def test_14x14_directory(self, tmp_path):
        save_sai_grid(_grid(14, 14, 8, 8), tmp_path)
        loaded = load_sai_grid(tmp_path)
        assert loaded.u_count == loaded.v_count == 14

    def test_missing_view_names_index(self, tmp_path):
        save_sai_grid(_grid(8, 8), tmp_path)
        (tmp_path / "view_07_07.png").unlink()
        with pytest.raises(LightFieldError, match=r"missing view \(7,7\)"):
            load_sai_grid(tmp_path, v_count=8, u_count=8)

    def test_inconsistent_dimensions(self, tmp_path):
        save_sai_grid(_grid(2, 2, 8, 8), tmp_path)
        save_sai_grid(_grid(1, 1, 6, 6), tmp_path / "odd")
        (tmp_path / "odd" / "view_00_00.png").rename(tmp_path / "view_01_01.png")
        with pytest.raises(LightFieldError, match="view_01_01.png"):
            load_sai_grid(tmp_path)

    def test_view_mapping_row_major(self, tmp_path):
        g = _index_grid(3)
        save_sai_grid(g, tmp_path, bit_depth=16)
        loaded = load_sai_grid(tmp_path)
        np.testing.assert_allclose(loaded.views[2, 1], g.views[2, 1], atol=1 / 65535)
        np.testing.assert_allclose(loaded.views[1, 2], g.views[1, 2], atol=1 / 65535)

    @pytest.mark.parametrize("ext", ["png", "ppm"])
    def test_8bit_round_trip_exact(self, tmp_path, ext):
        g = _quantized(_grid(2, 3, 5, 7))
        save_sai_grid(g, tmp_path, ext=ext)
        loaded = load_sai_grid(tmp_path)
        np.testing.assert_array_equal(np.round(loaded.views * 255), np.round(g.views * 255))

    def test_16bit_png(self, tmp_path):
        g = LightFieldGrid(np.round(_grid(2, 2, 4, 4).views * 65535) / 65535)
        save_sai_grid(g, tmp_path, bit_depth=16)
        loaded = load_sai_grid(tmp_path)
        np.testing.assert_allclose(loaded.views, g.views, atol=1e-7)
        assert 0.0 <= loaded.views.min() and loaded.views.max() <= 1.0


class TestCrop:
    def test_14_to_8_keeps_3_to_10(self):
        g = _index_grid(14)
        out = center_crop_views(g, 8)
        assert out.views.shape[:2] == (8, 8)
        np.testing.assert_array_equal(out.views[0, 0], g.views[3, 3])
        np.testing.assert_array_equal(out.views[7, 7], g.views[10, 10])

    def test_15_to_8_uses_floor(self):
        g = _index_grid(15)
        out = center_crop_views(g, 8)
        np.testing.assert_array_equal(out.views[0, 0], g.views[3, 3])
        np.testing.assert_array_equal(out.views[7, 7], g.views[10, 10])

    def test_identity_and_idempotent(self):
        g = _grid(8, 8)
        assert center_crop_views(g, 8) is g
        assert center_crop_views(center_crop_views(g, 8), 8) is g

    def test_target_too_large(self):
        with pytest.raises(LightFieldError):
            center_crop_views(_grid(6, 6), 8)


class TestRowsAndFeatures:
    def test_extract_rows(self):
        g = _index_grid(8)
        np.testing.assert_array_equal(extract_row(g, 0).sais, g.views[0])
        assert extract_row(g, 7).row_index == 7
        np.testing.assert_array_equal(extract_row(g, 7).sais[2], g.views[7, 2])

    @pytest.mark.parametrize("r", [-1, 8])
    def test_row_out_of_range(self, r):
        with pytest.raises(LightFieldError):
            extract_row(_index_grid(8), r)

    def test_center_adjacent(self):
        row = extract_row(_index_grid(8), 3)
        f = build_feature_tensor(row, 3)
        np.testing.assert_array_equal(f.slices[0], f.slices[1])
        assert f.u == -0.5 and f.v == -0.5

    @pytest.mark.parametrize("r,i,expected", [(0, 0, -3.5), (7, 7, 3.5)])
    def test_corner_offsets(self, r, i, expected):
        f = build_feature_tensor(extract_row(_index_grid(8), r), i)
        assert f.u == expected and f.v == expected

    def test_slices(self):
        g = _grid(8, 8)
        row = extract_row(g, 5)
        f = build_feature_tensor(row, 1)
        np.testing.assert_array_equal(f.slices[0], g.views[5, 1])
        np.testing.assert_array_equal(f.slices[1], g.views[5, 3])
        assert f.slices.shape == (4, 8, 8, 3)

    def test_position_planes_constant(self):
        g = _grid(8, 8)
        values = set()
        for r in range(8):
            for i in range(8):
                f = build_feature_tensor(extract_row(g, r), i)
                assert f.slices[2].var() == 0 and f.slices[3].var() == 0
                values.update([f.u, f.v])
        assert values == {k - 3.5 for k in range(8)}

    def test_index_modes(self):
        row = extract_row(_grid(8, 8), 2)
        assert build_feature_tensor(row, 0, index_mode="zero").u == 0.0
        assert build_feature_tensor(row, 0, index_mode="one").v == 3.0

    def test_view_out_of_range(self):
        with pytest.raises(LightFieldError):
            build_feature_tensor(extract_row(_grid(8, 8), 0), 8)


def _brute_force_windows(h, w, p, stride):
    count = 0
    for s0 in range(h):
        for t0 in range(w):
            if s0 % stride == 0 and t0 % stride == 0 and s0 + p <= h and t0 + p <= w:
                count += 1
    return count


class TestPatches:
    def test_single_window(self):
        patches = extract_patches(_grid(8, 8, 64, 64), 64, 16)
        assert len(patches) == 8

    def test_96(self):
        patches = extract_patches(_grid(8, 8, 96, 96), 64, 16)
        assert len(patches) == 8 * 9

    def test_window_count_matches_brute_force(self):
        expected = _brute_force_windows(432, 624, 64, 16)
        assert expected == 24 * 36
        assert len(patch_windows(432, 624, 64, 16)) == expected

    def test_same_window_from_all_views(self):
        g = _grid(8, 8, 40, 48)
        for p in extract_patches(g, 16, 16):
            s0, t0 = p.offset
            np.testing.assert_array_equal(p.patch_row, g.views[p.row_index, :, s0:s0 + 16, t0:t0 + 16])

    def test_nonoverlapping_windows_tile_image(self):
        g = _grid(8, 8, 48, 32)
        out = np.zeros_like(g.views)
        hits = np.zeros(g.views.shape[:4])
        for p in extract_patches(g, 16, 16):
            s0, t0 = p.offset
            out[p.row_index, :, s0:s0 + 16, t0:t0 + 16] = p.patch_row
            hits[p.row_index, :, s0:s0 + 16, t0:t0 + 16] += 1
        np.testing.assert_array_equal(out, g.views)
        assert np.all(hits == 1)

    def test_patch_too_large(self):
        with pytest.raises(LightFieldError):
            extract_patches(_grid(8, 8, 32, 32), 64, 16)


def test_manifest_relative_paths(tmp_path):
    (tmp_path / "m.txt").write_text("# corpus\nscene_a\n\n/abs/scene_b\n")
    dirs = read_manifest(tmp_path / "m.txt")
    assert dirs[0] == tmp_path / "scene_a"
    assert str(dirs[1]) == "/abs/scene_b"
