import numpy as np
import pytest

from diffgrade.ingest import Volume3D
from diffgrade.volumizer import (
    StandardCube,
    load_cube,
    minmax_normalize,
    normalize_intensity,
    resample_inplane,
    save_cube,
    standardize,
    standardize_depth,
)


def test_resample_identity_on_target_size():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(224, 224, 4))
    out = resample_inplane(Volume3D(data), 224, 224)
    assert np.max(np.abs(out.data - data)) < 1e-12


def test_resample_constant_volume():
    out = resample_inplane(Volume3D(np.full((100, 100, 5), 7.25)), 224, 224)
    assert out.shape == (224, 224, 5)
    assert np.max(np.abs(out.data - 7.25)) < 1e-12


def test_resample_checkerboard_preserves_slice_means():
    # 8x8-cell checkerboard, downsampled 2x; oracle = per-slice means of the input
    cell = 8
    idx = np.arange(448) // cell
    board = ((idx[:, None] + idx[None, :]) % 2).astype(np.float64)
    data = np.repeat(board[:, :, None], 5, axis=2)
    input_means = data.mean(axis=(0, 1))
    out = resample_inplane(Volume3D(data), 224, 224)
    output_means = out.data.mean(axis=(0, 1))
    assert np.all(np.abs(output_means - input_means) <= 0.01)


def test_resample_rescales_spacing():
    out = resample_inplane(Volume3D(np.zeros((448, 448, 5)), (1.0, 1.0, 3.0)), 224, 224)
    assert out.voxel_spacing[0] == pytest.approx(447.0 / 223.0)
    assert out.voxel_spacing[2] == 3.0


def test_depth_identity():
    data = np.random.default_rng(1).normal(size=(4, 4, 25))
    out = standardize_depth(Volume3D(data), 25)
    assert np.array_equal(out.data, data)


def test_depth_crop_27_drops_first_and_last():
    # hand enumeration for d=27: symmetric crop keeps indices 1..25
    data = np.zeros((2, 2, 27))
    data[:, :, :] = np.arange(27)[None, None, :]
    out = standardize_depth(Volume3D(data), 25)
    assert out.shape == (2, 2, 25)
    assert np.array_equal(out.data[0, 0], np.arange(1, 26))


def test_depth_crop_26_drops_from_the_end_on_tie():
    data = np.arange(26, dtype=float).reshape(1, 1, 26)
    out = standardize_depth(Volume3D(data), 25)
    assert np.array_equal(out.data[0, 0], np.arange(25))


def test_depth_pad_23_one_each_side():
    data = np.ones((2, 2, 23))
    out = standardize_depth(Volume3D(data), 25)
    assert out.shape == (2, 2, 25)
    assert np.all(out.data[:, :, 0] == 0)
    assert np.all(out.data[:, :, 24] == 0)
    assert np.all(out.data[:, :, 1:24] == 1)


def test_depth_pad_24_appends_at_end_on_tie():
    data = np.ones((1, 1, 24))
    out = standardize_depth(Volume3D(data), 25)
    assert np.all(out.data[0, 0, :24] == 1)
    assert out.data[0, 0, 24] == 0


def test_depth_crop_preserves_interior_slices():
    rng = np.random.default_rng(5)
    for d in (26, 29, 31, 40):
        data = rng.normal(size=(3, 3, d))
        out = standardize_depth(Volume3D(data), 25)
        front = (d - 25) // 2
        assert np.array_equal(out.data, data[:, :, front : front + 25])


def test_depth_pad_embeds_input_contiguously():
    rng = np.random.default_rng(6)
    for d in (20, 23, 24):
        data = rng.normal(size=(3, 3, d))
        out = standardize_depth(Volume3D(data), 25)
        front = (25 - d) // 2
        assert np.array_equal(out.data[:, :, front : front + d], data)


def test_normalize_endpoints():
    out = normalize_intensity(Volume3D(np.array([[[0.0, 5.0, 10.0]]])))
    assert np.array_equal(out.data, np.array([[[0.0, 0.5, 1.0]]]))


def test_normalize_constant_to_zeros():
    out = normalize_intensity(Volume3D(np.full((3, 3, 3), 42.0)))
    assert np.all(out.data == 0.0)


def test_normalize_hits_zero_and_one():
    rng = np.random.default_rng(2)
    for _ in range(5):
        data = rng.normal(size=(6, 5, 4)) * rng.uniform(0.1, 100)
        out = normalize_intensity(Volume3D(data))
        assert out.data.min() == 0.0
        assert out.data.max() == 1.0


def test_standardize_shape_contract():
    rng = np.random.default_rng(3)
    cube = standardize(Volume3D(rng.uniform(size=(112, 112, 30))), "P001")
    assert cube.shape == (224, 224, 25)
    assert cube.data.min() >= 0.0 and cube.data.max() <= 1.0
    assert cube.source_id == "P001"
    cube.validate()


def test_standardize_idempotent_on_standard_input():
    rng = np.random.default_rng(4)
    data = rng.uniform(size=(224, 224, 25))
    data.flat[0] = 0.0
    data.flat[-1] = 1.0
    cube = standardize(Volume3D(data), "x")
    assert np.max(np.abs(cube.data - data)) < 1e-12


def test_standardize_constant_input_all_zero():
    # depth >= target: no pad slices intervene, normalization is degenerate
    cube = standardize(Volume3D(np.full((50, 50, 25), 5.0)), "const")
    assert cube.shape == (224, 224, 25)
    assert np.all(cube.data == 0.0)


def test_standardize_constant_shallow_input_pads_then_normalizes():
    # depth < target: zero padding precedes normalization (fixed stage order),
    # so the constant interior maps to 1 and the pad slices to 0
    cube = standardize(Volume3D(np.full((50, 50, 10), 5.0)), "const")
    assert cube.shape == (224, 224, 25)
    assert np.all(cube.data[:, :, 7:17] == 1.0)
    assert np.all(cube.data[:, :, :7] == 0.0)
    assert np.all(cube.data[:, :, 17:] == 0.0)


def test_standardize_small_targets():
    rng = np.random.default_rng(8)
    cube = standardize(Volume3D(rng.uniform(size=(40, 40, 12))), "small", 16, 16, 8)
    assert cube.shape == (16, 16, 8)
    cube.validate(strict_shape=False)


def test_minmax_on_arrays():
    assert np.array_equal(minmax_normalize(np.array([2.0, 4.0])), np.array([0.0, 1.0]))


def test_cube_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    cube = StandardCube(rng.uniform(size=(8, 8, 5)), source_id="P042")
    path = tmp_path / "cube.vol"
    save_cube(path, cube)
    loaded = load_cube(path)
    assert np.array_equal(loaded.data, cube.data)
    assert loaded.source_id == "P042"
    assert loaded.normalization == "MinMax"
