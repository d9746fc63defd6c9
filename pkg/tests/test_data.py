import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hadmst.data import (
    BACKGROUND_RGB,
    DatasetError,
    area_pool_matrix,
    build_synthetic_dataset,
    default_lr_size,
    denormalize_expression,
    downsample_st,
    fit_normalization,
    generate_synthetic_pair,
    merge_gene_panels,
    normalize_expression,
    read_dataset,
    select_hvg,
    synthetic_mapping,
)
from hadmst.structures import HRStMap, LRStMap


def test_lr_size_ratio():
    assert default_lr_size(256) == 26
    assert default_lr_size(64) == 7


def test_synthetic_pair_deterministic():
    a = generate_synthetic_pair(np.random.default_rng(5), 4, 64)
    b = generate_synthetic_pair(np.random.default_rng(5), 4, 64)
    np.testing.assert_array_equal(a[0].rgb, b[0].rgb)
    np.testing.assert_array_equal(a[1].values, b[1].values)


def test_synthetic_pair_contracts():
    tile, hr = generate_synthetic_pair(np.random.default_rng(0), 6, 64)
    assert tile.rgb.shape == (3, 64, 64) and hr.values.shape == (6, 64, 64)
    assert tile.rgb.min() >= 0 and tile.rgb.max() <= 1
    assert hr.values.min() >= 0 and np.isfinite(hr.values).all()
    assert hr.gene_panel == [f"SYN{i:03d}" for i in range(6)]


def test_empty_blob_draw_is_background():
    tile, hr = generate_synthetic_pair(np.random.default_rng(0), 3, 64, n_blobs=0)
    np.testing.assert_allclose(tile.rgb, np.broadcast_to(BACKGROUND_RGB[:, None, None], (3, 64, 64)), atol=1e-7)
    base = synthetic_mapping(3).baseline
    np.testing.assert_allclose(hr.values, np.broadcast_to(base[:, None, None], (3, 64, 64)), rtol=1e-6)


def test_synthetic_pair_rejects_small_inputs():
    with pytest.raises(ValueError):
        generate_synthetic_pair(np.random.default_rng(0), 1, 64)
    with pytest.raises(ValueError):
        generate_synthetic_pair(np.random.default_rng(0), 4, 32)


def test_corpus_has_coexpressed_genes():
    rng = np.random.default_rng(0)
    best = 0.0
    for _ in range(500):
        _, hr = generate_synthetic_pair(rng, 8, 64)
        r = np.corrcoef(hr.values.reshape(8, -1))
        best = max(best, np.nanmax(np.abs(r - np.eye(8))))
        if best > 0.5:
            break
    assert best > 0.5


def test_downsample_constant():
    out = downsample_st(np.full((2, 256, 256), 3.5), (26, 26))
    np.testing.assert_allclose(out, 3.5, rtol=1e-12)


def test_downsample_integer_factor_equals_mean_pooling(rng):
    x = rng.random((2, 260, 260))
    ref = x.reshape(2, 26, 10, 26, 10).mean(axis=(2, 4))
    np.testing.assert_allclose(downsample_st(x, (26, 26)), ref, rtol=0, atol=1e-12)


def test_downsample_preserves_global_mean(rng):
    x = rng.random((3, 256, 256))
    assert abs(downsample_st(x, 26).mean() - x.mean()) < 1e-6


def test_downsample_fractional_bin_scalar_oracle(rng):
    x = rng.random((10, 10))
    out = downsample_st(x, (3, 3))
    scale = 10 / 3
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for p in range(10):
                for q in range(10):
                    oy = max(0.0, min((i + 1) * scale, p + 1) - max(i * scale, p))
                    ox = max(0.0, min((j + 1) * scale, q + 1) - max(j * scale, q))
                    acc += oy * ox * x[p, q]
            assert out[i, j] == pytest.approx(acc / scale ** 2, abs=1e-12)


def test_downsample_types_and_errors():
    hr = HRStMap(np.ones((2, 64, 64)), ["a", "b"])
    lr = downsample_st(hr, (7, 7))
    assert isinstance(lr, LRStMap) and lr.values.shape == (2, 7, 7) and lr.pixel_size_um == 100.0
    t = downsample_st(torch.ones(1, 2, 64, 64), (7, 7))
    assert isinstance(t, torch.Tensor) and t.shape == (1, 2, 7, 7)
    with pytest.raises(ValueError):
        downsample_st(np.ones((8, 8)), (9, 9))


@given(
    x=arrays(np.float64, (12, 12), elements=st.floats(-10, 10)),
    y=arrays(np.float64, (12, 12), elements=st.floats(-10, 10)),
    a=st.floats(-3, 3),
    b=st.floats(-3, 3),
)
@settings(max_examples=50, deadline=None)
def test_downsample_linear(x, y, a, b):
    lhs = downsample_st(a * x + b * y, (5, 5))
    rhs = a * downsample_st(x, (5, 5)) + b * downsample_st(y, (5, 5))
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


@given(n_in=st.integers(1, 300), data=st.data())
@settings(max_examples=50, deadline=None)
def test_area_pool_rows_sum_to_one(n_in, data):
    n_out = data.draw(st.integers(1, n_in))
    m = area_pool_matrix(n_in, n_out)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(m.sum(axis=0), n_out / n_in, atol=1e-12)


NORM = {"min": [0.0, 0.5], "max": [1.0, 2.0]}


def test_normalize_zero_is_minus_one():
    out = normalize_expression(np.zeros((2, 3, 3)), NORM)
    assert np.all(out[0] == -1.0)


def test_normalize_hand_value_clamps():
    out = normalize_expression(np.full((2, 1, 1), math.e - 1), NORM)
    assert out[0, 0, 0] == pytest.approx(1.0, abs=1e-12)
    assert normalize_expression(np.full((2, 1, 1), 100.0), NORM)[0, 0, 0] == 1.0


@given(arrays(np.float64, (2, 4, 4), elements=st.floats(0.0, 5.0)))
@settings(max_examples=50, deadline=None)
def test_normalize_round_trip(raw):
    norm = {"min": [0.0, 0.0], "max": [math.log1p(5.0), math.log1p(5.0)]}
    back = denormalize_expression(normalize_expression(raw, norm), norm)
    np.testing.assert_allclose(back, raw, rtol=1e-6, atol=1e-9)


def test_normalize_rejects_negative_and_degenerate():
    with pytest.raises(ValueError):
        normalize_expression(-np.ones((2, 1, 1)), NORM)
    with pytest.raises(ValueError):
        normalize_expression(np.ones((2, 1, 1)), {"min": [0.0, 1.0], "max": [1.0, 1.0]})


def test_fit_normalization_uses_gene_axis(rng):
    raw = rng.random((4, 3, 5, 5)) * 10
    norm = fit_normalization(raw)
    np.testing.assert_allclose(norm["min"], np.log1p(raw).min(axis=(0, 2, 3)))
    np.testing.assert_allclose(norm["max"], np.log1p(raw).max(axis=(0, 2, 3)))


def test_hvg_excludes_constant_gene(rng):
    x = rng.random((30, 5)) * 10
    x[:, 3] = 2.0
    assert 3 not in select_hvg(x, 4)


def test_hvg_ties_broken_by_identifier():
    x = np.tile(np.array([[0.0], [1.0]]), (1, 4))
    assert select_hvg(x, 2, ["d", "b", "a", "c"]) == [2, 1]


def test_hvg_k_too_large():
    with pytest.raises(ValueError):
        select_hvg(np.ones((3, 2)), 3)


def test_merge_panels_dedup():
    a = [f"G{i}" for i in range(200)]
    b = [f"G{i}" for i in range(120, 320)]
    merged = merge_gene_panels(a, b)
    assert len(merged) == 320 == len(set(a) | set(b))
    assert merged[:200] == a


def test_merge_panels_280_distinct():
    a = [f"G{i}" for i in range(200)]
    b = [f"G{i}" for i in range(80, 280)]
    assert len(merge_gene_panels(a, b)) == 280


def test_dataset_round_trip(tiny_dataset):
    again = read_dataset(tiny_dataset.root)
    np.testing.assert_array_equal(again.hr_raw, tiny_dataset.hr_raw)
    np.testing.assert_array_equal(again.he, tiny_dataset.he)
    m = tiny_dataset.manifest
    assert not set(m.split["train"]) & set(m.split["test"])
    assert sorted(m.split["train"] + m.split["test"]) == sorted(tiny_dataset.tile_ids)
    assert tiny_dataset.lr_raw.shape[-2:] == (7, 7)


def test_dataset_reproducible(tmp_path):
    a = build_synthetic_dataset(tmp_path / "a", seed=1, num_genes=3, n_train=3, n_test=2)
    b = build_synthetic_dataset(tmp_path / "b", seed=1, num_genes=3, n_train=3, n_test=2)
    np.testing.assert_array_equal(a.hr_raw, b.hr_raw)
    assert a.manifest.checksums == b.manifest.checksums


def _small(tmp_path):
    return build_synthetic_dataset(tmp_path, seed=2, num_genes=3, n_train=3, n_test=2)


def test_tampered_gene_count_rejected(tmp_path):
    _small(tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["gene_panel"].append("EXTRA")
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(DatasetError):
        read_dataset(tmp_path)


def test_corrupt_tile_names_tile(tmp_path):
    ds = _small(tmp_path)
    tid = ds.tile_ids[1]
    path = tmp_path / f"tile_{tid}_hr.npy"
    arr = np.load(path)
    arr[0, 0, 0] += 1
    np.save(path, arr)
    with pytest.raises(DatasetError, match=tid):
        read_dataset(tmp_path)


def test_missing_tile_names_tile(tmp_path):
    ds = _small(tmp_path)
    tid = ds.tile_ids[0]
    (tmp_path / f"tile_{tid}_lr.npy").unlink()
    with pytest.raises(DatasetError, match=tid):
        read_dataset(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError):
        read_dataset(tmp_path)


def test_normalisation_from_train_split_only(tiny_dataset):
    train = tiny_dataset.hr_raw[tiny_dataset.indices("train")]
    np.testing.assert_allclose(tiny_dataset.manifest.normalization["min"], fit_normalization(train)["min"])
    hr = tiny_dataset.hr_model(tiny_dataset.indices("train"))
    assert hr.min() == -1.0 and hr.max() == 1.0
