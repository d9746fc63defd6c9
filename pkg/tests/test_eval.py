import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from hadmst.eval import (
    GeneMetric,
    MetricsReport,
    gaussian_window,
    local_ssim_map,
    per_gene_report,
    render_overlay,
    rmse,
    ssim,
    ssim_map,
)


def reference_ssim(a, b):
    return structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                 use_sample_covariance=False, K1=0.01, K2=0.03)


def test_window_normalised_and_symmetric():
    w = gaussian_window()
    assert w.shape == (11, 11)
    assert w.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(w, w.T)


def test_identical_images_exactly_one(rng):
    a = rng.random((32, 32))
    assert ssim(a, a) == 1.0


def test_constant_pair_closed_form():
    c1, c2 = 1e-4, 9e-4
    expected = (c1 / (1 + c1)) * (c2 / c2)
    assert ssim(np.zeros((16, 16)), np.ones((16, 16))) == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(9.999e-5, rel=1e-4)


def test_matches_reference_implementation(rng):
    for _ in range(5):
        a, b = rng.random((32, 32)), rng.random((32, 32))
        assert abs(ssim(a, b) - reference_ssim(a, b)) < 1e-6
    a = rng.random((40, 36))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    assert abs(ssim(a, b) - reference_ssim(a, b)) < 1e-6


def test_multichannel_is_mean_of_channels(rng):
    a, b = rng.random((3, 20, 20)), rng.random((3, 20, 20))
    assert ssim(a, b) == pytest.approx(np.mean([ssim(a[c], b[c]) for c in range(3)]), abs=1e-12)


def test_ssim_shape_errors(rng):
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 13)))
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12)), np.zeros((12, 12)), data_range=0)
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


img = arrays(np.float64, (14, 14), elements=st.floats(0, 1))


@given(a=img, b=img)
@settings(max_examples=50, deadline=None)
def test_ssim_symmetric_and_bounded(a, b):
    s_ab, s_ba = ssim(a, b), ssim(b, a)
    assert abs(s_ab - s_ba) <= 1e-9
    assert s_ab <= 1.0 + 1e-12


def test_ssim_below_one_for_distinct_random(rng):
    a = rng.random((24, 24))
    b = a.copy()
    b[5, 7] += 0.2
    assert ssim(a, b) < 1.0


def test_local_map_mean_equals_ssim(rng):
    a, b = rng.random((30, 30)), rng.random((30, 30))
    assert local_ssim_map(a, b).mean() == pytest.approx(ssim(a, b), abs=1e-6)
    assert local_ssim_map(a, b, stride=4).shape == (5, 5)
    with pytest.raises(ValueError):
        local_ssim_map(a, b, stride=0)


def test_rmse_scalar_loop(rng):
    a, b = rng.random((4, 5)), rng.random((4, 5))
    ref = (sum((a[i, j] - b[i, j]) ** 2 for i in range(4) for j in range(5)) / 20) ** 0.5
    assert rmse(a, b) == pytest.approx(ref, abs=1e-12)
    assert rmse(a, a) == 0.0
    with pytest.raises(ValueError):
        rmse(a, b[:3])


def test_ssim_map_scalar_loop_oracle(rng):
    a, b = rng.random((13, 12)), rng.random((13, 12))
    w = gaussian_window()
    out = ssim_map(a, b)
    assert out.shape == (3, 2)
    for i in range(3):
        for j in range(2):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            mu_a, mu_b = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - mu_a) ** 2).sum()
            vb = (w * (pb - mu_b) ** 2).sum()
            cov = (w * (pa - mu_a) * (pb - mu_b)).sum()
            ref = ((2 * mu_a * mu_b + 1e-4) * (2 * cov + 9e-4)) / ((mu_a ** 2 + mu_b ** 2 + 1e-4) * (va + vb + 9e-4))
            assert out[i, j] == pytest.approx(ref, abs=1e-10)


def test_overlay_colour_endpoints(tmp_path):
    from PIL import Image

    tile = np.full((3, 16, 16), 0.5)
    low = render_overlay(tile, np.zeros((4, 4)), alpha=1.0)
    high = render_overlay(tile, np.ones((4, 4)), alpha=1.0, path=tmp_path / "overlay.png")
    r, g, _ = low[0, 0].astype(int)
    assert r > 150 and g < 40  # red end
    r, g, _ = high[0, 0].astype(int)
    assert g > 90 and r < 20  # green end
    assert Image.open(tmp_path / "overlay.png").size == (16, 16)
    with pytest.raises(ValueError):
        render_overlay(tile, np.zeros((4, 4)), alpha=1.5)


def _report():
    rows = []
    for gene, s, r in (("g1", 0.30, 0.16), ("g2", 0.3368, 0.166)):
        rows.append(GeneMetric(gene, "ours", s, r))
        rows.append(GeneMetric(gene, "bilinear", s - 0.1, r + 0.02))
    return MetricsReport(rows, config={"seed": 1})


def test_table_formatting_four_decimals():
    table = _report().table()
    assert table.splitlines()[-1] == "ours           | 0.1630 | 0.3184"
    assert "bilinear" in table.splitlines()[2]


def test_report_aggregate_and_outputs(tmp_path):
    rep = _report()
    agg = rep.aggregate()
    assert abs(agg["ssim"] - np.mean([r.ssim for r in rep.per_gene])) < 1e-9
    paths = rep.write(tmp_path)
    with open(paths["csv"]) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["gene", "method", "ssim", "rmse"]
    assert len(rows) == 1 + 4
    scatter = json.loads(paths["scatter"].read_text())
    assert scatter[0].keys() == {"gene", "ours_ssim", "baseline", "baseline_ssim"}
    summary = json.loads(paths["summary"].read_text())
    assert summary["config"] == {"seed": 1}


def test_per_gene_report_rows(rng):
    truth = rng.random((3, 2, 16, 16))
    pred = np.clip(truth + 0.05 * rng.standard_normal(truth.shape), 0, 1)
    base = {"nearest": rng.random(truth.shape), "bilinear": rng.random(truth.shape)}
    rep = per_gene_report(pred, truth, ["a", "b"], base)
    assert len(rep.rows) == 2 + 2 * 2
    row = rep.per_gene[1]
    assert row.ssim == pytest.approx(np.mean([ssim(pred[n, 1], truth[n, 1]) for n in range(3)]))
    assert row.rmse == pytest.approx(rmse(pred[:, 1], truth[:, 1]))
    with pytest.raises(ValueError):
        per_gene_report(pred, truth, ["a"])
