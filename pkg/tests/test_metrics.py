import csv
import io

import numpy as np
import pytest

from gradmorph import tensor_core as tc
from gradmorph.metrics import (DegenerateDistributionError, MetricsReport, TranslationLossConfig,
                               dice, fnr, fpr, gaussian_kde, kde_curve, l1_mean, mean_stderr,
                               segmentation_report, silverman_bandwidth, ssim, summary_csv,
                               translation_loss)
from gradmorph.tensor_core import ContractViolation


def loop_confusion(p, g):
    tp = fp = fn = tn = 0
    for a, b in zip(p.ravel(), g.ravel()):
        if a == 1 and b == 1:
            tp += 1
        elif a == 1:
            fp += 1
        elif b == 1:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def test_segmentation_metrics_match_loop_oracle():
    r = np.random.default_rng(0)
    for _ in range(1000):
        p = (r.random((16, 16)) < r.random()).astype(int)
        g = (r.random((16, 16)) < r.random()).astype(int)
        tp, fp, fn, tn = loop_confusion(p, g)
        d = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
        assert dice(p, g) == pytest.approx(d, abs=1e-15)
        assert dice(p, g) == dice(g, p)
        assert fpr(p, g) == pytest.approx(fp / (fp + tn) if fp + tn else 0.0, abs=1e-15)
        assert fnr(p, g) == pytest.approx(fn / (fn + tp) if fn + tp else 0.0, abs=1e-15)
        for v in (dice(p, g), fpr(p, g), fnr(p, g)):
            assert 0.0 <= v <= 1.0


def test_segmentation_metric_hand_cases():
    g = np.zeros((4, 4), int)
    g[:2] = 1
    assert dice(g, g) == 1.0
    assert dice(g, 1 - g) == 0.0
    half = np.zeros_like(g)
    half[0] = 1
    assert dice(half, g) == pytest.approx(2 / 3)
    ones = np.ones_like(g)
    assert fpr(ones, g) == 1.0 and fnr(ones, g) == 0.0
    assert fpr(g, g) == 0.0 and fnr(g, g) == 0.0
    empty = np.zeros_like(g)
    assert dice(empty, empty) == 1.0
    assert dice(empty, g) == 0.0
    assert fnr(empty, empty) == 0.0 and fpr(ones, ones) == 0.0


def test_positive_class_selects_foreground():
    g = np.array([[0, 1, 2, 2]])
    p = np.array([[0, 2, 2, 1]])
    assert dice(p, g, positive_class=2) == pytest.approx(2 * 1 / 4)


def ssim_direct(a, b, w=8, k1=0.01, k2=0.03, R=1.0):
    c1, c2 = (k1 * R) ** 2, (k2 * R) ** 2
    vals = []
    for c in range(a.shape[0]):
        for i in range(a.shape[1] - w + 1):
            for j in range(a.shape[2] - w + 1):
                x = a[c, i:i + w, j:j + w].ravel()
                y = b[c, i:i + w, j:j + w].ravel()
                mx, my = x.mean(), y.mean()
                vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
                cov = ((x - mx) * (y - my)).mean()
                vals.append((2 * mx * my + c1) * (2 * cov + c2)
                            / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_matches_direct_formula():
    r = np.random.default_rng(1)
    for _ in range(100):
        a = r.random((1, 16, 16))
        b = np.clip(a + r.normal(0, r.random() * 0.5, a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(ssim_direct(a, b), abs=1e-10)
    a, b = r.random((3, 10, 12)), r.random((3, 10, 12))
    cfg = TranslationLossConfig(ssim_window=4, dynamic_range=2.0)
    assert ssim(a, b, cfg) == pytest.approx(ssim_direct(a, b, 4, R=2.0), abs=1e-10)


def test_ssim_identity_symmetry_and_range():
    r = np.random.default_rng(2)
    for _ in range(20):
        a, b = r.random((1, 12, 12)) * 3 - 1, r.random((1, 12, 12))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)
        assert -1.0 <= ssim(a, b) <= 1.0
    # inverted structure at matched luminance gives negative similarity
    a = r.random((1, 12, 12))
    assert ssim(a, 1 - a) < 0


def test_ssim_rejects_small_images():
    with pytest.raises(ContractViolation):
        ssim(np.zeros((1, 7, 9)), np.zeros((1, 7, 9)))
    with pytest.raises(ContractViolation):
        ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 9)))


def test_l1_examples_and_oracle():
    assert l1_mean(np.array([0.0]), np.array([3.0])) == 3.0
    r = np.random.default_rng(3)
    a, b = r.standard_normal((2, 5, 5)), r.standard_normal((2, 5, 5))
    assert l1_mean(a, a) == 0.0
    loop = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert l1_mean(a, b) == pytest.approx(loop, abs=1e-14)


def test_translation_loss_values():
    r = np.random.default_rng(4)
    a, b = r.random((1, 9, 9)), r.random((1, 9, 9))
    assert translation_loss(a, a).item() == pytest.approx(0.0, abs=1e-12)
    cfg0 = TranslationLossConfig(lam=0.0)
    assert translation_loss(a, b, cfg0).item() == pytest.approx(1 - ssim(a, b), abs=1e-12)
    cfg3 = TranslationLossConfig(lam=3.0)
    assert translation_loss(a, b, cfg3).item() == pytest.approx(
        1 - ssim(a, b) + 3 * l1_mean(a, b), abs=1e-12)
    assert translation_loss(a, b).item() > 0
    batch_a, batch_b = np.stack([a, b]), np.stack([b, b])
    assert translation_loss(batch_a, batch_b).item() == pytest.approx(
        (translation_loss(a, b).item() + 0.0) / 2, abs=1e-12)


def test_translation_loss_gradient_matches_finite_differences():
    r = np.random.default_rng(5)
    out, target = r.random((1, 8, 8)), r.random((1, 8, 8))
    err, _, _ = tc.gradcheck(lambda o: translation_loss(o, target), [out], n_coords=64, h=1e-6)
    assert err <= 1e-4
    err, _, _ = tc.gradcheck(lambda o: translation_loss(o, target, TranslationLossConfig(lam=0.0)),
                             [out], n_coords=64)
    assert err <= 1e-6


@pytest.mark.parametrize("kw", [{"lam": -1.0}, {"ssim_window": 1}, {"dynamic_range": 0.0}])
def test_loss_config_validation(kw):
    with pytest.raises(ContractViolation):
        TranslationLossConfig(**kw).validate()


def test_kde_integrates_to_one():
    r = np.random.default_rng(6)
    for samples in [r.standard_normal(50), r.random(7), r.exponential(size=200), np.array([0.0, 1.0])]:
        grid, dens = kde_curve(samples)
        h = silverman_bandwidth(samples)
        assert grid[0] == pytest.approx(samples.min() - 3 * h)
        assert grid[-1] == pytest.approx(samples.max() + 3 * h)
        assert np.all(dens >= 0)
        assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=0.01)


def test_kde_standard_normal_mode():
    # one draw has sd ~0.02 at the mode, so average ten independent draws
    est = [gaussian_kde(np.random.default_rng(k).standard_normal(1000), [0.0])[0] for k in range(10)]
    assert abs(np.mean(est) - 1 / np.sqrt(2 * np.pi)) <= 0.15 / np.sqrt(2 * np.pi)


def test_kde_matches_direct_sum():
    s = np.random.default_rng(9).standard_normal(40)
    h = silverman_bandwidth(s)
    grid = np.linspace(-3, 3, 13)
    direct = [sum(np.exp(-0.5 * ((x - v) / h) ** 2) for v in s) / (len(s) * h * np.sqrt(2 * np.pi))
              for x in grid]
    np.testing.assert_allclose(gaussian_kde(s, grid), direct, rtol=1e-12)


def test_kde_symmetric_and_degenerate_cases():
    grid = np.linspace(-4, 4, 81)
    dens = gaussian_kde([-1.0, 1.0], grid)
    np.testing.assert_allclose(dens, dens[::-1], rtol=0, atol=1e-15)
    with pytest.raises(DegenerateDistributionError):
        gaussian_kde([0.0, 0.0, 0.0], grid)
    with pytest.raises(DegenerateDistributionError):
        gaussian_kde([1.0], grid)


def test_silverman_rule():
    s = np.array([1.0, 2.0, 4.0, 8.0, 16.0])
    sd = s.std(ddof=1)
    iqr = np.subtract(*np.percentile(s, [75, 25]))
    assert silverman_bandwidth(s) == pytest.approx(0.9 * min(sd, iqr / 1.34) * 5 ** -0.2)
    # IQR of zero falls back to the standard deviation
    t = np.array([0.0] * 10 + [1.0])
    assert silverman_bandwidth(t) == pytest.approx(0.9 * t.std(ddof=1) * 11 ** -0.2)


def test_mean_stderr_matches_two_pass():
    r = np.random.default_rng(8)
    for n in (2, 3, 17, 500):
        v = r.standard_normal(n) * 10 + 3
        mu = sum(v) / n
        var = sum((x - mu) ** 2 for x in v) / (n - 1)
        m, se = mean_stderr(v)
        assert m == pytest.approx(mu, abs=1e-12)
        assert se == pytest.approx(np.sqrt(var / n), abs=1e-12)
    assert mean_stderr([4.0]) == (4.0, 0.0)


def test_report_serialization():
    g = np.zeros((4, 4), int)
    g[1:3, 1:3] = 1
    preds = [g, np.ones_like(g), np.zeros_like(g)]
    rep = segmentation_report(["a", "b", "c"], preds, [g, g, g], extra={"ssim": [0.5, 0.25, 1.0]})
    assert rep.metrics == ["dice", "fpr", "fnr", "ssim"]
    rows = list(csv.reader(io.StringIO(rep.per_sample_csv())))
    assert rows[0] == ["id", "dice", "fpr", "fnr", "ssim"]
    assert [r[0] for r in rows[1:]] == ["a", "b", "c"]
    assert float(rows[2][1]) == pytest.approx(0.4)
    mu, se = rep.aggregates["ssim"]
    assert mu == pytest.approx(1.75 / 3)
    assert set(rep.kde) == {"dice", "fpr", "fnr", "ssim"}
    summary = list(csv.reader(io.StringIO(summary_csv({"orig": rep}))))
    assert summary[0] == ["method", "metric", "mean", "stderr", "n"]
    assert len(summary) == 5 and summary[1][0] == "orig" and summary[1][4] == "3"
    kde_rows = list(csv.reader(io.StringIO(rep.kde_csv())))
    assert kde_rows[0] == ["metric", "x", "density"] and len(kde_rows) == 1 + 4 * 512


def test_report_skips_degenerate_kde():
    rep = MetricsReport([{"id": "a", "dice": 1.0}, {"id": "b", "dice": 1.0}]).finalize()
    assert rep.aggregates["dice"] == (1.0, 0.0)
    assert rep.kde == {}
