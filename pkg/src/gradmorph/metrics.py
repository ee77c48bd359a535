"""Segmentation metrics, SSIM / L1 translation loss, and Gaussian KDE reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor_core as tc
from .tensor_core import ContractViolation, Tensor


class DegenerateDistributionError(ValueError):
    """KDE requested for samples with zero spread."""


# ---------------------------------------------------------------- overlap metrics


def confusion(pred, gt, positive_class: int = 1) -> tuple[int, int, int, int]:
    """``(tp, fp, fn, tn)`` pixel counts for one class against the rest."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractViolation(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    p = pred == positive_class
    g = gt == positive_class
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return tp, fp, fn, tn


def dice(pred, gt, positive_class: int = 1) -> float:
    """``2|P & G| / (|P| + |G|)``; 1.0 when both masks are empty."""
    tp, fp, fn, _ = confusion(pred, gt, positive_class)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2.0 * tp / denom


def fpr(pred, gt, positive_class: int = 1) -> float:
    _, fp, _, tn = confusion(pred, gt, positive_class)
    return 0.0 if fp + tn == 0 else fp / (fp + tn)


def fnr(pred, gt, positive_class: int = 1) -> float:
    tp, _, fn, _ = confusion(pred, gt, positive_class)
    return 0.0 if fn + tp == 0 else fn / (fn + tp)


# ---------------------------------------------------------------- SSIM / L1


@dataclass
class TranslationLossConfig:
    lam: float = 1.0  # weight of the L1 term
    ssim_window: int = 8
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    dynamic_range: float = 1.0

    def validate(self) -> None:
        if self.lam < 0:
            raise ContractViolation("L1 weight must be non-negative")
        if self.ssim_window < 2:
            raise ContractViolation("SSIM window must be at least 2")
        if self.dynamic_range <= 0:
            raise ContractViolation("dynamic range must be positive")


def ssim_map(a, b, cfg: TranslationLossConfig | None = None) -> Tensor:
    """Per-window SSIM, uniform window, stride 1, population statistics.

    Inputs ``[..., C, H, W]``; output ``[..., C, H-w+1, W-w+1]``.
    """
    cfg = cfg or TranslationLossConfig()
    a, b = tc.as_tensor(a), tc.as_tensor(b)
    if a.shape != b.shape:
        raise ContractViolation(f"SSIM operands differ in shape: {a.shape} vs {b.shape}")
    win = cfg.ssim_window
    if a.ndim < 2 or a.shape[-1] < win or a.shape[-2] < win:
        raise ContractViolation(f"image {a.shape} smaller than SSIM window {win}")
    c1 = (cfg.ssim_k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.ssim_k2 * cfg.dynamic_range) ** 2
    mu_a = tc.box_mean(a, win)
    mu_b = tc.box_mean(b, win)
    mu_ab = mu_a * mu_b
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    var_a = tc.box_mean(a * a, win) - mu_aa
    var_b = tc.box_mean(b * b, win) - mu_bb
    cov = tc.box_mean(a * b, win) - mu_ab
    num = (2.0 * mu_ab + c1) * (2.0 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, cfg: TranslationLossConfig | None = None) -> float:
    """Mean SSIM over all windows and channels."""
    return float(ssim_map(a, b, cfg).data.mean())


def l1_mean(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"L1 operands differ in shape: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).mean())


def translation_loss(output, target, cfg: TranslationLossConfig | None = None) -> Tensor:
    """``(1 - SSIM(output, target)) + lam * mean|output - target|`` on the tape.

    A ``[N, C, H, W]`` batch yields the mean of the per-sample losses.
    """
    cfg = cfg or TranslationLossConfig()
    cfg.validate()
    output, target = tc.as_tensor(output), tc.as_tensor(target)
    smap = ssim_map(output, target, cfg)
    diff = tc.absolute(output - target)
    if output.ndim == 4:
        per = (1.0 - tc.mean_per_sample(smap)) + cfg.lam * tc.mean_per_sample(diff)
        return tc.mean(per)
    return (1.0 - tc.mean(smap)) + cfg.lam * tc.mean(diff)


# ---------------------------------------------------------------- KDE


def silverman_bandwidth(samples) -> float:
    """``0.9 * min(sd, IQR / 1.34) * n^(-1/5)``; falls back to ``sd`` when the IQR is zero."""
    x = np.asarray(samples, dtype=np.float64)
    n = x.size
    if n < 2:
        raise DegenerateDistributionError("KDE needs at least two samples")
    sd = float(np.std(x, ddof=1))
    if sd == 0.0:
        raise DegenerateDistributionError("KDE samples have zero variance")
    q75, q25 = np.percentile(x, [75, 25])
    iqr = float(q75 - q25)
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * n ** (-0.2)


def gaussian_kde(samples, grid, bandwidth: float | None = None) -> np.ndarray:
    """Gaussian kernel density of ``samples`` evaluated at ``grid``."""
    x = np.asarray(samples, dtype=np.float64)
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    g = np.asarray(grid, dtype=np.float64)
    z = (g[:, None] - x[None, :]) / h
    return np.exp(-0.5 * z * z).sum(axis=1) / (x.size * h * math.sqrt(2 * math.pi))


def kde_curve(samples, points: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """KDE on an even grid from ``min - 3h`` to ``max + 3h``."""
    x = np.asarray(samples, dtype=np.float64)
    h = silverman_bandwidth(x)
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, points)
    return grid, gaussian_kde(x, grid, h)


# ---------------------------------------------------------------- reports


def mean_stderr(values) -> tuple[float, float]:
    """Mean and standard error ``sd / sqrt(n)`` (sample sd); stderr 0 for n < 2."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    if v.size < 2:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


SEG_METRICS = ("dice", "fpr", "fnr")


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    aggregates: dict[str, tuple[float, float]] = field(default_factory=dict)
    kde: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def metrics(self) -> list[str]:
        if not self.rows:
            return []
        return [k for k in self.rows[0] if k != "id"]

    def column(self, metric: str) -> np.ndarray:
        return np.array([r[metric] for r in self.rows], dtype=np.float64)

    def finalize(self, kde_points: int = 512) -> "MetricsReport":
        """Fill aggregates and KDE curves; metrics with zero spread get no curve."""
        self.aggregates = {m: mean_stderr(self.column(m)) for m in self.metrics}
        self.kde = {}
        for m in self.metrics:
            try:
                self.kde[m] = kde_curve(self.column(m), kde_points)
            except DegenerateDistributionError:
                pass
        return self

    def per_sample_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id"] + self.metrics)
        for r in self.rows:
            w.writerow([r["id"]] + [repr(float(r[m])) for m in self.metrics])
        return buf.getvalue()

    def summary_rows(self, method: str) -> list[list]:
        n = len(self.rows)
        return [[method, m, repr(mu), repr(se), n] for m, (mu, se) in self.aggregates.items()]

    def kde_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "x", "density"])
        for m, (grid, dens) in self.kde.items():
            for x, d in zip(grid, dens):
                w.writerow([m, repr(float(x)), repr(float(d))])
        return buf.getvalue()


def segmentation_report(ids: Sequence[str], preds: Iterable[np.ndarray], gts: Iterable[np.ndarray],
                        positive_class: int = 1,
                        extra: Mapping[str, Sequence[float]] | None = None) -> MetricsReport:
    rows = []
    for i, (sid, p, g) in enumerate(zip(ids, preds, gts)):
        row = {"id": sid, "dice": dice(p, g, positive_class), "fpr": fpr(p, g, positive_class),
               "fnr": fnr(p, g, positive_class)}
        for k, vals in (extra or {}).items():
            row[k] = float(vals[i])
        rows.append(row)
    return MetricsReport(rows).finalize()


def summary_csv(reports: Mapping[str, MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "metric", "mean", "stderr", "n"])
    for method, rep in reports.items():
        w.writerows(rep.summary_rows(method))
    return buf.getvalue()
