"""Evaluation: SSIM, Jacobian-determinant statistics and boxplot-style aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .warp import diffeo_stats, jacobian_det

WINDOW = 11
WINDOW_SIGMA = 1.5
K1, K2 = 0.01, 0.03
DATA_RANGE = 1.0

METRIC_FIELDS = ("ssim", "mean_detJ", "std_detJ", "neg_frac", "final_loss")


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    """Normalized 1D Gaussian taps; the 2D window is their outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    k = taps.size
    rows = sliding_window_view(img, k, axis=1) @ taps
    return sliding_window_view(rows, k, axis=0) @ taps


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = _as_hw(a)
    b = _as_hw(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < WINDOW:
        raise ValueError(f"ssim needs images of at least {WINDOW}x{WINDOW}, got {a.shape}")
    taps = gaussian_window()
    c1 = (K1 * DATA_RANGE) ** 2
    c2 = (K2 * DATA_RANGE) ** 2
    mu_a, mu_b = _filter_valid(a, taps), _filter_valid(b, taps)
    var_a = _filter_valid(a * a, taps) - mu_a * mu_a
    var_b = _filter_valid(b * b, taps) - mu_b * mu_b
    cov = _filter_valid(a * b, taps) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all full 11x11 Gaussian windows (sigma 1.5), L = 1."""
    return float(ssim_map(a, b).mean())


def _as_hw(img) -> np.ndarray:
    x = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if x.ndim == 3:
        if x.shape[0] != 1:
            raise ValueError(f"ssim expects a single-channel image, got {x.shape}")
        x = x[0]
    if x.ndim != 2:
        raise ValueError(f"ssim expects an H x W image, got shape {x.shape}")
    return x


@dataclass
class PairMetrics:
    ssim: float
    mean_detJ: float
    std_detJ: float
    neg_frac: float
    final_loss: float
    method: str = "dip"
    pair: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_pair(pair, result) -> PairMetrics:
    """Metrics of a finished run against its pair's target image."""
    fixed, warped = pair.fixed, result.warped
    if fixed.shape[0] == 1:
        s = ssim(fixed, warped)
    else:
        s = float(np.mean([ssim(f, w) for f, w in zip(fixed, warped)]))
    stats = diffeo_stats(jacobian_det(result.phi))
    return PairMetrics(s, stats.mean, stats.std, stats.negative_fraction,
                       result.final_loss, result.method)


def summarize(values) -> dict[str, float]:
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25, 50, 75], method="linear")
    return {"min": float(v.min()), "q1": float(q1), "median": float(med), "q3": float(q3),
            "max": float(v.max()), "mean": float(v.mean()), "std": float(v.std()),
            "count": int(v.size)}


def aggregate(metrics: list[PairMetrics]) -> dict[str, dict[str, dict[str, float]]]:
    """Per method, per metric: min, quartiles, max, mean and population std."""
    if not metrics:
        raise ValueError("aggregate needs at least one PairMetrics row")
    report: dict[str, dict[str, dict[str, float]]] = {}
    for method in sorted({m.method for m in metrics}):
        rows = sorted((m for m in metrics if m.method == method),
                      key=lambda m: tuple(getattr(m, f) for f in METRIC_FIELDS))
        report[method] = {f: summarize([getattr(m, f) for m in rows]) for f in METRIC_FIELDS}
    return report


def table_view(report: dict) -> dict[str, dict[str, str]]:
    """Compact "mean +- std" strings of SSIM and det J per method."""
    return {method: {"SSIM": f"{stats['ssim']['mean']:.3f} ± {stats['ssim']['std']:.3f}",
                     "detJ": f"{stats['mean_detJ']['mean']:.3f} ± {stats['mean_detJ']['std']:.3f}"}
            for method, stats in report.items()}
