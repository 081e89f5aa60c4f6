"""Evaluation metrics with foreground masking: NMAE / PSNR / SSIM in 2D,
MAE3D / PSNR3D / SSIM3D over per-subject slice stacks, and Dice.

SSIM uses an 11x11 Gaussian window (sigma 1.5, K1=0.01, K2=0.03); the map is
computed only where the full window fits, averaged over window centers inside
the mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, stats

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(Exception):
    pass


def _check_mask(mask: np.ndarray, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise MetricError(f"mask shape {mask.shape} does not match image shape {tuple(shape)}")
    if not mask.any():
        raise MetricError("empty mask")
    return mask


def _values(img) -> np.ndarray:
    return np.asarray(getattr(img, "values", img), dtype=np.float64)


def nmae(pred, ref, mask=None) -> float:
    """Mean absolute error over the mask, normalized by the reference's
    dynamic range over the mask."""
    p, r = _values(pred), _values(ref)
    m = _check_mask(mask, r.shape)
    rng = r[m].max() - r[m].min()
    if rng == 0:
        raise MetricError("reference is constant on the mask; NMAE undefined")
    return float(np.abs(p[m] - r[m]).mean() / rng)


def mae(pred, ref, mask=None) -> float:
    p, r = _values(pred), _values(ref)
    m = _check_mask(mask, r.shape)
    return float(np.abs(p[m] - r[m]).mean())


def psnr(pred, ref, mask=None, data_range: float = 2.0) -> float:
    """10 log10(range^2 / masked MSE) in dB; identical inputs return inf
    (capped at PSNR_CAP_DB when aggregating)."""
    p, r = _values(pred), _values(ref)
    m = _check_mask(mask, r.shape)
    mse = float(((p[m] - r[m]) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_kernel(ndim: int, size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g1 = np.exp(-(ax**2) / (2.0 * sigma**2))
    g1 /= g1.sum()
    kernel = g1
    for _ in range(ndim - 1):
        kernel = np.multiply.outer(kernel, g1)
    return kernel


def _ssim_map(p: np.ndarray, r: np.ndarray, data_range: float, window: int, sigma: float):
    kernel = _gaussian_kernel(p.ndim, window, sigma)

    def filt(img):
        return ndimage.correlate(img, kernel, mode="constant")

    mu_p, mu_r = filt(p), filt(r)
    var_p = filt(p * p) - mu_p**2
    var_r = filt(r * r) - mu_r**2
    cov = filt(p * r) - mu_p * mu_r
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    ssim = ((2 * mu_p * mu_r + c1) * (2 * cov + c2)) / (
        (mu_p**2 + mu_r**2 + c1) * (var_p + var_r + c2)
    )
    # only window centers where the full window fits
    margin = window // 2
    valid = np.zeros(p.shape, dtype=bool)
    valid[tuple(slice(margin, s - margin) for s in p.shape)] = True
    return ssim, valid


def ssim(pred, ref, mask=None, data_range: float = 2.0, window: int = SSIM_WINDOW,
         sigma: float = SSIM_SIGMA) -> float:
    """Windowed structural similarity averaged over in-mask window centers."""
    p, r = _values(pred), _values(ref)
    if any(s < window for s in p.shape):
        raise MetricError(f"image {p.shape} smaller than SSIM window {window}")
    m = _check_mask(mask, r.shape)
    smap, valid = _ssim_map(p, r, data_range, window, sigma)
    sel = m & valid
    if not sel.any():
        raise MetricError("no in-mask window centers with full support")
    return float(smap[sel].mean())


# ---------------------------------------------------------------------------
# volume metrics over per-subject slice stacks


def _stack(volume) -> np.ndarray:
    if isinstance(volume, np.ndarray):
        return np.asarray(volume, dtype=np.float64)
    slices = [_values(s) for s in volume]
    shapes = {s.shape for s in slices}
    if len(shapes) > 1:
        raise MetricError(f"inconsistent slice shapes in volume: {sorted(shapes)}")
    return np.stack(slices, axis=0)


def mae3d(pred_volume, ref_volume, mask_volume=None) -> float:
    """Volume MAE. Inputs are expected in physical units (denormalized)."""
    return mae(_stack(pred_volume), _stack(ref_volume), mask_volume)


def psnr3d(pred_volume, ref_volume, mask_volume=None, data_range: float = 2.0) -> float:
    return psnr(_stack(pred_volume), _stack(ref_volume), mask_volume, data_range)


def ssim3d(pred_volume, ref_volume, mask_volume=None, data_range: float = 2.0) -> float:
    """SSIM with a 3D window; the per-axis window shrinks to fit thin stacks
    (largest odd size <= axis length, capped at the 2D window size)."""
    p, r = _stack(pred_volume), _stack(ref_volume)
    window = min([SSIM_WINDOW] + [s if s % 2 else s - 1 for s in p.shape])
    if window < 1:
        raise MetricError("volume too small for SSIM")
    m = _check_mask(mask_volume, r.shape)
    smap, valid = _ssim_map(p, r, data_range, window, SSIM_SIGMA)
    sel = m & valid
    if not sel.any():
        raise MetricError("no in-mask window centers with full support")
    return float(smap[sel].mean())


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Overlap coefficient 2|A.B| / (|A|+|B|); two empty masks count as 1."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise MetricError("mask shapes differ")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def paired_ttest(values_a, values_b) -> tuple[float, float]:
    """Paired t-test helper; returns (t statistic, p-value)."""
    res = stats.ttest_rel(np.asarray(values_a), np.asarray(values_b))
    return float(res.statistic), float(res.pvalue)


# ---------------------------------------------------------------------------
# reporting


@dataclass
class MetricsReport:
    """Per-sample rows plus aggregate mean/std per metric; PSNR infinities are
    capped at PSNR_CAP_DB before aggregation."""

    per_sample: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def add(self, sample_id: str, **metric_values) -> None:
        self.per_sample.append({"sample_id": sample_id, **metric_values})

    def metric_names(self) -> list[str]:
        names: list[str] = []
        for row in self.per_sample:
            for k in row:
                if k != "sample_id" and k not in names:
                    names.append(k)
        return names

    def aggregate(self) -> dict[str, dict[str, float]]:
        out = {}
        for name in self.metric_names():
            vals = np.array(
                [min(row[name], PSNR_CAP_DB) if name.startswith("psnr") else row[name]
                 for row in self.per_sample if name in row],
                dtype=np.float64,
            )
            out[name] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": int(vals.size)}
        return out
