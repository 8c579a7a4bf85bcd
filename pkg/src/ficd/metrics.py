"""Image-quality metrics on [0, 1] volumes and Centiloid quantification."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .volume import EVAL, Volume3

PSNR_IDENTICAL = math.inf

PAPER_ANCHORS = (1.008, 1.996)


def _eval_pair(a, b):
    arrs = []
    for v in (a, b):
        if isinstance(v, Volume3):
            if v.range_tag != EVAL:
                raise ValueError(f"metrics expect eval-range volumes, got {v.range_tag!r}")
            v = v.voxels
        arrs.append(np.asarray(v, dtype=np.float64))
    if arrs[0].shape != arrs[1].shape:
        raise ValueError(f"shape mismatch {arrs[0].shape} vs {arrs[1].shape}")
    return arrs


def mae(a, b):
    a, b = _eval_pair(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(a, b, max_value=1.0):
    """PSNR in dB; identical inputs give :data:`PSNR_IDENTICAL` (+inf)."""
    a, b = _eval_pair(a, b)
    d = a - b
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(max_value ** 2 / mse)


def ssim3d(a, b, window=7, k1=0.01, k2=0.03, data_range=1.0):
    """Mean SSIM over every fully contained cubic window (uniform weights)."""
    a, b = _eval_pair(a, b)
    if any(s < window for s in a.shape):
        raise ValueError(f"window {window} larger than volume {a.shape}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    axes = (-3, -2, -1)
    wa = sliding_window_view(a, (window,) * 3)
    wb = sliding_window_view(b, (window,) * 3)
    mu_a = wa.mean(axis=axes)
    mu_b = wb.mean(axis=axes)
    da = wa - mu_a[..., None, None, None]
    db = wb - mu_b[..., None, None, None]
    var_a = (da * da).mean(axis=axes)
    var_b = (db * db).mean(axis=axes)
    cov = (da * db).mean(axis=axes)
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def joint_histogram(a, b, bins=32):
    """Counts over ``bins`` equal-width bins on [0, 1]; the top edge is closed."""
    a, b = _eval_pair(a, b)
    ia = np.clip((a * bins).astype(np.int64), 0, bins - 1).ravel()
    ib = np.clip((b * bins).astype(np.int64), 0, bins - 1).ravel()
    hist = np.zeros((bins, bins))
    np.add.at(hist, (ia, ib), 1.0)
    return hist


def entropy(p):
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def nmi(a, b, bins=32):
    """``2 I(A;B) / (H(A) + H(B))`` from a joint histogram."""
    if bins < 2:
        raise ValueError("nmi needs at least 2 bins")
    hist = joint_histogram(a, b, bins)
    p = hist / hist.sum()
    ha = entropy(p.sum(axis=1))
    hb = entropy(p.sum(axis=0))
    hab = entropy(p.ravel())
    if ha + hb == 0.0:
        return 1.0
    return 2.0 * (ha + hb - hab) / (ha + hb)


# ----------------------------------------------------------------------------
# Centiloid

@dataclass(frozen=True)
class CentiloidAnchors:
    suvr_yc: float = PAPER_ANCHORS[0]
    suvr_ad: float = PAPER_ANCHORS[1]

    def __post_init__(self):
        if not self.suvr_ad > self.suvr_yc > 0:
            raise ValueError(f"need suvr_ad > suvr_yc > 0, got {self.suvr_yc}, {self.suvr_ad}")


def centiloid(suvr_ind, anchors=CentiloidAnchors()):
    return 100.0 * (suvr_ind - anchors.suvr_yc) / (anchors.suvr_ad - anchors.suvr_yc)


def ctx_mean_suvr(suvr, ctx_voi):
    s = suvr.voxels if isinstance(suvr, Volume3) else np.asarray(suvr, dtype=np.float64)
    m = ctx_voi.voxels if isinstance(ctx_voi, Volume3) else np.asarray(ctx_voi)
    if s.shape != m.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {m.shape}")
    m = m != 0
    if not m.any():
        raise ValueError("CTX mask is empty")
    return float(s[m].mean())


# ----------------------------------------------------------------------------
# reports

METRIC_COLUMNS = ("psnr", "ssim", "mae", "nmi")


def evaluate_pair(pred, truth, bins=32, window=7):
    return {"psnr": psnr(pred, truth), "ssim": ssim3d(pred, truth, window=window),
            "mae": mae(pred, truth), "nmi": nmi(pred, truth, bins)}


def _fmt(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return f"{v:.6f}"


def format_report(rows, columns=METRIC_COLUMNS):
    """CSV text: header, one line per pair, then mean and std footers.

    Infinite PSNR values are left out of the footer statistics and the
    number excluded is noted in a trailing comment line.
    """
    lines = ["pair_id," + ",".join(columns)]
    for pair_id, vals in rows:
        lines.append(f"{pair_id}," + ",".join(_fmt(vals[c]) for c in columns))
    means, stds, excluded = [], [], 0
    for c in columns:
        vals = np.array([v[c] for _, v in rows], dtype=np.float64)
        finite = vals[np.isfinite(vals)]
        if c == "psnr":
            excluded = int(vals.size - finite.size)
        if finite.size:
            means.append(_fmt(float(finite.mean())))
            stds.append(_fmt(float(finite.std())))
        else:
            means.append("nan")
            stds.append("nan")
    lines.append("mean," + ",".join(means))
    lines.append("std," + ",".join(stds))
    if excluded:
        lines.append(f"# psnr: {excluded} identical pair(s) excluded from mean/std")
    return "\n".join(lines) + "\n"
