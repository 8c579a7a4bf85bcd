"""Training objectives.

Every loss exists twice: as a plain array function for reporting and
oracle checks, and as a graph builder (``*_g``) that the trainer
differentiates.  Reductions are means over all voxels of the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor
from .volume import Volume3

# fixed affine map taking SUVr in [0, 3.2] to [-1, 1]
SUVR_SCALE = 1.0 / 1.6
SUVR_SHIFT = -1.0


@dataclass
class LossReport:
    l_noise: float
    l_image: float
    l_total: float
    l_suvr: float | None = None
    l_suvr_ctx: float | None = None

    def as_row(self):
        return [self.l_noise, self.l_image, self.l_total]


def _arr(x):
    if isinstance(x, Volume3):
        return x.voxels
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _pair(a, b, what):
    a, b = _arr(a), _arr(b)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def noise_loss(eps, eps_hat):
    a, b = _pair(eps, eps_hat, "noise_loss")
    d = a - b
    return float(np.mean(d * d))


def image_loss(x0, x0_hat):
    a, b = _pair(x0, x0_hat, "image_loss")
    return float(np.mean(np.abs(a - b)))


def hybrid_loss(eps, eps_hat, x0, x0_hat) -> LossReport:
    ln = noise_loss(eps, eps_hat)
    li = image_loss(x0, x0_hat)
    return LossReport(ln, li, ln + li)


def _mask(m):
    m = _arr(m) != 0
    if not m.any():
        raise ValueError("mask is empty")
    return m


def suvr_map(suv, cerebellum) -> Volume3:
    """Divide an SUV map by its mean over the reference mask."""
    s, m = _pair(suv, cerebellum, "suvr_map")
    m = _mask(m)
    ref = s[m].mean()
    if not ref > 0:
        raise ValueError(f"reference region mean must be positive, got {ref}")
    return Volume3(s / ref)


def suvr_to_train(suvr):
    return _arr(suvr) * SUVR_SCALE + SUVR_SHIFT


def suvr_from_train(x):
    return (_arr(x) - SUVR_SHIFT) / SUVR_SCALE


def suvr_constraint(suvr_true, suvr_hat, ctx_voi):
    """Global and CTX-restricted mean absolute SUVr differences."""
    a, b = _pair(suvr_true, suvr_hat, "suvr_constraint")
    m = _mask(np.broadcast_to(_arr(ctx_voi), a.shape))
    d = np.abs(a - b)
    return float(d.mean()), float(d[m].mean())


# ----------------------------------------------------------------------------
# graph versions

def noise_loss_g(g: Graph, eps, eps_hat):
    return g.mean(g.square(g.add(eps_hat, g.scale(eps, factor=-1.0))))


def image_loss_g(g: Graph, x0, x0_hat):
    return g.mean(g.abs(g.add(x0_hat, g.scale(x0, factor=-1.0))))


def masked_l1_g(g: Graph, x0, x0_hat, mask):
    """Mean |x0 - x0_hat| over the voxels where ``mask`` is set."""
    mask = _arr(mask)
    count = float(np.count_nonzero(mask))
    if count == 0:
        raise ValueError("mask is empty")
    diff = g.abs(g.add(x0_hat, g.scale(x0, factor=-1.0)))
    return g.scale(g.sum(g.mul(diff, Tensor(mask))), factor=1.0 / count)


def hybrid_loss_g(g: Graph, eps, eps_hat, x0, x0_hat):
    ln = noise_loss_g(g, eps, eps_hat)
    li = image_loss_g(g, x0, x0_hat)
    return g.add(ln, li), ln, li
