"""Mask-aware training objectives.

Every loss reduces with :func:`~dosnet.autodiff.masked_mean` over all valid
(agent, step) pairs. Invalid targets may hold NaN; they are replaced before
touching the tape so they can never leak into a value or gradient.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

SQRT_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    k: float = 0.1
    alpha: float = 3.0
    beta: float = 0.0

    def __post_init__(self):
        if self.k < 0:
            raise ConfigError("k must be nonnegative")
        if self.alpha < 1:
            raise ConfigError("alpha must be >= 1")
        if self.beta < 0:
            raise ConfigError("beta must be nonnegative")


def _clean(truth, mask, fill):
    mask = np.asarray(mask, dtype=bool)
    truth = np.asarray(truth, dtype=np.float64)
    return np.where(mask[..., None], truth, fill)


def mahalanobis_nodes(ell, truth, mask):
    """Smooth Mahalanobis distance of the truths to the ellipses, shape (B, T)."""
    tape = ell.length.tape
    truth = _clean(truth, mask, ell.center)
    dx = truth[..., 0] - ell.center[..., 0]
    dy = truth[..., 1] - ell.center[..., 1]
    if isinstance(ell.theta, ad.Node):
        u, v = ad.rotate(ell.theta, tape.const(dx), tape.const(dy))
    else:
        c, s = np.cos(ell.theta), np.sin(ell.theta)
        u, v = tape.const(c * dx + s * dy), tape.const(c * dy - s * dx)
    # (u / (l/2))^2 + (v / (w/2))^2
    d2 = ad.scale(ad.square(u / ell.length) + ad.square(v / ell.width), 4.0)
    return ad.sqrt(ad.add_scalar(d2, SQRT_EPS))


def coverage_terms(d, alpha, beta):
    """Piecewise per-sample coverage penalty: d inside, d**alpha + beta outside."""
    outside = d.value > 1.0
    far = ad.add_scalar(ad.power(d, alpha), beta) if alpha != 1.0 else ad.add_scalar(d, beta)
    return ad.where(~outside, d, far)


def coverage_loss(ell, truth, mask, alpha=3.0, beta=0.0):
    d = mahalanobis_nodes(ell, truth, mask)
    return ad.masked_mean(coverage_terms(d, alpha, beta), mask)


def area_loss(ell, mask):
    return ad.masked_mean(ad.scale(ell.length * ell.width, math.pi / 4.0), mask)


def total_loss(coverage, area, k):
    return coverage + ad.scale(area, k) if k != 0 else coverage


def dos_loss(ell, truth, mask, cfg: LossConfig):
    """``(L, L_c, L_a)`` for a batch of predicted ellipses."""
    lc = coverage_loss(ell, truth, mask, cfg.alpha, cfg.beta)
    la = area_loss(ell, mask)
    return total_loss(lc, la, cfg.k), lc, la


def trajectory_mse(pred, truth, mask):
    """Masked mean squared Euclidean error of predicted positions (B, T, 2)."""
    tape = pred.tape
    truth = _clean(truth, mask, 0.0)
    diff = pred - tape.const(truth)
    sq = ad.sum_(ad.square(diff), axis=2)
    return ad.masked_mean(sq, mask)


def gaussian_nll(mx, my, sx, sy, rho, truth, mask):
    """Masked mean bivariate Gaussian negative log-likelihood."""
    tape = mx.tape
    truth = _clean(truth, mask, np.stack([mx.value, my.value], axis=-1))
    ex = (tape.const(truth[..., 0]) - mx) / sx
    ey = (tape.const(truth[..., 1]) - my) / sy
    one_m = 1.0 - ad.square(rho)
    quad = (ad.square(ex) + ad.square(ey) - ad.scale(rho * ex * ey, 2.0)) / one_m
    nll = (ad.log(sx) + ad.log(sy) + ad.scale(ad.log(one_m), 0.5) + ad.scale(quad, 0.5))
    nll = ad.add_scalar(nll, math.log(2.0 * math.pi))
    return ad.masked_mean(nll, mask)


def gaussian_nll_cov(mean, cov, truth, mask):
    """Numpy reference NLL from explicit covariance matrices (no tape)."""
    mask = np.asarray(mask, dtype=bool)
    cov = np.asarray(cov, dtype=np.float64)
    truth = _clean(truth, mask, mean)
    d = truth - mean
    inv = np.linalg.inv(cov)
    quad = np.einsum("...i,...ij,...j->...", d, inv, d)
    nll = math.log(2.0 * math.pi) + 0.5 * np.log(np.linalg.det(cov)) + 0.5 * quad
    return float(nll[mask].mean()) if mask.any() else 0.0


def error_regression_loss(radius, errors, mask):
    tape = radius.tape
    errors = np.where(np.asarray(mask, dtype=bool), np.asarray(errors, dtype=np.float64), 0.0)
    return ad.masked_mean(ad.square(radius - tape.const(errors)), mask)
