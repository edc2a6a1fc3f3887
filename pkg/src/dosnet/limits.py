"""Smallest occupancy sets that still touch the true position.

For each representation the set is centered on the prediction and sized so
the truth sits exactly on its boundary. Closed forms:

* circle: radius ``e``, area ``pi e^2``
* ellipse with a fixed orientation: semi-axes ``sqrt(2)|dx|``, ``sqrt(2)|dy|``
  in the ellipse frame, area ``2 pi |dx dy|``
* free orientation with aspect bound ``A``: align the major axis with the
  offset, area ``pi e^2 / A``, which tends to 0 as ``A`` grows

:func:`brute_force_min_area` searches a log-spaced grid of semi-axes and is
the independent check on all three.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import EllipseBatch
from .models import velocity_direction_theta

SEMI_MIN, SEMI_MAX = 1e-3, 1e3
DEFAULT_RESOLUTION = 2000
DEFAULT_THETA_STEPS = 720
FAMILIES = ("circle", "fixed_0", "fixed_45", "v1", "v2", "free")


def optimal_circle(error):
    error = np.asarray(error, dtype=np.float64)
    if np.any(error < 0):
        raise ValueError("error must be nonnegative")
    return error, math.pi * error * error


def optimal_fixed_theta_ellipse(dx, dy):
    """``(a, b, area, degenerate)`` for offsets already in the ellipse frame."""
    dx = np.abs(np.asarray(dx, dtype=np.float64))
    dy = np.abs(np.asarray(dy, dtype=np.float64))
    a = math.sqrt(2.0) * dx
    b = math.sqrt(2.0) * dy
    return a, b, 2.0 * math.pi * dx * dy, (dx == 0) | (dy == 0)


def optimal_free_ellipse(error, max_aspect=math.inf):
    error = np.asarray(error, dtype=np.float64)
    if math.isinf(max_aspect):
        return np.zeros_like(error)
    return math.pi * error * error / max_aspect


def semi_axis_grid(resolution=DEFAULT_RESOLUTION):
    if resolution < 200:
        raise ValueError("resolution must be at least 200")
    return np.logspace(math.log10(SEMI_MIN), math.log10(SEMI_MAX), resolution)


def brute_force_min_area(offset, theta0=0.0, resolution=DEFAULT_RESOLUTION, max_aspect=math.inf,
                         theta_steps=DEFAULT_THETA_STEPS, backend=None):
    """Grid minimum of ``pi a b`` over ellipses centered at 0 holding ``offset``.

    ``theta0=None`` frees the orientation: an outer loop over ``theta_steps``
    angles in [0, pi). ``max_aspect=1`` restricts the search to circles.
    """
    dx, dy = float(offset[0]), float(offset[1])
    grid = semi_axis_grid(resolution)
    if theta0 is None:
        thetas = np.arange(theta_steps) * (math.pi / theta_steps)
    else:
        thetas = np.array([float(theta0)])
    c, s = np.cos(thetas), np.sin(thetas)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return float(kernels.min_area_grid(u, v, grid, max_aspect, backend=backend).min())


def limit_ellipses(center, truth, theta):
    """Touching fixed-orientation ellipses; degenerate offsets get NaN axes."""
    center = np.asarray(center, dtype=np.float64)
    d = np.asarray(truth, dtype=np.float64) - center
    theta = np.broadcast_to(np.asarray(theta, dtype=np.float64), d.shape[:-1])
    c, s = np.cos(theta), np.sin(theta)
    u = c * d[..., 0] + s * d[..., 1]
    v = -s * d[..., 0] + c * d[..., 1]
    a, b, _, degenerate = optimal_fixed_theta_ellipse(u, v)
    a = np.where(degenerate, np.nan, a)
    b = np.where(degenerate, np.nan, b)
    return EllipseBatch(center, 2.0 * a, 2.0 * b, theta), degenerate


def _frame_offsets(offset, theta):
    c, s = np.cos(theta), np.sin(theta)
    return c * offset[..., 0] + s * offset[..., 1], -s * offset[..., 0] + c * offset[..., 1]


def per_sample_limits(yhat, truth, mask, rotation, anchor_velocity):
    """Minimal area per family and sample, shape (N, T), NaN where invalid.

    Offsets live in the agent frame; ``rotation`` maps agent to world so the
    fixed families use world-frame orientations 0 and pi/4.
    """
    mask = np.asarray(mask, dtype=bool)
    off = np.where(mask[..., None], np.nan_to_num(truth) - yhat, 0.0)
    n, t = mask.shape
    rot = np.asarray(rotation, dtype=np.float64)[:, None]
    av = np.asarray(anchor_velocity, dtype=np.float64)
    v1 = np.where(np.hypot(av[:, 0], av[:, 1]) > 0, np.arctan2(av[:, 1], av[:, 0]), 0.0)
    frames = {
        "fixed_0": np.broadcast_to(0.0 - rot, (n, t)),
        "fixed_45": np.broadcast_to(math.pi / 4 - rot, (n, t)),
        "v1": np.broadcast_to(v1[:, None], (n, t)),
        "v2": velocity_direction_theta(yhat),
    }
    out = {"circle": optimal_circle(np.hypot(off[..., 0], off[..., 1]))[1]}
    for name, theta in frames.items():
        out[name] = optimal_fixed_theta_ellipse(*_frame_offsets(off, theta))[2]
    out["free"] = np.zeros((n, t))
    return {k: np.where(mask, v, np.nan) for k, v in out.items()}


@dataclass
class LimitReport:
    horizon_s: list
    mean: dict  # family -> per-horizon mean (None where absent)
    p95: dict
    n: list
    pr_osa: list | None = None
    degenerate: dict = field(default_factory=dict)

    def rows(self):
        for i, h in enumerate(self.horizon_s):
            for fam in FAMILIES:
                yield {"family": fam, "horizon_s": f"{h:g}", "mean_m2": _fmt(self.mean[fam][i]),
                       "p95_m2": _fmt(self.p95[fam][i]), "n": self.n[i]}
            if self.pr_osa is not None:
                yield {"family": "PR_z1", "horizon_s": f"{h:g}", "mean_m2": _fmt(self.pr_osa[i]),
                       "p95_m2": "", "n": self.n[i]}


def _fmt(x):
    return "" if x is None else f"{x:.6f}"


def limit_report(yhat, truth, mask, rotation, anchor_velocity, dt, pr_osa=None) -> LimitReport:
    per = per_sample_limits(yhat, truth, mask, rotation, anchor_velocity)
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=0)
    mean, p95 = {}, {}
    for fam in FAMILIES:
        mean[fam], p95[fam] = [], []
        for t in range(mask.shape[1]):
            vals = per[fam][mask[:, t], t]
            mean[fam].append(float(vals.mean()) if len(vals) else None)
            p95[fam].append(float(np.percentile(vals, 95)) if len(vals) else None)
    degenerate = {fam: int(np.sum((per[fam] == 0) & mask)) for fam in FAMILIES if fam != "free"}
    pr = None if pr_osa is None else [None if not np.isfinite(x) else float(x) for x in pr_osa]
    return LimitReport([float(f"{(i + 1) * dt:.9g}") for i in range(mask.shape[1])],
                       mean, p95, [int(c) for c in counts], pr, degenerate)


def write_limit_csv(path, report: LimitReport):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["family", "horizon_s", "mean_m2", "p95_m2", "n"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(report.rows())


def limit_svg(path, report: LimitReport):
    """Mean minimal area per family against horizon, with PR z=1 for reference."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "dosnet"
    fig, ax = plt.subplots(figsize=(6, 4))
    hs = report.horizon_s
    for fam in FAMILIES:
        ys = [np.nan if y is None else y for y in report.mean[fam]]
        ax.plot(hs, ys, marker="o", label=fam)
    if report.pr_osa is not None:
        ax.plot(hs, [np.nan if y is None else y for y in report.pr_osa], "k--", label="PR z=1")
    ax.set_xlabel("horizon (s)")
    ax.set_ylabel("minimal OSA (m$^2$)")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
