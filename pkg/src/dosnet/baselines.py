"""Comparative occupancy-set families and the CR / OSA metrics.

Set families are produced as :class:`~dosnet.geometry.EllipseBatch` arrays of
shape (N, T) in each agent's frame. CR and OSA are rigid-motion invariant,
so scoring in the agent frame equals scoring in the world frame.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import EllipseBatch, gaussian_contour_batch

KINDS = ("PR", "SA", "circle_fixed", "circle_linear", "circle_error")
CSV_FIELDS = ("method", "param", "horizon_s", "CR_pct", "OSA_m2", "n")


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    z: float = 1.0
    r: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown baseline kind {self.kind!r}; expected one of {KINDS}")
        if self.z <= 0 or self.r <= 0:
            raise ConfigError("z and r must be positive")

    @property
    def param_name(self):
        return "r" if self.kind == "circle_fixed" else "z"

    @property
    def param(self):
        return self.r if self.kind == "circle_fixed" else self.z

    def with_param(self, value):
        if self.kind == "circle_fixed":
            return BaselineSpec(self.kind, self.z, value)
        return BaselineSpec(self.kind, value, self.r)

    @property
    def label(self):
        return f"{self.kind}({self.param_name}={self.param:g})"


@dataclass
class PredictorOutputs:
    """Everything a set family may need, per sample and future step."""

    yhat: np.ndarray  # (N, T, 2)
    dt: float
    gaussian: tuple | None = None  # (mean (N, T, 2), cov (N, T, 2, 2))
    radius: np.ndarray | None = None  # (N, T)
    r_e: np.ndarray | None = None  # (T,)

    @property
    def horizon_seconds(self):
        return (np.arange(self.yhat.shape[1]) + 1) * self.dt


def circles(center, radius):
    radius = np.broadcast_to(np.asarray(radius, dtype=np.float64), center.shape[:-1])
    return EllipseBatch(center, 2.0 * radius, 2.0 * radius, 0.0)


def baseline_sets(spec: BaselineSpec, out: PredictorOutputs) -> EllipseBatch:
    n, t = out.yhat.shape[:2]
    if spec.kind == "PR":
        if out.gaussian is None:
            raise ConfigError("PR sets need the Gaussian head output")
        mean, cov = out.gaussian
        return gaussian_contour_batch(mean, cov, spec.z)
    if spec.kind == "SA":
        if out.radius is None:
            raise ConfigError("SA sets need the radius head output")
        return circles(out.yhat, spec.z * np.asarray(out.radius))
    if spec.kind == "circle_fixed":
        return circles(out.yhat, np.full((n, t), spec.r))
    if spec.kind == "circle_linear":
        return circles(out.yhat, np.broadcast_to(spec.z * out.horizon_seconds, (n, t)))
    if out.r_e is None:
        raise ConfigError("circle_error sets need the error statistics table r_e")
    return circles(out.yhat, np.broadcast_to(spec.z * np.asarray(out.r_e), (n, t)))


def _clean(truths, mask):
    return np.where(np.asarray(mask, dtype=bool)[..., None], np.asarray(truths, dtype=np.float64), 0.0)


def coverage_rate(sets: EllipseBatch, truths, mask):
    """Percent of valid truths inside their set per step; NaN where a step has no samples."""
    mask = np.asarray(mask, dtype=bool)
    hits = sets.contains(_clean(truths, mask)) & mask
    counts = mask.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, 100.0 * hits.sum(axis=0) / counts, np.nan)


def mean_osa(sets: EllipseBatch, mask):
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=0)
    total = np.where(mask, sets.area(), 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, total / counts, np.nan)


@dataclass
class EvalReport:
    method: str
    params: dict
    horizon_s: list
    cr: list  # percent, None where absent
    osa: list  # m^2, None where absent
    n: list = field(default_factory=list)

    @property
    def param_label(self):
        return ";".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}" for k, v in sorted(self.params.items()))

    def at(self, seconds):
        i = int(np.argmin(np.abs(np.asarray(self.horizon_s) - seconds)))
        return self.cr[i], self.osa[i]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def csv_rows(self):
        for h, c, o, n in zip(self.horizon_s, self.cr, self.osa, self.n):
            yield {
                "method": self.method,
                "param": self.param_label,
                "horizon_s": f"{h:g}",
                "CR_pct": "" if c is None else f"{c:.6f}",
                "OSA_m2": "" if o is None else f"{o:.6f}",
                "n": str(n),
            }


def _opt(values):
    return [None if not np.isfinite(v) else float(v) for v in values]


def evaluate_sets(sets: EllipseBatch, truths, mask, method, params, dt) -> EvalReport:
    mask = np.asarray(mask, dtype=bool)
    t = mask.shape[1]
    return EvalReport(
        method, dict(params), [float(f"{(i + 1) * dt:.9g}") for i in range(t)],
        _opt(coverage_rate(sets, truths, mask)), _opt(mean_osa(sets, mask)),
        [int(c) for c in mask.sum(axis=0)],
    )


def evaluate_baseline(spec: BaselineSpec, out: PredictorOutputs, truths, mask) -> EvalReport:
    return evaluate_sets(baseline_sets(spec, out), truths, mask, spec.kind,
                         {spec.param_name: float(spec.param)}, out.dt)


def sweep(spec: BaselineSpec, grid, out: PredictorOutputs, truths, mask):
    """One report per grid value of the family's scale parameter (z, or r for fixed circles)."""
    return [evaluate_baseline(spec.with_param(float(v)), out, truths, mask) for v in grid]


def smallest_covering_circle(errors, target_cr):
    """Smallest fixed radius whose CR on ``errors`` reaches ``target_cr`` percent."""
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    need = math.ceil(target_cr / 100.0 * len(errors) - 1e-9)
    if need <= 0:
        return 0.0
    return float(errors[need - 1])


# -- report files -----------------------------------------------------------

def write_reports_csv(path, reports):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for rep in reports:
            for row in rep.csv_rows():
                w.writerow(row)


def read_reports_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_reports_json(path, reports):
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_reports_json(path):
    with open(path) as fh:
        return [EvalReport.from_dict(d) for d in json.load(fh)]


def table_rows(reports, horizons=(1.0, 2.0, 3.0, 4.0)):
    """Methods x horizons x {CR, OSA}: one dict per report."""
    rows = []
    for rep in reports:
        row = {"method": rep.method, "param": rep.param_label}
        for h in horizons:
            c, _ = rep.at(h)
            row[f"CR_{h:g}s"] = "" if c is None else f"{c:.1f}"
        for h in horizons:
            _, o = rep.at(h)
            row[f"OSA_{h:g}s"] = "" if o is None else f"{o:.3f}"
        rows.append(row)
    return rows


def write_table_csv(path, reports, horizons=(1.0, 2.0, 3.0, 4.0)):
    rows = table_rows(reports, horizons)
    fields = ["method", "param"] + [f"CR_{h:g}s" for h in horizons] + [f"OSA_{h:g}s" for h in horizons]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


def pareto_svg(path, reports, horizon=1.0):
    """CR vs OSA scatter, one polyline per method, at a single horizon."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "dosnet"
    fig, ax = plt.subplots(figsize=(6, 4))
    groups = {}
    for rep in reports:
        c, o = rep.at(horizon)
        if c is not None and o is not None:
            groups.setdefault(rep.method, []).append((o, c))
    for method, pts in sorted(groups.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=method)
    ax.set_xlabel(f"OSA at {horizon:g} s (m$^2$)")
    ax.set_ylabel(f"CR at {horizon:g} s (%)")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
