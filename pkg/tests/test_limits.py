import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dosnet import limits
from dosnet.kernels import mahalanobis

coord = st.floats(-8, 8).filter(lambda x: abs(x) > 0.05)


def test_closed_form_examples():
    assert limits.optimal_circle(2.0)[1] == pytest.approx(4 * math.pi)
    a, b, area, deg = limits.optimal_fixed_theta_ellipse(1.0, 1.0)
    assert area == pytest.approx(2 * math.pi) and not deg
    assert a == pytest.approx(math.sqrt(2)) and b == pytest.approx(math.sqrt(2))
    assert limits.optimal_fixed_theta_ellipse(3.0, 0.0)[3]
    assert limits.optimal_free_ellipse(2.0) == 0.0
    assert limits.optimal_free_ellipse(2.0, 4.0) == pytest.approx(math.pi)


def test_negative_error_rejected():
    with pytest.raises(ValueError):
        limits.optimal_circle(-1.0)


def test_grid_resolution_floor():
    with pytest.raises(ValueError):
        limits.semi_axis_grid(100)


@given(coord, coord)
def test_fixed_theta_brute_force_within_one_percent(dx, dy):
    closed = limits.optimal_fixed_theta_ellipse(dx, dy)[2]
    brute = limits.brute_force_min_area((dx, dy), theta0=0.0)
    assert closed <= brute * (1 + 1e-12)
    assert brute <= closed * 1.01


@given(st.floats(0.1, 8))
def test_circle_brute_force_within_one_percent(e):
    brute = limits.brute_force_min_area((e, 0.0), max_aspect=1.0, resolution=4000)
    assert brute == pytest.approx(math.pi * e * e, rel=0.01)


@given(coord, coord, st.floats(0, math.pi))
def test_touching_ellipse_boundary(dx, dy, theta):
    center = np.array([[1.0, -2.0]])
    truth = center + np.array([[dx, dy]])
    ell, deg = limits.limit_ellipses(center, truth, theta)
    if deg[0]:
        return
    d = mahalanobis(ell.center[0, 0], ell.center[0, 1], ell.length[0], ell.width[0], ell.theta[0],
                    truth[0, 0], truth[0, 1])
    assert abs(float(d) - 1.0) < 1e-9


def test_degenerate_limit_has_nan_axes():
    ell, deg = limits.limit_ellipses(np.zeros((1, 2)), np.array([[2.0, 0.0]]), 0.0)
    assert deg[0] and np.isnan(ell.length[0])


def _samples(n=50, t=8, seed=0):
    rng = np.random.default_rng(seed)
    yhat = np.cumsum(rng.normal(1, 0.3, (n, t, 2)), axis=1)
    truth = yhat + rng.normal(0, 1, yhat.shape)
    mask = rng.random((n, t)) > 0.1
    truth[~mask] = np.nan
    return yhat, truth, mask, rng.uniform(-math.pi, math.pi, n), rng.normal(3, 1, (n, 2))


def test_family_ordering():
    per = limits.per_sample_limits(*_samples())
    valid = ~np.isnan(per["circle"])
    for fam in ("fixed_0", "fixed_45", "v1", "v2"):
        assert (per[fam][valid] <= per["circle"][valid] + 1e-12).all()
        assert (per[fam][valid] >= 0).all()
    assert (per["free"][valid] == 0).all()


def test_fixed_families_are_world_frame():
    yhat, truth, mask, rot, av = _samples(n=1, t=1)
    mask[:] = True
    truth = yhat + np.array([1.0, 2.0])
    # rotation maps agent to world; the world-frame offset is R(rot) applied to (1, 2)
    c, s = math.cos(rot[0]), math.sin(rot[0])
    wx, wy = c * 1.0 - s * 2.0, s * 1.0 + c * 2.0
    per = limits.per_sample_limits(yhat, truth, mask, rot, av)
    assert per["fixed_0"][0, 0] == pytest.approx(2 * math.pi * abs(wx * wy))


def test_perfect_predictor_gives_zero_areas():
    yhat, _, mask, rot, av = _samples()
    rep = limits.limit_report(yhat, yhat.copy(), mask, rot, av, 0.5)
    for fam in limits.FAMILIES:
        assert all(m == 0 for m in rep.mean[fam])
    assert rep.degenerate["circle"] == int(mask.sum())


def test_limit_report_csv(tmp_path):
    rep = limits.limit_report(*_samples(), 0.5, pr_osa=np.full(8, 2.0))
    limits.write_limit_csv(tmp_path / "l.csv", rep)
    lines = (tmp_path / "l.csv").read_text().splitlines()
    assert lines[0] == "family,horizon_s,mean_m2,p95_m2,n"
    assert len(lines) == 1 + 8 * (len(limits.FAMILIES) + 1)
