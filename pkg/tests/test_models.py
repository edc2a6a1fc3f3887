import math

import numpy as np
import pytest

from dosnet import autodiff as ad
from dosnet import models
from dosnet.errors import ConfigError, SchemaError


def _inputs(b=5, t=8, feat=6, seed=0):
    rng = np.random.default_rng(seed)
    yhat = np.cumsum(rng.normal(1.0, 0.3, (b, t, 2)), axis=1)
    return rng.normal(size=(b, feat)), yhat, rng.normal(2.0, 1.0, (b, 2))


def _ellipses(variant, seed=0):
    f, y, v = _inputs(seed=seed)
    head = models.DosHead(variant, feature_dim=6, hidden=5, embed=3, seed=seed)
    return models.predict_dos(head, f, y, v), y, v


@pytest.mark.parametrize("variant", models.VARIANTS)
def test_variant_constraints(variant):
    (c, l, w, th), y, v = _ellipses(variant)
    np.testing.assert_array_equal(c, y)
    assert l.shape == w.shape == th.shape == (5, 8)
    assert (l >= models.L_MIN).all() and (w >= models.L_MIN).all()
    if variant == "circle":
        np.testing.assert_array_equal(l, w)
    if variant == "theta0":
        np.testing.assert_array_equal(th, 0.0)
    if variant == "theta45":
        np.testing.assert_allclose(th, math.pi / 4)
    if variant == "v1":
        expect = np.mod(np.arctan2(v[:, 1], v[:, 0]), math.pi)
        np.testing.assert_allclose(th, np.repeat(expect[:, None], 8, axis=1))
    if variant == "v2":
        np.testing.assert_allclose(th, models.velocity_direction_theta(y))
    if variant == "free":
        assert ((th >= 0) & (th <= math.pi)).all()


def test_velocity_direction_holds_last_heading_when_stopped():
    y = np.zeros((1, 4, 2))
    y[0, 0] = (0.0, 1.0)
    y[0, 1] = (0.0, 1.0)  # no motion
    y[0, 2] = (1.0, 1.0)
    y[0, 3] = (1.0, 1.0)
    th = models.velocity_direction_theta(y)
    np.testing.assert_allclose(th[0], [math.pi / 2, math.pi / 2, 0.0, 0.0])


def test_unknown_variant():
    with pytest.raises(ConfigError):
        models.Variant.parse("square")


def test_predictor_shapes_and_cv_prior():
    pred = models.TrajectoryPredictor(hidden=8, embed=4, seed=1)
    for k in pred.params:
        if k.startswith("out."):
            pred.params[k][...] = 0.0
    hist = np.zeros((3, 6, 4))
    hist[:, :, 2] = 4.0  # vx in the agent frame
    mask = np.ones((3, 6), dtype=bool)
    tape = ad.Tape()
    y, h = pred.forward(tape, models.bind(tape, pred.params, False), hist, mask)
    assert y.shape == (3, 8, 2) and h.shape == (3, 8)
    # zero residuals reproduce constant-velocity extrapolation
    np.testing.assert_allclose(y.value[0, :, 0], 4.0 * 0.5 * np.arange(1, 9))
    np.testing.assert_allclose(y.value[..., 1], 0.0)


def test_predictor_ignores_masked_history():
    pred = models.TrajectoryPredictor(hidden=8, embed=4, seed=2)
    rng = np.random.default_rng(0)
    hist = rng.normal(size=(2, 6, 4))
    mask = np.ones((2, 6), dtype=bool)
    mask[:, :2] = False
    a = pred.forward(ad.Tape(), models.bind(ad.Tape(), pred.params, False), hist, mask)[0].value
    hist2 = hist.copy()
    hist2[:, :2] = 1e6
    b = pred.forward(ad.Tape(), models.bind(ad.Tape(), pred.params, False), hist2, mask)[0].value
    np.testing.assert_array_equal(a, b)


def test_gaussian_head_outputs_valid_covariance():
    f, y, _ = _inputs()
    head = models.GaussianHead(feature_dim=6, hidden=5, embed=3, seed=0)
    mean, cov = models.predict_gaussian(head, f, y)
    assert mean.shape == (5, 8, 2) and cov.shape == (5, 8, 2, 2)
    assert (np.linalg.eigvalsh(cov) > 0).all()


def test_radius_head_positive():
    f, y, _ = _inputs()
    r = models.predict_radius(models.RadiusHead(feature_dim=6, hidden=5, embed=3), f, y)
    assert r.shape == (5, 8) and (r > 0).all()


def test_checkpoint_round_trip(tmp_path):
    head = models.DosHead("v2", feature_dim=6, hidden=5, embed=3, seed=4)
    path = tmp_path / "h.npz"
    models.save_model(path, head, {"note": "x"})
    back, meta = models.load_model(path)
    assert meta["note"] == "x"
    assert back.variant == head.variant
    assert models.param_hash(back.params) == models.param_hash(head.params)


def test_checkpoint_shape_mismatch(tmp_path):
    a = models.DosHead("free", feature_dim=6, hidden=5, embed=3)
    b = models.DosHead("free", feature_dim=6, hidden=4, embed=3)
    path = tmp_path / "a.npz"
    models.save_checkpoint(path, a.params)
    with pytest.raises(SchemaError):
        models.load_checkpoint(path, expected=b.params)


def test_param_hash_changes_with_any_value():
    p = models.TrajectoryPredictor(hidden=4, embed=2).params
    h = models.param_hash(p)
    p["out.b"][0] += 1e-12
    assert models.param_hash(p) != h


def test_build_model_unknown_kind():
    with pytest.raises(ConfigError):
        models.build_model("mystery", {})
