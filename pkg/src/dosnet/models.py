"""Trajectory predictor and the occupancy-set heads built on its features.

All forward passes run on an :class:`~dosnet.autodiff.Tape`. Parameters live
in plain ``dict[str, np.ndarray]`` stores and are bound to the tape either as
trainable leaves or as constants (frozen).
"""
from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, SchemaError, SkipAgent

CHECKPOINT_VERSION = 1
FEATURE_SCALE = 10.0  # metres (and m/s) per network input unit
L_MIN = 0.1
SIGMA_FLOOR = 1e-3
RHO_MAX = 0.99

VARIANTS = ("circle", "theta0", "theta45", "v1", "v2", "free")


# -- parameter helpers --------------------------------------------------------

def init_linear(rng, params, prefix, n_in, n_out):
    bound = 1.0 / math.sqrt(n_in)
    params[f"{prefix}.W"] = rng.uniform(-bound, bound, size=(n_in, n_out))
    params[f"{prefix}.b"] = rng.uniform(-bound, bound, size=n_out)


def init_gru(rng, params, prefix, n_in, n_hidden):
    params[f"{prefix}.Wx"] = rng.uniform(-1.0 / math.sqrt(n_in), 1.0 / math.sqrt(n_in),
                                         size=(n_in, 3 * n_hidden))
    params[f"{prefix}.Wh"] = rng.uniform(-1.0 / math.sqrt(n_hidden), 1.0 / math.sqrt(n_hidden),
                                         size=(n_hidden, 3 * n_hidden))
    params[f"{prefix}.bx"] = np.zeros(3 * n_hidden)
    params[f"{prefix}.bh"] = np.zeros(3 * n_hidden)


def bind(tape, params, trainable=True):
    if trainable:
        return {k: tape.param(k, v) for k, v in params.items()}
    return {k: tape.const(v) for k, v in params.items()}


def linear(P, prefix, x):
    return ad.add_row(x @ P[f"{prefix}.W"], P[f"{prefix}.b"])


def gru_input_proj(P, prefix, x):
    return ad.add_row(x @ P[f"{prefix}.Wx"], P[f"{prefix}.bx"])


def gru_cell(P, prefix, gx, h):
    """One GRU step given the input projection ``gx`` (B, 3H) and state ``h`` (B, H)."""
    return ad.gru_cell(gx, h, P[f"{prefix}.Wh"], P[f"{prefix}.bh"])


def gru_cell_composed(P, prefix, gx, h):
    """Same update as :func:`gru_cell`, built from elementary primitives."""
    n_h = h.shape[1]
    gh = ad.add_row(h @ P[f"{prefix}.Wh"], P[f"{prefix}.bh"])
    r = ad.sigmoid(gx[:, :n_h] + gh[:, :n_h])
    z = ad.sigmoid(gx[:, n_h:2 * n_h] + gh[:, n_h:2 * n_h])
    n = ad.tanh(gx[:, 2 * n_h:] + r * gh[:, 2 * n_h:])
    return n + z * (h - n)


def param_hash(params):
    h = hashlib.sha256()
    for name in sorted(params):
        v = np.ascontiguousarray(params[name], dtype=np.float64)
        h.update(name.encode())
        h.update(str(v.shape).encode())
        h.update(v.tobytes())
    return h.hexdigest()


def param_count(params):
    return int(sum(v.size for v in params.values()))


def save_checkpoint(path, params, meta=None):
    """Versioned container of named float64 tensors plus JSON metadata."""
    payload = {f"p:{k}": np.asarray(v, dtype=np.float64) for k, v in params.items()}
    payload["__version__"] = np.array([CHECKPOINT_VERSION])
    payload["__meta__"] = np.frombuffer(json.dumps(meta or {}, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, expected=None):
    """Load ``(params, meta)``; with ``expected`` the names and shapes must match."""
    with np.load(path, allow_pickle=False) as z:
        if "__version__" not in z.files or int(z["__version__"][0]) != CHECKPOINT_VERSION:
            raise SchemaError(f"{path}: unsupported checkpoint version")
        params = {k[2:]: z[k].copy() for k in z.files if k.startswith("p:")}
        meta = json.loads(bytes(z["__meta__"]).decode()) if "__meta__" in z.files else {}
    if expected is not None:
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise SchemaError(f"{path}: parameter names differ (missing {missing}, unexpected {extra})")
        for k, v in expected.items():
            if params[k].shape != v.shape:
                raise SchemaError(f"{path}: shape mismatch for {k}: {params[k].shape} vs {v.shape}")
    return params, meta


# -- trajectory predictor -----------------------------------------------------

class TrajectoryPredictor:
    """Encoder-decoder GRU over agent-frame history.

    The decoder predicts per-step displacement residuals on top of the
    anchor velocity, so positions are cumulative sums of
    ``v0 * dt + residual``.
    """

    kind = "predictor"

    def __init__(self, hidden=64, embed=32, t_fut=8, dt=0.5, seed=0):
        self.hidden, self.embed, self.t_fut, self.dt = hidden, embed, t_fut, dt
        rng = np.random.default_rng(seed)
        p = {}
        init_linear(rng, p, "embed", 4, embed)
        init_gru(rng, p, "enc", embed, hidden)
        init_gru(rng, p, "dec", hidden, hidden)
        init_linear(rng, p, "out", hidden, 2)
        self.params = p

    def config(self):
        return {"hidden": self.hidden, "embed": self.embed, "t_fut": self.t_fut, "dt": self.dt}

    def forward(self, tape, P, history, history_mask):
        """Returns ``(positions (B, t_fut, 2) node, features H (B, hidden) node)``."""
        history = np.asarray(history, dtype=np.float64)
        mask = np.asarray(history_mask, dtype=bool)
        if not mask.any(axis=1).all():
            raise SkipAgent("sample with an all-invalid history")
        feats = np.where(mask[..., None], history, 0.0) / FEATURE_SCALE
        b, t_hist, _ = feats.shape
        h = tape.const(np.zeros((b, self.hidden)))
        for j in range(t_hist):
            x = ad.tanh(linear(P, "embed", tape.const(feats[:, j])))
            h_new = gru_cell(P, "enc", gru_input_proj(P, "enc", x), h)
            m = mask[:, j]
            if m.all():
                h = h_new
            elif m.any():
                keep = np.repeat(m[:, None].astype(np.float64), self.hidden, axis=1)
                h = h + tape.const(keep) * (h_new - h)
        enc = h
        v0 = np.where(mask[:, -1:], history[:, -1, 2:], 0.0) * self.dt
        gx = gru_input_proj(P, "dec", enc)
        hd = enc
        steps = []
        pos = None
        for _ in range(self.t_fut):
            hd = gru_cell(P, "dec", gx, hd)
            delta = linear(P, "out", hd) + tape.const(v0)
            pos = delta if pos is None else pos + delta
            steps.append(pos)
        return ad.stack(steps, axis=1), enc

    def infer(self, samples, batch=4096):
        """Frozen forward pass: ``(yhat (N, t_fut, 2), H (N, hidden))`` arrays."""
        ys, hs = [], []
        for s in range(0, len(samples), batch):
            tape = ad.Tape()
            P = bind(tape, self.params, trainable=False)
            y, h = self.forward(tape, P, samples.history[s:s + batch],
                                samples.history_mask[s:s + batch])
            ys.append(y.value)
            hs.append(h.value)
        return np.concatenate(ys), np.concatenate(hs)

    def predict(self, samples):
        return self.infer(samples)[0]


def predict_trajectory(predictor, history, history_mask):
    tape = ad.Tape()
    P = bind(tape, predictor.params, trainable=False)
    y, h = predictor.forward(tape, P, np.asarray(history)[None], np.asarray(history_mask)[None])
    return y.value[0], h.value[0]


# -- two-branch heads ---------------------------------------------------------

class TwoBranchHead:
    """Shared dataflow of the occupancy heads.

    Branch 1 repeats the predictor features H over the horizon and encodes
    them with a GRU; branch 2 lifts the predicted positions through a linear
    layer and a GRU. The per-step encodings are concatenated feature-wise and
    decoded by a third GRU into ``n_out`` raw outputs per step.
    """

    n_out = 0
    kind = "head"

    def __init__(self, feature_dim=64, hidden=64, embed=16, t_fut=8, seed=0):
        self.feature_dim, self.hidden, self.embed, self.t_fut = feature_dim, hidden, embed, t_fut
        rng = np.random.default_rng(seed)
        p = {}
        init_gru(rng, p, "b1", feature_dim, hidden)
        init_linear(rng, p, "b2_in", 2, embed)
        init_gru(rng, p, "b2", embed, hidden)
        init_gru(rng, p, "dec", 2 * hidden, hidden)
        init_linear(rng, p, "out", hidden, self.n_out)
        self.params = p
        self._init_output_bias()

    def _init_output_bias(self):
        pass

    def config(self):
        return {"feature_dim": self.feature_dim, "hidden": self.hidden, "embed": self.embed,
                "t_fut": self.t_fut}

    def raw(self, tape, P, features, yhat):
        """Raw outputs, shape (B, t_fut, n_out)."""
        features = tape.const(features) if not isinstance(features, ad.Node) else features
        yhat = np.asarray(yhat, dtype=np.float64) / FEATURE_SCALE
        b = yhat.shape[0]
        zeros = np.zeros((b, self.hidden))
        g1 = gru_input_proj(P, "b1", features)
        h1 = tape.const(zeros)
        h2 = tape.const(zeros)
        hd = tape.const(zeros)
        outs = []
        for t in range(self.t_fut):
            h1 = gru_cell(P, "b1", g1, h1)
            e2 = linear(P, "b2_in", tape.const(yhat[:, t]))
            h2 = gru_cell(P, "b2", gru_input_proj(P, "b2", e2), h2)
            hd = gru_cell(P, "dec", gru_input_proj(P, "dec", ad.concat([h1, h2], axis=1)), hd)
            outs.append(linear(P, "out", hd))
        return ad.stack(outs, axis=1)


@dataclass(frozen=True)
class Variant:
    name: str
    theta0: float = 0.0

    @staticmethod
    def parse(name):
        if name == "theta0":
            return Variant("fixed_theta", 0.0)
        if name == "theta45":
            return Variant("fixed_theta", math.pi / 4)
        if name.startswith("fixed_theta(") and name.endswith(")"):
            return Variant("fixed_theta", float(name[12:-1]))
        if name in ("circle", "v1", "v2", "free"):
            return Variant(name)
        raise ConfigError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")

    @property
    def label(self):
        if self.name == "fixed_theta":
            return f"theta={self.theta0:.4g}"
        return self.name


def velocity_direction_theta(yhat, eps=1e-6):
    """Per-step direction of predicted motion, anchored at the origin, in [0, pi)."""
    yhat = np.asarray(yhat, dtype=np.float64)
    prev = np.concatenate([np.zeros_like(yhat[:, :1]), yhat[:, :-1]], axis=1)
    d = yhat - prev
    theta = np.zeros(yhat.shape[:2])
    last = np.zeros(yhat.shape[0])
    for t in range(yhat.shape[1]):
        norm = np.hypot(d[:, t, 0], d[:, t, 1])
        cur = np.mod(np.arctan2(d[:, t, 1], d[:, t, 0]), np.pi)
        last = np.where(norm >= eps, cur, last)
        theta[:, t] = last
    return np.where(theta >= np.pi, 0.0, theta)


@dataclass
class EllipseNodes:
    """Occupancy ellipses on a tape: center array plus axis/orientation nodes."""

    center: np.ndarray  # (B, T, 2)
    length: ad.Node  # (B, T) full axis
    width: ad.Node
    theta: object  # node or (B, T) array

    def values(self):
        th = self.theta.value if isinstance(self.theta, ad.Node) else np.asarray(self.theta)
        return self.center, self.length.value, self.width.value, th


class DosHead(TwoBranchHead):
    n_out = 3
    kind = "dos"

    def __init__(self, variant="free", **kw):
        self.variant = variant if isinstance(variant, Variant) else Variant.parse(variant)
        super().__init__(**kw)

    def config(self):
        d = super().config()
        d["variant"] = self.variant.name
        d["theta0"] = self.variant.theta0
        return d

    def forward(self, tape, P, features, yhat, anchor_velocity=None):
        raw = self.raw(tape, P, features, yhat)
        return apply_variant(raw, yhat, self.variant, anchor_velocity)


def apply_variant(raw, yhat, variant: Variant, anchor_velocity=None) -> EllipseNodes:
    """Activations mapping raw (B, T, 3) outputs to constrained ellipse parameters."""
    yhat = np.asarray(yhat, dtype=np.float64)
    b, t = yhat.shape[:2]
    length = ad.add_scalar(ad.softplus(raw[:, :, 0]), L_MIN)
    if variant.name == "circle":
        return EllipseNodes(yhat, length, length, np.zeros((b, t)))
    width = ad.add_scalar(ad.softplus(raw[:, :, 1]), L_MIN)
    if variant.name == "fixed_theta":
        theta = np.full((b, t), variant.theta0 % math.pi)
    elif variant.name == "v1":
        if anchor_velocity is None:
            raise ConfigError("variant v1 needs the anchor velocity")
        v = np.asarray(anchor_velocity, dtype=np.float64)
        th = np.mod(np.arctan2(v[:, 1], v[:, 0]), np.pi)
        th = np.where(np.hypot(v[:, 0], v[:, 1]) > 0, th, 0.0)
        theta = np.repeat(np.where(th >= np.pi, 0.0, th)[:, None], t, axis=1)
    elif variant.name == "v2":
        theta = velocity_direction_theta(yhat)
    elif variant.name == "free":
        theta = ad.scale(ad.sigmoid(raw[:, :, 2]), math.pi)
    else:
        raise ConfigError(f"unknown variant {variant.name!r}")
    return EllipseNodes(yhat, length, width, theta)


class GaussianHead(TwoBranchHead):
    """Per-step bivariate Gaussian centred near the predicted position."""

    n_out = 5
    kind = "gaussian"

    def _init_output_bias(self):
        # sigma = floor + exp(raw): a zero raw value gives ~1 m
        self.params["out.b"][2:4] = math.log(1.0 - SIGMA_FLOOR)

    def forward(self, tape, P, features, yhat):
        raw = self.raw(tape, P, features, yhat)
        mx = tape.const(yhat[:, :, 0]) + raw[:, :, 0]
        my = tape.const(yhat[:, :, 1]) + raw[:, :, 1]
        sx = ad.add_scalar(ad.exp(raw[:, :, 2]), SIGMA_FLOOR)
        sy = ad.add_scalar(ad.exp(raw[:, :, 3]), SIGMA_FLOOR)
        rho = ad.scale(ad.tanh(raw[:, :, 4]), RHO_MAX)
        return mx, my, sx, sy, rho


def gaussian_covariance(sx, sy, rho):
    sx, sy, rho = map(np.asarray, (sx, sy, rho))
    cov = np.empty(sx.shape + (2, 2))
    cov[..., 0, 0] = sx * sx
    cov[..., 1, 1] = sy * sy
    cov[..., 0, 1] = cov[..., 1, 0] = rho * sx * sy
    return cov


class RadiusHead(TwoBranchHead):
    n_out = 1
    kind = "radius"

    def forward(self, tape, P, features, yhat):
        raw = self.raw(tape, P, features, yhat)
        return ad.softplus(raw[:, :, 0])


HEAD_TYPES = {"dos": DosHead, "gaussian": GaussianHead, "radius": RadiusHead}


def _run_head(head, features, yhat, batch, fn):
    outs = []
    for s in range(0, len(yhat), batch):
        tape = ad.Tape()
        P = bind(tape, head.params, trainable=False)
        outs.append(fn(tape, P, features[s:s + batch], yhat[s:s + batch], s))
    return outs


def predict_dos(head: DosHead, features, yhat, anchor_velocity=None, batch=4096):
    """Ellipse arrays ``(center, length, width, theta)`` for every sample and step."""
    def fn(tape, P, f, y, s):
        av = None if anchor_velocity is None else anchor_velocity[s:s + batch]
        return head.forward(tape, P, f, y, av).values()

    parts = _run_head(head, features, yhat, batch, fn)
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(4))


def predict_gaussian(head: GaussianHead, features, yhat, batch=4096):
    """``(mean (N, T, 2), cov (N, T, 2, 2))``."""
    def fn(tape, P, f, y, s):
        mx, my, sx, sy, rho = head.forward(tape, P, f, y)
        return np.stack([mx.value, my.value], axis=-1), gaussian_covariance(sx.value, sy.value, rho.value)

    parts = _run_head(head, features, yhat, batch, fn)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def predict_radius(head: RadiusHead, features, yhat, batch=4096):
    parts = _run_head(head, features, yhat, batch, lambda tape, P, f, y, s: head.forward(tape, P, f, y).value)
    return np.concatenate(parts)


def build_model(kind, config, seed=0):
    config = dict(config)
    if kind == "predictor":
        return TrajectoryPredictor(seed=seed, **config)
    if kind == "dos":
        variant = config.pop("variant", "free")
        theta0 = config.pop("theta0", 0.0)
        v = Variant(variant, theta0) if variant == "fixed_theta" else Variant.parse(variant)
        return DosHead(variant=v, seed=seed, **config)
    if kind in HEAD_TYPES:
        return HEAD_TYPES[kind](seed=seed, **config)
    raise ConfigError(f"unknown model kind {kind!r}")


def save_model(path, model, extra=None):
    meta = {"kind": model.kind, "config": model.config()}
    meta.update(extra or {})
    save_checkpoint(path, model.params, meta)


def load_model(path):
    params, meta = load_checkpoint(path)
    model = build_model(meta["kind"], meta["config"])
    load_checkpoint(path, expected=model.params)  # shape validation
    model.params = params
    return model, meta
