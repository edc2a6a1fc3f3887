"""Adam, the step learning-rate schedule and the two-stage training protocol."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses
from .data import Dataset, SampleBatch, dataset_samples
from .errors import ConfigError, NumericError
from .models import (
    DosHead, GaussianHead, RadiusHead, TrajectoryPredictor, bind, param_hash,
)

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state: AdamState, lr, frozen=frozenset()):
    """One bias-corrected Adam update, in place. Frozen names are never touched."""
    for name, g in grads.items():
        if name not in frozen and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name in sorted(grads):
        if name in frozen:
            continue
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return params, state


def step_lr(lr0, epoch, gamma=0.5, period=100):
    return lr0 * gamma ** (epoch // period)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    gamma: float = 0.5
    step_epochs: int = 100
    epochs: int = 40
    scenes_per_batch: int = 16
    seed: int = 0
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = losses.LossConfig(**self.loss)
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if self.epochs <= 0 or self.step_epochs <= 0 or self.scenes_per_batch <= 0:
            raise ConfigError("epochs, step_epochs and scenes_per_batch must be positive")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    params: dict
    curve: list
    best_epoch: int
    aborted: bool = False


def scene_batches(samples: SampleBatch, scenes_per_batch, rng):
    """Sample-index batches grouping whole scenes, in a seeded random scene order."""
    scene_ids = np.unique(samples.scene_index)
    order = rng.permutation(scene_ids)
    by_scene = {}
    for i, s in enumerate(samples.scene_index):
        by_scene.setdefault(int(s), []).append(i)
    for start in range(0, len(order), scenes_per_batch):
        idx = [i for s in order[start:start + scenes_per_batch] for i in by_scene[int(s)]]
        yield np.asarray(idx)


def _fit(params, batch_loss, eval_loss, samples, config: TrainConfig, trainable=None):
    """Shared epoch loop with best-validation selection and divergence abort."""
    state = AdamState()
    best = {k: v.copy() for k, v in params.items()}
    best_val = math.inf
    best_epoch = -1
    curve = []
    aborted = False
    for epoch in range(config.epochs):
        lr = step_lr(config.lr, epoch, config.gamma, config.step_epochs)
        rng = np.random.default_rng([config.seed, epoch])
        sums, total_n = {}, 0
        snapshot = {k: v.copy() for k, v in params.items()}
        try:
            for idx in scene_batches(samples, config.scenes_per_batch, rng):
                tape = ad.Tape()
                P = bind(tape, params if trainable is None else {k: params[k] for k in trainable})
                out, parts = batch_loss(tape, P, idx)
                grads = tape.backward(out)
                adam_step(params, grads, state, lr)
                n = len(idx)
                total_n += n
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + float(v) * n
        except NumericError as exc:
            log.warning("epoch %d aborted: %s; keeping last good parameters", epoch, exc)
            for k in params:
                params[k][...] = snapshot[k]
            aborted = True
            break
        row = {"epoch": epoch, "lr": lr}
        row.update({f"train_{k}": v / max(total_n, 1) for k, v in sums.items()})
        val = eval_loss(params)
        row.update({f"val_{k}": v for k, v in val.items()})
        curve.append(row)
        if val["loss"] < best_val:
            best_val = val["loss"]
            best_epoch = epoch
            best = {k: v.copy() for k, v in params.items()}
        log.info("epoch %d lr %.2e train %.5f val %.5f", epoch, lr,
                 row.get("train_loss", float("nan")), val["loss"])
    return TrainResult(best, curve, best_epoch, aborted)


def train_stage1(predictor: TrajectoryPredictor, dataset: Dataset, config: TrainConfig):
    """Fit the predictor on masked future-position MSE; returns best-validation parameters."""
    train = dataset_samples(dataset, "train")
    val = dataset_samples(dataset, "val")
    return train_stage1_samples(predictor, train, val, config)


def train_stage1_samples(predictor, train: SampleBatch, val: SampleBatch, config: TrainConfig):
    def batch_loss(tape, P, idx):
        y, _ = predictor.forward(tape, P, train.history[idx], train.history_mask[idx])
        loss = losses.trajectory_mse(y, train.future[idx], train.future_mask[idx])
        return loss, {"loss": loss.value}

    def eval_loss(params):
        saved = predictor.params
        predictor.params = params
        yhat = predictor.predict(val)
        predictor.params = saved
        err = np.sum((np.nan_to_num(val.future) - yhat) ** 2, axis=-1)
        m = val.future_mask
        ade = np.sqrt(err)[m].mean()
        return {"loss": float(err[m].mean()), "ade": float(ade)}

    result = _fit(predictor.params, batch_loss, eval_loss, train, config)
    predictor.params = result.params
    return result


@dataclass
class FrozenOutputs:
    """Predictor outputs cached for a sample set (the predictor is frozen)."""

    samples: SampleBatch
    yhat: np.ndarray
    features: np.ndarray

    @classmethod
    def compute(cls, predictor, samples):
        yhat, feats = predictor.infer(samples)
        return cls(samples, yhat, feats)

    def errors(self):
        return np.linalg.norm(np.nan_to_num(self.samples.future) - self.yhat, axis=-1)


def _check_frozen(predictor, before):
    after = param_hash(predictor.params)
    if after != before:
        raise RuntimeError("trajectory predictor parameters changed during head training")


def train_stage2(head: DosHead, predictor: TrajectoryPredictor, dataset: Dataset, config: TrainConfig,
                 cached=None):
    """Fit a DOS head on L = L_c + k L_a with the predictor frozen."""
    before = param_hash(predictor.params)
    tr, va = cached or (FrozenOutputs.compute(predictor, dataset_samples(dataset, "train")),
                        FrozenOutputs.compute(predictor, dataset_samples(dataset, "val")))
    result = train_dos_head(head, tr, va, config)
    _check_frozen(predictor, before)
    return result


def train_dos_head(head: DosHead, tr: FrozenOutputs, va: FrozenOutputs, config: TrainConfig):
    cfg = config.loss
    av_tr = tr.samples.anchor_velocity()

    def batch_loss(tape, P, idx):
        ell = head.forward(tape, P, tr.features[idx], tr.yhat[idx], av_tr[idx])
        total, lc, la = losses.dos_loss(ell, tr.samples.future[idx], tr.samples.future_mask[idx], cfg)
        return total, {"loss": total.value, "coverage": lc.value, "area": la.value}

    def eval_loss(params):
        tape = ad.Tape()
        P = bind(tape, params, trainable=False)
        ell = head.forward(tape, P, va.features, va.yhat, va.samples.anchor_velocity())
        total, lc, la = losses.dos_loss(ell, va.samples.future, va.samples.future_mask, cfg)
        return {"loss": float(total.value), "coverage": float(lc.value), "area": float(la.value)}

    result = _fit(head.params, batch_loss, eval_loss, tr.samples, config)
    head.params = result.params
    return result


def train_baseline_heads(dataset: Dataset, predictor: TrajectoryPredictor, which: str,
                         config: TrainConfig, head=None, cached=None):
    """Train the PR (Gaussian, max likelihood) or SA (error regression) head."""
    before = param_hash(predictor.params)
    tr, va = cached or (FrozenOutputs.compute(predictor, dataset_samples(dataset, "train")),
                        FrozenOutputs.compute(predictor, dataset_samples(dataset, "val")))
    if which.upper() == "PR":
        head = head or GaussianHead(feature_dim=predictor.hidden, t_fut=predictor.t_fut, seed=config.seed)
        result = train_gaussian_head(head, tr, va, config)
    elif which.upper() == "SA":
        head = head or RadiusHead(feature_dim=predictor.hidden, t_fut=predictor.t_fut, seed=config.seed)
        result = train_radius_head(head, tr, va, config)
    else:
        raise ConfigError(f"unknown baseline head {which!r}; expected PR or SA")
    _check_frozen(predictor, before)
    return head, result


def train_gaussian_head(head: GaussianHead, tr: FrozenOutputs, va: FrozenOutputs, config):
    def nll(tape, P, out, idx=None):
        s = out.samples if idx is None else out.samples.take(idx)
        f = out.features if idx is None else out.features[idx]
        y = out.yhat if idx is None else out.yhat[idx]
        mx, my, sx, sy, rho = head.forward(tape, P, f, y)
        return losses.gaussian_nll(mx, my, sx, sy, rho, s.future, s.future_mask)

    def batch_loss(tape, P, idx):
        loss = nll(tape, P, tr, idx)
        return loss, {"loss": loss.value}

    def eval_loss(params):
        tape = ad.Tape()
        return {"loss": float(nll(tape, bind(tape, params, trainable=False), va).value)}

    result = _fit(head.params, batch_loss, eval_loss, tr.samples, config)
    head.params = result.params
    return result


def train_radius_head(head: RadiusHead, tr: FrozenOutputs, va: FrozenOutputs, config):
    err_tr, err_va = tr.errors(), va.errors()

    def batch_loss(tape, P, idx):
        r = head.forward(tape, P, tr.features[idx], tr.yhat[idx])
        loss = losses.error_regression_loss(r, err_tr[idx], tr.samples.future_mask[idx])
        return loss, {"loss": loss.value}

    def eval_loss(params):
        tape = ad.Tape()
        r = head.forward(tape, bind(tape, params, trainable=False), va.features, va.yhat)
        loss = losses.error_regression_loss(r, err_va, va.samples.future_mask)
        return {"loss": float(loss.value)}

    result = _fit(head.params, batch_loss, eval_loss, tr.samples, config)
    head.params = result.params
    return result


def write_curve(path, curve):
    if not curve:
        return
    keys = list(curve[0])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in curve:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
