"""Scenes, synthetic scene generation, scenario files and agent-frame samples.

Time grid convention: a scene has ``n_steps`` uniformly spaced steps; step
``anchor_index`` is "now" (t = 0). With the defaults (``t_hist = 6``,
``t_fut = 8``, ``dt = 0.5``) the history covers t = -2.5 .. 0 s and the
future steps 1..8 cover 0.5 .. 4 s, so steps 2/4/6/8 are the 1/2/3/4 s
reporting horizons.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, SchemaError, SkipAgent

MIN_HEADING_SPEED = 0.1
SPLITS = ("train", "val", "test")


@dataclass
class AgentTrack:
    agent_id: str
    position: np.ndarray  # (S, 2), NaN where invalid
    velocity: np.ndarray  # (S, 2), NaN where invalid
    valid: np.ndarray  # (S,) bool

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        n = len(self.valid)
        if self.position.shape != (n, 2) or self.velocity.shape != (n, 2):
            raise SchemaError(f"agent {self.agent_id}: inconsistent state array shapes")
        if not np.isfinite(self.velocity[self.valid]).all() or not np.isfinite(self.position[self.valid]).all():
            raise SchemaError(f"agent {self.agent_id}: non-finite valid state")


@dataclass
class Scene:
    scene_id: str
    dt: float
    anchor_index: int
    agents: list
    bounds: np.ndarray  # (K, 2) polygon vertices, implicitly closed

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64)
        if self.dt <= 0:
            raise SchemaError(f"scene {self.scene_id}: dt must be positive")
        if self.bounds.ndim != 2 or self.bounds.shape[1] != 2 or len(self.bounds) < 3:
            raise SchemaError(f"scene {self.scene_id}: bounds must be a polygon of >= 3 vertices")

    @property
    def n_steps(self):
        return max((len(a.valid) for a in self.agents), default=self.anchor_index + 1)

    def times(self):
        return (np.arange(self.n_steps) - self.anchor_index) * self.dt


@dataclass
class SynthConfig:
    n_scenes: int = 2000
    agents_min: int = 1
    agents_max: int = 8
    dt: float = 0.5
    t_hist: int = 6
    t_fut: int = 8
    mixture: tuple = (0.4, 0.3, 0.3)  # constant velocity, constant acceleration, constant turn rate
    speed_range: tuple = (0.0, 14.0)
    accel_range: tuple = (-2.0, 2.0)
    yaw_rate_range: tuple = (-0.4, 0.4)
    accel_noise: float = 0.3
    yaw_noise: float = 0.03
    switch_prob: float = 0.25
    missing_prob: float = 0.1
    arena: float = 100.0
    split_fractions: tuple = (0.7, 0.15, 0.15)

    def validate(self):
        if self.n_scenes <= 0:
            raise ConfigError("n_scenes must be positive")
        if not (1 <= self.agents_min <= self.agents_max):
            raise ConfigError("need 1 <= agents_min <= agents_max")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.t_hist <= 0 or self.t_fut <= 0:
            raise ConfigError("t_hist and t_fut must be positive")
        w = np.asarray(self.mixture, dtype=float)
        if w.shape != (3,) or (w < 0).any() or w.sum() <= 0:
            raise ConfigError("mixture must be three nonnegative weights with positive sum")
        if min(self.accel_noise, self.yaw_noise) < 0:
            raise ConfigError("noise scales must be nonnegative")
        if not (0 <= self.switch_prob <= 1 and 0 <= self.missing_prob <= 1):
            raise ConfigError("probabilities must lie in [0, 1]")
        f = np.asarray(self.split_fractions, dtype=float)
        if f.shape != (3,) or (f < 0).any() or abs(f.sum() - 1.0) > 1e-9:
            raise ConfigError("split_fractions must be three nonnegative values summing to 1")


@dataclass
class Dataset:
    scenes: list
    split: dict = field(default_factory=dict)
    seed: int = 0
    t_hist: int = 6
    t_fut: int = 8

    def __post_init__(self):
        if not self.split:
            self.split = assign_split(len(self.scenes), self.seed)
        idx = sorted(i for s in SPLITS for i in self.split.get(s, []))
        if idx != list(range(len(self.scenes))):
            raise SchemaError("split must be disjoint and cover every scene")

    def subset(self, name):
        return [self.scenes[i] for i in self.split[name]]


def assign_split(n, seed, fractions=(0.7, 0.15, 0.15)):
    perm = np.random.default_rng([seed, 7]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": sorted(perm[:n_train].tolist()),
        "val": sorted(perm[n_train:n_train + n_val].tolist()),
        "test": sorted(perm[n_train + n_val:].tolist()),
    }


def quantize(x):
    """Round to 9 significant digits, the precision of the scenario file."""
    x = np.asarray(x, dtype=np.float64)
    out = np.array([float(f"{v:.9g}") if np.isfinite(v) else v for v in x.ravel()])
    return out.reshape(x.shape)


def _mode_params(rng, cfg, mixture):
    kind = rng.choice(3, p=mixture)
    accel = rng.uniform(*cfg.accel_range) if kind == 1 else 0.0
    yaw = rng.uniform(*cfg.yaw_rate_range) if kind == 2 else 0.0
    return accel, yaw


def simulate_agent(rng, cfg, n_steps, switch_from, mixture=None, start=None):
    """Roll out one kinematic agent; returns positions and velocities, shape (n_steps, 2).

    Unicycle kinematics with Gaussian process noise on acceleration and yaw
    rate. Past ``switch_from`` the motion mode may switch once.
    """
    if mixture is None:
        mixture = np.asarray(cfg.mixture, dtype=float) / np.sum(cfg.mixture)
    if start is None:
        half = 0.5 * cfg.arena
        x, y = rng.uniform(-half, half, size=2)
        heading = rng.uniform(-math.pi, math.pi)
        speed = rng.uniform(*cfg.speed_range)
    else:
        x, y, heading, speed = start
    accel, yaw = _mode_params(rng, cfg, mixture)
    switch_at = -1
    if rng.random() < cfg.switch_prob and switch_from < n_steps:
        switch_at = int(rng.integers(switch_from, n_steps))
    pos = np.empty((n_steps, 2))
    vel = np.empty((n_steps, 2))
    pos[0] = x, y
    vel[0] = speed * math.cos(heading), speed * math.sin(heading)
    for k in range(1, n_steps):
        if k == switch_at:
            accel, yaw = _mode_params(rng, cfg, mixture)
        a = accel + (rng.normal(0.0, cfg.accel_noise) if cfg.accel_noise > 0 else 0.0)
        om = yaw + (rng.normal(0.0, cfg.yaw_noise) if cfg.yaw_noise > 0 else 0.0)
        speed = max(0.0, speed + a * cfg.dt)
        heading += om * cfg.dt
        vel[k] = speed * math.cos(heading), speed * math.sin(heading)
        pos[k] = pos[k - 1] + cfg.dt * vel[k]
    return pos, vel


def generate_synthetic(config: SynthConfig, seed: int) -> Dataset:
    config.validate()
    rng = np.random.default_rng(seed)
    mixture = np.asarray(config.mixture, dtype=float) / np.sum(config.mixture)
    n_steps = config.t_hist + config.t_fut
    anchor = config.t_hist - 1
    scenes = []
    for si in range(config.n_scenes):
        n_agents = int(rng.integers(config.agents_min, config.agents_max + 1))
        agents = []
        for ai in range(n_agents):
            pos, vel = simulate_agent(rng, config, n_steps, anchor + 1, mixture)
            valid = np.ones(n_steps, dtype=bool)
            if rng.random() < config.missing_prob:
                # late appearance: drop the earliest history steps
                valid[: int(rng.integers(1, config.t_hist))] = False
            if rng.random() < config.missing_prob:
                # early disappearance: drop the tail of the future
                valid[n_steps - int(rng.integers(1, config.t_fut)):] = False
            pos, vel = quantize(pos), quantize(vel)
            pos[~valid] = np.nan
            vel[~valid] = np.nan
            agents.append(AgentTrack(f"a{ai}", pos, vel, valid))
        allpos = np.concatenate([a.position[a.valid] for a in agents])
        lo = np.floor(allpos.min(axis=0)) - 10.0
        hi = np.ceil(allpos.max(axis=0)) + 10.0
        bounds = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
        scenes.append(Scene(f"s{si:05d}", config.dt, anchor, agents, bounds))
    split = assign_split(len(scenes), seed, config.split_fractions)
    return Dataset(scenes, split, seed, config.t_hist, config.t_fut)


# -- scenario files -------------------------------------------------------

def _num(v):
    return float(f"{v:.9g}")


def scene_to_record(scene: Scene) -> dict:
    agents = []
    for a in scene.agents:
        states, valid = [], []
        for i in np.flatnonzero(a.valid):
            t = (i - scene.anchor_index) * scene.dt
            states.append([_num(t), _num(a.position[i, 0]), _num(a.position[i, 1]),
                           _num(a.velocity[i, 0]), _num(a.velocity[i, 1])])
            valid.append(1)
        agents.append({"agent_id": a.agent_id, "states": states, "valid": valid})
    return {
        "scene_id": scene.scene_id,
        "dt": _num(scene.dt),
        "anchor_index": int(scene.anchor_index),
        "bounds": [[_num(x), _num(y)] for x, y in scene.bounds],
        "agents": agents,
    }


def save_scenes(scenes, path):
    """Write scenes as newline-delimited JSON, one scene per line."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_record(scene), separators=(",", ":")))
            fh.write("\n")


def record_to_scene(rec: dict, line=None) -> Scene:
    try:
        dt = float(rec["dt"])
        anchor = int(rec["anchor_index"])
        bounds = np.asarray(rec["bounds"], dtype=np.float64)
        raw_agents = rec["agents"]
        scene_id = str(rec["scene_id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad scene record: {exc!r}", line) from None
    if dt <= 0:
        raise SchemaError(f"line {line}: dt must be positive")
    parsed = []
    max_idx = anchor
    for ar in raw_agents:
        try:
            states = np.asarray(ar["states"], dtype=np.float64).reshape(-1, 5)
            flags = np.asarray(ar.get("valid", [1] * len(states)), dtype=int)
            agent_id = str(ar["agent_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad agent record: {exc!r}", line) from None
        if len(flags) != len(states):
            raise ParseError(f"agent {agent_id}: valid list length differs from states", line)
        steps = states[:, 0] / dt
        idx = np.rint(steps).astype(int)
        if len(states) and np.abs(steps - idx).max() > 1e-6:
            raise SchemaError(f"line {line}: agent {agent_id} timestamps are not on a uniform dt grid")
        if np.any(np.diff(idx) <= 0):
            raise SchemaError(f"line {line}: agent {agent_id} timestamps must be strictly increasing")
        idx = idx + anchor
        if len(idx) and idx.min() < 0:
            raise SchemaError(f"line {line}: agent {agent_id} has states before the first grid step")
        if len(idx):
            max_idx = max(max_idx, int(idx.max()))
        parsed.append((agent_id, idx, states, flags))
    n = max_idx + 1
    agents = []
    for agent_id, idx, states, flags in parsed:
        pos = np.full((n, 2), np.nan)
        vel = np.full((n, 2), np.nan)
        valid = np.zeros(n, dtype=bool)
        keep = flags != 0
        pos[idx[keep]] = states[keep, 1:3]
        vel[idx[keep]] = states[keep, 3:5]
        valid[idx[keep]] = True
        agents.append(AgentTrack(agent_id, pos, vel, valid))
    return Scene(scene_id, dt, anchor, agents, bounds)


def load_scenes(path, seed=0, fractions=(0.7, 0.15, 0.15), t_hist=6, t_fut=8) -> Dataset:
    scenes = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            if not isinstance(rec, dict):
                raise ParseError("record is not an object", lineno)
            scenes.append(record_to_scene(rec, lineno))
    return Dataset(scenes, assign_split(len(scenes), seed, fractions), seed, t_hist, t_fut)


# -- agent frame ------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationTransform:
    origin: tuple
    rotation: float

    def to_agent(self, points):
        p = np.asarray(points, dtype=np.float64) - np.asarray(self.origin)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.stack([c * p[..., 0] + s * p[..., 1], -s * p[..., 0] + c * p[..., 1]], axis=-1)

    def to_world(self, points):
        p = np.asarray(points, dtype=np.float64)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        out = np.stack([c * p[..., 0] - s * p[..., 1], s * p[..., 0] + c * p[..., 1]], axis=-1)
        return out + np.asarray(self.origin)

    def vector_to_agent(self, v):
        v = np.asarray(v, dtype=np.float64)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.stack([c * v[..., 0] + s * v[..., 1], -s * v[..., 0] + c * v[..., 1]], axis=-1)


def anchor_heading(track: AgentTrack, anchor: int) -> float:
    """Heading from the anchor velocity, falling back to earlier moving steps, else 0."""
    for i in range(anchor, -1, -1):
        if not track.valid[i]:
            continue
        vx, vy = track.velocity[i]
        if math.hypot(vx, vy) >= MIN_HEADING_SPEED:
            return math.atan2(vy, vx)
    return 0.0


@dataclass
class NormalizedAgent:
    history: np.ndarray  # (t_hist, 4): x, y, vx, vy
    history_mask: np.ndarray
    future: np.ndarray  # (t_fut, 2)
    future_mask: np.ndarray
    transform: NormalizationTransform


def normalize(scene: Scene, agent_index: int, t_hist=6, t_fut=8) -> NormalizedAgent:
    track = scene.agents[agent_index]
    a = scene.anchor_index
    if a >= len(track.valid) or not track.valid[a]:
        raise SkipAgent(f"agent {track.agent_id} has no valid anchor state")
    tf = NormalizationTransform(tuple(track.position[a]), anchor_heading(track, a))
    n = len(track.valid)
    hist = np.full((t_hist, 4), np.nan)
    hmask = np.zeros(t_hist, dtype=bool)
    fut = np.full((t_fut, 2), np.nan)
    fmask = np.zeros(t_fut, dtype=bool)
    for j in range(t_hist):
        i = a - (t_hist - 1) + j
        if 0 <= i < n and track.valid[i]:
            hist[j, :2] = tf.to_agent(track.position[i])
            hist[j, 2:] = tf.vector_to_agent(track.velocity[i])
            hmask[j] = True
    for j in range(t_fut):
        i = a + 1 + j
        if i < n and track.valid[i]:
            fut[j] = tf.to_agent(track.position[i])
            fmask[j] = True
    return NormalizedAgent(hist, hmask, fut, fmask, tf)


@dataclass
class SampleBatch:
    """Stacked agent-frame samples; invalid entries hold NaN."""

    history: np.ndarray  # (N, t_hist, 4)
    history_mask: np.ndarray  # (N, t_hist)
    future: np.ndarray  # (N, t_fut, 2)
    future_mask: np.ndarray  # (N, t_fut)
    origin: np.ndarray  # (N, 2)
    rotation: np.ndarray  # (N,)
    scene_index: np.ndarray  # (N,)
    agent_index: np.ndarray  # (N,)
    dt: float = 0.5

    def __len__(self):
        return len(self.rotation)

    @property
    def t_fut(self):
        return self.future.shape[1]

    def take(self, idx):
        idx = np.asarray(idx)
        return SampleBatch(
            self.history[idx], self.history_mask[idx], self.future[idx], self.future_mask[idx],
            self.origin[idx], self.rotation[idx], self.scene_index[idx], self.agent_index[idx],
            self.dt,
        )

    def anchor_velocity(self):
        """Agent-frame velocity at t = 0, shape (N, 2)."""
        return np.nan_to_num(self.history[:, -1, 2:])

    def horizon_seconds(self):
        return (np.arange(self.t_fut) + 1) * self.dt


def build_samples(scenes, t_hist=6, t_fut=8, scene_offset=0, scene_ids=None, require_future=True):
    rows = []
    for k, scene in enumerate(scenes):
        sid = scene_ids[k] if scene_ids is not None else scene_offset + k
        for ai in range(len(scene.agents)):
            try:
                na = normalize(scene, ai, t_hist, t_fut)
            except SkipAgent:
                continue
            if require_future and not na.future_mask.any():
                continue
            rows.append((na, sid, ai, scene.dt))
    if not rows:
        raise SchemaError("no usable agents")
    dts = {r[3] for r in rows}
    if len(dts) != 1:
        raise SchemaError(f"mixed dt values across scenes: {sorted(dts)}")
    return SampleBatch(
        np.stack([r[0].history for r in rows]),
        np.stack([r[0].history_mask for r in rows]),
        np.stack([r[0].future for r in rows]),
        np.stack([r[0].future_mask for r in rows]),
        np.array([r[0].transform.origin for r in rows], dtype=np.float64),
        np.array([r[0].transform.rotation for r in rows], dtype=np.float64),
        np.array([r[1] for r in rows]),
        np.array([r[2] for r in rows]),
        rows[0][3],
    )


def dataset_samples(dataset: Dataset, split: str) -> SampleBatch:
    ids = dataset.split[split]
    return build_samples([dataset.scenes[i] for i in ids], dataset.t_hist, dataset.t_fut,
                         scene_ids=ids)


def error_stats(dataset: Dataset, predictor, split="train"):
    """Mean Euclidean prediction error per future step over valid samples."""
    samples = dataset_samples(dataset, split)
    yhat = predictor.predict(samples)
    return error_stats_from(samples, yhat)


def error_stats_from(samples: SampleBatch, yhat):
    err = np.linalg.norm(np.nan_to_num(samples.future) - yhat, axis=-1)
    mask = samples.future_mask
    counts = mask.sum(axis=0)
    if (counts == 0).any():
        raise SchemaError(f"no valid samples at future steps {np.flatnonzero(counts == 0).tolist()}")
    return np.where(mask, err, 0.0).sum(axis=0) / counts


def config_dict(cfg: SynthConfig):
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
