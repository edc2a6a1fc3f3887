"""Lattice planner that treats predicted occupancy sets as hard constraints.

The ego drives along a straight corridor toward a goal disc. Every step it
predicts the surrounding agents, builds a 7 x 5 lattice of (acceleration,
lateral target) candidates, drops the ones that come too close to any
predicted set, and executes the first step of the best survivor.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .baselines import BaselineSpec, PredictorOutputs, baseline_sets
from .data import AgentTrack, Scene, build_samples
from .errors import ConfigError, SchemaError
from .geometry import EllipseBatch
from .models import predict_dos, predict_gaussian, predict_radius

OUTCOMES = ("success", "collision", "out_of_bounds", "timeout")
T_HIST = 6


@dataclass(frozen=True)
class PlannerConfig:
    n_accel: int = 7
    n_offset: int = 5
    a_max: float = 3.0
    v_max: float = 14.0
    lateral_span: float = 3.0  # lateral targets in [-span, span]
    lateral_time: float = 2.0  # seconds to reach a lateral target
    horizon: int = 8
    dt: float = 0.5
    max_steps: int = 60
    agent_radius: float = 0.5

    def __post_init__(self):
        if self.n_accel < 2 or self.n_offset < 1:
            raise ConfigError("lattice needs >= 2 accelerations and >= 1 offset")
        if self.a_max <= 0 or self.v_max <= 0 or self.lateral_time <= 0 or self.dt <= 0:
            raise ConfigError("a_max, v_max, lateral_time and dt must be positive")


@dataclass
class PlanScenario:
    scenario_id: str
    scene: Scene  # agent tracks; track index k + T_HIST - 1 is simulation step k
    ego_start: tuple
    ego_speed: float
    goal_center: tuple
    goal_radius: float
    footprint: float = 1.0
    horizon: int = 8
    replan_period: int = 1

    def __post_init__(self):
        if self.footprint <= 0:
            raise ConfigError("footprint radius must be positive")
        if not self.in_bounds(np.asarray(self.goal_center), 0.0):
            raise ConfigError(f"scenario {self.scenario_id}: goal outside drivable bounds")

    @property
    def box(self):
        b = self.scene.bounds
        return b[:, 0].min(), b[:, 0].max(), b[:, 1].min(), b[:, 1].max()

    def in_bounds(self, points, margin):
        """Disc of radius ``margin`` at each point lies inside the drivable box."""
        x0, x1, y0, y1 = self.box
        p = np.asarray(points)
        return ((p[..., 0] - margin >= x0) & (p[..., 0] + margin <= x1)
                & (p[..., 1] - margin >= y0) & (p[..., 1] + margin <= y1))

    def agent_positions(self, step):
        i = step + T_HIST - 1
        return np.array([a.position[min(i, len(a.valid) - 1)] for a in self.scene.agents]).reshape(-1, 2)


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    speed: float


@dataclass
class CandidateTrajectory:
    accel: float
    offset: float
    positions: np.ndarray  # (H, 2)
    speeds: np.ndarray  # (H,)

    @property
    def progress(self):
        return float(self.positions[-1, 0])

    @property
    def mean_speed(self):
        return float(self.speeds.mean())


def _rollout(ego: EgoState, accel, target, cfg: PlannerConfig, horizon):
    speeds = np.empty(horizon)
    xs = np.empty(horizon)
    v, x = ego.speed, ego.x
    for k in range(horizon):
        nv = min(max(v + accel * cfg.dt, 0.0), cfg.v_max)
        x += 0.5 * (v + nv) * cfg.dt
        v = nv
        speeds[k], xs[k] = v, x
    tau = np.minimum((np.arange(horizon) + 1) * cfg.dt / cfg.lateral_time, 1.0)
    ys = ego.y + (target - ego.y) * (3 * tau * tau - 2 * tau ** 3)
    return CandidateTrajectory(float(accel), float(target), np.stack([xs, ys], axis=1), speeds)


def sample_candidates(scenario: PlanScenario, ego: EgoState, cfg: PlannerConfig = PlannerConfig()):
    """Deterministic lattice, acceleration-major order; always n_accel * n_offset entries."""
    accels = np.linspace(-cfg.a_max, cfg.a_max, cfg.n_accel)
    targets = np.linspace(-cfg.lateral_span, cfg.lateral_span, cfg.n_offset) if cfg.n_offset > 1 else [0.0]
    return [_rollout(ego, a, y, cfg, scenario.horizon) for a in accels for y in targets]


def braking_candidate(ego: EgoState, cfg: PlannerConfig, horizon):
    return _rollout(ego, -cfg.a_max, ego.y, cfg, horizon)


@dataclass
class PredictedSets:
    """World-frame constraints per agent and future step.

    ``ellipses`` is an EllipseBatch of shape (A, H); when it is None the
    constraint is the predicted point ``points`` (A, H, 2) alone.
    """

    points: np.ndarray
    ellipses: object = None

    @property
    def n_agents(self):
        return self.points.shape[0]


def clearances(positions, sets: PredictedSets):
    """Distance from each candidate position (C, H, 2) to each set: (C, A, H)."""
    p = np.asarray(positions, dtype=np.float64)[:, None]
    if sets.ellipses is None:
        d = p - sets.points[None]
        return np.hypot(d[..., 0], d[..., 1])
    e = sets.ellipses
    return kernels.ellipse_distance(e.center[None, ..., 0], e.center[None, ..., 1], e.length[None],
                                    e.width[None], e.theta[None], p[..., 0], p[..., 1])


def dos_feasible(candidate: CandidateTrajectory, sets: PredictedSets, footprint):
    """Closed constraint: clearance >= footprint at every step; inside a set is distance 0."""
    if sets.n_agents == 0:
        return True
    h = min(len(candidate.positions), sets.points.shape[1])
    sub = PredictedSets(sets.points[:, :h], None if sets.ellipses is None else _head(sets.ellipses, h))
    return bool(np.all(clearances(candidate.positions[None, :h], sub) >= footprint))


def _head(e, h):
    return EllipseBatch(e.center[:, :h], e.length[:, :h], e.width[:, :h], e.theta[:, :h])


def plan_step(scenario: PlanScenario, ego: EgoState, sets: PredictedSets, clearance,
              cfg: PlannerConfig = PlannerConfig()):
    """Best feasible in-bounds candidate, or maximal braking when none survives.

    Returns ``(candidate, fallback)``. Ranking: farthest progress, then higher
    mean speed, then smaller |lateral target|, then lattice order.
    """
    cands = sample_candidates(scenario, ego, cfg)
    ok = np.array([bool(scenario.in_bounds(c.positions, scenario.footprint).all()) for c in cands])
    if sets.n_agents:
        h = min(scenario.horizon, sets.points.shape[1])
        sub = sets if h == sets.points.shape[1] else PredictedSets(
            sets.points[:, :h], None if sets.ellipses is None else _head(sets.ellipses, h))
        d = clearances(np.stack([c.positions[:h] for c in cands]), sub)
        ok &= (d >= clearance).all(axis=(1, 2))
    if not ok.any():
        return braking_candidate(ego, cfg, scenario.horizon), True
    best = max((i for i in range(len(cands)) if ok[i]),
               key=lambda i: (cands[i].progress, cands[i].mean_speed, -abs(cands[i].offset), -i))
    return cands[best], False


# -- constraint sources -----------------------------------------------------

class PointSource:
    """Predicted trajectories only: constraints are points."""

    label = "none"

    def __init__(self, predictor):
        self.predictor = predictor

    def __call__(self, samples):
        yhat, _ = self.predictor.infer(samples)
        return yhat, None


class DosSource:
    label = "dos"

    def __init__(self, predictor, head):
        self.predictor = predictor
        self.head = head

    def __call__(self, samples):
        yhat, feats = self.predictor.infer(samples)
        c, l, w, th = predict_dos(self.head, feats, yhat, samples.anchor_velocity())
        return yhat, EllipseBatch(c, l, w, th)


class BaselineSource:
    def __init__(self, predictor, spec: BaselineSpec, gaussian_head=None, radius_head=None, r_e=None):
        self.predictor = predictor
        self.spec = spec
        self.gaussian_head = gaussian_head
        self.radius_head = radius_head
        self.r_e = r_e

    @property
    def label(self):
        return self.spec.label

    def __call__(self, samples):
        yhat, feats = self.predictor.infer(samples)
        out = PredictorOutputs(yhat, samples.dt, r_e=self.r_e)
        if self.gaussian_head is not None:
            out.gaussian = predict_gaussian(self.gaussian_head, feats, yhat)
        if self.radius_head is not None:
            out.radius = predict_radius(self.radius_head, feats, yhat)
        return yhat, baseline_sets(self.spec, out)


def _window(scenario: PlanScenario, step):
    """Scene cut to the history window ending at simulation ``step``."""
    lo = step
    agents = [AgentTrack(a.agent_id, a.position[lo:lo + T_HIST], a.velocity[lo:lo + T_HIST],
                         a.valid[lo:lo + T_HIST]) for a in scenario.scene.agents]
    return Scene(scenario.scenario_id, scenario.scene.dt, T_HIST - 1, agents, scenario.scene.bounds)


def predict_sets(scenario: PlanScenario, step, source) -> PredictedSets:
    if not scenario.scene.agents:
        return PredictedSets(np.zeros((0, scenario.horizon, 2)))
    try:
        samples = build_samples([_window(scenario, step)], T_HIST, scenario.horizon, require_future=False)
    except SchemaError:
        return PredictedSets(np.zeros((0, scenario.horizon, 2)))
    yhat, ell = source(samples)
    c, s = np.cos(samples.rotation)[:, None], np.sin(samples.rotation)[:, None]
    pts = np.stack([c * yhat[..., 0] - s * yhat[..., 1], s * yhat[..., 0] + c * yhat[..., 1]], axis=-1)
    pts = pts + samples.origin[:, None]
    if ell is None:
        return PredictedSets(pts)
    return PredictedSets(pts, ell.to_world(samples.origin, samples.rotation))


# -- simulation ---------------------------------------------------------------

@dataclass
class PlanResult:
    scenario_id: str
    outcome: str
    mean_velocity: float
    steps: int
    fallback_steps: int = 0
    coverage_breaches: int = 0
    trace: list = field(default_factory=list)  # [(x, y, speed, accel, offset, fallback)]


def simulate(scenario: PlanScenario, source, clearance=None, cfg: PlannerConfig = PlannerConfig()):
    """Closed-loop rollout with replanning every ``replan_period`` steps."""
    clearance = scenario.footprint + cfg.agent_radius if clearance is None else clearance
    collide_at = scenario.footprint + cfg.agent_radius
    ego = EgoState(float(scenario.ego_start[0]), float(scenario.ego_start[1]), float(scenario.ego_speed))
    speeds, trace = [], []
    plan, plan_k, fallback_plan = None, 0, False
    fallbacks = breaches = 0
    outcome = "timeout"
    goal = np.asarray(scenario.goal_center, dtype=np.float64)
    for step in range(cfg.max_steps):
        if plan is None or plan_k >= scenario.replan_period or plan_k >= len(plan.speeds):
            sets = predict_sets(scenario, step, source)
            plan, fallback_plan = plan_step(scenario, ego, sets, clearance, cfg)
            plan_k = 0
            fallbacks += fallback_plan
        x, y = plan.positions[plan_k]
        ego = EgoState(float(x), float(y), float(plan.speeds[plan_k]))
        plan_k += 1
        speeds.append(ego.speed)
        trace.append((ego.x, ego.y, ego.speed, plan.accel, plan.offset, bool(fallback_plan)))
        agents = scenario.agent_positions(step + 1)
        if len(agents):
            gap = np.hypot(agents[:, 0] - ego.x, agents[:, 1] - ego.y)
            if (gap < collide_at).any():
                breaches += not fallback_plan
                outcome = "collision"
                break
        if not scenario.in_bounds(np.array([ego.x, ego.y]), scenario.footprint):
            outcome = "out_of_bounds"
            break
        if math.hypot(ego.x - goal[0], ego.y - goal[1]) <= scenario.goal_radius:
            outcome = "success"
            break
    return PlanResult(scenario.scenario_id, outcome, float(np.mean(speeds)), len(speeds),
                      int(fallbacks), int(breaches), trace)


# -- scenario suite -----------------------------------------------------------

@dataclass(frozen=True)
class SuiteConfig:
    n_scenarios: int = 60
    seed: int = 0
    length: float = 140.0
    half_width: float = 6.0
    ego_speed: float = 8.0
    goal_x: float = 100.0
    goal_radius: float = 4.0
    footprint: float = 1.0
    agents: tuple = (1, 3)
    crossing_prob: float = 0.5
    empty: bool = False

    def __post_init__(self):
        if self.n_scenarios <= 0:
            raise ConfigError("n_scenarios must be positive")
        if self.goal_x + self.goal_radius > self.length:
            raise ConfigError("goal must lie inside the corridor")


def _crossing(rng, cfg: SuiteConfig, times):
    t_cross = rng.uniform(2.0, 7.0)
    side = rng.choice([-1.0, 1.0])
    speed = rng.uniform(1.0, 3.0)
    x = cfg.ego_speed * t_cross + rng.uniform(-6.0, 6.0)
    y = side * speed * t_cross * rng.uniform(0.8, 1.2)
    heading = -side * math.pi / 2 + rng.normal(0.0, 0.1)
    t_switch = rng.uniform(0.5, t_cross)
    mode = rng.choice(["stop", "hurry", "pause"])
    pause = rng.uniform(2.0, 4.0)
    v_now = speed
    pos, vel = [], []
    for i, t in enumerate(times):
        if t >= t_switch:
            if mode == "hurry":
                target = 2.0 * speed
            elif mode == "stop" or t < t_switch + pause:
                target = 0.0
            else:
                target = speed
            v_now += np.clip(target - v_now, -2.0 * (times[1] - times[0]), 2.0 * (times[1] - times[0]))
        vel.append((v_now * math.cos(heading), v_now * math.sin(heading)))
        pos.append((x, y))
        x += vel[-1][0] * (times[1] - times[0])
        y += vel[-1][1] * (times[1] - times[0])
    return np.array(pos), np.array(vel)


def _lead(rng, cfg: SuiteConfig, times):
    x = rng.uniform(15.0, 35.0)
    y = rng.uniform(-0.5, 0.5)
    speed = rng.uniform(5.0, 9.0)
    t_brake = rng.uniform(1.0, 6.0)
    decel = rng.uniform(3.0, 6.0)
    t_go = t_brake + rng.uniform(3.0, 8.0)
    dt = times[1] - times[0]
    v = speed
    pos, vel = [], []
    for t in times:
        if t_brake <= t < t_go:
            v = max(v - decel * dt, 0.0)
        elif t >= t_go:
            v = min(v + 1.5 * dt, speed)
        pos.append((x, y))
        vel.append((v, 0.0))
        x += v * dt
    return np.array(pos), np.array(vel)


def make_suite(cfg: SuiteConfig, planner: PlannerConfig = PlannerConfig()):
    """Synthetic corridor scenarios. Returns ``(scenarios, excluded_ids)``.

    Scenarios whose goal disc ends up occupied by a stopped agent are
    flagged unreachable and excluded.
    """
    n_steps = T_HIST - 1 + planner.max_steps + planner.horizon + 1
    times = (np.arange(n_steps) - (T_HIST - 1)) * planner.dt
    bounds = np.array([[0.0, -cfg.half_width], [cfg.length, -cfg.half_width],
                       [cfg.length, cfg.half_width], [0.0, cfg.half_width]])
    out, excluded = [], []
    for i in range(cfg.n_scenarios):
        rng = np.random.default_rng([cfg.seed, i, 11])
        agents = []
        if not cfg.empty:
            for j in range(int(rng.integers(cfg.agents[0], cfg.agents[1] + 1))):
                gen = _crossing if rng.random() < cfg.crossing_prob else _lead
                pos, vel = gen(rng, cfg, times)
                agents.append(AgentTrack(f"a{j}", pos, vel, np.ones(n_steps, dtype=bool)))
        sid = f"plan-{cfg.seed}-{i:04d}"
        scene = Scene(sid, planner.dt, T_HIST - 1, agents, bounds)
        scn = PlanScenario(sid, scene, (0.0, 0.0), cfg.ego_speed, (cfg.goal_x, 0.0), cfg.goal_radius,
                           cfg.footprint, planner.horizon)
        blocked = any(
            math.hypot(a.position[-1, 0] - cfg.goal_x, a.position[-1, 1]) <= cfg.goal_radius + cfg.footprint
            and np.hypot(*a.velocity[-1]) < 0.1
            for a in agents
        )
        (excluded if blocked else out).append(sid if blocked else scn)
    return out, excluded


@dataclass
class SuiteStats:
    source: str
    n: int
    success_rate: float
    collision_rate: float
    out_of_bounds_rate: float
    timeout_rate: float
    mean_velocity: float
    coverage_breaches: int
    excluded: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _run_one(args):
    scenario, source, cfg = args
    return simulate(scenario, source, cfg=cfg)


def run_suite(scenarios, source, cfg: PlannerConfig = PlannerConfig(), jobs=1, excluded=()):
    """Roll out every scenario; results ordered by scenario id regardless of ``jobs``."""
    work = [(s, source, cfg) for s in sorted(scenarios, key=lambda s: s.scenario_id)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_one, work))
    else:
        results = [_run_one(w) for w in work]
    n = len(results)
    if n == 0:
        raise ConfigError("planning suite is empty")
    rate = lambda o: 100.0 * sum(r.outcome == o for r in results) / n
    stats = SuiteStats(
        getattr(source, "label", "none"), n, rate("success"), rate("collision"), rate("out_of_bounds"),
        rate("timeout"), float(np.mean([r.mean_velocity for r in results])),
        int(sum(r.coverage_breaches for r in results)), list(excluded),
    )
    return stats, results


def write_suite(prefix, stats: SuiteStats, results):
    """``<prefix>.csv`` per scenario, ``<prefix>.json`` aggregates, ``<prefix>_traces.jsonl``."""
    with open(f"{prefix}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario_id", "outcome", "mean_velocity"])
        for r in results:
            w.writerow([r.scenario_id, r.outcome, f"{r.mean_velocity:.6f}"])
    with open(f"{prefix}.json", "w") as fh:
        json.dump(stats.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(f"{prefix}_traces.jsonl", "w") as fh:
        for r in results:
            fh.write(json.dumps({"scenario_id": r.scenario_id, "outcome": r.outcome,
                                 "trace": [[round(v, 6) if isinstance(v, float) else v for v in row]
                                           for row in r.trace]}, separators=(",", ":")) + "\n")


def snapshot_svg(path, scenario: PlanScenario, result: PlanResult, sets: PredictedSets | None = None):
    """Ego path, ground-truth agent paths and, optionally, one step of predicted sets."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Ellipse

    plt.rcParams["svg.hashsalt"] = "dosnet"
    fig, ax = plt.subplots(figsize=(8, 3))
    x0, x1, y0, y1 = scenario.box
    ax.add_patch(plt.Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, lw=1))
    tr = np.array([(r[0], r[1]) for r in result.trace])
    if len(tr):
        ax.plot(tr[:, 0], tr[:, 1], "b.-", ms=3, label=f"ego ({result.outcome})")
    for a in scenario.scene.agents:
        k = T_HIST - 1
        ax.plot(a.position[k:k + result.steps + 1, 0], a.position[k:k + result.steps + 1, 1], "r-", lw=1)
    if sets is not None and sets.ellipses is not None:
        e = sets.ellipses
        for idx in np.ndindex(*e.shape):
            ax.add_patch(Ellipse(e.center[idx], e.length[idx], e.width[idx],
                                 angle=math.degrees(e.theta[idx]), fill=False, ec="orange", lw=0.6))
    ax.add_patch(plt.Circle(scenario.goal_center, scenario.goal_radius, fill=False, ec="green"))
    ax.set_aspect("equal")
    ax.legend(fontsize=7, loc="upper left")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
