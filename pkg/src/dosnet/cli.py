"""``dosnet`` command line: one subcommand per pipeline stage.

Every subcommand reads the same JSON run configuration, writes its outputs
under ``<out>/<subcommand>/`` together with a ``config.json`` snapshot, and
finds upstream artifacts in sibling directories.

Exit codes: 0 ok, 2 configuration error, 3 missing artifact, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines as bl
from . import data, limits, losses, models, planner, training
from .errors import ConfigError, MissingArtifactError, NumericError, ParseError, SchemaError
from .geometry import EllipseBatch

log = logging.getLogger("dosnet")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


# -- run configuration --------------------------------------------------------

@dataclass
class ModelSection:
    hidden: int = 64
    embed: int = 32
    head_hidden: int = 64
    head_embed: int = 16


@dataclass
class TrainSection:
    lr: float = 2e-3
    gamma: float = 0.5
    step_epochs: int = 100
    epochs: int = 20
    scenes_per_batch: int = 16

    def to_train_config(self, seed, loss=None):
        return training.TrainConfig(self.lr, self.gamma, self.step_epochs, self.epochs,
                                    self.scenes_per_batch, seed, loss or losses.LossConfig())


@dataclass
class BaselineSection:
    """Parameters evaluated by ``eval`` and grids swept by ``sweep``."""

    PR: list = field(default_factory=lambda: [1.0, 2.0])
    SA: list = field(default_factory=lambda: [1.0, 2.0])
    circle_fixed: list = field(default_factory=lambda: [1.0, 2.0])
    circle_linear: list = field(default_factory=lambda: [1.0])
    circle_error: list = field(default_factory=lambda: [1.0])
    z_grid: list = field(default_factory=lambda: [0.5, 1.0, 1.5, 2.0])
    r_grid: list = field(default_factory=lambda: [0.5, 1.0, 1.5, 2.0, 3.0])

    def __post_init__(self):
        for f in dataclasses.fields(self):
            vals = getattr(self, f.name)
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0 for v in vals):
                raise ConfigError(f"{f.name}: values must be positive numbers")


@dataclass
class PlanSection:
    suite: planner.SuiteConfig = field(default_factory=planner.SuiteConfig)
    lattice: planner.PlannerConfig = field(default_factory=planner.PlannerConfig)
    sources: list = field(default_factory=lambda: ["none", "dos"])
    snapshots: int = 0


@dataclass
class RunConfig:
    seed: int = 42
    out: str = "runs/default"
    jobs: int = 1
    variant: str = "free"
    eval_split: str = "test"
    data: data.SynthConfig = field(default_factory=data.SynthConfig)
    model: ModelSection = field(default_factory=ModelSection)
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)
    train_traj: TrainSection = field(default_factory=lambda: TrainSection(epochs=30))
    train_dos: TrainSection = field(default_factory=TrainSection)
    train_baseline: TrainSection = field(default_factory=TrainSection)
    baselines: BaselineSection = field(default_factory=BaselineSection)
    plan: PlanSection = field(default_factory=PlanSection)

    def __post_init__(self):
        models.Variant.parse(self.variant)
        if self.eval_split not in data.SPLITS:
            raise ConfigError(f"eval_split must be one of {data.SPLITS}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def to_dict(self):
        return _plain(dataclasses.asdict(self))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _check_value(default, value, path):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
        value = type(default)(value) if ok else value
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def build_section(cls, raw, path="config"):
    """Instantiate dataclass ``cls`` from a JSON object, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        sub = f"{path}.{key}"
        if key not in names:
            raise ConfigError(f"{sub}: unknown key")
        default = getattr(defaults, key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = build_section(type(default), value, sub)
        else:
            kwargs[key] = _check_value(default, value, sub)
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return obj


def load_config(path=None, overrides=None):
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    raw = json.loads(json.dumps(raw))
    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"config.{dotted}: parent is not an object")
        node[leaf] = value
    return build_section(RunConfig, raw)


# -- run directories ------------------------------------------------------------

def stage_dir(cfg: RunConfig, name, create=True):
    d = Path(cfg.out) / name
    if create:
        d.mkdir(parents=True, exist_ok=True)
    return d


def write_snapshot(d, cfg: RunConfig, overrides):
    snap = {"config": cfg.to_dict(), "overrides": overrides}
    (Path(d) / "config.json").write_text(json.dumps(snap, indent=1, sort_keys=True) + "\n")


def require(path, producer):
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing {path}; run `dosnet {producer}` first")
    return path


def scenes_path(cfg):
    return stage_dir(cfg, "gen", create=False) / "scenes.jsonl"


def load_dataset(cfg: RunConfig):
    path = require(scenes_path(cfg), "gen")
    return data.load_scenes(path, cfg.seed, cfg.data.split_fractions, cfg.data.t_hist, cfg.data.t_fut)


def load_predictor(cfg: RunConfig):
    model, _ = models.load_model(require(stage_dir(cfg, "train-traj", False) / "predictor.npz", "train-traj"))
    return model


def dos_checkpoint(cfg: RunConfig):
    return stage_dir(cfg, "train-dos", False) / cfg.variant / "head.npz"


def baseline_checkpoint(cfg: RunConfig, which):
    return stage_dir(cfg, "train-baseline", False) / which / "head.npz"


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# -- subcommands ------------------------------------------------------------------

def cmd_gen(cfg: RunConfig):
    d = stage_dir(cfg, "gen")
    ds = data.generate_synthetic(cfg.data, cfg.seed)
    path = d / "scenes.jsonl"
    data.save_scenes(ds.scenes, path)
    _write_json(d / "manifest.json", {
        "seed": cfg.seed, "n_scenes": len(ds.scenes), "split": {k: len(v) for k, v in ds.split.items()},
        "scenes_sha256": _sha256(path), "generator": data.config_dict(cfg.data),
    })
    return d


def cmd_train_traj(cfg: RunConfig):
    ds = load_dataset(cfg)
    d = stage_dir(cfg, "train-traj")
    pred = models.TrajectoryPredictor(cfg.model.hidden, cfg.model.embed, cfg.data.t_fut, cfg.data.dt, cfg.seed)
    result = training.train_stage1(pred, ds, cfg.train_traj.to_train_config(cfg.seed))
    models.save_model(d / "predictor.npz", pred, {"best_epoch": result.best_epoch})
    training.write_curve(d / "metrics.csv", result.curve)
    r_e = data.error_stats_from(data.dataset_samples(ds, "train"), pred.predict(data.dataset_samples(ds, "train")))
    _write_json(d / "error_stats.json", {"r_e": [float(f"{x:.12g}") for x in r_e]})
    _write_json(d / "hash.json", {"param_hash": models.param_hash(pred.params)})
    if result.aborted:
        raise NumericError("training diverged; last good parameters were saved")
    return d


def _cached(pred, ds):
    return (training.FrozenOutputs.compute(pred, data.dataset_samples(ds, "train")),
            training.FrozenOutputs.compute(pred, data.dataset_samples(ds, "val")))


def _head_kwargs(cfg, pred):
    return {"feature_dim": pred.hidden, "hidden": cfg.model.head_hidden, "embed": cfg.model.head_embed,
            "t_fut": pred.t_fut}


def cmd_train_dos(cfg: RunConfig):
    pred = load_predictor(cfg)
    ds = load_dataset(cfg)
    d = stage_dir(cfg, "train-dos") / cfg.variant
    d.mkdir(parents=True, exist_ok=True)
    before = models.param_hash(pred.params)
    head = models.DosHead(cfg.variant, seed=cfg.seed, **_head_kwargs(cfg, pred))
    result = training.train_stage2(head, pred, ds, cfg.train_dos.to_train_config(cfg.seed, cfg.loss))
    models.save_model(d / "head.npz", head, {"best_epoch": result.best_epoch, "loss": dataclasses.asdict(cfg.loss)})
    training.write_curve(d / "metrics.csv", result.curve)
    _write_json(d / "hash.json", {"predictor_before": before, "predictor_after": models.param_hash(pred.params)})
    if result.aborted:
        raise NumericError("training diverged; last good parameters were saved")
    return d


def cmd_train_baseline(cfg: RunConfig, which=("PR", "SA")):
    pred = load_predictor(cfg)
    ds = load_dataset(cfg)
    cached = _cached(pred, ds)
    root = stage_dir(cfg, "train-baseline")
    hashes = {"predictor_before": models.param_hash(pred.params)}
    for w in which:
        d = root / w
        d.mkdir(parents=True, exist_ok=True)
        cls = models.GaussianHead if w == "PR" else models.RadiusHead
        head = cls(seed=cfg.seed, **_head_kwargs(cfg, pred))
        head, result = training.train_baseline_heads(ds, pred, w, cfg.train_baseline.to_train_config(cfg.seed),
                                                     head=head, cached=cached)
        models.save_model(d / "head.npz", head, {"best_epoch": result.best_epoch})
        training.write_curve(d / "metrics.csv", result.curve)
        hashes[f"predictor_after_{w}"] = models.param_hash(pred.params)
        if result.aborted:
            raise NumericError(f"{w} head training diverged")
    _write_json(root / "hash.json", hashes)
    return root


def _outputs(cfg: RunConfig, pred, samples):
    yhat, feats = pred.infer(samples)
    r_e = json.loads(require(stage_dir(cfg, "train-traj", False) / "error_stats.json", "train-traj").read_text())["r_e"]
    out = bl.PredictorOutputs(yhat, samples.dt, r_e=np.asarray(r_e))
    pr_path, sa_path = baseline_checkpoint(cfg, "PR"), baseline_checkpoint(cfg, "SA")
    if pr_path.exists():
        out.gaussian = models.predict_gaussian(models.load_model(pr_path)[0], feats, yhat)
    if sa_path.exists():
        out.radius = models.predict_radius(models.load_model(sa_path)[0], feats, yhat)
    return out, feats


def _dos_report(cfg, samples, out, feats):
    head, _ = models.load_model(require(dos_checkpoint(cfg), "train-dos"))
    c, l, w, th = models.predict_dos(head, feats, out.yhat, samples.anchor_velocity())
    sets = EllipseBatch(c, l, w, th)
    params = {"variant": cfg.variant, "k": cfg.loss.k, "alpha": cfg.loss.alpha, "beta": cfg.loss.beta}
    return bl.evaluate_sets(sets, samples.future, samples.future_mask, "DOS", params, samples.dt)


def _baseline_reports(out, samples, grids):
    reports = []
    for kind, grid in grids.items():
        if kind == "PR" and out.gaussian is None or kind == "SA" and out.radius is None:
            log.warning("skipping %s: run `dosnet train-baseline` to include it", kind)
            continue
        spec = bl.BaselineSpec(kind)
        reports += bl.sweep(spec, grid, out, samples.future, samples.future_mask)
    return reports


def cmd_eval(cfg: RunConfig):
    pred = load_predictor(cfg)
    ds = load_dataset(cfg)
    samples = data.dataset_samples(ds, cfg.eval_split)
    out, feats = _outputs(cfg, pred, samples)
    b = cfg.baselines
    reports = [_dos_report(cfg, samples, out, feats)]
    reports += _baseline_reports(out, samples, {"PR": b.PR, "SA": b.SA, "circle_fixed": b.circle_fixed,
                                                "circle_linear": b.circle_linear, "circle_error": b.circle_error})
    d = stage_dir(cfg, "eval")
    bl.write_reports_csv(d / "metrics.csv", reports)
    bl.write_reports_json(d / "reports.json", reports)
    return d


def cmd_sweep(cfg: RunConfig):
    pred = load_predictor(cfg)
    ds = load_dataset(cfg)
    samples = data.dataset_samples(ds, cfg.eval_split)
    out, feats = _outputs(cfg, pred, samples)
    z, r = cfg.baselines.z_grid, cfg.baselines.r_grid
    reports = []
    if dos_checkpoint(cfg).exists():
        reports.append(_dos_report(cfg, samples, out, feats))
    reports += _baseline_reports(out, samples, {"PR": z, "SA": z, "circle_fixed": r,
                                                "circle_linear": z, "circle_error": z})
    d = stage_dir(cfg, "sweep")
    bl.write_reports_csv(d / "curve.csv", reports)
    bl.write_reports_json(d / "reports.json", reports)
    bl.pareto_svg(d / "pareto.svg", reports)
    return d


def cmd_limits(cfg: RunConfig):
    pred = load_predictor(cfg)
    ds = load_dataset(cfg)
    samples = data.dataset_samples(ds, cfg.eval_split)
    out, _ = _outputs(cfg, pred, samples)
    pr_osa = None
    if out.gaussian is not None:
        pr_osa = bl.mean_osa(bl.baseline_sets(bl.BaselineSpec("PR", z=1.0), out), samples.future_mask)
    rep = limits.limit_report(out.yhat, samples.future, samples.future_mask, samples.rotation,
                              samples.anchor_velocity(), samples.dt, pr_osa)
    d = stage_dir(cfg, "limits")
    limits.write_limit_csv(d / "limits.csv", rep)
    limits.limit_svg(d / "limits.svg", rep)
    _write_json(d / "degenerate.json", rep.degenerate)
    return d


def make_source(cfg: RunConfig, name, pred):
    if name == "none":
        return planner.PointSource(pred)
    if name == "dos":
        return planner.DosSource(pred, models.load_model(require(dos_checkpoint(cfg), "train-dos"))[0])
    kind, _, param = name.partition(":")
    spec = bl.BaselineSpec(kind)
    if param:
        spec = spec.with_param(float(param))
    kw = {}
    if kind == "PR":
        kw["gaussian_head"] = models.load_model(require(baseline_checkpoint(cfg, "PR"), "train-baseline"))[0]
    if kind == "SA":
        kw["radius_head"] = models.load_model(require(baseline_checkpoint(cfg, "SA"), "train-baseline"))[0]
    if kind == "circle_error":
        path = require(stage_dir(cfg, "train-traj", False) / "error_stats.json", "train-traj")
        kw["r_e"] = np.asarray(json.loads(path.read_text())["r_e"])
    return planner.BaselineSource(pred, spec, **kw)


def cmd_plan(cfg: RunConfig):
    pred = load_predictor(cfg)
    suite_cfg = dataclasses.replace(cfg.plan.suite, seed=cfg.seed)
    scenarios, excluded = planner.make_suite(suite_cfg, cfg.plan.lattice)
    d = stage_dir(cfg, "plan")
    summary = {}
    for name in cfg.plan.sources:
        try:
            source = make_source(cfg, name, pred)
        except ConfigError as exc:
            raise ConfigError(f"config.plan.sources: {name!r}: {exc}") from None
        stats, results = planner.run_suite(scenarios, source, cfg.plan.lattice, cfg.jobs, excluded)
        tag = name.replace(":", "_")
        planner.write_suite(d / tag, stats, results)
        summary[name] = stats.to_dict()
        for r in results[: cfg.plan.snapshots]:
            scn = next(s for s in scenarios if s.scenario_id == r.scenario_id)
            planner.snapshot_svg(d / f"{tag}_{r.scenario_id}.svg", scn, r)
    _write_json(d / "summary.json", summary)
    return d


def cmd_report(cfg: RunConfig):
    reports = []
    for stage, name in (("eval", "reports.json"), ("sweep", "reports.json")):
        p = stage_dir(cfg, stage, False) / name
        if p.exists():
            reports += bl.read_reports_json(p)
    if not reports:
        raise MissingArtifactError(f"no evaluation reports under {cfg.out}; run `dosnet eval` first")
    seen, unique = set(), []
    for r in reports:
        key = (r.method, r.param_label)
        if key not in seen:
            seen.add(key)
            unique.append(r)
    order = {m: i for i, m in enumerate(("DOS", "PR", "SA", "circle_fixed", "circle_linear", "circle_error"))}
    unique.sort(key=lambda r: (order.get(r.method, len(order)), r.method, sorted(
        (k, str(v)) if not isinstance(v, (int, float)) else (k, "", v) for k, v in r.params.items())))
    d = stage_dir(cfg, "report")
    bl.write_table_csv(d / "table.csv", unique)
    bl.pareto_svg(d / "pareto.svg", unique)
    return d


COMMANDS = {
    "gen": cmd_gen, "train-traj": cmd_train_traj, "train-dos": cmd_train_dos,
    "train-baseline": cmd_train_baseline, "eval": cmd_eval, "sweep": cmd_sweep,
    "limits": cmd_limits, "plan": cmd_plan, "report": cmd_report,
}


def _float_list(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty grid")
    return vals


def build_parser():
    p = argparse.ArgumentParser(prog="dosnet", description="Dynamic occupancy set experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON run configuration")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", help="run directory root")
        s.add_argument("--jobs", type=int)
        s.add_argument("--variant", choices=models.VARIANTS)
        s.add_argument("--k", type=float)
        s.add_argument("--alpha", type=float)
        s.add_argument("--beta", type=float)
        s.add_argument("--z-grid", type=_float_list, help="comma-separated z values for sweeps")
        if name == "train-baseline":
            s.add_argument("--which", choices=["PR", "SA", "all"], default="all")
    return p


def overrides_from(args):
    o = {}
    for flag, key in (("seed", "seed"), ("out", "out"), ("jobs", "jobs"), ("variant", "variant"),
                      ("k", "loss.k"), ("alpha", "loss.alpha"), ("beta", "loss.beta"),
                      ("z_grid", "baselines.z_grid")):
        v = getattr(args, flag)
        if v is not None:
            o[key] = v
    return o


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = overrides_from(args)
        cfg = load_config(args.config, overrides)
        fn = COMMANDS[args.command]
        if args.command == "train-baseline":
            d = fn(cfg, ("PR", "SA") if args.which == "all" else (args.which,))
        else:
            d = fn(cfg)
        write_snapshot(d, cfg, overrides)
        print(d)
        return EXIT_OK
    except (ConfigError, ParseError, SchemaError) as exc:
        print(f"dosnet: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"dosnet: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"dosnet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
