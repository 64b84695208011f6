"""Experiment harness: seeded closed-loop runs, aggregation and persistence.

Example::

    hybrid-pomdp plan --domain walled --planner hierarchical --seeds 0..4 --out runs/h

Each seed builds the domain, plans, executes the plan with the B-LQR
stabilizer and writes ``seed<k>.csv`` (per-step rows), ``seed<k>_plot.json``
(means and 1-sigma ellipses) and a shared ``summary.json``.

Exit codes: 0 success, 1 planner failure, 2 configuration error.
"""

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import CostWeights, with_overrides
from .direct_planner import plan_direct
from .domains import get_domain, make_simulator
from .errors import ConfigError, HybridPlanningError
from .hierarchical_planner import _MapCache, rank_and_plan
from .hybrid_model import GoalRegion
from .stabilizer import ExperimentRecord, ReplanPolicy, execute

log = logging.getLogger(__name__)

CSV_VERSION = 1
PLANNERS = ("direct", "hierarchical")
# Override keys routed to each configuration record.
_DIRECT_KEYS = {"n_segments", "max_iter", "hessian"}
_HIER_KEYS = {"n_map_samples", "n_inner_samples", "conf_radius_frac", "path_penalty", "de_generations",
              "screen_top_k", "n_final_samples", "max_plan_length"}
_FILTER_KEYS = {"epsilon_floor", "mixture_size", "n_guard_samples"}
_COST_KEYS = {"Q", "R", "Q_T", "Lambda"}
_RUN_KEYS = {"delta", "max_steps", "cov_bound", "obs_noise", "goal_radius"}


@dataclass(frozen=True)
class RunConfig:
    domain: str = "walled"
    planner: str = "hierarchical"
    seeds: tuple = (0, 1, 2, 3, 4)
    horizon: int = None
    overrides: dict = field(default_factory=dict)
    out: str = None
    # Worker processes for the seeds; 1 runs them in this process.
    jobs: int = 1

    def __post_init__(self):
        if self.planner not in PLANNERS:
            raise ConfigError(f"planner must be one of {PLANNERS}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        known = _DIRECT_KEYS | _HIER_KEYS | _FILTER_KEYS | _COST_KEYS | _RUN_KEYS
        unknown = set(self.overrides) - known
        if unknown:
            raise ConfigError(f"unknown override keys: {sorted(unknown)}")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        try:
            get_domain(self.domain)
        except KeyError as exc:
            raise ConfigError(str(exc)) from None
        if "obs_noise" in self.overrides and self.domain != "walled":
            raise ConfigError("obs_noise can only be overridden for the walled domain")
        # Build the first seed's setup once so bad values fail here, not mid-run.
        try:
            spec = _prepare(self, self.seeds[0])
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid override: {exc}") from None
        if spec.horizon % spec.direct.n_segments:
            raise ConfigError(f"horizon {spec.horizon} is not divisible by n_segments {spec.direct.n_segments}")


def parse_seeds(text):
    """``"0..4"`` (inclusive) or ``"0,2,7"``."""
    text = str(text).strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            seeds = list(range(int(lo), int(hi) + 1))
        else:
            seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse seeds {text!r}") from None
    if not seeds:
        raise ConfigError("at least one seed is required")
    return tuple(seeds)


def load_config(path=None, **flags):
    """Read a JSON config file and apply command-line flags on top."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for key, value in flags.items():
        if value is not None:
            data[key] = value
    if "seeds" in data:
        seeds = data["seeds"]
        data["seeds"] = parse_seeds(seeds) if isinstance(seeds, str) else tuple(int(s) for s in seeds)
    allowed = {"domain", "planner", "seeds", "horizon", "overrides", "out", "jobs"}
    extra = set(data) - allowed
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    return RunConfig(**data)


def _prepare(config, seed):
    """Domain spec with the config's overrides applied."""
    ov = config.overrides
    kwargs = {"obs_noise": ov["obs_noise"]} if "obs_noise" in ov and config.domain == "walled" else {}
    spec = get_domain(config.domain, **kwargs)
    costs = spec.costs
    if _COST_KEYS & set(ov):
        costs = CostWeights(**{k: ov.get(k, getattr(costs, k)) for k in ("Q", "R", "Q_T", "Lambda")})
    filt = with_overrides(spec.filter, **{k: ov[k] for k in _FILTER_KEYS if k in ov})
    direct = with_overrides(spec.direct, **{k: ov[k] for k in _DIRECT_KEYS if k in ov})
    direct = replace(direct, filter=with_overrides(direct.filter, **{k: ov[k] for k in _FILTER_KEYS - {"n_guard_samples"} if k in ov}))
    hier = with_overrides(spec.hierarchical, seed=seed, **{k: ov[k] for k in _HIER_KEYS if k in ov})
    goal = spec.goal_region
    if "goal_radius" in ov:
        goal = GoalRegion(goal.center, ov["goal_radius"])
    return replace(
        spec,
        costs=costs,
        filter=filt,
        direct=direct,
        hierarchical=hier,
        goal_region=goal,
        horizon=config.horizon or spec.horizon,
        max_steps=ov.get("max_steps", spec.max_steps),
        termination_cov_bound=ov.get("cov_bound", spec.termination_cov_bound),
    )


def make_planner(spec, kind):
    """``belief -> (trajectory, label)`` for the chosen planner."""
    model = spec.model
    if kind == "direct":
        def planner(belief):
            traj = plan_direct(model, belief, spec.goal_region, spec.horizon, spec.costs, spec.direct)
            return traj, "direct"
        return planner
    cache = _MapCache(model, spec.hierarchical)

    def planner(belief):
        traj, plan = rank_and_plan(model, belief, spec.goal_region, spec.horizon, spec.costs,
                                   spec.hierarchical, spec.direct, cache=cache)
        return traj, plan.describe(model)
    return planner


def run_seed(config, seed):
    spec = _prepare(config, seed)
    sim = make_simulator(spec, seed)
    record = execute(
        spec.model,
        sim,
        make_planner(spec, config.planner),
        ReplanPolicy(config.overrides.get("delta", 3.0)),
        spec.start_belief,
        spec.goal_region,
        spec.max_steps,
        cov_bound=spec.termination_cov_bound,
        Q_track=spec.costs.Q,
        R_track=spec.costs.R,
        filter_config=spec.filter,
        rng=np.random.default_rng([seed, 1]),
    )
    record.seed = seed
    return record


def run_experiment(config):
    """Run every seed; write per-seed files and the summary when ``config.out`` is set."""
    out = Path(config.out) if config.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            done = list(pool.map(run_seed, [config] * len(config.seeds), config.seeds))
    else:
        done = (run_seed(config, seed) for seed in config.seeds)
    records = []
    for seed, record in zip(config.seeds, done):
        log.info("seed %d: success=%s steps=%d error=%s max_cov=%.3f time=%.2fs plans=%s",
                 seed, record.success, record.steps, np.round(record.final_error, 3),
                 record.final_max_cov, record.planning_time, record.plans)
        records.append(record)
        if out is not None:
            export_trajectory(record, out / f"seed{seed}.csv", "csv")
            export_trajectory(record, out / f"seed{seed}_plot.json", "plot")
    if out is not None:
        (out / "summary.json").write_text(json.dumps(aggregate(records), indent=2, sort_keys=True) + "\n")
    return records


def aggregate(records):
    """Table-style means over runs.

    Planning time is the only nondeterministic entry; it is kept under
    ``"timing"`` so the rest of the summary can be compared bit for bit.
    """
    if not records:
        raise ValueError("aggregate needs at least one record")
    errors = np.array([r.final_error for r in records])
    return {
        "runs": len(records),
        "success_rate": float(np.mean([r.success for r in records])),
        "final_error_mean": errors.mean(axis=0).tolist(),
        "final_abs_error_mean": np.abs(errors).mean(axis=0).tolist(),
        "final_max_cov_mean": float(np.mean([r.final_max_cov for r in records])),
        "steps_mean": float(np.mean([r.steps for r in records])),
        "replans_mean": float(np.mean([r.n_replans for r in records])),
        "first_plans": [r.plans[0] if r.plans else "" for r in records],
        "failures": [r.failure for r in records],
        "timing": {"planning_time_mean": float(np.mean([r.planning_time for r in records])),
                   "planning_time": [r.planning_time for r in records]},
    }


# ---------------------------------------------------------------------------
# Persistence


def _header(n, l, q, m):
    cols = ["t"]
    cols += [f"true_{i}" for i in range(n)]
    cols += [f"mean_{i}" for i in range(n)]
    cols += [f"cov_{i}_{j}" for i in range(n) for j in range(n)]
    cols += [f"bq_{i}" for i in range(q)]
    cols += [f"u_{i}" for i in range(m)]
    cols += [f"z_{i}" for i in range(l)]
    return cols


def _meta(record):
    return {
        "version": CSV_VERSION,
        "goal": record.goal.tolist(),
        "final_mle": None if record.final_mle is None else record.final_mle.tolist(),
        "planning_time": record.planning_time,
        "replan_steps": list(record.replan_steps),
        "plans": list(record.plans),
        "success": record.success,
        "failure": record.failure,
        "seed": record.seed,
    }


def ellipse(mean, cov, n_points=64):
    """Closed polyline of the 1-sigma ellipse of a 2-D Gaussian."""
    L = np.linalg.cholesky(np.asarray(cov, dtype=float)[:2, :2])
    theta = np.linspace(0.0, 2.0 * np.pi, n_points + 1)
    circle = np.stack([np.cos(theta), np.sin(theta)])
    return (np.asarray(mean, dtype=float)[:2, None] + L @ circle).T


def export_trajectory(record, path, fmt="csv"):
    """Write ``record`` as per-step CSV rows or as a JSON plot bundle."""
    path = Path(path)
    if fmt == "plot":
        bundle = {
            "means": [m.tolist() for m in record.means],
            "true_states": [x.tolist() for x in record.true_states],
            "ellipses": [ellipse(m, c).tolist() for m, c in zip(record.means, record.covs)],
            "goal": record.goal.tolist(),
        }
        path.write_text(json.dumps(bundle) + "\n")
        return path
    if fmt != "csv":
        raise ValueError(f"unknown export format {fmt!r}")
    n = record.means[0].size
    q = record.discretes[0].size
    m = record.controls[0].size if record.controls else 0
    l = record.observations[0].size if record.observations else 0
    with path.open("w", newline="") as fh:
        fh.write("# " + json.dumps(_meta(record)) + "\n")
        writer = csv.writer(fh)
        writer.writerow(_header(n, l, q, m))
        for t in range(len(record.means)):
            row = [t]
            row += [repr(float(v)) for v in record.true_states[t]]
            row += [repr(float(v)) for v in record.means[t]]
            row += [repr(float(v)) for v in record.covs[t].ravel()]
            row += [repr(float(v)) for v in record.discretes[t]]
            if t == 0:
                row += [""] * (m + l)
            else:
                row += [repr(float(v)) for v in record.controls[t - 1]]
                row += [repr(float(v)) for v in record.observations[t - 1]]
            writer.writerow(row)
    return path


def import_trajectory(path):
    """Read a CSV written by :func:`export_trajectory` back into a record."""
    path = Path(path)
    with path.open(newline="") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ValueError(f"{path} lacks the metadata line")
        meta = json.loads(first[2:])
        rows = list(csv.reader(fh))
    header, rows = rows[0], rows[1:]
    idx = lambda prefix: [i for i, h in enumerate(header) if h.startswith(prefix)]
    cols = {k: idx(k) for k in ("true_", "mean_", "cov_", "bq_", "u_", "z_")}
    n = len(cols["mean_"])
    rec = ExperimentRecord(goal=np.array(meta["goal"]))
    for t, row in enumerate(rows):
        vals = lambda k: np.array([float(row[i]) for i in cols[k]])
        rec.true_states.append(vals("true_"))
        rec.means.append(vals("mean_"))
        rec.covs.append(vals("cov_").reshape(n, n))
        rec.discretes.append(vals("bq_"))
        if t > 0:
            rec.controls.append(vals("u_"))
            rec.observations.append(vals("z_"))
    rec.final_mle = None if meta["final_mle"] is None else np.array(meta["final_mle"])
    rec.planning_time = meta["planning_time"]
    rec.replan_steps = list(meta["replan_steps"])
    rec.plans = list(meta["plans"])
    rec.success = meta["success"]
    rec.failure = meta["failure"]
    rec.seed = meta["seed"]
    return rec


# ---------------------------------------------------------------------------
# Command line


def build_parser():
    parser = argparse.ArgumentParser(prog="hybrid-pomdp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    plan = sub.add_parser("plan", help="run seeded closed-loop experiments")
    plan.add_argument("--domain", choices=("walled", "assembly"))
    plan.add_argument("--planner", choices=PLANNERS)
    plan.add_argument("--seeds", help="inclusive range a..b or a comma list")
    plan.add_argument("--horizon", type=int)
    plan.add_argument("--out", help="output directory")
    plan.add_argument("--config", help="JSON config file; flags take precedence")
    plan.add_argument("--jobs", type=int, help="worker processes for the seeds (default 1)")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, domain=args.domain, planner=args.planner, seeds=args.seeds,
                             horizon=args.horizon, out=args.out, jobs=args.jobs)
    except (ConfigError, TypeError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        records = run_experiment(config)
    except HybridPlanningError as exc:
        print(f"planner failure: {exc}", file=sys.stderr)
        return 1
    summary = aggregate(records)
    print(json.dumps(summary, indent=2, sort_keys=True))
    failed = [r.seed for r in records if r.failure and r.failure.startswith("planner")]
    if failed:
        print(f"planner failure on seeds {failed}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
