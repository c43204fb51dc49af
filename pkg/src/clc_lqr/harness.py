"""Experiment configuration, dispatch and CSV / manifest output.

Config files are flat ``key = value`` text; ``#`` starts a comment and keys
carry a dotted section prefix. Lists are comma separated. Every key is
listed in ``KEYS`` with its default (None means required when the section
is used); unknown keys are errors.

    method = clc
    seed = 0
    instance.a_true = 2
    cost.q = 0, 1, 1
    clc.beta = -1.5, -1

Each run writes ``<method>.csv`` and ``manifest.txt`` into the output
directory. CSV bodies depend only on the config; wall-clock timestamps
appear in the manifest only.
"""
from __future__ import annotations

import csv
import datetime as _dt
import os
import platform
from dataclasses import dataclass, field

import numpy as np

from . import __version__, riccati
from ._accel import backend as _backend
from .baselines import LearningCurve, PGConfig, QLearnConfig, RSConfig, run_pg, run_q, run_rs
from .beta_learn import BetaLearnConfig, clc_evaluator, exact_evaluator, learn_beta
from .clc_dp import GridSpec
from .coupling import ModelSpec, execute_clc, execute_clc_exact
from .errors import CLCError, ConfigError, NoFixedPointError, OutOfRangeError
from .model import CostSchedule, EpisodeLedger, RealSystemOracle, SystemInstance

METHODS = ("riccati", "clc", "learn-beta", "pg", "rs", "q", "sweep-beta", "compare")


def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _axis(s):
    v = s.split(",")
    if len(v) != 3:
        raise ValueError("expected lo, hi, n")
    return float(v[0]), float(v[1]), int(v[2])


def _bool(s):
    s = s.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s):
    return None if s.strip().lower() == "none" else float(s)


def _opt_int(s):
    return None if s.strip().lower() == "none" else int(s)


_G = GridSpec.paper_default()

# key -> (parser, default)
KEYS = {
    "method": (str, None),
    "seed": (int, 0),
    "output": (str, "results"),
    "instance.a_true": (float, 2.0),
    "instance.b_true": (float, 1.0),
    "instance.a_model": (float, 1.0),
    "instance.b_model": (float, 1.0),
    "instance.x0": (float, 0.5),
    "instance.horizon": (int, 2),
    "cost.q": (_floats, None),  # default: Q_0 = 0, Q_t = 1
    "cost.r": (_floats, None),  # default: R_t = 1
    "grids.x_min": (float, _G.x_min),
    "grids.x_max": (float, _G.x_max),
    "grids.u_min": (float, _G.u_min),
    "grids.u_max": (float, _G.u_max),
    "grids.xhat_min": (float, _G.xhat_min),
    "grids.xhat_max": (float, _G.xhat_max),
    "grids.n_x": (int, _G.n_x),
    "grids.n_u": (int, _G.n_u),
    "grids.n_xhat": (int, _G.n_xhat),
    "clc.beta": (_floats, None),
    "clc.solver": (str, "grid"),  # grid | exact
    "clc.interpolation": (str, "quadratic"),
    "clc.outside": (str, "exclude"),
    "clc.refine": (_bool, True),
    "clc.n_starts": (int, 1),
    "clc.refine_tol": (_opt_float, None),
    "clc.threshold": (_opt_float, None),
    "clc.budget": (_opt_int, None),
    "learn_beta.beta_init": (_floats, None),  # default: 2 for free entries, -Q_T last
    "learn_beta.step_size": (float, 0.8),
    "learn_beta.schedule": (str, "constant"),
    "learn_beta.kappa": (float, 10.0),
    "learn_beta.fd_delta": (float, 0.2),
    "learn_beta.max_iters": (int, 25),
    "learn_beta.convergence_tol": (float, 1e-4),
    "learn_beta.fix_terminal": (_bool, True),
    "learn_beta.divergence_factor": (float, 100.0),
    "pg.k_init": (float, 0.0),
    "pg.sigma": (float, 0.1),
    "pg.step_size": (float, 0.01),
    "pg.episodes_per_update": (int, 10),
    "pg.max_updates": (int, 100),
    "rs.k_init": (float, 0.0),
    "rs.sigma": (float, 0.1),
    "rs.step_size": (float, 0.02),
    "rs.directions_per_update": (int, 2),
    "rs.max_updates": (int, 100),
    "q.state_grid": (_axis, (-7.0, 7.0, 57)),
    "q.action_grid": (_axis, (-1.5, 1.5, 13)),
    "q.a_step": (float, 1.0),
    "q.b_step": (float, 1.0),
    "q.explore_eps": (float, 0.3),
    "q.max_episodes": (int, 3000),
    "q.eval_every": (int, 50),
    "sweep.a_true": (_floats, (1.5, 2.0, 2.5)),
    "sweep.beta1_min": (float, -3.0),
    "sweep.beta1_max": (float, 1.0),
    "sweep.beta1_n": (int, 41),
    "compare.seeds": (int, 10),
    "compare.target_tol": (float, 0.1),
}

# sections each method may use besides instance / cost / grids
_SECTIONS = {
    "riccati": (),
    "clc": ("clc",),
    "learn-beta": ("learn_beta", "clc"),
    "pg": ("pg",),
    "rs": ("rs",),
    "q": ("q",),
    "sweep-beta": ("sweep", "clc"),
    "compare": ("compare", "learn_beta", "clc", "pg", "rs", "q"),
}


def parse_config_text(text: str) -> dict:
    """Raw ``key -> value string`` mapping; checks syntax and key names only."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


@dataclass
class ExperimentConfig:
    method: str
    seed: int
    output: str
    instance: SystemInstance
    cost: CostSchedule
    grids: GridSpec
    values: dict = field(default_factory=dict)  # every resolved key, defaults included

    def section(self, name: str) -> dict:
        p = name + "."
        return {k[len(p):]: v for k, v in self.values.items() if k.startswith(p)}

    @property
    def model(self) -> ModelSpec:
        i = self.instance
        return ModelSpec(i.a_model, i.b_model, self.cost, i.x0, self.grids)

    def echo(self):
        return [(k, _fmt(self.values[k])) for k in sorted(self.values) if self.values[k] is not None]


def build_config(raw: dict, method: str | None = None, seed: int | None = None,
                 output: str | None = None) -> ExperimentConfig:
    """Validate a raw mapping (from parse_config_text) into an ExperimentConfig.

    ``method``, ``seed`` and ``output`` override the file (the CLI passes the
    subcommand as ``method``; a conflicting ``method`` key is an error).
    """
    raw = dict(raw)
    if method is not None:
        if "method" in raw and raw["method"] != method:
            raise ConfigError(f"config says method = {raw['method']} but {method} was requested")
        raw["method"] = method
    m = raw.get("method")
    if m is None:
        raise ConfigError("missing required key 'method'")
    if m not in METHODS:
        raise ConfigError(f"unknown method {m!r} (expected one of {', '.join(METHODS)})")
    allowed = {"", "instance", "cost", "grids", *_SECTIONS[m]}
    for k in raw:
        sec = k.split(".", 1)[0] if "." in k else ""
        if sec not in allowed:
            raise ConfigError(f"key {k!r} does not apply to method {m}")
    if m == "sweep-beta" and "clc.beta" in raw:
        raise ConfigError("key 'clc.beta' does not apply to method sweep-beta (beta_1 is swept)")

    values = {}
    for k, (parse, default) in KEYS.items():
        sec = k.split(".", 1)[0] if "." in k else ""
        if sec not in allowed:
            continue
        if k in raw:
            try:
                values[k] = parse(raw[k])
            except ValueError as exc:
                raise ConfigError(f"bad value for {k!r}: {raw[k]!r} ({exc})") from None
        else:
            values[k] = default
    if seed is not None:
        values["seed"] = int(seed)
    if output is not None:
        values["output"] = str(output)

    try:
        inst = SystemInstance(*(values["instance." + f] for f in
                                ("a_true", "b_true", "a_model", "b_model", "x0", "horizon")))
        T = inst.horizon
        q = values["cost.q"] if values["cost.q"] is not None else (0.0,) + (1.0,) * T
        r = values["cost.r"] if values["cost.r"] is not None else (1.0,) * T
        cost = CostSchedule(q, r)
        values["cost.q"], values["cost.r"] = cost.q, cost.r
        if cost.horizon != T:
            raise ConfigError(f"cost has horizon {cost.horizon} but instance.horizon = {T}")
        grids = GridSpec(*(values["grids." + f] for f in
                           ("x_min", "x_max", "u_min", "u_max", "xhat_min", "xhat_max", "n_x", "n_u", "n_xhat")))
    except ConfigError:
        raise
    except CLCError as exc:
        raise ConfigError(str(exc)) from None

    if m == "clc" and values["clc.beta"] is None:
        raise ConfigError("missing required key 'clc.beta' for method clc")
    if "clc.solver" in values and values["clc.solver"] not in ("grid", "exact"):
        raise ConfigError(f"clc.solver must be grid or exact, got {values['clc.solver']!r}")
    for k in ("clc.beta", "learn_beta.beta_init"):
        if values.get(k) is not None and len(values[k]) != T:
            raise ConfigError(f"{k} has {len(values[k])} entries, horizon is {T}")
    if "learn_beta.beta_init" in values and values["learn_beta.beta_init"] is None:
        values["learn_beta.beta_init"] = (2.0,) * (T - 1) + (-cost.q[-1],)
    if m == "sweep-beta":
        if T != 2:
            raise ConfigError("sweep-beta needs instance.horizon = 2")
        if values["sweep.beta1_n"] < 1 or not values["sweep.a_true"]:
            raise ConfigError("sweep needs at least one a_true and one beta_1 value")
    if m == "compare" and values["compare.seeds"] < 1:
        raise ConfigError("compare.seeds must be >= 1")

    cfg = ExperimentConfig(m, values["seed"], values["output"], inst, cost, grids, values)
    # construct the method configs once so bad values fail before any episode runs
    try:
        for sec in _SECTIONS[m]:
            _method_config(cfg, sec, cfg.seed)
    except CLCError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path, **overrides) -> ExperimentConfig:
    with open(path) as fh:
        return build_config(parse_config_text(fh.read()), **overrides)


def _method_config(cfg: ExperimentConfig, sec: str, seed: int):
    s = cfg.section(sec)
    if sec == "pg":
        return PGConfig(seed=seed, **s)
    if sec == "rs":
        return RSConfig(seed=seed, **s)
    if sec == "q":
        return QLearnConfig(seed=seed, **s)
    if sec == "learn_beta":
        return BetaLearnConfig(**s)
    return s


def _clc_kw(cfg: ExperimentConfig) -> dict:
    s = cfg.section("clc")
    s.pop("beta", None)
    s.pop("solver", None)
    return s


# --------------------------------------------------------------------------
# output helpers


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if isinstance(v, (tuple, list, np.ndarray)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_manifest(path, items):
    with open(path, "w") as fh:
        fh.write("# run manifest\n")
        for k, v in items:
            fh.write(f"{k} = {_fmt(v)}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                k, v = (s.strip() for s in line.split("=", 1))
                out[k] = v
    return out


def _versions():
    items = [("version.artifact", __version__), ("version.python", platform.python_version()),
             ("version.numpy", np.__version__)]
    try:
        import scipy
        items.append(("version.scipy", scipy.__version__))
    except ImportError:
        pass
    try:
        import numba
        items.append(("version.numba", numba.__version__))
    except ImportError:
        pass
    return items


class _Phases:
    """Per-phase episode counts read off one shared ledger."""

    def __init__(self, ledger: EpisodeLedger):
        self.ledger = ledger
        self.counts = {}

    def run(self, name, fn, *args, **kw):
        before = self.ledger.episodes
        try:
            return fn(*args, **kw)
        finally:
            self.counts[name] = self.counts.get(name, 0) + self.ledger.episodes - before


@dataclass
class RunReport:
    method: str
    files: list
    results: dict
    episodes: dict
    total_episodes: int


# --------------------------------------------------------------------------
# experiments


@dataclass
class SweepRow:
    a_true: float
    beta: tuple
    status: str
    Jr: float
    riccati_optimal: float
    residual: float
    episodes: int


def sweep_beta1(instances, beta1_values, cost: CostSchedule, grids: GridSpec, *, ledger=None,
                solver="grid", **clc_kw) -> list:
    """J_r(g^clc) for every (instance, beta_1) with beta_2 = -Q_T.

    Cells without a coupled fixed point (or whose model trajectories leave
    the grid) are kept with J_r = nan and a status instead of aborting.
    Rows come back sorted by (a_true, beta_1).
    """
    rows = []
    for inst in instances:
        if inst.horizon != 2:
            raise ConfigError("sweep_beta1 needs horizon-2 instances")
        ref = riccati.solve(inst.a_true, inst.b_true, cost, inst.x0).optimal_cost
        model = ModelSpec(inst.a_model, inst.b_model, cost, inst.x0, grids)
        for b1 in beta1_values:
            beta = (float(b1), -cost.q[-1])
            oracle = RealSystemOracle.from_instance(inst, ledger)
            try:
                if solver == "exact":
                    res = execute_clc_exact(beta, model, oracle)
                else:
                    res = execute_clc(beta, model, oracle, **clc_kw)
                row = SweepRow(inst.a_true, beta, "ok", res.Jr_value, ref, res.solution.residual,
                               res.episodes_used)
            except NoFixedPointError as exc:
                row = SweepRow(inst.a_true, beta, "no_fixed_point", np.nan, ref, exc.residual, oracle.episodes)
            except OutOfRangeError:
                row = SweepRow(inst.a_true, beta, "out_of_range", np.nan, ref, np.nan, oracle.episodes)
            rows.append(row)
    rows.sort(key=lambda r: (r.a_true, r.beta[0]))
    return rows


def sweep_argmins(rows) -> dict:
    """a_true -> (argmin beta_1, J_r there, riccati optimum), ignoring nan cells."""
    out = {}
    for r in rows:
        if np.isnan(r.Jr):
            continue
        cur = out.get(r.a_true)
        if cur is None or r.Jr < cur[1]:
            out[r.a_true] = (r.beta[0], r.Jr, r.riccati_optimal)
    return out


def compare_sample_efficiency(instance: SystemInstance, cost: CostSchedule, grids: GridSpec, seeds, *,
                              beta_config: BetaLearnConfig, pg: PGConfig, rs: RSConfig, q: QLearnConfig,
                              clc_kw=None, solver="grid", ledger=None, phases=None) -> list:
    """Best-so-far learning curves (episodes vs J_r) for CLC+beta-learning, PG,
    RS and Q-learning on one instance.

    The CLC curve is the beta-learning trace; its x-axis is the cumulative
    episode count of all coupling evaluations and finite-difference probes.
    CLC is deterministic, so it runs once and its curve is reported for every
    seed. Curves are returned sorted by (method, seed).
    """
    ledger = ledger if ledger is not None else EpisodeLedger()
    phases = phases if phases is not None else _Phases(ledger)
    model = ModelSpec(instance.a_model, instance.b_model, cost, instance.x0, grids)

    oracle = RealSystemOracle.from_instance(instance, ledger)
    if solver == "exact":
        ev = exact_evaluator(model, oracle)
    else:
        ev = clc_evaluator(model, oracle, **(clc_kw or {}))
    trace = phases.run("clc", learn_beta, beta_config, ev)
    clc = LearningCurve("clc", -1)
    for _, _, j, n in trace.iterates:
        clc.append(n, j)
    clc = clc.best_so_far()

    curves = []
    for seed in seeds:
        c = LearningCurve("clc", seed, list(clc.points))
        curves.append(c)
        for name, fn, conf in (("pg", run_pg, pg), ("rs", run_rs, rs), ("q", run_q, q)):
            conf = type(conf)(**{**conf.__dict__, "seed": seed})
            o = RealSystemOracle.from_instance(instance, ledger)
            curve = phases.run(name, fn, conf, o, cost, instance.x0)
            b = curve.best_so_far()
            b.seed = seed
            curves.append(b)
    curves.sort(key=lambda c: (c.method, c.seed))
    return curves


def episodes_to_target(curves, target: float) -> dict:
    """method -> median over seeds of the first episode count with J_r <= target
    (inf for seeds that never get there)."""
    per = {}
    for c in curves:
        n = c.episodes_to_reach(target)
        per.setdefault(c.method, []).append(np.inf if n is None else n)
    return {m: float(np.median(v)) for m, v in per.items()}


def run(cfg: ExperimentConfig) -> RunReport:
    """Run one experiment and write its CSV and manifest into ``cfg.output``."""
    os.makedirs(cfg.output, exist_ok=True)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    ledger = EpisodeLedger()
    phases = _Phases(ledger)
    inst, cost = cfg.instance, cfg.cost
    ref = riccati.solve(inst.a_true, inst.b_true, cost, inst.x0)
    opt = ref.optimal_cost
    T = cost.horizon
    m = cfg.method
    csv_path = os.path.join(cfg.output, m.replace("-", "_") + ".csv")
    files = [csv_path]
    results = {"riccati_optimal": opt}

    def oracle():
        return RealSystemOracle.from_instance(inst, ledger)

    if m == "riccati":
        traj = riccati.optimal_policy_controls(ref, inst.a_true, inst.b_true, inst.x0)
        rows = [[t, ref.gains[t], ref.value_coeffs[t], traj.states[t], traj.controls[t], opt] for t in range(T)]
        write_csv(csv_path, ["t", "gain", "value_coeff", "state", "control", "riccati_optimal"], rows)
        results.update(optimal_cost=opt, gains=ref.gains, value_coeffs=ref.value_coeffs,
                       controls=traj.controls)

    elif m == "clc":
        beta = cfg.values["clc.beta"]
        if cfg.values["clc.solver"] == "exact":
            res = phases.run("clc", execute_clc_exact, beta, cfg.model, oracle())
        else:
            res = phases.run("clc", execute_clc, beta, cfg.model, oracle(), **_clc_kw(cfg))
        xh = res.solution.candidate.points
        rows = [[t, xh[t], res.controls[t], res.real_states[t + 1], res.Jr_value, opt] for t in range(T)]
        write_csv(csv_path, ["t", "xhat", "control", "real_state", "J_r", "riccati_optimal"], rows)
        results.update(J_r=res.Jr_value, controls=res.controls, residual=res.solution.residual,
                       refined=res.solution.refined)

    elif m == "learn-beta":
        bc = _method_config(cfg, "learn_beta", cfg.seed)
        o = oracle()
        ev = exact_evaluator(cfg.model, o) if cfg.values["clc.solver"] == "exact" \
            else clc_evaluator(cfg.model, o, **_clc_kw(cfg))
        trace = phases.run("learn_beta", learn_beta, bc, ev)
        rows = [[k, *beta, j, n, opt] for k, beta, j, n in trace.iterates]
        write_csv(csv_path, ["k"] + [f"beta_{t + 1}" for t in range(T)]
                  + ["J_tilde", "episodes_cumulative", "riccati_optimal"], rows)
        best = trace.best
        results.update(status=trace.status, iterations=len(trace.iterates) - 1, best_k=best[0],
                       best_beta=best[1], best_J_r=best[2])

    elif m in ("pg", "rs", "q"):
        conf = _method_config(cfg, m, cfg.seed)
        fn = {"pg": run_pg, "rs": run_rs, "q": run_q}[m]
        curve = phases.run(m, fn, conf, oracle(), cost, inst.x0)
        rows = [[c.method, c.seed, n, j, opt] for c in (curve,) for n, j in c.points]
        write_csv(csv_path, ["method", "seed", "episodes", "greedy_Jr", "riccati_optimal"], rows)
        results.update(final_J_r=curve.points[-1][1], best_J_r=float(np.min(curve.costs)))
        if curve.final_gain is not None:
            results["final_gain"] = curve.final_gain

    elif m == "sweep-beta":
        v = cfg.values
        insts = [SystemInstance(a, inst.b_true, inst.a_model, inst.b_model, inst.x0, T) for a in v["sweep.a_true"]]
        b1 = np.linspace(v["sweep.beta1_min"], v["sweep.beta1_max"], v["sweep.beta1_n"])
        rows = phases.run("sweep", sweep_beta1, insts, b1, cost, cfg.grids, ledger=ledger,
                          solver=v["clc.solver"], **_clc_kw(cfg))
        write_csv(csv_path, ["a_true", "beta_1", "beta_2", "status", "J_r", "riccati_optimal", "residual",
                             "episodes"],
                  [[r.a_true, *r.beta, r.status, r.Jr, r.riccati_optimal, r.residual, r.episodes] for r in rows])
        for a, (b, j, o) in sorted(sweep_argmins(rows).items()):
            results[f"argmin_beta_1.{a:g}"] = b
            results[f"argmin_J_r.{a:g}"] = j
        results["failed_cells"] = sum(r.status != "ok" for r in rows)

    elif m == "compare":
        seeds = [cfg.seed + i for i in range(cfg.values["compare.seeds"])]
        curves = compare_sample_efficiency(
            inst, cost, cfg.grids, seeds,
            beta_config=_method_config(cfg, "learn_beta", cfg.seed),
            pg=_method_config(cfg, "pg", cfg.seed), rs=_method_config(cfg, "rs", cfg.seed),
            q=_method_config(cfg, "q", cfg.seed), clc_kw=_clc_kw(cfg), solver=cfg.values["clc.solver"],
            ledger=ledger, phases=phases)
        rows = [[c.method, c.seed, n, j, opt] for c in curves for n, j in c.points]
        write_csv(csv_path, ["method", "seed", "episodes", "best_Jr", "riccati_optimal"], rows)
        target = (1.0 + cfg.values["compare.target_tol"]) * opt
        med = episodes_to_target(curves, target)
        summary = os.path.join(cfg.output, "compare_summary.csv")
        write_csv(summary, ["method", "median_episodes_to_target", "target", "riccati_optimal"],
                  [[k, med[k], target, opt] for k in sorted(med)])
        files.append(summary)
        for k in sorted(med):
            results[f"median_episodes_to_target.{k}"] = med[k]

    total = ledger.episodes
    if sum(phases.counts.values()) != total:
        raise RuntimeError("episode ledger does not match the per-phase counts")
    finished = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    items = [("method", m), ("seed", cfg.seed), ("status", "ok"), ("backend", _backend()), *_versions(),
             ("started", started), ("finished", finished)]
    items += [("config." + k, v) for k, v in cfg.echo()]
    items += [("result." + k, v) for k, v in results.items()]
    items += [("episodes." + k, n) for k, n in sorted(phases.counts.items())]
    items.append(("total_episodes", total))
    mpath = os.path.join(cfg.output, "manifest.txt")
    write_manifest(mpath, items)
    files.append(mpath)
    return RunReport(m, files, results, dict(phases.counts), total)
