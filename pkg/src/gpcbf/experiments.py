"""Scenario configuration, closed-loop simulation, failure-rate sweeps and
CSV emission for the cruise-control and quadrotor examples."""
from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import yaml

from .cbf import CbfSpec, cruise_cbf, quad_altitude_cbf, quad_position_cbf, random_rotation
from .controller import (
    BudgetConstants,
    Controller,
    ControllerConfig,
    Mode,
    compute_delta_n,
    compute_eta,
)
from .dynamics import (
    CruiseParams,
    QuadrotorParams,
    SystemModel,
    cruise_model,
    integrate_step,
    measure,
    pack_quad,
    quadrotor_model,
    skew,
    unpack_quad,
)
from .errors import (
    BudgetExhausted,
    ContractViolation,
    IntegrationDiverged,
    SafetyViolated,
    SolverFailure,
)
from .gp import Dataset, GpModel, HyperBounds, default_kernel, fit_hyperparameters

log = logging.getLogger(__name__)

FLOAT_FMT = "%.10g"


# configuration ------------------------------------------------------------------

@dataclass
class PlantConfig:
    kind: str = "cruise"  # "cruise" or "quadrotor"
    params: Dict[str, float] = field(default_factory=dict)
    initial_state: Optional[List[float]] = None
    target: List[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])  # quadrotor position goal
    position_gain: float = 2.0
    velocity_gain: float = 3.0
    attitude_gain: float = 5.0


@dataclass
class CbfConfig:
    slope: float = 1.0
    robust_margin: float = 0.1
    headway: float = 1.8
    altitude_gain: float = 0.1
    altitude_velocity_sign: float = -1.0
    thrust_axis_sign: float = 1.0
    radius: float = 2.0
    extension_gain: float = 1.0
    shrink: float = 0.5
    use_extended_gradient: bool = False
    barriers: List[str] = field(default_factory=lambda: ["altitude", "position"])


@dataclass
class GpConfig:
    noise_std: float = 0.01
    rkhs_bound: float = 1.0
    delta: float = 0.05
    n_init: int = 10
    retain_bootstrap: bool = True
    bootstrap_hold: float = 0.1
    bootstrap_input_scale: List[float] = field(default_factory=lambda: [1.0])
    signal_variance: float = 1.0
    lengthscale: float = 10.0
    signal_variance_bounds: List[float] = field(default_factory=lambda: [1e-8, 1e4])
    lengthscale_bounds: List[float] = field(default_factory=lambda: [1e-1, 1e3])
    n_starts: int = 8


@dataclass
class ControlConfig:
    dt_mode: str = "fixed"
    fixed_dt: float = 1e-3
    delta_n: int = 100000
    C: List[float] = field(default_factory=lambda: [1.0])
    C_beta: float = 1.0
    eps: float = 0.1
    control_dt: float = 1e-3
    beta_override: Optional[float] = None


@dataclass
class SimConfig:
    duration: float = 100.0
    dt: float = 1e-3
    seed: int = 0


@dataclass
class SweepConfig:
    frequencies: List[float] = field(default_factory=lambda: [0.1, 10.0, 1000.0, 100000.0])
    trials: int = 20
    duration: float = 10.0
    control_dt: float = 1e-2
    region_lo: List[float] = field(default_factory=lambda: [18.0, 30.0])
    region_hi: List[float] = field(default_factory=lambda: [24.0, 60.0])
    min_h: float = 2.0
    jobs: int = 1


@dataclass
class OutputConfig:
    trace: Optional[str] = None


@dataclass
class ScenarioConfig:
    plant: PlantConfig = field(default_factory=PlantConfig)
    cbf: CbfConfig = field(default_factory=CbfConfig)
    gp: GpConfig = field(default_factory=GpConfig)
    controller: ControlConfig = field(default_factory=ControlConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    baseline: str = "ucb"
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "ScenarioConfig":
        if self.plant.kind not in ("cruise", "quadrotor"):
            raise ContractViolation(f"unknown plant {self.plant.kind!r}")
        if self.baseline not in ("ucb", "random"):
            raise ContractViolation(f"unknown baseline {self.baseline!r}")
        if self.sim.duration < 0:
            raise ContractViolation("duration must be nonnegative")
        if not self.sim.dt > 0 or not self.controller.control_dt > 0 or not self.controller.fixed_dt > 0:
            raise ContractViolation("time steps must be positive")
        if self.controller.control_dt < self.sim.dt:
            raise ContractViolation("control_dt must be at least the integrator dt")
        if self.sim.seed is None:
            raise ContractViolation("a seed is required")
        if self.gp.n_init < 0 or self.sweep.trials < 1:
            raise ContractViolation("n_init must be >= 0 and trials >= 1")
        ControllerConfig(dt_mode=self.controller.dt_mode)  # mode check
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = d or {}
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ContractViolation(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        for name, f in known.items():
            if name not in d:
                continue
            sub = d[name]
            default = f.default_factory() if f.default_factory is not dataclasses.MISSING else None
            if dataclasses.is_dataclass(default):
                bad = set(sub or {}) - {g.name for g in dataclasses.fields(default)}
                if bad:
                    raise ContractViolation(f"unknown keys in [{name}]: {sorted(bad)}")
                kw[name] = type(default)(**(sub or {}))
            else:
                kw[name] = sub
        return cls(**kw).validate()


def default_config(kind: str = "cruise") -> ScenarioConfig:
    """Shipped defaults for one of the two example plants."""
    cfg = ScenarioConfig()
    if kind == "cruise":
        # bootstrap points only tune hyperparameters here
        cfg.gp.retain_bootstrap = False
        return cfg.validate()
    if kind != "quadrotor":
        raise ContractViolation(f"unknown plant {kind!r}")
    cfg.plant.kind = "quadrotor"
    cfg.plant.target = [1.0, 0.0, 1.0]
    # consistent with hover at T < 0: braking altitude barrier, thrust force along -R e_z
    cfg.cbf.altitude_velocity_sign = 1.0
    cfg.cbf.thrust_axis_sign = -1.0
    # leaves room for the robust term, which is large at this L_h
    cfg.cbf.slope = 10.0
    cfg.gp.bootstrap_hold = 0.02
    cfg.gp.bootstrap_input_scale = [2e-3, 1.0, 1.0, 1.0]
    cfg.controller.fixed_dt = 1e-5
    cfg.controller.control_dt = 1e-2
    cfg.sim.duration = 50.0
    cfg.sweep.duration = 5.0
    cfg.sweep.region_lo = [-1.0, -1.0, 0.5, -0.5, -0.5, -0.5]
    cfg.sweep.region_hi = [1.0, 1.0, 1.5, 0.5, 0.5, 0.5]
    cfg.sweep.min_h = 0.5
    return cfg.validate()


def load_config(path) -> ScenarioConfig:
    with open(path) as fh:
        return ScenarioConfig.from_dict(yaml.safe_load(fh))


def dump_config(cfg: ScenarioConfig, path=None) -> str:
    text = yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=None)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


# scenario assembly -----------------------------------------------------------

@dataclass
class Scenario:
    plant: SystemModel
    specs: List[CbfSpec]
    nominal: Callable[[np.ndarray], np.ndarray]
    model: GpModel
    x0: np.ndarray


def _cruise_nominal(p: CruiseParams):
    return lambda x: np.array([-10.0 * (x[0] - p.desired_speed)])


def quad_nominal(params: QuadrotorParams, target, kp: float, kd: float, katt: float):
    """PD on position that aligns the thrust axis through the body rates.

    Hover under the plant's sign convention needs T = -g (with zeta ~ 1).
    """
    target = np.asarray(target, dtype=float)
    g = params.gravity

    def pi(x):
        p, v, R = unpack_quad(x)
        acc = -kp * (p - target) - kd * v
        f = acc - g * np.array([0.0, 0.0, 1.0])
        b = R[:, 2]
        if f @ b > 0:
            d = f / max(np.linalg.norm(f), 1e-9)
        else:
            d = -f / max(np.linalg.norm(f), 1e-9)
        T = float(f @ b)
        db = R.T @ d
        w = np.array([-katt * db[1], katt * db[0], 0.0])
        lo = np.array([-params.thrust_bound] + [-params.rate_bound] * 3)
        return np.clip(np.concatenate([[T], w]), lo, -lo)

    return pi


def _quad_prior(params: QuadrotorParams):
    def drift(x):
        _, v, _ = unpack_quad(x)
        return pack_quad(v, np.zeros(3), np.zeros((3, 3)))

    def inp(x):
        _, _, R = unpack_quad(x)
        G = np.zeros((15, 4))
        for k in range(3):
            G[6:15, 1 + k] = (R @ skew(np.eye(3)[k])).ravel()
        return G

    return drift, inp


def build_scenario(cfg: ScenarioConfig, x0=None) -> Scenario:
    pc, cc, gc = cfg.plant, cfg.cbf, cfg.gp
    if pc.kind == "cruise":
        params = CruiseParams(**pc.params)
        plant = cruise_model(params)
        specs = [cruise_cbf(cc.headway, cc.slope, cc.robust_margin)]
        nominal = _cruise_nominal(params)
        learned, prior_d, prior_g = None, None, None
        x_init = pc.initial_state if pc.initial_state is not None else [22.0, 60.0]
    else:
        params = QuadrotorParams(**pc.params)
        plant = quadrotor_model(params)
        specs = []
        for name in cc.barriers:
            if name == "altitude":
                specs.append(
                    quad_altitude_cbf(cc.altitude_gain, cc.slope, cc.robust_margin, cc.altitude_velocity_sign)
                )
            elif name == "position":
                specs.append(
                    quad_position_cbf(
                        cc.radius, cc.extension_gain, cc.shrink, cc.slope, cc.robust_margin,
                        use_extended_gradient=cc.use_extended_gradient,
                        thrust_axis_sign=cc.thrust_axis_sign,
                    )
                )
            else:
                raise ContractViolation(f"unknown barrier {name!r}")
        nominal = quad_nominal(params, pc.target, pc.position_gain, pc.velocity_gain, pc.attitude_gain)
        learned = [3, 4, 5]
        prior_d, prior_g = _quad_prior(params)
        x_init = pc.initial_state if pc.initial_state is not None else pack_quad([0, 0, 1.0], [0, 0, 0], np.eye(3))
    p = plant.state_dim if learned is None else len(learned)
    kernels = [default_kernel(plant.input_dim, gc.signal_variance, gc.lengthscale) for _ in range(p)]
    model = GpModel(
        kernels, plant.state_dim, plant.input_dim, gc.noise_std, gc.rkhs_bound, gc.delta,
        prior_drift=prior_d, prior_input=prior_g, learned_dims=learned,
    )
    x0 = np.asarray(x0 if x0 is not None else x_init, dtype=float)
    if x0.shape != (plant.state_dim,):
        raise ContractViolation(f"initial state must have {plant.state_dim} entries")
    return Scenario(plant, specs, nominal, model, x0)


def state_sampler(cfg: ScenarioConfig):
    """Random states from the operating region, for invariant checks."""
    if cfg.plant.kind == "cruise":
        return lambda rng: rng.uniform([0.0, 0.0], [30.0, 100.0])
    r = cfg.cbf.radius

    def sample(rng):
        d = rng.standard_normal(3)
        p = d / np.linalg.norm(d) * r * rng.uniform() ** (1 / 3)
        p[2] = abs(p[2]) + 0.1
        return pack_quad(p, rng.uniform(-3, 3, 3), random_rotation(rng))

    return sample


# traces ---------------------------------------------------------------------

@dataclass
class SimTrace:
    columns: List[str]
    rows: List[List[float]] = field(default_factory=list)
    summary: Dict[str, object] = field(default_factory=dict)

    def array(self) -> np.ndarray:
        return np.array(self.rows, dtype=float).reshape(len(self.rows), len(self.columns))

    def column(self, name: str) -> np.ndarray:
        return self.array()[:, self.columns.index(name)]

    def h_columns(self) -> List[str]:
        return [c for c in self.columns if c.startswith("h_")]

    def slack_columns(self) -> List[str]:
        return [c for c in self.columns if c.startswith("slack_")]

    def to_csv(self, path):
        write_csv(path, self.columns, self.rows)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, str) else FLOAT_FMT % v for v in r])


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return header, np.array([[float(v) for v in r] for r in body]).reshape(len(body), len(header))


def summarize(trace: SimTrace, error: Optional[str] = None, extra: Optional[dict] = None) -> dict:
    """Summary statistics that can be recomputed from the rows alone (plus extras)."""
    a = trace.array()
    hcols = [trace.columns.index(c) for c in trace.h_columns()]
    if len(a):
        min_h = float(a[:, hcols].min())
        t, mode = a[:, 0], a[:, trace.columns.index("mode")]
        if mode[-1] == Mode.EXPLORING:
            recovery = math.inf
        else:
            idx = np.nonzero(mode == Mode.EXPLORING)[0]
            recovery = float(t[idx[-1] + 1]) if len(idx) else 0.0
        samples = int(np.sum(a[:, trace.columns.index("sampled")]))
    else:
        min_h, recovery, samples = math.inf, 0.0, 0
    s = {"min_h": min_h, "recovery_time": recovery, "samples": samples, "error": error or ""}
    if extra:
        s.update(extra)
    s["failure"] = bool(min_h < 0 or s.get("min_h_substep", math.inf) < 0 or bool(error))
    return s


# simulation ---------------------------------------------------------------------

def _streams(seed: int):
    ss = np.random.SeedSequence(int(seed))
    return [np.random.default_rng(s) for s in ss.spawn(4)]


def bootstrap_data(sc: Scenario, cfg: ScenarioConfig, rng) -> Dataset:
    """Noisy derivative samples from a short rollout with uniformly random held inputs."""
    gc = cfg.gp
    ds = Dataset(sc.plant.state_dim, sc.plant.input_dim)
    lo, hi = sc.plant.input_lo, sc.plant.input_hi
    scale = np.broadcast_to(np.asarray(gc.bootstrap_input_scale, dtype=float), lo.shape)
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo) * scale
    x = sc.x0.copy()
    for _ in range(gc.n_init):
        if cfg.plant.kind == "quadrotor":
            # perturb around the nominal so the rollout stays near the operating point
            u = np.clip(sc.nominal(x) + rng.uniform(-half, half), lo, hi)
        else:
            u = rng.uniform(mid - half, mid + half)
        ms = measure(sc.plant, x, u, gc.noise_std, rng)
        ds.append(ms.x, ms.u, ms.y)
        nsub = max(1, int(math.ceil(gc.bootstrap_hold / cfg.sim.dt)))
        for _ in range(nsub):
            x = integrate_step(sc.plant, x, u, gc.bootstrap_hold / nsub)
    return ds


def prepare_model(sc: Scenario, cfg: ScenarioConfig, rng_boot, rng_hyper) -> GpModel:
    gc = cfg.gp
    if gc.n_init > 0:
        ds = bootstrap_data(sc, cfg, rng_boot)
        bounds = HyperBounds(tuple(gc.signal_variance_bounds), tuple(gc.lengthscale_bounds))
        sc.model.set_kernels(fit_hyperparameters(sc.model, ds, bounds, gc.n_starts, rng_hyper))
        if gc.retain_bootstrap:
            sc.model.set_data(ds.X, ds.U, ds.Y)
    return sc.model


def resolve_delta_n(cfg: ScenarioConfig, sc: Scenario) -> int:
    cc = cfg.controller
    if cc.dt_mode == "fixed":
        return int(cc.delta_n)
    p = len(sc.model.learned_dims)
    C = list(np.broadcast_to(np.asarray(cc.C, dtype=float), (p,)))
    L_h = max(s.lipschitz for s in sc.specs)
    k = BudgetConstants(C, cc.C_beta, cc.eps, L_h, sc.plant.state_dim, sc.plant.input_dim, [cfg.gp.noise_std] * p)
    return compute_delta_n(compute_eta(k), max(sc.model.N, 1))


def run_scenario(cfg: ScenarioConfig, x0=None, trace_path=None) -> SimTrace:
    """Bootstrap, fit hyperparameters and run the closed loop to the horizon."""
    cfg.validate()
    rng_boot, rng_noise, rng_explore, rng_hyper = _streams(cfg.sim.seed)
    sc = build_scenario(cfg, x0)
    model = prepare_model(sc, cfg, rng_boot, rng_hyper)
    plant = sc.plant
    n, m = plant.state_dim, plant.input_dim
    names = [s.name for s in sc.specs]
    columns = (
        ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)]
        + [f"h_{k}" for k in names] + [f"slack_{k}" for k in names]
        + ["mode", "margin", "beta", "N", "sampled"]
    )
    trace = SimTrace(columns)
    cc = cfg.controller
    ctrl = Controller(
        model, sc.specs, plant.input_lo, plant.input_hi, sc.nominal,
        lambda x, u: measure(plant, x, u, cfg.gp.noise_std, rng_noise).y,
        plant.xdot_bound,
        ControllerConfig(cc.dt_mode, cc.fixed_dt, resolve_delta_n(cfg, sc), cc.control_dt, cfg.baseline, cc.beta_override),
        rng_explore,
    )
    n0 = model.N
    x, t, T = sc.x0.copy(), 0.0, cfg.sim.duration
    min_sub = min(s.h(x) for s in sc.specs)
    error = None
    wall = time.perf_counter()
    eps_t = 1e-12 * max(T, 1.0)
    while t < T - eps_t:
        try:
            rec = ctrl.step(x, t)
        except (BudgetExhausted, SafetyViolated, SolverFailure) as e:
            error = f"{type(e).__name__}: {e}"
            break
        hs = [s.h(x) for s in sc.specs]
        trace.rows.append(
            [t, *x, *rec.u, *hs, *rec.slacks, int(rec.mode), rec.margin, rec.beta, rec.N, int(rec.sampled)]
        )
        hold = min(rec.hold, T - t)
        nsub = max(1, int(math.ceil(hold / cfg.sim.dt - 1e-9)))
        try:
            for _ in range(nsub):
                x = integrate_step(plant, x, rec.u, hold / nsub)
                min_sub = min(min_sub, *(s.h(x) for s in sc.specs))
        except IntegrationDiverged as e:
            error = f"IntegrationDiverged: {e}"
            break
        t += hold
    extra = {
        "min_h_substep": float(min_sub),
        "episodes": ctrl.state.episodes,
        "N_final": model.N,
        "N_initial": n0,
        "delta_n": ctrl.cfg.delta_n,
        "wall_time": time.perf_counter() - wall,
    }
    trace.summary = summarize(trace, error, extra)
    path = trace_path or cfg.output.trace
    if path:
        trace.to_csv(path)
    return trace


# sweeps ---------------------------------------------------------------------------

SWEEP_HEADER = ["frequency", "method", "failure_rate", "mean_samples"]


def sample_initial_state(cfg: ScenarioConfig, rng) -> np.ndarray:
    """Uniform draw from the sweep region, rejected until every barrier exceeds ``min_h``."""
    sc = build_scenario(cfg)
    lo, hi = np.asarray(cfg.sweep.region_lo, float), np.asarray(cfg.sweep.region_hi, float)
    for _ in range(10000):
        if cfg.plant.kind == "cruise":
            x = rng.uniform(lo, hi)
        else:
            p = rng.uniform(lo[:3], hi[:3])
            v = rng.uniform(lo[3:6], hi[3:6])
            x = pack_quad(p, v, np.eye(3))
        if min(s.h(x) for s in sc.specs) > cfg.sweep.min_h:
            return x
    raise ContractViolation("sweep region has no states with the requested barrier margin")


def _sweep_trial(task):
    """(failed, samples) for one sweep trial; any error counts as a failure."""
    c, x0, f, meth, k = task
    try:
        s = run_scenario(c, x0=x0).summary
        return int(s["failure"]), s["samples"]
    except Exception as e:
        log.warning("trial %d (f=%g, %s) raised %s", k, f, meth, e)
        return 1, 0


def run_failure_sweep(
    cfg: ScenarioConfig,
    frequencies: Optional[Sequence[float]] = None,
    trials: Optional[int] = None,
    methods: Sequence[str] = ("ucb", "random"),
    jobs: Optional[int] = None,
) -> List[list]:
    """Failure rate and mean collected samples per (sampling frequency, method).

    Trial ``k`` uses the same initial state and seed for every method and
    frequency, so the comparison is paired. Trials run in ``jobs`` worker
    processes; each trial owns its random streams, so the table does not
    depend on ``jobs``.
    """
    freqs = list(frequencies if frequencies is not None else cfg.sweep.frequencies)
    trials = int(trials if trials is not None else cfg.sweep.trials)
    if trials < 1:
        raise ContractViolation("trials must be >= 1")
    init_rng = np.random.default_rng(np.random.SeedSequence([int(cfg.sim.seed), 7]))
    inits = [sample_initial_state(cfg, init_rng) for _ in range(trials)]
    jobs = int(jobs if jobs is not None else cfg.sweep.jobs)
    if jobs < 1:
        raise ContractViolation("jobs must be >= 1")
    tasks = []
    for f in freqs:
        for meth in methods:
            for k in range(trials):
                c = copy.deepcopy(cfg)
                c.baseline = meth
                c.controller.dt_mode = "fixed"
                c.controller.fixed_dt = 1.0 / f
                c.sim.duration = cfg.sweep.duration
                c.controller.control_dt = max(cfg.sweep.control_dt, c.sim.dt)
                c.sim.seed = int(cfg.sim.seed) * 100003 + k
                c.output.trace = None
                tasks.append((c, inits[k], f, meth, k))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_sweep_trial, tasks))
    else:
        outcomes = [_sweep_trial(t) for t in tasks]
    table = []
    for i, (f, meth) in enumerate((f, meth) for f in freqs for meth in methods):
        chunk = outcomes[i * trials:(i + 1) * trials]
        fails = sum(o[0] for o in chunk)
        samples = [o[1] for o in chunk]
        table.append([float(f), meth, fails / trials, float(np.mean(samples))])
        log.info("f=%g %s: failure rate %.2f, mean samples %.1f", f, meth, fails / trials, np.mean(samples))
    return table


# plot data --------------------------------------------------------------------

def emit_plot_data(trace: Optional[SimTrace], out_dir, sweep_table: Optional[List[list]] = None) -> List[str]:
    """Write h_vs_t.csv, worst_case_hdot_vs_t.csv and failure_rates.csv into ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if trace is not None:
        a = trace.array()
        for fname, cols in (("h_vs_t.csv", trace.h_columns()), ("worst_case_hdot_vs_t.csv", trace.slack_columns())):
            idx = [trace.columns.index(c) for c in cols]
            path = os.path.join(out_dir, fname)
            write_csv(path, ["t", *cols], [[r[0], *r[idx]] for r in a])
            written.append(path)
    path = os.path.join(out_dir, "failure_rates.csv")
    write_csv(path, SWEEP_HEADER, sweep_table or [])
    written.append(path)
    return written
