"""Case-study presets, Monte Carlo runs and their statistics."""

from __future__ import annotations

import copy
import dataclasses
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import expm

from . import qp as qpsolver
from .ambiguity import DisturbanceStore, GroundNorm, PolytopeSupport
from .closed_loop import EpisodeLog, LoopConfig, run_episode
from .errors import ConfigError
from .lti import LtiSystem, rank_condition
from .reform import CostWeights, DisturbanceMoments, StateBound

# Variance of 3*sin(X), X ~ N(0, 1), from 10**6 draws (seed 20240101). The
# mean is zero by symmetry. Closed form: 9 (1 - exp(-2)) / 2 = 3.89099...
SINE_GAUSS_VAR = 3.891698165841482
SINE_GAUSS_MEAN = 0.0

PRESETS = ("mass_spring", "inverted_pendulum")
SWEEP_KEYS = ("epsilon", "n_init", "max_samples")
PENDULUM_RADII = (0.01, 0.1, 1.0, 3.0, 5.0, 10.0, 100.0)


def discretize(Ac, Bc, dt: float):
    """Zero-order-hold discretization through one matrix exponential."""
    Ac = np.atleast_2d(np.asarray(Ac, dtype=float))
    Bc = np.atleast_2d(np.asarray(Bc, dtype=float))
    n, m = Bc.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n] = Ac
    M[:n, n:] = Bc
    E = expm(M * dt)
    return E[:n, :n], E[:n, n:]


@dataclass(frozen=True)
class DisturbanceModel:
    """Per-entry i.i.d. bounded disturbance.

    ``sine_of_gaussian`` draws ``bound * sin(X)`` with standard normal ``X``;
    ``uniform`` draws from ``[-bound, bound]``.
    """

    kind: str = "sine_of_gaussian"
    bound: float = 3.0

    def __post_init__(self):
        if self.kind not in ("sine_of_gaussian", "uniform"):
            raise ConfigError(f"unknown disturbance model {self.kind!r}")
        if not self.bound > 0:
            raise ConfigError("disturbance bound must be positive")

    def moments(self):
        """Per-entry mean and variance."""
        if self.kind == "sine_of_gaussian":
            return SINE_GAUSS_MEAN, SINE_GAUSS_VAR * (self.bound / 3.0) ** 2
        return 0.0, self.bound ** 2 / 3.0

    def support(self, N: int, n_w: int) -> PolytopeSupport:
        return PolytopeSupport.box(N * n_w, self.bound)


def sample_disturbance(model: DisturbanceModel, rng: np.random.Generator, n_w: int,
                       size: Optional[int] = None) -> np.ndarray:
    shape = (n_w,) if size is None else (size, n_w)
    if model.kind == "sine_of_gaussian":
        return model.bound * np.sin(rng.standard_normal(shape))
    return rng.uniform(-model.bound, model.bound, shape)


def mass_spring_system(dt: float = 0.1) -> LtiSystem:
    """Unit mass on a unit spring, force input; states (position, velocity)."""
    A, B = discretize([[0.0, 1.0], [-1.0, 0.0]], [[0.0], [1.0]], dt)
    C = np.array([[1e-3, 0.0], [0.0, 0.0]])
    D = np.array([[1.0, 0.0]])
    E = np.array([[0.0, 1e-3]])
    return LtiSystem(A, B, C, D, E)


def inverted_pendulum_system(dt: float = 0.1, M: float = 0.5, m: float = 0.2,
                             l: float = 0.3, g: float = 9.81, b: float = 0.1,
                             I: float = 0.006) -> LtiSystem:
    """Cart-pole linearized about the upright position.

    States (cart position, cart velocity, pole angle, pole angular velocity);
    input is the horizontal force on the cart; ``b`` is cart friction and
    ``I`` the pole inertia about its centre of mass.
    """
    p = I * (M + m) + M * m * l ** 2
    Ac = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [0.0, -(I + m * l ** 2) * b / p, (m ** 2 * g * l ** 2) / p, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, -(m * l * b) / p, m * g * l * (M + m) / p, 0.0],
    ])
    Bc = np.array([[0.0], [(I + m * l ** 2) / p], [0.0], [m * l / p]])
    A, B = discretize(Ac, Bc, dt)
    C = np.zeros((4, 2))
    C[3, 0] = 1e-2
    D = np.array([[0.0, 0.0, 1.0, 0.0]])
    E = np.array([[0.0, 1e-2]])
    return LtiSystem(A, B, C, D, E)


_PRESET_DEFAULTS = {
    "mass_spring": dict(
        N=5, N_u=1, max_samples=10, epsilon=1.0, n_init=1, duration=8.0,
        violation_window=4.0, x0=[-1.0, 0.0],
        Q=[10.0, 1.0], Qf=[15.0, 1.0], R=[1.0], bounds=[[1, 0.4, "upper"]], realizations=50,
    ),
    "inverted_pendulum": dict(
        N=5, N_u=1, max_samples=1, epsilon=1.0, n_init=1, duration=4.0,
        violation_window=2.0, x0=[0.0, 0.0, -0.2, 0.0],
        Q=[1000.0, 1.0, 1500.0, 1.0], Qf=[1000.0, 1.0, 1500.0, 1.0], R=[1.0],
        bounds=[[3, 0.5, "upper"]], realizations=10,
        sweep={"epsilon": list(PENDULUM_RADII)},
    ),
}


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a batch of closed-loop episodes.

    ``system`` names a preset or holds custom matrices ``A, B, C, D, E``.
    ``Q``, ``Qf`` and ``R`` may be given as diagonals. ``bounds`` lists
    ``[state_index, value, "upper" | "lower"]`` with 0-based indices.
    ``sweep`` maps one of ``epsilon``, ``n_init`` or ``max_samples`` to the
    values to run.
    """

    system: object = "mass_spring"
    N: int = 5
    N_u: int = 1
    max_samples: int = 10
    epsilon: float = 1.0
    n_init: int = 1
    duration: float = 8.0
    violation_window: float = 4.0
    delta_t: float = 0.1
    x0: list = field(default_factory=lambda: [-1.0, 0.0])
    Q: list = field(default_factory=lambda: [10.0, 1.0])
    Qf: list = field(default_factory=lambda: [15.0, 1.0])
    R: list = field(default_factory=lambda: [1.0])
    beta: float = 1.0
    bounds: list = field(default_factory=lambda: [[1, 0.4, "upper"]])
    ground_norm: str = "l1"
    window_stride: Optional[int] = None
    disturbance: dict = field(default_factory=lambda: {"kind": "sine_of_gaussian", "bound": 3.0})
    realizations: int = 1
    seed: int = 0
    sweep: Optional[dict] = None
    output_dir: Optional[str] = None
    timing: bool = False
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if isinstance(self.system, str) and self.system not in PRESETS:
            raise ConfigError(f"unknown preset {self.system!r}; choose from {', '.join(PRESETS)}")
        if not isinstance(self.system, (str, dict)):
            raise ConfigError("system must be a preset name or a dict of matrices")
        if self.realizations < 1:
            raise ConfigError("realizations must be at least 1")
        if self.n_init < 1:
            raise ConfigError("n_init must be at least 1")
        if self.duration < 0 or self.violation_window < 0:
            raise ConfigError("duration and violation_window must be nonnegative")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        try:
            GroundNorm(self.ground_norm)
        except ValueError:
            raise ConfigError(f"unknown ground norm {self.ground_norm!r}") from None
        if self.sweep is not None:
            if not isinstance(self.sweep, dict) or len(self.sweep) != 1:
                raise ConfigError("sweep must map exactly one parameter to a list of values")
            (key, vals), = self.sweep.items()
            if key not in SWEEP_KEYS:
                raise ConfigError(f"cannot sweep over {key!r}; choose from {', '.join(SWEEP_KEYS)}")
            if not vals:
                raise ConfigError("sweep values must be nonempty")
            for v in vals:
                if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                    raise ConfigError(f"invalid sweep value {v!r}")
                if key != "epsilon" and (v < 1 or int(v) != v):
                    raise ConfigError(f"{key} values must be positive integers")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ExperimentConfig":
        if name not in _PRESET_DEFAULTS:
            raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
        kw = copy.deepcopy(_PRESET_DEFAULTS[name])
        kw.update(overrides)
        return cls(system=name, **kw)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        system = data.get("system", "mass_spring")
        if isinstance(system, str):
            if system not in _PRESET_DEFAULTS:
                raise ConfigError(f"unknown preset {system!r}; choose from {', '.join(PRESETS)}")
            kw = copy.deepcopy(_PRESET_DEFAULTS[system])
            kw.update(data)
            kw["system"] = system
        else:
            kw = dict(data)
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read configuration {path}: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def preset_name(self) -> str:
        return self.system if isinstance(self.system, str) else "custom"

    def build_system(self) -> LtiSystem:
        if self.system == "mass_spring":
            return mass_spring_system(self.delta_t)
        if self.system == "inverted_pendulum":
            return inverted_pendulum_system(self.delta_t)
        try:
            return LtiSystem(*(np.asarray(self.system[k], dtype=float) for k in "ABCDE"))
        except KeyError as exc:
            raise ConfigError(f"custom system is missing matrix {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"invalid custom system: {exc}") from None

    def disturbance_model(self) -> DisturbanceModel:
        try:
            return DisturbanceModel(**self.disturbance)
        except TypeError as exc:
            raise ConfigError(f"invalid disturbance model: {exc}") from None

    def loop_config(self, n_w: int) -> LoopConfig:
        def mat(v):
            a = np.asarray(v, dtype=float)
            return np.diag(a) if a.ndim == 1 else a
        model = self.disturbance_model()
        mean, var = model.moments()
        try:
            weights = CostWeights(mat(self.Q), mat(self.Qf), mat(self.R), self.beta)
            bounds = tuple(StateBound(int(b[0]), float(b[1]), b[2] if len(b) > 2 else "upper")
                           for b in self.bounds)
        except (ValueError, IndexError, TypeError) as exc:
            raise ConfigError(f"invalid weights or bounds: {exc}") from None
        return LoopConfig(
            N=self.N, N_u=self.N_u, max_samples=self.max_samples, epsilon=self.epsilon,
            bounds=bounds, weights=weights,
            moments=DisturbanceMoments.iid(np.full(n_w, mean), var * np.eye(n_w), self.N),
            support=model.support(self.N, n_w), delta_t=self.delta_t,
            ground_norm=GroundNorm(self.ground_norm), window_stride=self.window_stride,
        )

    def with_value(self, key: str, value) -> "ExperimentConfig":
        value = float(value) if key == "epsilon" else int(value)
        return dataclasses.replace(self, sweep=None, **{key: value})


def nearest_rank(values, p: float, axis: int = 0) -> np.ndarray:
    """Nearest-rank percentile: the ``ceil(p/100 * n)``-th smallest value."""
    v = np.sort(np.asarray(values, dtype=float), axis=axis)
    n = v.shape[axis]
    if n == 0:
        raise ValueError("percentile of an empty set")
    if not 0 <= p <= 100:
        raise ValueError("p must lie in [0, 100]")
    rank = max(1, math.ceil(p / 100.0 * n))
    return np.take(v, rank - 1, axis=axis)


@dataclass
class StatsSummary:
    times: np.ndarray
    mean: np.ndarray
    p25: np.ndarray
    p50: np.ndarray
    p75: np.ndarray
    violation_rate: float
    violation_per_bound: list
    costs: np.ndarray
    obj_mean: float
    obj_p25: float
    obj_p75: float
    infeasible_count: int
    infeasible_after_first: int
    n_realizations: int
    kkt_max: float = 0.0

    def band_width(self, state: int, t_lo: float, t_hi: float) -> float:
        """Mean 25th-75th width of one state over ``t_lo <= t <= t_hi``."""
        sel = (self.times >= t_lo - 1e-9) & (self.times <= t_hi + 1e-9)
        return float(np.mean(self.p75[sel, state] - self.p25[sel, state]))


def summarize(logs, cfg: ExperimentConfig, bounds, weights) -> StatsSummary:
    X = np.stack([lg.states for lg in logs])          # (R, T+1, n_x)
    T = X.shape[1] - 1
    times = np.arange(T + 1) * cfg.delta_t
    K = min(T, int(round(cfg.violation_window / cfg.delta_t)))
    window = X[:, 1:K + 1, :]
    per_bound = []
    any_viol = np.zeros(window.shape[:2], dtype=bool)
    for b in bounds:
        v = b.sign * window[:, :, b.index] > b.U
        per_bound.append(float(v.mean()) if v.size else 0.0)
        any_viol |= v
    rate = float(any_viol.mean()) if any_viol.size else 0.0
    costs = np.array([lg.realized_cost(weights) for lg in logs])
    infeasible = after = 0
    kkt = [r.kkt for lg in logs for r in lg.records if r.status == qpsolver.OPTIMAL]
    for lg in logs:
        st = lg.statuses
        bad = [s == qpsolver.PRIMAL_INFEASIBLE for s in st]
        infeasible += sum(bad)
        solved = [i for i, s in enumerate(st) if s not in ("reused", "no_policy")]
        after += sum(bad[i] for i in solved[1:])
    return StatsSummary(
        times=times, mean=X.mean(axis=0), p25=nearest_rank(X, 25), p50=nearest_rank(X, 50),
        p75=nearest_rank(X, 75), violation_rate=rate, violation_per_bound=per_bound,
        costs=costs, obj_mean=float(costs.mean()), obj_p25=float(nearest_rank(costs, 25)),
        obj_p75=float(nearest_rank(costs, 75)), infeasible_count=int(infeasible),
        infeasible_after_first=int(after), n_realizations=len(logs),
        kkt_max=float(max(kkt)) if kkt else 0.0,
    )


def _realization_seeds(seed: int, n: int):
    return np.random.SeedSequence(seed).spawn(n)


def run_realization(cfg: ExperimentConfig, seq: np.random.SeedSequence) -> EpisodeLog:
    """One episode: pre-seeded store plus a fresh disturbance stream.

    The pre-seed and the stream come from separate child generators, so
    changing ``n_init`` leaves the stream untouched and the pre-seeded
    records are nested across ``n_init`` values.
    """
    sys = cfg.build_system()
    loop = cfg.loop_config(sys.n_w)
    model = cfg.disturbance_model()
    # children built from the spawn key rather than seq.spawn(), which would
    # mutate seq and hand later sweep values different streams
    seed_seq, stream_seq = (np.random.SeedSequence(seq.entropy, spawn_key=seq.spawn_key + (j,))
                            for j in range(2))
    pre = sample_disturbance(model, np.random.default_rng(seed_seq), sys.n_w,
                             size=cfg.n_init * cfg.N)
    store = DisturbanceStore(sys.n_w, pre)
    T = int(round(cfg.duration / cfg.delta_t))
    stream = sample_disturbance(model, np.random.default_rng(stream_seq), sys.n_w, size=T)
    x0 = np.asarray(cfg.x0, dtype=float)
    if x0.shape != (sys.n_x,):
        raise ConfigError(f"x0 must have length {sys.n_x}")
    clock = time.perf_counter if cfg.timing else None
    return run_episode(loop, sys, x0, T, stream, store=store, clock=clock)


def _run_one(args):
    cfg, seq = args
    return run_realization(cfg, seq)


@dataclass
class SweepResult:
    key: Optional[str]
    value: Optional[float]
    config: ExperimentConfig
    stats: StatsSummary
    logs: list = field(repr=False)
    wallclock_ms: Optional[float] = None

    def summary_row(self) -> dict:
        row = {
            "preset": self.config.preset_name,
            "sweep_value": self.value,
            "violation_rate": self.stats.violation_rate,
            "obj_mean": self.stats.obj_mean,
            "obj_p25": self.stats.obj_p25,
            "obj_p75": self.stats.obj_p75,
            "infeasible_count": self.stats.infeasible_count,
            "wallclock_ms": self.wallclock_ms,
        }
        return row


def run_monte_carlo(cfg: ExperimentConfig, write: bool = True) -> list:
    """Run every sweep value (or the single configuration) and aggregate.

    All sweep values share the same realization seeds. Returns a list of
    :class:`SweepResult`; with ``write`` and an ``output_dir`` the episode
    CSVs, per-time bands and ``summary.json`` are written there.
    """
    if cfg.sweep:
        (key, values), = cfg.sweep.items()
        runs = [(key, v, cfg.with_value(key, v)) for v in values]
    else:
        runs = [(None, None, cfg)]
    seeds = _realization_seeds(cfg.seed, cfg.realizations)
    results = []
    for key, value, sub in runs:
        t0 = time.perf_counter()
        jobs = [(sub, s) for s in seeds]
        if cfg.workers > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as ex:
                logs = list(ex.map(_run_one, jobs))
        else:
            logs = [_run_one(j) for j in jobs]
        elapsed = (time.perf_counter() - t0) * 1e3
        loop = sub.loop_config(sub.build_system().n_w)
        stats = summarize(logs, sub, loop.bounds, loop.weights)
        results.append(SweepResult(key, value, sub, stats, logs,
                                   elapsed if cfg.timing else None))
    if write and cfg.output_dir:
        write_outputs(results, cfg.output_dir)
    return results


def _fmt(v) -> str:
    return f"{v:.17g}"


def _json_value(v):
    if isinstance(v, float):
        if not math.isfinite(v):
            return None
        return _Raw(_fmt(v))
    return v


class _Raw(str):
    pass


def dumps_summary(rows: list) -> str:
    """JSON text with every float printed to 17 significant digits."""
    out = []
    for row in rows:
        parts = []
        for k, v in row.items():
            v = _json_value(v)
            text = str(v) if isinstance(v, _Raw) else json.dumps(v)
            parts.append(f"    {json.dumps(k)}: {text}")
        out.append("  {\n" + ",\n".join(parts) + "\n  }")
    return "[\n" + ",\n".join(out) + "\n]\n"


def write_outputs(results: list, output_dir) -> Path:
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for si, res in enumerate(results):
        for r, log in enumerate(res.logs):
            log.to_csv(out / f"episode_{si:02d}_{r:03d}.csv")
        write_bands(res.stats, out / f"bands_{si:02d}.csv")
    path = out / "summary.json"
    path.write_text(dumps_summary([r.summary_row() for r in results]))
    return path


def write_bands(stats: StatsSummary, path) -> None:
    n_x = stats.mean.shape[1]
    cols = ["time"]
    for i in range(n_x):
        cols += [f"x{i + 1}_mean", f"x{i + 1}_p25", f"x{i + 1}_p50", f"x{i + 1}_p75"]
    lines = [",".join(cols)]
    for k, t in enumerate(stats.times):
        vals = [t]
        for i in range(n_x):
            vals += [stats.mean[k, i], stats.p25[k, i], stats.p50[k, i], stats.p75[k, i]]
        lines.append(",".join(_fmt(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def rank_report(cfg: ExperimentConfig) -> dict:
    sys = cfg.build_system()
    idx = [int(b[0]) for b in cfg.bounds]
    rep = rank_condition(sys, cfg.N, idx)
    rep["preset"] = cfg.preset_name
    return rep
