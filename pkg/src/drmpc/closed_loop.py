"""Receding-horizon loop: re-solve, apply purified-output feedback, learn disturbances."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import qp as qpsolver
from .ambiguity import AmbiguitySet, DisturbanceStore, GroundNorm, PolytopeSupport, window_samples
from .errors import ConfigError, DimensionError, InsufficientDataError, SolverError
from .lti import LtiSystem, NominalState, PobPolicy, apply_policy, build_stacked, purified_output
from .reform import CostWeights, DisturbanceMoments, StateBound, assemble, solve_policy

REUSED = "reused"
NO_POLICY = "no_policy"
SOLVER_ERROR = "solver_error"


@dataclass(frozen=True)
class LoopConfig:
    """Controller settings.

    ``window_stride`` is the spacing, in records, between the ends of
    consecutive sample windows (``None`` means ``N``, i.e. disjoint windows,
    so one new sample becomes available every ``N`` steps).
    """

    N: int
    N_u: int
    max_samples: int
    epsilon: float
    bounds: tuple
    weights: CostWeights
    moments: DisturbanceMoments
    support: PolytopeSupport
    delta_t: float = 0.1
    ground_norm: GroundNorm = GroundNorm.L1
    window_stride: Optional[int] = None
    allow_full_period: bool = False
    tol: float = 1e-6

    def __post_init__(self):
        if self.N < 1:
            raise ConfigError("horizon N must be at least 1")
        upper = self.N if self.allow_full_period else max(self.N - 1, 1)
        if not 1 <= self.N_u <= upper:
            raise ConfigError(f"update period N_u must lie in [1, {upper}], got {self.N_u}")
        if self.max_samples < 1:
            raise ConfigError("max_samples must be at least 1")
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ConfigError(f"epsilon must be finite and nonnegative, got {self.epsilon}")
        if self.delta_t <= 0:
            raise ConfigError("delta_t must be positive")
        if self.window_stride is not None and self.window_stride < 1:
            raise ConfigError("window_stride must be positive")
        object.__setattr__(self, "bounds", tuple(self.bounds))
        object.__setattr__(self, "ground_norm", GroundNorm(self.ground_norm))

    @property
    def stride(self) -> int:
        return self.N if self.window_stride is None else self.window_stride


@dataclass
class LoopState:
    k: int
    t_law: int
    x: np.ndarray
    nominal: NominalState
    history: list
    store: DisturbanceStore
    policy: Optional[PobPolicy] = None
    last_status: Optional[str] = None

    @classmethod
    def initial(cls, sys: LtiSystem, x0, store: DisturbanceStore) -> "LoopState":
        x0 = np.asarray(x0, dtype=float).ravel()
        if x0.shape != (sys.n_x,):
            raise DimensionError(f"x0 must have length {sys.n_x}")
        return cls(0, 0, x0.copy(), NominalState.at(sys, x0), [], store)


@dataclass(frozen=True)
class StepRecord:
    time: float
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    w_hat: np.ndarray
    objective: float
    status: str
    solve_ms: float
    kkt: float = math.nan


def _estimator(sys: LtiSystem) -> np.ndarray:
    """Left inverse of ``[C; E]``; refuses when it is not injective."""
    CE = np.vstack([sys.C, sys.E])
    if np.linalg.matrix_rank(CE) < sys.n_w:
        raise ConfigError(
            "disturbances are not identifiable: [C; E] lacks full column rank")
    return np.linalg.pinv(CE)


def estimate_disturbance(sys: LtiSystem, x_k, u_k, x_next, y_k=None, pinv=None) -> np.ndarray:
    """Least-squares disturbance from the state update and, if given, the output.

    With ``y_k`` the residuals ``x_next - A x - B u = C w`` and
    ``y - D x = E w`` are solved jointly, which identifies disturbances
    that enter only the measurement. Without it ``C`` alone must have full
    column rank.
    """
    x_k = np.asarray(x_k, dtype=float).ravel()
    r_x = np.asarray(x_next, dtype=float).ravel() - sys.A @ x_k - sys.B @ np.ravel(u_k)
    if y_k is None:
        if np.linalg.matrix_rank(sys.C) < sys.n_w:
            raise ConfigError("C lacks full column rank; pass the output to estimate w")
        return np.linalg.pinv(sys.C) @ r_x
    r_y = np.asarray(y_k, dtype=float).ravel() - sys.D @ x_k
    if pinv is None:
        pinv = _estimator(sys)
    return pinv @ np.concatenate([r_x, r_y])


def _resolve(state: LoopState, sys: LtiSystem, cfg: LoopConfig):
    samples = window_samples(state.store, cfg.N, cfg.max_samples, cfg.support, stride=cfg.stride)
    amb = AmbiguitySet(samples, cfg.epsilon, cfg.support, cfg.ground_norm)
    stacked = build_stacked(sys, cfg.N, state.x, xhat0=state.x)
    problem = assemble(stacked, cfg.weights, cfg.moments, cfg.bounds, amb, sys.n_u, sys.n_y)
    return solve_policy(problem, tol=cfg.tol)


def step(state: LoopState, sys: LtiSystem, cfg: LoopConfig, w_k, pinv=None,
         clock: Optional[Callable[[], float]] = time.perf_counter) -> StepRecord:
    """Advance the loop by one sampling period (mutates ``state``)."""
    w_k = np.asarray(w_k, dtype=float).ravel()
    if w_k.shape != (sys.n_w,):
        raise DimensionError(f"disturbance must have length {sys.n_w}")
    objective, status, solve_ms, kkt = math.nan, REUSED, 0.0, math.nan
    offset = state.k - state.t_law
    due = (state.k % cfg.N_u == 0 or state.policy is None
           or state.last_status != qpsolver.OPTIMAL or offset >= cfg.N)
    if due:
        t0 = clock() if clock else 0.0
        try:
            sol = _resolve(state, sys, cfg)
        except SolverError:
            sol = None
        solve_ms = (clock() - t0) * 1e3 if clock else 0.0
        status = sol.status if sol is not None else SOLVER_ERROR
        state.last_status = status
        if sol is not None:
            kkt = max(sol.result.kkt_relative)
        if status == qpsolver.OPTIMAL:
            objective = sol.objective_value
            state.policy = sol.policy
            state.t_law = state.k
            state.nominal = NominalState.at(sys, state.x)
            state.history = []

    y = sys.output(state.x, w_k)
    v = purified_output(y, state.nominal)
    state.history.append(v)
    offset = state.k - state.t_law
    if state.policy is not None and offset < cfg.N:
        u = apply_policy(state.policy, state.history, offset)
    else:
        u = np.zeros(sys.n_u)
        if not due:
            status = NO_POLICY

    x_next = sys.step(state.x, u, w_k)
    state.nominal.advance(sys, u)
    w_hat = estimate_disturbance(sys, state.x, u, x_next, y_k=y, pinv=pinv)
    state.store.append(w_hat)
    rec = StepRecord(state.k * cfg.delta_t, state.x.copy(), u, v, w_hat, objective, status,
                     solve_ms, kkt)
    state.x = x_next
    state.k += 1
    return rec


@dataclass
class EpisodeLog:
    records: list = field(default_factory=list)
    final_state: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def states(self) -> np.ndarray:
        """All visited states including the final one, ``(T+1, n_x)``."""
        xs = [r.x for r in self.records]
        if self.final_state is not None:
            xs.append(self.final_state)
        return np.array(xs)

    @property
    def inputs(self) -> np.ndarray:
        return np.array([r.u for r in self.records])

    @property
    def statuses(self) -> list:
        return [r.status for r in self.records]

    def realized_cost(self, weights: CostWeights) -> float:
        """Discounted stage costs along the episode plus the terminal weight."""
        cost = 0.0
        for k, r in enumerate(self.records):
            cost += weights.beta ** k * (r.x @ weights.Q @ r.x + r.u @ weights.R @ r.u)
        if self.final_state is not None:
            xf = self.final_state
            cost += weights.beta ** len(self.records) * (xf @ weights.Qf @ xf)
        return float(cost)

    def to_csv(self, path) -> None:
        if not self.records:
            with open(path, "w", newline="") as fh:
                fh.write("time,objective,solver_status,solve_ms\n")
            return
        r0 = self.records[0]
        header = (["time"] + [f"x{i + 1}" for i in range(r0.x.size)]
                  + [f"u{i + 1}" for i in range(r0.u.size)]
                  + [f"v{i + 1}" for i in range(r0.v.size)]
                  + [f"what{i + 1}" for i in range(r0.w_hat.size)]
                  + ["objective", "solver_status", "solve_ms"])
        fmt = "{:.17g}".format
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            for r in self.records:
                wr.writerow([fmt(r.time)] + [fmt(v) for v in r.x] + [fmt(v) for v in r.u]
                            + [fmt(v) for v in r.v] + [fmt(v) for v in r.w_hat]
                            + [fmt(r.objective), r.status, fmt(r.solve_ms)])


def run_episode(cfg: LoopConfig, sys: LtiSystem, x0, T_steps: int, disturbances,
                store: Optional[DisturbanceStore] = None,
                clock: Optional[Callable[[], float]] = time.perf_counter) -> EpisodeLog:
    """Closed-loop simulation over ``T_steps`` sampling periods.

    ``disturbances`` is an ``(T_steps, n_w)`` array or an iterator of
    vectors; ``store`` holds disturbances known before the start and must
    contain at least ``N`` records when ``T_steps > 0``. Pass ``clock=None``
    to log zero solve times (bit-reproducible logs).
    """
    if T_steps < 0:
        raise ValueError("T_steps must be nonnegative")
    if store is None:
        store = DisturbanceStore(sys.n_w)
    if store.n_w != sys.n_w:
        raise DimensionError("store dimension differs from the plant disturbance dimension")
    for b in cfg.bounds:
        if b.index >= sys.n_x:
            raise ConfigError(f"bound on state {b.index} but the plant has {sys.n_x} states")
    if cfg.support.dim != cfg.N * sys.n_w:
        raise ConfigError("support dimension must equal N * n_w")
    log = EpisodeLog()
    x0 = np.asarray(x0, dtype=float).ravel()
    if T_steps == 0:
        log.final_state = x0.copy()
        return log
    if len(store) < cfg.N:
        raise InsufficientDataError(
            f"need {cfg.N} disturbance records before the first solve, have {len(store)}")
    pinv = _estimator(sys)
    state = LoopState.initial(sys, x0, store)
    it = iter(disturbances)
    for _ in range(T_steps):
        try:
            w = next(it)
        except StopIteration:
            raise ValueError(f"disturbance stream ended before {T_steps} steps") from None
        log.records.append(step(state, sys, cfg, w, pinv=pinv, clock=clock))
    log.final_state = state.x.copy()
    return log
