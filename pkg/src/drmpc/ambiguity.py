"""Disturbance data, sample windows and the Wasserstein ambiguity set."""

from __future__ import annotations

import csv
import enum
import itertools
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, InsufficientDataError


class GroundNorm(str, enum.Enum):
    """Transport cost norm; the reformulation uses its dual."""

    L1 = "l1"
    LINF = "linf"

    @property
    def dual(self) -> "GroundNorm":
        return GroundNorm.LINF if self is GroundNorm.L1 else GroundNorm.L1

    def __call__(self, x, axis=-1):
        x = np.asarray(x, dtype=float)
        if self is GroundNorm.L1:
            return np.abs(x).sum(axis=axis)
        return np.abs(x).max(axis=axis)


class DisturbanceStore:
    """Chronological record of (estimated) disturbances.

    With ``cap`` set, appending to a full store drops the oldest record.
    """

    def __init__(self, n_w: int, records: Iterable = (), cap: Optional[int] = None):
        if cap is not None and cap < 1:
            raise ValueError(f"cap must be positive, got {cap}")
        self.n_w = int(n_w)
        self.cap = cap
        self._records = deque(maxlen=cap)
        for w in records:
            self.append(w)

    def append(self, w) -> None:
        w = np.array(w, dtype=float).ravel()
        if w.shape != (self.n_w,):
            raise DimensionError(f"disturbance record must have length {self.n_w}, got {w.shape}")
        w.setflags(write=False)
        self._records.append(w)

    def __len__(self) -> int:
        return len(self._records)

    def snapshot(self) -> np.ndarray:
        """Copy of the records as an ``(n, n_w)`` array, oldest first."""
        if not self._records:
            return np.zeros((0, self.n_w))
        return np.array(self._records)

    def copy(self) -> "DisturbanceStore":
        return DisturbanceStore(self.n_w, self._records, self.cap)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"w{i + 1}" for i in range(self.n_w)])
            for w in self._records:
                writer.writerow([f"{v:.17g}" for v in w])

    @classmethod
    def from_csv(cls, path, cap: Optional[int] = None) -> "DisturbanceStore":
        with open(Path(path), newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            expected = [f"w{i + 1}" for i in range(len(header))]
            if header != expected:
                raise ValueError(f"unexpected CSV header {header}, expected {expected}")
            rows = [[float(v) for v in row] for row in reader if row]
        return cls(len(header), rows, cap)


@dataclass(frozen=True)
class PolytopeSupport:
    """Support set ``{xi : C_xi xi <= d_xi}``."""

    C_xi: np.ndarray
    d_xi: np.ndarray

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C_xi, dtype=float))
        d = np.asarray(self.d_xi, dtype=float).ravel()
        if C.shape[0] != d.shape[0]:
            raise DimensionError(f"C_xi has {C.shape[0]} rows but d_xi has {d.shape[0]}")
        object.__setattr__(self, "C_xi", C)
        object.__setattr__(self, "d_xi", d)

    @classmethod
    def box(cls, dim: int, bound: float = 3.0) -> "PolytopeSupport":
        """Per-entry box ``[-bound, bound]^dim`` as ``[I; -I] xi <= bound``."""
        if bound <= 0:
            raise ValueError("box bound must be positive")
        I = np.eye(dim)
        return cls(np.vstack([I, -I]), np.full(2 * dim, float(bound)))

    @property
    def dim(self) -> int:
        return self.C_xi.shape[1]

    def box_bounds(self):
        """``(lower, upper)`` if this is exactly the ``[I; -I]`` box, else ``None``."""
        n = self.dim
        if self.C_xi.shape != (2 * n, n):
            return None
        if not np.array_equal(self.C_xi, np.vstack([np.eye(n), -np.eye(n)])):
            return None
        return -self.d_xi[n:], self.d_xi[:n]

    def vertices(self) -> np.ndarray:
        bounds = self.box_bounds()
        if bounds is None:
            raise NotImplementedError("vertex enumeration is only provided for box supports")
        lo, hi = bounds
        return np.array(list(itertools.product(*zip(lo, hi))))

    def diameter(self, norm: GroundNorm) -> float:
        bounds = self.box_bounds()
        if bounds is None:
            raise NotImplementedError("diameter is only provided for box supports")
        return float(norm(bounds[1] - bounds[0]))

    def contains(self, xi) -> bool:
        return contains(self, xi)


def contains(support: PolytopeSupport, xi) -> bool:
    xi = np.asarray(xi, dtype=float).ravel()
    if xi.shape != (support.dim,):
        raise DimensionError(f"point has length {xi.size}, support dimension is {support.dim}")
    return bool(np.all(support.C_xi @ xi <= support.d_xi + 1e-9))


@dataclass(frozen=True)
class SampleWindow:
    """``N`` consecutive disturbances concatenated in chronological order."""

    xi: np.ndarray
    support: Optional[PolytopeSupport] = None

    def __post_init__(self):
        xi = np.array(self.xi, dtype=float).ravel()
        if self.support is not None and not contains(self.support, xi):
            raise ValueError("sample window lies outside the support polytope")
        xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)


def window_samples(store: DisturbanceStore, N: int, max_samples: int,
                   support: Optional[PolytopeSupport] = None,
                   stride: int = 1) -> list:
    """Most recent windows of ``N`` records, newest last.

    Windows end at the newest record and step back by ``stride`` records,
    so with ``stride=1`` consecutive windows overlap in ``N-1`` entries.
    """
    if max_samples < 1:
        raise ValueError("max_samples must be at least 1")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    data = store.snapshot()
    n = len(data)
    if n < N:
        raise InsufficientDataError(f"need at least {N} disturbance records, have {n}")
    ends = list(range(n, N - 1, -stride))[:max_samples]
    return [SampleWindow(data[e - N:e].ravel(), support) for e in reversed(ends)]


@dataclass(frozen=True)
class AmbiguitySet:
    """Wasserstein ball of radius ``epsilon`` around the empirical distribution."""

    samples: np.ndarray
    epsilon: float
    support: PolytopeSupport
    ground_norm: GroundNorm = GroundNorm.L1

    def __post_init__(self):
        S = self.samples
        if len(S) and isinstance(S[0], SampleWindow):
            S = [s.xi for s in S]
        S = np.atleast_2d(np.array(S, dtype=float))
        if S.shape[0] < 1 or S.size == 0:
            raise ValueError("ambiguity set needs at least one sample")
        if S.shape[1] != self.support.dim:
            raise DimensionError(
                f"samples have dimension {S.shape[1]}, support has {self.support.dim}")
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"radius must be finite and nonnegative, got {self.epsilon}")
        for xi in S:
            if not contains(self.support, xi):
                raise ValueError("sample lies outside the support polytope")
        S.setflags(write=False)
        object.__setattr__(self, "samples", S)
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "ground_norm", GroundNorm(self.ground_norm))

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class RadiusSchedule:
    """Constants of the finite-sample concentration bound used to pick a radius."""

    Cconst: float
    cconst: float
    alpha: float
    kappa: float

    def __post_init__(self):
        for name in ("Cconst", "cconst", "alpha", "kappa"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def calibrate_radius(sched: RadiusSchedule, N_s: int, beta: float) -> float:
    """Radius for which the ball holds the true distribution w.p. ``1 - beta``.

    Two regimes: ``(log(C/beta) / (c N_s))**(1/kappa)`` once
    ``N_s >= log(C/beta)/c``, and the same base to the power ``1/alpha``
    below that sample count. A nonpositive ``log(C/beta)`` gives radius 0.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    if N_s < 1:
        raise ValueError("N_s must be at least 1")
    log_term = math.log(sched.Cconst / beta)
    if log_term <= 0.0:
        return 0.0
    base = log_term / (sched.cconst * N_s)
    threshold = log_term / sched.cconst
    exponent = 1.0 / sched.kappa if N_s >= threshold else 1.0 / sched.alpha
    return base ** exponent


def _check_measure(points, weights):
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    w = np.asarray(weights, dtype=float).ravel()
    if len(w) != len(X):
        raise DimensionError("number of weights differs from number of points")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be nonnegative and sum to 1")
    return X, w


def _transport_by_vertices(cost, p, q):
    m, n = cost.shape
    A = np.zeros((m + n, m * n))
    for i in range(m):
        A[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        A[m + j, j::n] = 1.0
    b = np.concatenate([p, q])
    # one marginal equation is redundant; drop it to get square bases
    A, b = A[:-1], b[:-1]
    k = m + n - 1
    combos = np.array(list(itertools.combinations(range(m * n), k)))
    bases = A[:, combos].transpose(1, 0, 2)
    dets = np.linalg.det(bases)
    ok = np.abs(dets) > 1e-9
    sols = np.linalg.solve(bases[ok], np.broadcast_to(b, (ok.sum(), k))[..., None])[..., 0]
    feasible = np.all(sols >= -1e-12, axis=1)
    costs = (sols * cost.ravel()[combos[ok]]).sum(axis=1)
    return float(costs[feasible].min())


def _transport_by_lp(cost, p, q):
    from scipy.optimize import linprog

    m, n = cost.shape
    A = np.zeros((m + n, m * n))
    for i in range(m):
        A[i, i * n:(i + 1) * n] = 1.0
    for j in range(n):
        A[m + j, j::n] = 1.0
    res = linprog(cost.ravel(), A_eq=A, b_eq=np.concatenate([p, q]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def wasserstein_distance_discrete(P, Q, ground_norm=GroundNorm.L1) -> float:
    """Exact type-1 Wasserstein distance between two weighted point sets.

    ``P`` and ``Q`` are ``(points, weights)`` pairs. Small problems (both
    supports of size <= 4) enumerate the vertices of the transport polytope;
    larger ones go through an LP solver.
    """
    X, p = _check_measure(*P)
    Y, q = _check_measure(*Q)
    if X.shape[1] != Y.shape[1]:
        raise DimensionError("point sets live in different dimensions")
    norm = GroundNorm(ground_norm)
    cost = norm(X[:, None, :] - Y[None, :, :])
    if len(p) <= 4 and len(q) <= 4:
        return max(_transport_by_vertices(cost, p, q), 0.0)
    return max(_transport_by_lp(cost, p, q), 0.0)


def empirical_measure(samples: Sequence) -> tuple:
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    return X, np.full(len(X), 1.0 / len(X))
