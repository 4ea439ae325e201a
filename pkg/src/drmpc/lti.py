"""Disturbed LTI systems, purified outputs and purified-output-based policies.

The plant is

    x_{k+1} = A x_k + B u_k + C w_k
    y_k     = D x_k + E w_k

and the nominal model is the same recursion with w = 0. Purified outputs
v_t = y_t - D xhat_t carry only the accumulated effect of the disturbances,
so an affine law u_t = h_t + sum_{tau<=t} H_{t,tau} v_tau is equivalent to an
affine disturbance-feedback law (and therefore convex in its parameters).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError


def _as_matrix(M, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise DimensionError(f"{name} must be a 2-D matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise DimensionError(f"{name} contains non-finite entries")
    return M


@dataclass(frozen=True)
class LtiSystem:
    """Discrete-time LTI plant ``(A, B, C, D, E)``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    E: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        D = _as_matrix(self.D, "D")
        E = _as_matrix(self.E, "E")
        n_x = A.shape[0]
        if A.shape != (n_x, n_x):
            raise DimensionError(f"A must be square, got {A.shape}")
        if B.shape[0] != n_x:
            raise DimensionError(f"B must have {n_x} rows, got {B.shape}")
        if C.shape[0] != n_x:
            raise DimensionError(f"C must have {n_x} rows, got {C.shape}")
        if D.shape[1] != n_x:
            raise DimensionError(f"D must have {n_x} columns, got {D.shape}")
        if E.shape != (D.shape[0], C.shape[1]):
            raise DimensionError(
                f"E must be {(D.shape[0], C.shape[1])} (n_y x n_w), got {E.shape}")
        for name, M in zip("ABCDE", (A, B, C, D, E)):
            M.setflags(write=False)
            object.__setattr__(self, name, M)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_y(self) -> int:
        return self.D.shape[0]

    @property
    def n_w(self) -> int:
        return self.C.shape[1]

    def step(self, x, u, w) -> np.ndarray:
        return self.A @ x + self.B @ u + self.C @ w

    def output(self, x, w) -> np.ndarray:
        return self.D @ x + self.E @ w


@dataclass
class NominalState:
    """Undisturbed model driven by the applied inputs (mutable)."""

    xhat: np.ndarray
    D: np.ndarray = field(repr=False)

    @classmethod
    def zero(cls, sys: LtiSystem) -> "NominalState":
        return cls(np.zeros(sys.n_x), sys.D)

    @classmethod
    def at(cls, sys: LtiSystem, x) -> "NominalState":
        return cls(np.array(x, dtype=float), sys.D)

    @property
    def yhat(self) -> np.ndarray:
        return self.D @ self.xhat

    def advance(self, sys: LtiSystem, u) -> None:
        self.xhat = sys.A @ self.xhat + sys.B @ np.asarray(u, dtype=float)


@dataclass(frozen=True)
class StackedHorizon:
    """Block matrices predicting a whole horizon in one linear map.

    ``x[k:k+N] = A_x x0 + B_x u[k:k+N-1] + C_x w[k:k+N-1]`` and
    ``y[k:k+N-1] = A_y x0 + B_y u + (C_y + E_y) w``. The tilde matrices act on
    the extended disturbance ``[1, w]``: ``x = (B_x Htilde + Ctilde_x) wtilde``
    and ``[1, v] = (Ctilde_y + Etilde_y) wtilde``.
    """

    N: int
    x0: np.ndarray
    xhat0: np.ndarray
    A_x: np.ndarray
    B_x: np.ndarray
    C_x: np.ndarray
    A_y: np.ndarray
    B_y: np.ndarray
    C_y: np.ndarray
    E_y: np.ndarray
    Ctilde_x: np.ndarray
    Ctilde_y: np.ndarray
    Etilde_y: np.ndarray

    @property
    def G(self) -> np.ndarray:
        """Map from the extended disturbance to ``[1, v]``."""
        return self.Ctilde_y + self.Etilde_y

    def predict(self, u, w) -> np.ndarray:
        """Stacked states for input and disturbance sequences (flattened)."""
        return self.A_x @ self.x0 + self.B_x @ np.ravel(u) + self.C_x @ np.ravel(w)


def build_stacked(sys: LtiSystem, N: int, x0, xhat0=None) -> StackedHorizon:
    """Build the stacked-horizon matrices for initial state ``x0``.

    ``xhat0`` is the initial state of the nominal model; the default (zero)
    follows the model definition where the nominal system starts at the
    equilibrium. Passing ``xhat0 = x0`` gives purified outputs free of any
    initial-state term, which is what the receding-horizon loop uses.
    """
    if int(N) != N or N < 1:
        raise DimensionError(f"horizon N must be a positive integer, got {N}")
    N = int(N)
    n_x, n_u, n_y, n_w = sys.n_x, sys.n_u, sys.n_y, sys.n_w
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.shape != (n_x,):
        raise DimensionError(f"x0 must have length {n_x}, got {x0.shape}")
    xhat0 = np.zeros(n_x) if xhat0 is None else np.asarray(xhat0, dtype=float).ravel()
    if xhat0.shape != (n_x,):
        raise DimensionError(f"xhat0 must have length {n_x}, got {xhat0.shape}")

    powers = [np.eye(n_x)]
    for _ in range(N):
        powers.append(sys.A @ powers[-1])

    A_x = np.vstack(powers)
    B_x = np.zeros(((N + 1) * n_x, N * n_u))
    C_x = np.zeros(((N + 1) * n_x, N * n_w))
    for t in range(1, N + 1):
        for tau in range(t):
            P = powers[t - 1 - tau]
            B_x[t * n_x:(t + 1) * n_x, tau * n_u:(tau + 1) * n_u] = P @ sys.B
            C_x[t * n_x:(t + 1) * n_x, tau * n_w:(tau + 1) * n_w] = P @ sys.C

    D_blk = np.kron(np.eye(N), sys.D)
    A_y = D_blk @ A_x[:N * n_x]
    B_y = D_blk @ B_x[:N * n_x]
    C_y = D_blk @ C_x[:N * n_x]
    E_y = np.kron(np.eye(N), sys.E)

    Ctilde_x = np.hstack([(A_x @ x0)[:, None], C_x])
    Ctilde_y = np.zeros((1 + N * n_y, 1 + N * n_w))
    Ctilde_y[1:, 0] = A_y @ (x0 - xhat0)
    Ctilde_y[1:, 1:] = C_y
    Etilde_y = np.zeros_like(Ctilde_y)
    Etilde_y[0, 0] = 1.0
    Etilde_y[1:, 1:] = E_y

    mats = dict(A_x=A_x, B_x=B_x, C_x=C_x, A_y=A_y, B_y=B_y, C_y=C_y, E_y=E_y,
                Ctilde_x=Ctilde_x, Ctilde_y=Ctilde_y, Etilde_y=Etilde_y)
    for M in mats.values():
        M.setflags(write=False)
    return StackedHorizon(N=N, x0=x0, xhat0=xhat0, **mats)


def rollout(sys: LtiSystem, x0, u_seq, w_seq):
    """Simulate the plant; returns ``(x[0..T], y[0..T-1])`` as 2-D arrays."""
    u_seq = np.asarray(u_seq, dtype=float).reshape(-1, sys.n_u)
    w_seq = np.asarray(w_seq, dtype=float).reshape(-1, sys.n_w)
    if len(u_seq) != len(w_seq):
        raise DimensionError(
            f"input and disturbance sequences differ in length ({len(u_seq)} vs {len(w_seq)})")
    x = np.asarray(x0, dtype=float).ravel()
    if x.shape != (sys.n_x,):
        raise DimensionError(f"x0 must have length {sys.n_x}")
    T = len(u_seq)
    xs = np.empty((T + 1, sys.n_x))
    ys = np.empty((T, sys.n_y))
    xs[0] = x
    for k in range(T):
        ys[k] = sys.output(xs[k], w_seq[k])
        xs[k + 1] = sys.step(xs[k], u_seq[k], w_seq[k])
    return xs, ys


def purified_output(y_observed, nominal: NominalState) -> np.ndarray:
    y = np.asarray(y_observed, dtype=float).ravel()
    yhat = nominal.yhat
    if y.shape != yhat.shape:
        raise DimensionError(f"output has shape {y.shape}, nominal output {yhat.shape}")
    return y - yhat


def causal_mask(N: int, n_u: int, n_y: int) -> np.ndarray:
    """Boolean mask of the entries of ``H`` that may be nonzero."""
    mask = np.zeros((N * n_u, 1 + N * n_y), dtype=bool)
    mask[:, 0] = True
    for t in range(N):
        mask[t * n_u:(t + 1) * n_u, 1:1 + (t + 1) * n_y] = True
    return mask


@dataclass(frozen=True)
class PobPolicy:
    """Affine purified-output feedback ``H = [h | H_{t,tau}]`` over a horizon.

    Rows are stacked per step ``t`` (``n_u`` rows each); column 0 holds the
    affine terms and the remaining columns hold block ``(t, tau)`` at
    columns ``1 + tau*n_y : 1 + (tau+1)*n_y``. Blocks with ``tau > t`` are
    structurally zero.
    """

    H: np.ndarray
    N: int
    n_u: int
    n_y: int

    def __post_init__(self):
        H = np.array(self.H, dtype=float)
        shape = (self.N * self.n_u, 1 + self.N * self.n_y)
        if H.shape != shape:
            raise DimensionError(f"H must have shape {shape}, got {H.shape}")
        if not np.all(np.isfinite(H)):
            raise DimensionError("H contains non-finite entries")
        if np.any(H[~causal_mask(self.N, self.n_u, self.n_y)] != 0.0):
            raise ValueError("H violates causality: nonzero block H[t, tau] with tau > t")
        H.setflags(write=False)
        object.__setattr__(self, "H", H)

    @classmethod
    def zeros(cls, N, n_u, n_y) -> "PobPolicy":
        return cls(np.zeros((N * n_u, 1 + N * n_y)), N, n_u, n_y)

    @classmethod
    def from_free(cls, values, N, n_u, n_y) -> "PobPolicy":
        """Inverse of :meth:`free_values` (column-major order over the mask)."""
        mask = causal_mask(N, n_u, n_y)
        H = np.zeros(mask.shape)
        H.T[mask.T] = np.asarray(values, dtype=float)
        return cls(H, N, n_u, n_y)

    def free_values(self) -> np.ndarray:
        mask = causal_mask(self.N, self.n_u, self.n_y)
        return self.H.T[mask.T].copy()

    @property
    def h(self) -> np.ndarray:
        return self.H[:, 0].reshape(self.N, self.n_u)

    def block(self, t: int, tau: int) -> np.ndarray:
        r = slice(t * self.n_u, (t + 1) * self.n_u)
        c = slice(1 + tau * self.n_y, 1 + (tau + 1) * self.n_y)
        return self.H[r, c]


def free_indices(N: int, n_u: int, n_y: int) -> np.ndarray:
    """Positions of the free entries of ``H`` in column-major ``vec(H)``."""
    return np.flatnonzero(causal_mask(N, n_u, n_y).ravel(order="F"))


def apply_policy(policy: PobPolicy, purified_history: Sequence, offset: int) -> np.ndarray:
    """Input at ``offset`` steps after the policy was computed.

    ``purified_history`` holds ``v`` from the policy update step up to and
    including the current step, so it has ``offset + 1`` entries.
    """
    if offset < 0 or offset >= policy.N:
        raise ValueError(f"offset {offset} outside the policy horizon 0..{policy.N - 1}")
    V = np.asarray(purified_history, dtype=float).reshape(-1, policy.n_y)
    if len(V) != offset + 1:
        raise DimensionError(
            f"need {offset + 1} purified outputs for offset {offset}, got {len(V)}")
    rows = slice(offset * policy.n_u, (offset + 1) * policy.n_u)
    u = policy.H[rows, 0].copy()
    u += policy.H[rows, 1:1 + (offset + 1) * policy.n_y] @ V.ravel()
    return u


def policy_to_disturbance_form(policy: PobPolicy, stacked: StackedHorizon) -> np.ndarray:
    """``Htilde = H (Ctilde_y + Etilde_y)`` so that ``u = Htilde [1, w]``."""
    G = stacked.G
    if policy.H.shape[1] != G.shape[0]:
        raise DimensionError(
            f"policy has {policy.H.shape[1]} columns, stacked map has {G.shape[0]} rows")
    return policy.H @ G


def extended_disturbance(w_seq) -> np.ndarray:
    return np.concatenate([[1.0], np.ravel(np.asarray(w_seq, dtype=float))])


def rank_condition(sys: LtiSystem, N: int, constrained_states: Sequence[int] = ()) -> dict:
    """Evaluate the recursive-feasibility rank precondition.

    Returns the rank of the input-to-future-state block of ``B_x`` against
    ``n_x * N`` and the relaxed per-element variant: for every constrained
    state index the corresponding rows of ``A^i B`` are nonzero and there are
    at least as many inputs as constrained states.
    """
    st = build_stacked(sys, N, np.zeros(sys.n_x))
    block = st.B_x[sys.n_x:, :]
    rank = int(np.linalg.matrix_rank(block))
    full = rank >= sys.n_x * N
    relaxed = True
    P = np.eye(sys.n_x)
    rows_ok = {}
    for m in constrained_states:
        rows_ok[int(m)] = True
    for _ in range(N):
        PB = P @ sys.B
        for m in rows_ok:
            if not np.any(PB[m] != 0.0):
                rows_ok[m] = False
        P = sys.A @ P
    if rows_ok:
        relaxed = all(rows_ok.values()) and sys.n_u >= len(rows_ok)
    return {
        "rank": rank,
        "required_rank": sys.n_x * N,
        "full_rank_holds": bool(full),
        "relaxed_holds": bool(relaxed),
        "constrained_states": sorted(rows_ok),
    }
