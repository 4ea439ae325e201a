"""Distributionally robust control problem as a finite convex QP.

For a fixed initial state the stacked states are affine in the free entries
of the purified-output policy ``H``:

    x[k:k+N] = (B_x H G + Ctilde_x) [1, xi],    G = Ctilde_y + Etilde_y

The expected discounted quadratic cost is therefore a convex quadratic in
``vec(H)`` and every state bound becomes a pointwise maximum of affine
functions of the disturbance sequence ``xi``. The worst-case expectation of
such a maximum over a type-1 Wasserstein ball around the empirical
distribution, with a polytopic support, admits a linear dual with variables
``lambda_j``, ``s_ij`` and ``gamma_ijt >= 0``:

    eps*lambda_j + (1/N_s) sum_i s_ij <= U_j
    b_tj + <a_tj, xi_i> + <gamma_ijt, d - C xi_i> <= s_ij
    || C' gamma_ijt - a_tj ||_*  <= lambda_j

where ``(a_tj, b_tj)`` are the disturbance and constant coefficients of the
bounded state at step ``t``. Ground norms are restricted to L1 and Linf so
that every dual-norm constraint expands into linear rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from . import qp as qpsolver
from .ambiguity import AmbiguitySet, GroundNorm
from .errors import DimensionError
from .lti import PobPolicy, StackedHorizon, free_indices, policy_to_disturbance_form


def _psd_check(M, name, strict=False):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    eig = np.linalg.eigvalsh(M)
    if strict and not np.all(eig > 0):
        raise ValueError(f"{name} must be positive definite")
    if not strict and np.any(eig < -1e-9):
        raise ValueError(f"{name} must be positive semidefinite")
    return M


@dataclass(frozen=True)
class CostWeights:
    Q: np.ndarray
    Qf: np.ndarray
    R: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "Q", _psd_check(self.Q, "Q"))
        object.__setattr__(self, "Qf", _psd_check(self.Qf, "Qf"))
        object.__setattr__(self, "R", _psd_check(self.R, "R", strict=True))
        if self.Q.shape != self.Qf.shape:
            raise DimensionError("Q and Qf differ in shape")
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"discount must lie in (0, 1], got {self.beta}")


@dataclass(frozen=True)
class DisturbanceMoments:
    """Mean and covariance of the stacked disturbance sequence."""

    mu: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float).ravel()
        Sigma = _psd_check(self.Sigma, "Sigma")
        if Sigma.shape != (mu.size, mu.size):
            raise DimensionError("Sigma does not match the mean dimension")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Sigma", Sigma)

    @classmethod
    def iid(cls, mu_w, Sigma_w, N: int) -> "DisturbanceMoments":
        mu_w = np.atleast_1d(np.asarray(mu_w, dtype=float))
        Sigma_w = np.atleast_2d(np.asarray(Sigma_w, dtype=float))
        return cls(np.tile(mu_w, N), np.kron(np.eye(N), Sigma_w))

    def second_moment(self) -> np.ndarray:
        """``E[wt wt']`` for the extended vector ``wt = [1, w]``."""
        mt = np.concatenate([[1.0], self.mu])
        S = np.outer(mt, mt)
        S[1:, 1:] += self.Sigma
        return S


@dataclass(frozen=True)
class StateBound:
    """Bound on state entry ``index`` (0-based) at every predicted step."""

    index: int
    value: float
    direction: str = "upper"

    def __post_init__(self):
        if self.direction not in ("upper", "lower"):
            raise ValueError(f"direction must be 'upper' or 'lower', got {self.direction!r}")
        if self.index < 0:
            raise ValueError("state index must be nonnegative")

    @property
    def sign(self) -> float:
        return 1.0 if self.direction == "upper" else -1.0

    @property
    def U(self) -> float:
        """Right-hand side after writing the bound as ``sign * x_m <= U``."""
        return self.sign * self.value

    def violated(self, x) -> bool:
        return bool(self.sign * np.asarray(x)[self.index] > self.U)


def build_cost_blocks(weights: CostWeights, N: int):
    """Return ``(J_x, J_u)`` for the discounted stacked cost."""
    disc = weights.beta ** np.arange(N + 1)
    J_x = sla.block_diag(*[disc[t] * weights.Q for t in range(N)], disc[N] * weights.Qf)
    J_u = np.kron(np.diag(disc[:N]), weights.R)
    return J_x, J_u


def objective_quadratic(stacked: StackedHorizon, J_x, J_u, moments: DisturbanceMoments,
                        free_idx=None):
    """Expected cost as ``1/2 v'Pv + q'v + const`` over the free entries of ``H``.

    With ``S = E[wt wt']`` and ``W = G S G'`` the expectation of the stacked
    quadratic cost is ``Tr(Ctx' J_x Ctx S) + 2<B_x' J_x Ctx S G', H>
    + vec(H)' (W kron (B_x' J_x B_x + J_u)) vec(H)``.
    """
    G = stacked.G
    S = moments.second_moment()
    if S.shape[0] != G.shape[1]:
        raise DimensionError(
            f"moments have dimension {S.shape[0] - 1}, horizon expects {G.shape[1] - 1}")
    B_x, Ctx = stacked.B_x, stacked.Ctilde_x
    W = G @ S @ G.T
    K = B_x.T @ J_x @ B_x + J_u
    P = 2.0 * np.kron(W, K)
    q = 2.0 * (B_x.T @ J_x @ Ctx @ S @ G.T).ravel(order="F")
    const = float(np.trace(Ctx.T @ J_x @ Ctx @ S))
    if free_idx is not None:
        P = P[np.ix_(free_idx, free_idx)]
        q = q[free_idx]
    P = 0.5 * (P + P.T)
    return P, q, const


def expected_cost(stacked: StackedHorizon, J_x, J_u, moments: DisturbanceMoments,
                  policy: PobPolicy) -> float:
    """Direct evaluation ``Tr(M S)`` for a given policy."""
    Ht = policy_to_disturbance_form(policy, stacked)
    F = stacked.Ctilde_x + stacked.B_x @ Ht
    M = F.T @ J_x @ F + Ht.T @ J_u @ Ht
    return float(np.trace(M @ moments.second_moment()))


def affine_pieces(stacked: StackedHorizon, Htilde, bound: StateBound, n_x: int):
    """Coefficients ``(a, b)`` with ``sign*x_{k+t}[m] = a[t-1]'xi + b[t-1]``, t = 1..N."""
    F = stacked.B_x @ Htilde + stacked.Ctilde_x
    rows = np.arange(1, stacked.N + 1) * n_x + bound.index
    piece = bound.sign * F[rows]
    return piece[:, 1:], piece[:, 0]


@dataclass
class BoundRows:
    """Linear rows of one bound over the local variable ordering.

    Columns: ``[vec(H) free | lambda | s_1..s_Ns | block_(1,1) .. block_(Ns,N)]``,
    where each block holds ``gamma`` (one entry per support row) followed,
    for the Linf ground norm, by the auxiliary ``sigma`` entries.
    """

    G: sp.csr_matrix
    h: np.ndarray
    budget: np.ndarray
    budget_rhs: float
    n_H: int
    n_samples: int
    N: int
    block_size: int
    n_gamma: int
    rows_per_block: int

    @property
    def n_cols(self) -> int:
        return self.n_H + 1 + self.n_samples + self.n_samples * self.N * self.block_size

    def block_columns(self, i: int, t: int) -> np.ndarray:
        start = self.n_H + 1 + self.n_samples + (i * self.N + t) * self.block_size
        return np.arange(start, start + self.block_size)

    def block_rows(self, i: int, t: int) -> slice:
        start = (i * self.N + t) * self.rows_per_block
        return slice(start, start + self.rows_per_block)


def _policy_jacobian(stacked: StackedHorizon, rows, free_idx):
    """``L[t, c, k] = d F[rows[t], c] / d vH_k`` for ``F = B_x H G + Ctilde_x``."""
    G = stacked.G
    Bsel = stacked.B_x[rows]
    L = np.einsum("tp,qc->tcqp", Bsel, G).reshape(len(rows), G.shape[1], -1)
    return L[:, :, free_idx]


def constraint_rows(stacked: StackedHorizon, bound: StateBound, ambiguity: AmbiguitySet,
                    n_x: int, n_u: int, n_y: int) -> BoundRows:
    """Rows of one distributionally robust bound, linear in all variables."""
    N = stacked.N
    xi = ambiguity.samples
    n_s, dim = xi.shape
    if dim != stacked.C_x.shape[1]:
        raise DimensionError(
            f"samples have dimension {dim}, horizon disturbance dimension is {stacked.C_x.shape[1]}")
    if bound.index >= n_x:
        raise DimensionError(f"bound on state {bound.index} but n_x = {n_x}")
    norm = GroundNorm(ambiguity.ground_norm)
    C, d = ambiguity.support.C_xi, ambiguity.support.d_xi
    n_c = C.shape[0]
    free_idx = free_indices(N, n_u, n_y)
    n_H = free_idx.size

    rows = np.arange(1, N + 1) * n_x + bound.index
    L = bound.sign * _policy_jacobian(stacked, rows, free_idx)        # (N, 1+dim, n_H)
    c0 = bound.sign * stacked.Ctilde_x[rows]                          # (N, 1+dim)

    linf = norm is GroundNorm.LINF
    blk = n_c + (dim if linf else 0)
    R = 1 + 2 * dim + n_c + (1 if linf else 0)
    n_cols = n_H + 1 + n_s + n_s * N * blk
    lam_col, s0 = n_H, n_H + 1

    # dense per-(i, t) pieces: global part over [vH | lambda | s_i], local part over the block
    Ag = np.zeros((n_s, N, R, n_H))
    Alam = np.zeros((n_s, N, R))
    As = np.zeros((n_s, N, R))
    Al = np.zeros((n_s, N, R, blk))
    rhs = np.zeros((n_s, N, R))

    # epigraph row
    Ag[:, :, 0] = L[None, :, 0, :] + np.einsum("ir,trk->itk", xi, L[:, 1:, :])
    Al[:, :, 0, :n_c] = (d[None, :] - xi @ C.T)[:, None, :]
    As[:, :, 0] = -1.0
    rhs[:, :, 0] = -(c0[None, :, 0] + xi @ c0[:, 1:].T)

    # dual-norm rows: +/-(C' gamma - a)_r <= lambda (or sigma_r)
    Ct = C.T                                                          # (dim, n_c)
    plus = slice(1, 1 + dim)
    minus = slice(1 + dim, 1 + 2 * dim)
    Al[:, :, plus, :n_c] = Ct
    Al[:, :, minus, :n_c] = -Ct
    Ag[:, :, plus] = -L[None, :, 1:, :]
    Ag[:, :, minus] = L[None, :, 1:, :]
    rhs[:, :, plus] = c0[None, :, 1:]
    rhs[:, :, minus] = -c0[None, :, 1:]
    if linf:
        eye = np.eye(dim)
        Al[:, :, plus, n_c:] = -eye
        Al[:, :, minus, n_c:] = -eye
        Al[:, :, R - 1, n_c:] = 1.0
        Alam[:, :, R - 1] = -1.0
    else:
        Alam[:, :, 1:1 + 2 * dim] = -1.0

    # gamma >= 0
    gsl = slice(1 + 2 * dim, 1 + 2 * dim + n_c)
    Al[:, :, gsl, :n_c] = -np.eye(n_c)

    # scatter into a sparse matrix
    n_rows = n_s * N * R
    row_ids = np.arange(n_rows).reshape(n_s, N, R)
    blk_start = s0 + n_s + (np.arange(n_s)[:, None] * N + np.arange(N)[None, :]) * blk
    parts_r, parts_c, parts_v = [], [], []

    def add(mask_vals, cols):
        nz = mask_vals != 0
        r = np.broadcast_to(row_ids[..., None], mask_vals.shape)[nz]
        c = np.broadcast_to(cols, mask_vals.shape)[nz]
        parts_r.append(r)
        parts_c.append(c)
        parts_v.append(mask_vals[nz])

    add(Ag, np.arange(n_H)[None, None, None, :])
    add(Alam[..., None], np.full((1, 1, 1, 1), lam_col))
    add(As[..., None], (s0 + np.arange(n_s))[:, None, None, None])
    add(Al, (blk_start[:, :, None, None] + np.arange(blk)[None, None, None, :]))
    Gm = sp.coo_matrix((np.concatenate(parts_v), (np.concatenate(parts_r), np.concatenate(parts_c))),
                       shape=(n_rows, n_cols)).tocsr()

    budget = np.zeros(n_cols)
    budget[lam_col] = ambiguity.epsilon
    budget[s0:s0 + n_s] = 1.0 / n_s
    return BoundRows(Gm, rhs.ravel(), budget, bound.U, n_H, n_s, N, blk, n_c, R)


@dataclass
class QpProblem:
    """Assembled program plus the bookkeeping to read a solution back."""

    instance: qpsolver.QpInstance
    const: float
    n_H: int
    lam_idx: np.ndarray
    s_idx: np.ndarray
    gamma_idx: np.ndarray
    N: int
    n_u: int
    n_y: int
    bounds: tuple
    bound_rows: list = field(default_factory=list, repr=False)

    def layout(self) -> dict:
        return {
            "n_H": int(self.n_H),
            "lambda": self.lam_idx.tolist(),
            "s": self.s_idx.tolist(),
            "gamma_shape": list(self.gamma_idx.shape),
            "gamma_first": int(self.gamma_idx.min()) if self.gamma_idx.size else None,
            "N": self.N, "n_u": self.n_u, "n_y": self.n_y,
            "bounds": [[b.index, b.value, b.direction] for b in self.bounds],
            "objective_constant": self.const,
        }


@dataclass
class PolicySolution:
    policy: Optional[PobPolicy]
    lam: np.ndarray
    s: np.ndarray
    objective_value: float
    status: str
    result: qpsolver.QpResult = field(repr=False)


def assemble(stacked: StackedHorizon, weights: CostWeights, moments: DisturbanceMoments,
             bounds: Sequence[StateBound], ambiguity: Optional[AmbiguitySet],
             n_u: int, n_y: int) -> QpProblem:
    """Full program over ``[vec(H) | lambda_j | s_ij | local blocks]``."""
    N = stacked.N
    n_x = stacked.A_x.shape[1]
    free_idx = free_indices(N, n_u, n_y)
    n_H = free_idx.size
    J_x, J_u = build_cost_blocks(weights, N)
    if J_x.shape[0] != stacked.A_x.shape[0]:
        raise DimensionError("cost weights do not match the state dimension")
    Pv, qv, const = objective_quadratic(stacked, J_x, J_u, moments, free_idx)
    bounds = tuple(bounds)
    if bounds and ambiguity is None:
        raise ValueError("state bounds need an ambiguity set")

    brs = [constraint_rows(stacked, b, ambiguity, n_x, n_u, n_y) for b in bounds]
    n_s = ambiguity.n_samples if bounds else 0
    n_glob = n_H + len(bounds) * (1 + n_s)
    n_local = sum(br.n_samples * br.N * br.block_size for br in brs)
    n = n_glob + n_local
    lam_idx = np.array([n_H + j * (1 + n_s) for j in range(len(bounds))], dtype=int)
    s_idx = np.array([[n_H + j * (1 + n_s) + 1 + i for i in range(n_s)]
                      for j in range(len(bounds))], dtype=int).reshape(len(bounds), n_s)

    G_parts, h_parts, blocks = [], [], []
    gamma_idx = []
    local_off = n_glob
    for j, br in enumerate(brs):
        ncl = br.n_cols
        colmap = np.empty(ncl, dtype=int)
        colmap[:n_H] = np.arange(n_H)
        colmap[n_H] = lam_idx[j]
        colmap[n_H + 1:n_H + 1 + n_s] = s_idx[j]
        nloc = ncl - (n_H + 1 + n_s)
        colmap[n_H + 1 + n_s:] = local_off + np.arange(nloc)
        remap = sp.csr_matrix((np.ones(ncl), (np.arange(ncl), colmap)), shape=(ncl, n))
        G_parts.append(br.G @ remap)
        h_parts.append(br.h)
        nzb = br.budget != 0
        G_parts.append(sp.csr_matrix(
            (br.budget[nzb], (np.zeros(nzb.sum(), dtype=int), colmap[nzb])), shape=(1, n)))
        h_parts.append(np.array([br.budget_rhs]))
        loc = (local_off + np.arange(nloc)).reshape(n_s, N, br.block_size)
        blocks.extend(loc.reshape(-1, br.block_size))
        gamma_idx.append(loc[..., :br.n_gamma])
        local_off += nloc

    P = sp.csr_matrix((n, n))
    if n_H:
        P = sp.bmat([[sp.csr_matrix(Pv), None], [None, sp.csr_matrix((n - n_H, n - n_H))]],
                    format="csr") if n > n_H else sp.csr_matrix(Pv)
    q = np.zeros(n)
    q[:n_H] = qv
    if G_parts:
        G = sp.vstack(G_parts, format="csr")
        h = np.concatenate(h_parts)
    else:
        G = sp.csr_matrix((0, n))
        h = np.zeros(0)
    inst = qpsolver.QpInstance(P, q, G, h, tuple(blocks) if blocks else None)
    gam = np.stack(gamma_idx) if gamma_idx else np.zeros((0, 0, N, 0), dtype=int)
    return QpProblem(inst, const, n_H, lam_idx, s_idx, gam, N, n_u, n_y, bounds, brs)


def solve_policy(problem: QpProblem, tol: float = 1e-6, max_iter: int = 200) -> PolicySolution:
    res = qpsolver.solve(problem.instance, tol=tol, max_iter=max_iter)
    policy = None
    if res.status == qpsolver.OPTIMAL:
        policy = PobPolicy.from_free(res.z[:problem.n_H], problem.N, problem.n_u, problem.n_y)
    return PolicySolution(
        policy=policy,
        lam=res.z[problem.lam_idx],
        s=res.z[problem.s_idx] if problem.s_idx.size else np.zeros((0, 0)),
        objective_value=res.objective + problem.const if res.status == qpsolver.OPTIMAL else math.nan,
        status=res.status,
        result=res,
    )


def synthesize(stacked: StackedHorizon, weights: CostWeights, moments: DisturbanceMoments,
               bounds: Sequence[StateBound], ambiguity: Optional[AmbiguitySet],
               n_u: int, n_y: int, tol: float = 1e-6, max_iter: int = 200) -> PolicySolution:
    """Assemble and solve in one call."""
    problem = assemble(stacked, weights, moments, bounds, ambiguity, n_u, n_y)
    return solve_policy(problem, tol=tol, max_iter=max_iter)


def worst_case_value(stacked: StackedHorizon, policy: PobPolicy, bound: StateBound,
                     ambiguity: AmbiguitySet, n_x: int, tol: float = 1e-9):
    """Least ``eps*lambda + mean(s)`` admitted by the constraint rows at fixed ``H``.

    Returns ``(value, QpResult)``; the value is the reformulated worst-case
    expectation of the bounded quantity.
    """
    br = constraint_rows(stacked, bound, ambiguity, n_x, policy.n_u, policy.n_y)
    vH = policy.free_values()
    G = br.G.tocsc()
    rest = G[:, br.n_H:]
    h = br.h - G[:, :br.n_H] @ vH
    q = br.budget[br.n_H:]
    n = rest.shape[1]
    first_local = 1 + br.n_samples
    blocks = [np.arange(first_local + k * br.block_size, first_local + (k + 1) * br.block_size)
              for k in range(br.n_samples * br.N)]
    inst = qpsolver.QpInstance(sp.csr_matrix((n, n)), q, rest.tocsr(), h, tuple(blocks))
    res = qpsolver.solve(inst, tol=tol, max_iter=300)
    return res.objective, res


# -- independent oracle -------------------------------------------------------

def _inner_sup_lp(a, b, xi_hat, lam, support, norm):
    """``sup_{xi in support} a'xi + b - lam*||xi - xi_hat||`` by linear programming."""
    from scipy.optimize import linprog

    dim = a.size
    C, d = support.C_xi, support.d_xi
    if norm is GroundNorm.L1:
        # variables [xi, tau], tau_r >= |xi_r - xi_hat_r|
        c = np.concatenate([-a, lam * np.ones(dim)])
        I = np.eye(dim)
        A = np.block([[C, np.zeros((C.shape[0], dim))], [I, -I], [-I, -I]])
        ub = np.concatenate([d, xi_hat, -xi_hat])
    else:
        c = np.concatenate([-a, [lam]])
        I = np.eye(dim)
        one = np.ones((dim, 1))
        A = np.block([[C, np.zeros((C.shape[0], 1))], [I, -one], [-I, -one]])
        ub = np.concatenate([d, xi_hat, -xi_hat])
    res = linprog(c, A_ub=A, b_ub=ub, bounds=(None, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"inner supremum LP failed: {res.message}")
    return -res.fun + b


def _inner_sup_box(a, b, xi_hat, lam, lo, hi, norm):
    if norm is GroundNorm.L1:
        # separable: each coordinate maximised at a bound or at the sample
        cand = np.stack([lo, xi_hat, hi])
        vals = a * cand - lam * np.abs(cand - xi_hat)
        return float(vals.max(axis=0).sum() + b)
    # Linf: best value inside the radius-rho cube is concave in rho, breakpoints
    # are where coordinates hit the box
    dist = np.where(a > 0, hi - xi_hat, np.where(a < 0, xi_hat - lo, 0.0))
    rhos = np.unique(np.concatenate([[0.0], dist]))
    best = -np.inf
    for rho in rhos:
        xi = np.clip(xi_hat + np.sign(a) * rho, lo, hi)
        best = max(best, float(a @ xi - lam * rho))
    return best + b


def worst_case_expectation_oracle(a, b, ambiguity: AmbiguitySet, use_lp: bool = False,
                                  iters: int = 200) -> float:
    """Worst-case expectation of ``max_t a_t'xi + b_t`` over the Wasserstein ball.

    Evaluates ``inf_{lam>=0} lam*eps + mean_i sup_xi (l(xi) - lam*||xi - xi_i||)``
    by golden-section search over ``lam`` (the function is convex). Inner
    suprema are per-piece LPs, or closed forms when the support is a box.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    norm = GroundNorm(ambiguity.ground_norm)
    eps = ambiguity.epsilon
    support = ambiguity.support
    box = None if use_lp else support.box_bounds()

    def inner(lam, xi_hat):
        vals = []
        for at, bt in zip(a, b):
            if box is not None:
                vals.append(_inner_sup_box(at, bt, xi_hat, lam, box[0], box[1], norm))
            else:
                vals.append(_inner_sup_lp(at, bt, xi_hat, lam, support, norm))
        return max(vals)

    def g(lam):
        return lam * eps + float(np.mean([inner(lam, x) for x in ambiguity.samples]))

    # beyond the Lipschitz constant of l the supremum sits at the sample itself
    lam_hi = float(np.max(norm.dual(a, axis=1))) if a.size else 0.0
    if lam_hi == 0.0:
        return g(0.0)
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    lo, hi = 0.0, lam_hi
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1, f2 = g(x1), g(x2)
    best = min(g(lo), g(hi), f1, f2)
    for _ in range(iters):
        if hi - lo <= 1e-12 * lam_hi:
            break
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = g(x1)
            best = min(best, f1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = g(x2)
            best = min(best, f2)
    return best
