"""Convex QP solver for ``min 1/2 z'Pz + q'z  s.t.  Gz <= h``.

Primal-dual interior point with Mehrotra predictor-corrector steps. The
Newton systems are solved through the normal equations ``P + G'DG``. When an
instance declares ``blocks`` (groups of variables that share rows with the
global variables but never with each other) the normal matrix has an arrow
shape and the blocks are eliminated in batch before a dense Cholesky solve on
the remaining global variables. Without blocks every variable is global and
the solve is dense.

Infeasibility is reported with a Farkas certificate ``y >= 0, G'y = 0,
h'y < 0`` obtained from a phase-one LP when the main iteration stalls.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import DimensionError, SolverError

OPTIMAL = "optimal"
PRIMAL_INFEASIBLE = "primal_infeasible"
MAX_ITER = "max_iter"

_DIVERGENCE = 1e13


@dataclass(frozen=True)
class QpInstance:
    """Problem data. ``P`` and ``G`` may be dense arrays or scipy sparse."""

    P: object
    q: np.ndarray
    G: object
    h: np.ndarray
    blocks: Optional[tuple] = None

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).ravel()
        h = np.asarray(self.h, dtype=float).ravel()
        n, m = q.size, h.size
        P = sp.csr_matrix(self.P, dtype=float) if self.P is not None else sp.csr_matrix((n, n))
        G = sp.csr_matrix(self.G, dtype=float) if self.G is not None else sp.csr_matrix((m, n))
        if P.shape != (n, n):
            raise DimensionError(f"P must be {n}x{n}, got {P.shape}")
        if G.shape != (m, n):
            raise DimensionError(f"G must be {m}x{n}, got {G.shape}")
        for name, arr in (("P", P.data), ("q", q), ("G", G.data), ("h", h)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains NaN or Inf")
        asym = abs(P - P.T)
        scale = max(1.0, abs(P).max() if P.nnz else 0.0)
        if asym.nnz and asym.max() > 1e-12 * scale:
            raise ValueError("P is not symmetric")
        blocks = None
        if self.blocks is not None:
            blocks = tuple(np.asarray(b, dtype=np.int64) for b in self.blocks if len(b))
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "blocks", blocks)

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.h.size

    def objective(self, z) -> float:
        return float(0.5 * z @ (self.P @ z) + self.q @ z)


@dataclass
class QpResult:
    z: np.ndarray
    duals: np.ndarray
    status: str
    kkt_residuals: tuple
    kkt_relative: tuple
    iterations: int
    objective: float
    certificate: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def check_kkt(inst: QpInstance, z, duals) -> tuple:
    """Absolute residuals ``(stationarity, primal, complementarity)``, inf-norms."""
    z = np.asarray(z, dtype=float).ravel()
    mu = np.asarray(duals, dtype=float).ravel()
    if z.size != inst.n or mu.size != inst.m:
        raise DimensionError("z or duals do not match the instance dimensions")
    stat = inst.P @ z + inst.q + inst.G.T @ mu
    slack = inst.G @ z - inst.h
    return (_inf(stat), _inf(np.maximum(slack, 0.0)), _inf(mu * slack))


def relative_kkt(inst: QpInstance, z, duals) -> tuple:
    """KKT residuals scaled by the magnitude of the terms they balance."""
    z = np.asarray(z, dtype=float).ravel()
    mu = np.asarray(duals, dtype=float).ravel()
    Pz = inst.P @ z
    Gty = inst.G.T @ mu
    Gz = inst.G @ z
    stat, prim, comp = check_kkt(inst, z, mu)
    obj = 0.5 * z @ Pz + inst.q @ z
    return (
        stat / max(1.0, _inf(Pz), _inf(inst.q), _inf(Gty)),
        prim / max(1.0, _inf(Gz), _inf(inst.h)),
        comp / max(1.0, abs(obj)),
    )


def _inf(v) -> float:
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


class _Normal:
    """Factorization of ``P + G' diag(d) G`` exploiting declared local blocks."""

    def __init__(self, inst: QpInstance):
        n, m = inst.n, inst.m
        self.n, self.m = n, m
        self.P = inst.P
        self.G = inst.G
        blocks = inst.blocks or ()
        col_block = np.full(n, -1, dtype=np.int64)
        for b, cols in enumerate(blocks):
            if np.any(col_block[cols] >= 0):
                raise ValueError("variable blocks overlap")
            col_block[cols] = b
        if blocks:
            P_coo = inst.P.tocoo()
            touched = (col_block[P_coo.row] >= 0) | (col_block[P_coo.col] >= 0)
            if np.any(touched & (P_coo.data != 0)):
                blocks = ()
                col_block[:] = -1
        Gc = inst.G.tocoo()
        row_block = np.full(m, -1, dtype=np.int64)
        if blocks:
            cb = col_block[Gc.col]
            loc = cb >= 0
            np.maximum.at(row_block, Gc.row[loc], cb[loc])
            low = np.full(m, np.iinfo(np.int64).max)
            np.minimum.at(low, Gc.row[loc], cb[loc])
            clash = (row_block >= 0) & (low != row_block)
            if np.any(clash):
                raise ValueError("a constraint row couples two different variable blocks")

        self.glob = np.flatnonzero(col_block < 0)
        n_g = self.glob.size
        gpos = np.full(n, -1, dtype=np.int64)
        gpos[self.glob] = np.arange(n_g)

        Pd = inst.P.toarray() if n_g == n else inst.P[self.glob][:, self.glob].toarray()
        self.P_gg = Pd

        self.rows0 = np.flatnonzero(row_block < 0)
        G0 = inst.G[self.rows0]
        self.G0 = G0[:, self.glob].toarray() if n_g < n else G0.toarray()

        # batch blocks of equal shape
        self.groups = []
        if blocks:
            shapes = {}
            for b, cols in enumerate(blocks):
                rows = np.flatnonzero(row_block == b)
                shapes.setdefault((rows.size, cols.size), []).append((b, rows, cols))
            for (r, l), items in shapes.items():
                nb = len(items)
                R = np.array([it[1] for it in items])
                L = np.array([np.sort(it[2]) for it in items])
                Gl = np.zeros((nb, r, l))
                Gg = np.zeros((nb, r, n_g))
                # position of each row / local column inside its block
                rpos = np.empty(m, dtype=np.int64)
                rpos[R.ravel()] = np.tile(np.arange(r), nb)
                lpos = np.full(n, -1, dtype=np.int64)
                lpos[L.ravel()] = np.tile(np.arange(l), nb)
                bidx = np.full(len(blocks), -1, dtype=np.int64)
                bidx[[it[0] for it in items]] = np.arange(nb)
                rb = row_block[Gc.row]
                sel = rb >= 0
                sel[sel] = bidx[rb[sel]] >= 0
                rr, cc, vv = Gc.row[sel], Gc.col[sel], Gc.data[sel]
                bb = bidx[row_block[rr]]
                isloc = col_block[cc] >= 0
                np.add.at(Gl, (bb[isloc], rpos[rr[isloc]], lpos[cc[isloc]]), vv[isloc])
                np.add.at(Gg, (bb[~isloc], rpos[rr[~isloc]], gpos[cc[~isloc]]), vv[~isloc])
                # rows touching a single local column and no global one only add
                # to the diagonal of the local block; keep them out of the QR
                single = (np.count_nonzero(Gl, axis=2) == 1) & ~np.any(Gg != 0, axis=2)
                if np.all(single == single[0]) and single[0].any():
                    keep = ~single[0]
                    Gd = Gl[:, single[0], :]
                    grp = dict(R=R[:, keep], L=L, Gl=Gl[:, keep], Gg=Gg[:, keep],
                               Rd=R[:, single[0]], Dcol=np.argmax(np.abs(Gd), axis=2),
                               Dval=np.take_along_axis(Gd, np.argmax(np.abs(Gd), axis=2)[..., None],
                                                       axis=2)[..., 0] ** 2)
                else:
                    grp = dict(R=R, L=L, Gl=Gl, Gg=Gg, Rd=None)
                self.groups.append(grp)

    def factor(self, d: np.ndarray, reg_rel: float = 1e-13):
        d0 = d[self.rows0]
        M = self.P_gg + self.G0.T @ (self.G0 * d0[:, None])
        for g in self.groups:
            ds = np.sqrt(d[g["R"]])[..., None]
            A = g["Gl"] * ds                                 # (b, r, l)
            Y = g["Gg"] * ds                                 # (b, r, n_g)
            nb, r, l = A.shape
            diag = np.zeros((nb, l))
            if g["Rd"] is not None:
                np.add.at(diag, (np.arange(nb)[:, None], g["Dcol"]), g["Dval"] * d[g["Rd"]])
            scale2 = np.maximum(np.maximum((A ** 2).max(axis=(1, 2)), diag.max(axis=1)), 1.0)
            ridge = np.zeros((nb, l, l))
            idx = np.arange(l)
            ridge[:, idx, idx] = np.sqrt(diag + reg_rel * scale2[:, None])
            Aa = np.concatenate([A, ridge], axis=1)
            Ya = np.concatenate([Y, np.zeros((nb, l, Y.shape[2]))], axis=1)
            Qf, Rf = np.linalg.qr(Aa, mode="complete")
            QtY = np.matmul(Qf.transpose(0, 2, 1), Ya)
            Z = QtY[:, l:, :]
            # block contribution Y'(I - proj)Y as a Gram matrix: PSD by construction
            M += np.einsum("bki,bkj->ij", Z, Z, optimize=True)
            Rinv = np.linalg.inv(Rf[:, :l, :])
            g["Rinv"] = Rinv
            g["W"] = QtY[:, :l, :]                            # Q1' Y, so Mlg = R' W
            g["X"] = np.matmul(Rinv, g["W"])                   # Mll^{-1} Mlg
        self.d = d
        if M.size:
            M = 0.5 * (M + M.T)
            sc = 1.0 / np.sqrt(_diag_floor(np.diag(M).copy()))
            Ms = M * sc[:, None] * sc[None, :]
            self.sc = sc
            for shift in (reg_rel, 1e-10, 1e-8, 1e-6):
                Mt = Ms.copy()
                Mt[np.diag_indices_from(Mt)] += shift
                try:
                    self.cho = sla.cho_factor(Mt, lower=True, check_finite=False)
                    break
                except np.linalg.LinAlgError:
                    continue
            else:
                raise np.linalg.LinAlgError("normal matrix is not positive definite")
        return self

    def _solve_reg(self, r):
        x = np.empty_like(r)
        rg = r[self.glob].copy()
        tmp = []
        for g in self.groups:
            # t = Mll^{-1} r_l and Mlg' t = W' Rinv' r_l
            u = np.matmul(g["Rinv"].transpose(0, 2, 1), r[g["L"]][..., None])
            rg -= np.einsum("bki,bk->i", g["W"], u[..., 0])
            tmp.append(np.matmul(g["Rinv"], u)[..., 0])
        xg = self.sc * sla.cho_solve(self.cho, self.sc * rg, check_finite=False) if rg.size else rg
        x[self.glob] = xg
        for g, t in zip(self.groups, tmp):
            x[g["L"]] = t - np.matmul(g["X"], xg)
        return x

    def apply(self, x):
        return self.P @ x + self.G.T @ (self.d * (self.G @ x))

    def solve(self, r, refine: int = 3):
        x = self._solve_reg(r)
        for _ in range(refine):
            res = r - self.apply(x)
            if _inf(res) <= 1e-15 * max(1.0, _inf(r)):
                break
            x += self._solve_reg(res)
        return x


def _diag_floor(diag):
    """Diagonal entries floored away from zero, for use as scaling factors."""
    top = np.max(diag, axis=-1, keepdims=True) if diag.size else 1.0
    return np.maximum(diag, np.maximum(top, 1.0) * 1e-30)


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _certificate_ok(inst: QpInstance, y, tol) -> bool:
    hy = float(inst.h @ y)
    if not hy < 0:
        return False
    yn = y / -hy
    scale = max(1.0, _inf(inst.G.data) if inst.G.nnz else 0.0)
    return _inf(inst.G.T @ yn) <= tol * scale and np.all(yn >= 0)


def solve(inst: QpInstance, tol: float = 1e-6, max_iter: int = 200) -> QpResult:
    """Solve the QP to relative KKT tolerance ``tol``.

    Returns a :class:`QpResult` whose ``status`` is ``"optimal"``,
    ``"primal_infeasible"`` (with ``certificate``) or ``"max_iter"``.
    """
    try:
        return _solve(inst, tol, max_iter)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"linear algebra failure in the interior-point solver: {exc}") from exc


def _solve(inst: QpInstance, tol: float, max_iter: int) -> QpResult:
    if not tol > 0:
        raise ValueError("tol must be positive")
    n, m = inst.n, inst.m
    if m == 0:
        return _solve_unconstrained(inst, tol)

    normal = _Normal(inst)
    P, G, q, h = inst.P, inst.G, inst.q, inst.h

    normal.factor(np.ones(m))
    z = normal.solve(-q + G.T @ h)
    s = h - G @ z
    y = -s.copy()
    shift = -np.min(s)
    if shift >= 0:
        s += 1.0 + shift
    shift = -np.min(y)
    if shift >= 0:
        y += 1.0 + shift

    status = MAX_ITER
    it = 0
    for it in range(1, max_iter + 1):
        Gz = G @ z
        r_p = Gz + s - h
        r_d = P @ z + q + G.T @ y
        mu = float(s @ y) / m
        if max(relative_kkt(inst, z, y)) <= tol and _inf(r_p) <= tol * max(1.0, _inf(h), _inf(Gz)):
            status = OPTIMAL
            it -= 1
            break
        if _certificate_ok(inst, y, 1e-9):
            return _infeasible(inst, z, y, it)
        if max(_inf(z), _inf(y)) > _DIVERGENCE:
            break

        d = y / s
        normal.factor(d)

        # predictor
        rhs = -r_d - G.T @ (d * r_p - y)
        dz = normal.solve(rhs)
        ds = -r_p - G @ dz
        dy = d * (G @ dz + r_p) - y
        alpha = min(_max_step(s, ds), _max_step(y, dy))
        mu_aff = float((s + alpha * ds) @ (y + alpha * dy)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0

        # corrector
        r_c = s * y + ds * dy - sigma * mu
        rhs = -r_d - G.T @ (d * r_p - r_c / s)
        dz = normal.solve(rhs)
        ds = -r_p - G @ dz
        dy = d * (G @ dz + r_p) - r_c / s
        alpha = min(1.0, 0.99 * min(_max_step(s, ds), _max_step(y, dy)))

        z = z + alpha * dz
        s = s + alpha * ds
        y = y + alpha * dy
        s = np.maximum(s, 1e-300)
        y = np.maximum(y, 1e-300)

    if status == OPTIMAL:
        return QpResult(z, y, OPTIMAL, check_kkt(inst, z, y), relative_kkt(inst, z, y),
                        it, inst.objective(z))
    cert = _phase_one(inst, tol)
    if cert is not None:
        return _infeasible(inst, z, y, it, cert)
    return QpResult(z, y, MAX_ITER, check_kkt(inst, z, y), relative_kkt(inst, z, y),
                    it, inst.objective(z))


def _infeasible(inst, z, y, it, cert=None) -> QpResult:
    if cert is None:
        cert = y / -float(inst.h @ y)
    return QpResult(z, y, PRIMAL_INFEASIBLE, check_kkt(inst, z, y), relative_kkt(inst, z, y),
                    it, float("nan"), certificate=cert)


def _phase_one(inst: QpInstance, tol: float):
    """Certificate from ``min t s.t. Gz - t <= h, -t <= 1``; ``None`` if feasible."""
    n, m = inst.n, inst.m
    G1 = sp.bmat([[inst.G, -np.ones((m, 1))], [None, -np.ones((1, 1))]], format="csr")
    h1 = np.concatenate([inst.h, [1.0]])
    q1 = np.zeros(n + 1)
    q1[-1] = 1.0
    aux = QpInstance(sp.csr_matrix((n + 1, n + 1)), q1, G1, h1, inst.blocks)
    res = solve(aux, tol=min(tol, 1e-9), max_iter=200)
    if res.status != OPTIMAL:
        return None
    t = res.z[-1]
    if t <= 1e-7 * max(1.0, _inf(inst.h)):
        return None
    y = res.duals[:m]
    hy = float(inst.h @ y)
    if not hy < 0:
        return None
    return np.maximum(y, 0.0) / -hy


def _solve_unconstrained(inst: QpInstance, tol: float) -> QpResult:
    P = inst.P.toarray()
    z, *_ = np.linalg.lstsq(P, -inst.q, rcond=None)
    y = np.zeros(0)
    rel = relative_kkt(inst, z, y)
    status = OPTIMAL if max(rel) <= tol else MAX_ITER
    return QpResult(z, y, status, check_kkt(inst, z, y), rel, 1, inst.objective(z))


# -- plain-text instance dump -------------------------------------------------

def _write_section(fh, name, M):
    M = sp.coo_matrix(M)
    fh.write(f"{name} {M.shape[0]} {M.shape[1]}\n")
    order = np.lexsort((M.col, M.row))
    for r, c, v in zip(M.row[order], M.col[order], M.data[order]):
        fh.write(f"{r} {c} {v:.17g}\n")


def dump_instance(inst: QpInstance, path, header: Optional[dict] = None) -> tuple:
    """Write ``<path>.json`` (layout header) and ``<path>.triplets``.

    The triplet file holds sections ``P``, ``q``, ``G``, ``h``; each starts with
    ``<name> <rows> <cols>`` followed by ``r c value`` lines (0-based).
    """
    path = Path(path)
    meta = {"n": inst.n, "m": inst.m}
    if inst.blocks is not None:
        meta["blocks"] = [b.tolist() for b in inst.blocks]
    if header:
        meta.update(header)
    jpath = path.with_suffix(".json")
    tpath = path.with_suffix(".triplets")
    jpath.write_text(json.dumps(meta, sort_keys=True) + "\n")
    with open(tpath, "w") as fh:
        _write_section(fh, "P", inst.P)
        _write_section(fh, "q", inst.q[:, None])
        _write_section(fh, "G", inst.G)
        _write_section(fh, "h", inst.h[:, None])
    return jpath, tpath


def load_instance(path) -> tuple:
    """Read an instance written by :func:`dump_instance`; returns ``(inst, header)``."""
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    sections = {}
    current = None
    with open(path.with_suffix(".triplets")) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0].isalpha():
                current = parts[0]
                sections[current] = (int(parts[1]), int(parts[2]), [])
            else:
                sections[current][2].append((int(parts[0]), int(parts[1]), float(parts[2])))

    def mat(name):
        rows, cols, trip = sections[name]
        if trip:
            r, c, v = zip(*trip)
        else:
            r, c, v = (), (), ()
        return sp.coo_matrix((v, (r, c)), shape=(rows, cols)).tocsr()

    inst = QpInstance(mat("P"), mat("q").toarray().ravel(), mat("G"),
                      mat("h").toarray().ravel(), header.get("blocks"))
    return inst, header
