"""Self-checks that compare the implementation against independent oracles.

Each check draws random instances from a seeded generator and returns a
:class:`CheckResult`. The same routines back the ``validate`` command and
the acceptance tests.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import qp as qpsolver
from .ambiguity import AmbiguitySet, GroundNorm, PolytopeSupport
from .lti import (LtiSystem, PobPolicy, apply_policy, build_stacked, causal_mask,
                  policy_to_disturbance_form, rollout)
from .reform import (CostWeights, DisturbanceMoments, StateBound, affine_pieces, assemble,
                     solve_policy, worst_case_expectation_oracle, worst_case_value)


@dataclass
class CheckResult:
    name: str
    passed: bool
    metric: float
    tol: float
    detail: str = ""
    kkt_max: float = 0.0
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"[{flag}] {self.name}: metric={self.metric:.3g} tol={self.tol:.3g} "
                f"({self.seconds:.1f}s) {self.detail}").rstrip()


def random_system(rng, n_x, n_u, n_y, n_w, radius=0.95) -> LtiSystem:
    A = rng.standard_normal((n_x, n_x))
    rho = max(abs(np.linalg.eigvals(A)))
    A *= radius / max(rho, 1e-12)
    return LtiSystem(A, rng.standard_normal((n_x, n_u)), rng.standard_normal((n_x, n_w)),
                     rng.standard_normal((n_y, n_x)), rng.standard_normal((n_y, n_w)))


def random_policy(rng, N, n_u, n_y, scale=1.0) -> PobPolicy:
    H = rng.standard_normal((N * n_u, 1 + N * n_y)) * scale
    H[~causal_mask(N, n_u, n_y)] = 0.0
    return PobPolicy(H, N, n_u, n_y)


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def check_stacked_dynamics(n_cases=100, seed=0, tol=1e-9) -> CheckResult:
    """Stacked prediction against a step-by-step rollout."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        n_x, n_u, n_y, n_w = rng.integers(1, 5), rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
        N = int(rng.integers(1, 7))
        sys = random_system(rng, n_x, n_u, n_y, n_w)
        x0 = rng.standard_normal(n_x)
        u = rng.standard_normal((N, n_u))
        w = rng.standard_normal((N, n_w))
        st = build_stacked(sys, N, x0)
        xs, _ = rollout(sys, x0, u, w)
        worst = max(worst, float(np.max(np.abs(st.predict(u, w) - xs.ravel()))))
    return CheckResult("stacked dynamics vs rollout", worst <= tol, worst, tol,
                       f"{n_cases} systems")


@_timed
def check_policy_equivalence(n_cases=50, seed=1, tol=1e-9) -> CheckResult:
    """Purified-output law in closed loop against ``u = Htilde [1, w]``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        n_x, n_u, n_y, n_w = rng.integers(1, 5), rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
        N = int(rng.integers(1, 7))
        sys = random_system(rng, n_x, n_u, n_y, n_w)
        pol = random_policy(rng, N, n_u, n_y)
        x0 = rng.standard_normal(n_x)
        xhat0 = rng.standard_normal(n_x) if rng.random() < 0.5 else np.zeros(n_x)
        w = rng.standard_normal((N, n_w))

        # purified-output law, simulated step by step
        x, xhat = x0.copy(), xhat0.copy()
        hist, xs, us = [], [x0.copy()], []
        for t in range(N):
            y = sys.output(x, w[t])
            hist.append(y - sys.D @ xhat)
            u = apply_policy(pol, hist, t)
            x = sys.step(x, u, w[t])
            xhat = sys.A @ xhat + sys.B @ u
            xs.append(x.copy())
            us.append(u)
        # disturbance-affine form
        st = build_stacked(sys, N, x0, xhat0=xhat0)
        Ht = policy_to_disturbance_form(pol, st)
        wt = np.concatenate([[1.0], w.ravel()])
        u_aff = Ht @ wt
        x_aff = (st.B_x @ Ht + st.Ctilde_x) @ wt
        err = max(np.max(np.abs(u_aff - np.ravel(us))), np.max(np.abs(x_aff - np.ravel(xs))))
        worst = max(worst, float(err))
    return CheckResult("purified-output law vs disturbance-affine law", worst <= tol, worst, tol,
                       f"{n_cases} policies")


def small_instance(rng, N=2, n_w=1, max_samples=3, bound=3.0, norm=None, n_x=None):
    """Random small plant, ambiguity set and bound for oracle comparisons."""
    n_x = int(rng.integers(1, 4)) if n_x is None else n_x
    sys = random_system(rng, n_x, 1, 1, n_w)
    x0 = rng.standard_normal(n_x)
    st = build_stacked(sys, N, x0)
    n_s = int(rng.integers(1, max_samples + 1))
    xi = rng.uniform(-bound, bound, (n_s, N * n_w))
    if norm is None:
        norm = GroundNorm.L1 if rng.random() < 0.5 else GroundNorm.LINF
    bnd = StateBound(int(rng.integers(0, n_x)), float(rng.standard_normal()),
                     "upper" if rng.random() < 0.5 else "lower")
    return sys, st, xi, PolytopeSupport.box(N * n_w, bound), norm, bnd


@_timed
def check_duality(n_cases=25, seed=2, tol=1e-4) -> CheckResult:
    """Reformulated worst-case value at fixed ``H`` against the direct oracle."""
    rng = np.random.default_rng(seed)
    worst, kkt = 0.0, 0.0
    for _ in range(n_cases):
        sys, st, xi, sup, norm, bnd = small_instance(rng)
        pol = random_policy(rng, st.N, 1, 1)
        eps = float(rng.choice([0.0, rng.uniform(0.01, 3.0)]))
        amb = AmbiguitySet(xi, eps, sup, norm)
        val, res = worst_case_value(st, pol, bnd, amb, sys.n_x)
        a, b = affine_pieces(st, policy_to_disturbance_form(pol, st), bnd, sys.n_x)
        oracle = worst_case_expectation_oracle(a, b, amb)
        worst = max(worst, abs(val - oracle))
        kkt = max(kkt, max(res.kkt_relative))
    return CheckResult("reformulation vs worst-case oracle", worst <= tol, worst, tol,
                       f"{n_cases} instances", kkt_max=kkt)


@_timed
def check_epsilon_limits(n_cases=25, seed=2, tol0=1e-6, tol_inf=1e-5) -> CheckResult:
    """Zero radius gives the sample average; a radius beyond the support
    diameter gives the worst case over the support vertices."""
    rng = np.random.default_rng(seed)
    worst0 = worst_inf = kkt = 0.0
    for _ in range(n_cases):
        sys, st, xi, sup, norm, bnd = small_instance(rng)
        pol = random_policy(rng, st.N, 1, 1)
        a, b = affine_pieces(st, policy_to_disturbance_form(pol, st), bnd, sys.n_x)
        loss = lambda X: np.max(X @ a.T + b, axis=1)
        saa = float(np.mean(loss(xi)))
        robust = float(np.max(loss(sup.vertices())))
        v0, r0 = worst_case_value(st, pol, bnd, AmbiguitySet(xi, 0.0, sup, norm), sys.n_x,
                                  tol=1e-11)
        big = sup.diameter(norm) * 1.5
        vi, ri = worst_case_value(st, pol, bnd, AmbiguitySet(xi, big, sup, norm), sys.n_x,
                                  tol=1e-11)
        worst0 = max(worst0, abs(v0 - saa))
        worst_inf = max(worst_inf, abs(vi - robust))
        kkt = max(kkt, max(r0.kkt_relative), max(ri.kkt_relative))
    ok = worst0 <= tol0 and worst_inf <= tol_inf
    return CheckResult("radius limits (sample average / robust max)", ok, max(worst0, worst_inf),
                       tol_inf, f"eps=0 err {worst0:.2e} (tol {tol0:g}), "
                       f"eps>=diam err {worst_inf:.2e} (tol {tol_inf:g})", kkt_max=kkt)


def _monotone_instance(rng):
    N, n_w = 2, 1
    sys = random_system(rng, 2, 1, 1, n_w)
    x0 = rng.standard_normal(2) * 2.0
    st = build_stacked(sys, N, x0)
    sup = PolytopeSupport.box(N * n_w, 3.0)
    xi = rng.uniform(-3, 3, (3, N * n_w))
    idx = int(rng.integers(0, 2))
    # bound set at the robust value of the zero policy so every radius is feasible
    zero = PobPolicy.zeros(N, 1, 1)
    probe = StateBound(idx, 0.0, "upper")
    a, b = affine_pieces(st, policy_to_disturbance_form(zero, st), probe, 2)
    robust = float(np.max(np.max(sup.vertices() @ a.T + b, axis=1)))
    bnd = StateBound(idx, robust, "upper")
    weights = CostWeights(np.eye(2), 2 * np.eye(2), np.eye(1))
    moments = DisturbanceMoments.iid([0.0], [[1.0]], N)
    return sys, st, xi, sup, bnd, weights, moments


@_timed
def check_epsilon_monotone(n_cases=10, seed=3, radii=(0.0, 0.1, 1.0, 10.0),
                           slack=1e-7) -> CheckResult:
    """Optimal cost and worst-case value are nondecreasing in the radius."""
    rng = np.random.default_rng(seed)
    worst_drop, kkt, statuses = 0.0, 0.0, []
    for _ in range(n_cases):
        sys, st, xi, sup, bnd, weights, moments = _monotone_instance(rng)
        pol = random_policy(rng, st.N, 1, 1)
        objs, wcs = [], []
        for eps in radii:
            amb = AmbiguitySet(xi, eps, sup, GroundNorm.L1)
            sol = solve_policy(assemble(st, weights, moments, [bnd], amb, 1, 1), tol=1e-9)
            statuses.append(sol.status)
            kkt = max(kkt, max(sol.result.kkt_relative))
            objs.append(sol.objective_value)
            val, res = worst_case_value(st, pol, bnd, amb, sys.n_x, tol=1e-10)
            kkt = max(kkt, max(res.kkt_relative))
            wcs.append(val)
        for seq in (objs, wcs):
            drops = [seq[i] - seq[i + 1] for i in range(len(seq) - 1)]
            worst_drop = max(worst_drop, max(drops))
    ok = worst_drop <= slack and all(s == qpsolver.OPTIMAL for s in statuses)
    return CheckResult("monotonicity in the radius", ok, max(worst_drop, 0.0), slack,
                       f"{n_cases} instances, radii {list(radii)}", kkt_max=kkt)


def contradictory_bounds_instance(seed=4):
    """Upper and lower bound on the same state that cannot both hold."""
    rng = np.random.default_rng(seed)
    N = 2
    sys = random_system(rng, 2, 1, 1, 1)
    st = build_stacked(sys, N, rng.standard_normal(2))
    sup = PolytopeSupport.box(N, 3.0)
    amb = AmbiguitySet(rng.uniform(-3, 3, (2, N)), 0.5, sup, GroundNorm.L1)
    bounds = [StateBound(0, -1.0, "upper"), StateBound(0, 1.0, "lower")]
    weights = CostWeights(np.eye(2), np.eye(2), np.eye(1))
    moments = DisturbanceMoments.iid([0.0], [[1.0]], N)
    return assemble(st, weights, moments, bounds, amb, 1, 1)


def certificate_valid(inst: qpsolver.QpInstance, cert, tol=1e-6) -> bool:
    """Farkas: ``y >= 0``, ``G'y = 0`` and ``h'y < 0``."""
    if cert is None:
        return False
    y = np.asarray(cert, dtype=float)
    scale = max(1.0, float(np.max(np.abs(inst.G.data))) if inst.G.nnz else 1.0)
    return bool(np.all(y >= -tol) and np.max(np.abs(inst.G.T @ y)) <= tol * scale
                and inst.h @ y < 0)


@_timed
def check_infeasibility(seed=4) -> CheckResult:
    """Contradictory constraints must be reported with a valid certificate."""
    plain = qpsolver.QpInstance(np.eye(2), np.zeros(2),
                                np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([0.0, -1.0]))
    problems = [plain, contradictory_bounds_instance(seed).instance]
    ok, details = True, []
    for inst in problems:
        res = qpsolver.solve(inst)
        good = res.status == qpsolver.PRIMAL_INFEASIBLE and certificate_valid(inst, res.certificate)
        details.append(res.status)
        ok = ok and good
    return CheckResult("infeasibility certificates", ok, 0.0 if ok else 1.0, 0.0,
                       ", ".join(details))


@_timed
def check_performance(limit_s=1.0, seed=5) -> CheckResult:
    """One assembly plus solve on the mass-spring preset with ten samples."""
    from .experiments import ExperimentConfig, sample_disturbance

    cfg = ExperimentConfig.preset("mass_spring")
    sys = cfg.build_system()
    loop = cfg.loop_config(sys.n_w)
    rng = np.random.default_rng(seed)
    xi = sample_disturbance(cfg.disturbance_model(), rng, sys.n_w, size=10 * cfg.N)
    amb = AmbiguitySet(xi.reshape(10, -1), cfg.epsilon, loop.support, loop.ground_norm)
    st = build_stacked(sys, cfg.N, np.asarray(cfg.x0), xhat0=np.asarray(cfg.x0))
    t0 = time.perf_counter()
    prob = assemble(st, loop.weights, loop.moments, loop.bounds, amb, sys.n_u, sys.n_y)
    sol = solve_policy(prob)
    dt = time.perf_counter() - t0
    ok = dt < limit_s and sol.status == qpsolver.OPTIMAL
    return CheckResult("assembly + solve time (N=5, N_s=10)", ok, dt, limit_s,
                       f"status {sol.status}, {sol.result.iterations} iterations",
                       kkt_max=max(sol.result.kkt_relative))


def run_suite(small: bool = False) -> list:
    """All oracle checks; ``small`` shrinks the instance counts."""
    f = 5 if small else 1
    results = [
        check_stacked_dynamics(n_cases=100 // f),
        check_policy_equivalence(n_cases=50 // f),
        check_duality(n_cases=25 // f),
        check_epsilon_limits(n_cases=25 // f),
        check_epsilon_monotone(n_cases=max(10 // f, 2)),
        check_infeasibility(),
        check_performance(),
    ]
    kkt = max(r.kkt_max for r in results)
    results.append(CheckResult("KKT residuals of optimal solves", kkt <= 1e-6, kkt, 1e-6,
                               "max relative residual over the checks above"))
    return results
