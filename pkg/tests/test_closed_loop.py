import csv

import numpy as np
import pytest

from drmpc import closed_loop as cl
from drmpc import qp as qpsolver
from drmpc.ambiguity import DisturbanceStore, PolytopeSupport
from drmpc.closed_loop import (LoopConfig, LoopState, estimate_disturbance, run_episode, step)
from drmpc.errors import ConfigError, InsufficientDataError, SolverError
from drmpc.experiments import ExperimentConfig, mass_spring_system, sample_disturbance
from drmpc.lti import LtiSystem
from drmpc.reform import CostWeights, DisturbanceMoments, StateBound
from drmpc.validation import random_system


def mass_spring_loop(**kw):
    cfg = ExperimentConfig.preset("mass_spring", **kw)
    sys = cfg.build_system()
    return cfg, sys, cfg.loop_config(sys.n_w)


def seeded_store(cfg, sys, rng, n_windows=1):
    return DisturbanceStore(sys.n_w, sample_disturbance(cfg.disturbance_model(), rng, sys.n_w,
                                                        size=n_windows * cfg.N))


def test_equilibrium_without_disturbance():
    cfg, sys, loop = mass_spring_loop()
    store = DisturbanceStore(sys.n_w, np.zeros((cfg.N, sys.n_w)))
    log = run_episode(loop, sys, np.zeros(2), 15, np.zeros((15, 2)), store=store, clock=None)
    assert all(s == qpsolver.OPTIMAL for s in log.statuses)
    np.testing.assert_allclose(log.states, 0.0, atol=1e-8)
    np.testing.assert_allclose(log.inputs, 0.0, atol=1e-8)
    assert log.realized_cost(loop.weights) == pytest.approx(0.0, abs=1e-12)


def test_inputs_equal_affine_terms_when_outputs_are_quiet():
    cfg, sys, loop = mass_spring_loop(x0=[-1.0, 0.0])
    rng = np.random.default_rng(0)
    state = LoopState.initial(sys, cfg.x0, seeded_store(cfg, sys, rng))
    for _ in range(4):
        rec = step(state, sys, loop, np.zeros(2), clock=None)
        # with w = 0 the purified output is zero, so u is the affine part of row 0
        assert np.allclose(rec.v, 0.0, atol=1e-12)
        np.testing.assert_allclose(rec.u, state.policy.h[0], atol=1e-12)


def test_every_step_resolves_with_unit_period():
    cfg, sys, loop = mass_spring_loop()
    rng = np.random.default_rng(1)
    state = LoopState.initial(sys, cfg.x0, seeded_store(cfg, sys, rng))
    for k in range(6):
        rec = step(state, sys, loop, sample_disturbance(cfg.disturbance_model(), rng, 2),
                   clock=None)
        assert rec.status == qpsolver.OPTIMAL
        assert state.t_law == k
        assert len(state.history) == 1


def test_reuse_between_updates():
    cfg, sys, loop = mass_spring_loop(N_u=3)
    rng = np.random.default_rng(2)
    log = run_episode(loop, sys, cfg.x0, 7,
                      sample_disturbance(cfg.disturbance_model(), rng, 2, size=7),
                      store=seeded_store(cfg, sys, rng), clock=None)
    assert log.statuses == ["optimal", "reused", "reused"] * 2 + ["optimal"]


def test_purified_output_tracks_deviation_recursion():
    """v_t = D delta_t + E w_t with delta+ = A delta + C w, reset at each update."""
    cfg, sys, loop = mass_spring_loop(N_u=3)
    rng = np.random.default_rng(3)
    W = sample_disturbance(cfg.disturbance_model(), rng, 2, size=9)
    log = run_episode(loop, sys, cfg.x0, 9, W, store=seeded_store(cfg, sys, rng), clock=None)
    delta = np.zeros(2)
    for k, rec in enumerate(log.records):
        if rec.status == qpsolver.OPTIMAL:
            delta = np.zeros(2)
        np.testing.assert_allclose(rec.v, sys.D @ delta + sys.E @ W[k], atol=1e-12)
        delta = sys.A @ delta + sys.C @ W[k]


def test_estimator_exact_on_random_plants():
    rng = np.random.default_rng(4)
    for _ in range(20):
        sys = random_system(rng, 3, 1, 2, 2)
        x, u, w = rng.standard_normal(3), rng.standard_normal(1), rng.standard_normal(2)
        w_hat = estimate_disturbance(sys, x, u, sys.step(x, u, w), y_k=sys.output(x, w))
        np.testing.assert_allclose(w_hat, w, atol=1e-10)


def test_estimator_mass_spring_rescales():
    sys = mass_spring_system()
    x, u, w = np.array([0.3, -0.1]), np.array([0.5]), np.array([2.5, -1.7])
    w_hat = estimate_disturbance(sys, x, u, sys.step(x, u, w), y_k=sys.output(x, w))
    np.testing.assert_allclose(w_hat, w, atol=1e-10)
    # the state residual alone carries 1e-3 * w1 in the position entry
    r = sys.step(x, u, w) - sys.A @ x - sys.B @ u
    assert r[0] == pytest.approx(1e-3 * w[0])


def test_estimator_zero_residual():
    sys = mass_spring_system()
    x, u = np.array([1.0, 2.0]), np.array([0.1])
    w_hat = estimate_disturbance(sys, x, u, sys.step(x, u, np.zeros(2)), y_k=sys.D @ x)
    np.testing.assert_allclose(w_hat, 0.0, atol=1e-12)   # roundoff times the 1e3 gain
    z = np.zeros(2)
    np.testing.assert_array_equal(estimate_disturbance(sys, z, [0.0], z, y_k=[0.0]), 0.0)


def test_estimator_needs_output_when_C_is_rank_deficient():
    sys = mass_spring_system()
    with pytest.raises(ConfigError):
        estimate_disturbance(sys, np.zeros(2), np.zeros(1), np.zeros(2))


def test_store_receives_estimates():
    cfg, sys, loop = mass_spring_loop()
    rng = np.random.default_rng(5)
    W = sample_disturbance(cfg.disturbance_model(), rng, 2, size=6)
    store = seeded_store(cfg, sys, rng)
    run_episode(loop, sys, cfg.x0, 6, W, store=store, clock=None)
    np.testing.assert_allclose(store.snapshot()[-6:], W, atol=1e-9)


def test_zero_steps():
    cfg, sys, loop = mass_spring_loop()
    log = run_episode(loop, sys, cfg.x0, 0, [])
    assert len(log) == 0
    np.testing.assert_array_equal(log.states, [cfg.x0])


def test_insufficient_data():
    cfg, sys, loop = mass_spring_loop()
    with pytest.raises(InsufficientDataError):
        run_episode(loop, sys, cfg.x0, 3, np.zeros((3, 2)), store=DisturbanceStore(2))


def test_short_disturbance_stream():
    cfg, sys, loop = mass_spring_loop()
    store = DisturbanceStore(2, np.zeros((5, 2)))
    with pytest.raises(ValueError, match="ended"):
        run_episode(loop, sys, cfg.x0, 3, np.zeros((2, 2)), store=store)


def test_deterministic_csv(tmp_path):
    cfg, sys, loop = mass_spring_loop()
    texts = []
    for i in range(2):
        rng = np.random.default_rng(6)
        W = sample_disturbance(cfg.disturbance_model(), rng, 2, size=8)
        log = run_episode(loop, sys, cfg.x0, 8, W, store=seeded_store(cfg, sys, rng), clock=None)
        log.to_csv(tmp_path / f"e{i}.csv")
        texts.append((tmp_path / f"e{i}.csv").read_bytes())
    assert texts[0] == texts[1]
    with open(tmp_path / "e0.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["time", "x1", "x2", "u1", "v1", "what1", "what2", "objective",
                      "solver_status", "solve_ms"]


def test_fallback_reuses_policy_then_zero(monkeypatch):
    cfg, sys, loop = mass_spring_loop()
    rng = np.random.default_rng(7)
    state = LoopState.initial(sys, cfg.x0, seeded_store(cfg, sys, rng))
    step(state, sys, loop, np.zeros(2), clock=None)
    policy = state.policy

    def broken(*args, **kwargs):
        raise SolverError("factorization failed")

    monkeypatch.setattr(cl, "_resolve", broken)
    recs = [step(state, sys, loop, np.zeros(2), clock=None) for _ in range(cfg.N + 1)]
    assert all(r.status == cl.SOLVER_ERROR for r in recs)
    assert state.policy is policy
    # offsets 1..N-1 still use the stored law, afterwards the input is zero
    for off, r in enumerate(recs[:cfg.N - 1], start=1):
        hist = state.history[:off + 1]
        assert np.allclose(r.u, policy.H[off, 0] + policy.H[off, 1:off + 2] @ np.ravel(hist))
    np.testing.assert_array_equal(recs[-1].u, 0.0)
    np.testing.assert_array_equal(recs[-2].u, 0.0)


def test_infeasible_solve_falls_back_to_zero_input():
    sys = mass_spring_system()
    N = 3
    bounds = (StateBound(1, -5.0, "upper"), StateBound(1, 5.0, "lower"))
    loop = LoopConfig(N=N, N_u=1, max_samples=1, epsilon=0.5, bounds=bounds,
                      weights=CostWeights(np.eye(2), np.eye(2), np.eye(1)),
                      moments=DisturbanceMoments.iid([0.0, 0.0], np.eye(2), N),
                      support=PolytopeSupport.box(N * 2, 3.0))
    log = run_episode(loop, sys, [0.0, 0.0], 2, np.zeros((2, 2)),
                      store=DisturbanceStore(2, np.zeros((N, 2))), clock=None)
    assert log.statuses == [qpsolver.PRIMAL_INFEASIBLE] * 2
    np.testing.assert_array_equal(log.inputs, 0.0)


def test_realized_cost_by_hand():
    w = CostWeights(np.diag([2.0, 1.0]), np.diag([3.0, 1.0]), np.eye(1) * 4.0, beta=0.5)
    log = cl.EpisodeLog()
    log.records.append(cl.StepRecord(0.0, np.array([1.0, 0.0]), np.array([1.0]), np.zeros(1),
                                     np.zeros(2), 0.0, "optimal", 0.0))
    log.final_state = np.array([0.0, 2.0])
    assert log.realized_cost(w) == pytest.approx(2.0 + 4.0 + 0.5 * 4.0)


@pytest.mark.parametrize("kw", [dict(N_u=5), dict(N_u=0), dict(epsilon=-1.0),
                                dict(max_samples=0), dict(window_stride=0)])
def test_loop_config_validation(kw):
    base = dict(N=5, N_u=1, max_samples=1, epsilon=1.0, bounds=(),
                weights=CostWeights(np.eye(2), np.eye(2), np.eye(1)),
                moments=DisturbanceMoments.iid([0.0], [[1.0]], 5),
                support=PolytopeSupport.box(5, 3.0))
    base.update(kw)
    with pytest.raises(ConfigError):
        LoopConfig(**base)


def test_full_period_allowed_on_request():
    loop = LoopConfig(N=3, N_u=3, max_samples=1, epsilon=1.0, bounds=(),
                      weights=CostWeights(np.eye(1), np.eye(1), np.eye(1)),
                      moments=DisturbanceMoments.iid([0.0], [[1.0]], 3),
                      support=PolytopeSupport.box(3, 3.0), allow_full_period=True)
    assert loop.stride == 3


def test_unidentifiable_disturbance_rejected():
    sys = LtiSystem([[1.0]], [[1.0]], [[1.0, 1.0]], [[1.0]], [[0.0, 0.0]])
    loop = LoopConfig(N=2, N_u=1, max_samples=1, epsilon=1.0, bounds=(),
                      weights=CostWeights(np.eye(1), np.eye(1), np.eye(1)),
                      moments=DisturbanceMoments.iid([0.0, 0.0], np.eye(2), 2),
                      support=PolytopeSupport.box(4, 3.0))
    with pytest.raises(ConfigError):
        run_episode(loop, sys, [0.0], 1, np.zeros((1, 2)), store=DisturbanceStore(2, np.zeros((2, 2))))
