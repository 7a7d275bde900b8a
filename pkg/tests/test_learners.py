import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _instances import random_key_matrices, two_state_env, two_state_km, well_conditioned_saddle
from gesarsa.analysis import mspbe, rate_constants, td_fixed_point
from gesarsa.harness import rng_for
from gesarsa.learners import (
    DIVERGENCE_LIMIT,
    Diagnostics,
    DomainError,
    LearnerState,
    Transition,
    gap_rate_constant,
    averaged_iterates,
    d_measure,
    expected_saddle_step,
    ges_step,
    ges_update,
    make_schedule,
    mspbe_dual_value,
    offline_expected_step,
    primal_dual_gap,
    run_averaged,
    run_episodes,
    step_size_grid,
)


def transition(phi, phi_next, r=0.0, rho=1.0, terminal=False, episode_end=False):
    return Transition(0, 0, r, 0, rho, np.asarray(phi, float), np.asarray(phi_next, float), terminal, episode_end)


class TestGesUpdate:
    def test_golden_step(self):
        """Worked by hand: e = (1.9, .9), delta = 3.6, e.omega = .05, phi.omega = .5."""
        theta, omega, trace = ges_update(
            np.array([1.0, 2.0]), np.array([0.5, -1.0]), np.array([1.0, 1.0]),
            np.array([1.0, 0.0]), np.array([0.0, 2.0]), 1.0, 2.0, 0.1, 0.2, 0.9, 0.5,
        )
        np.testing.assert_allclose(trace, [1.9, 0.9], atol=1e-15)
        np.testing.assert_allclose(omega, [1.768, -0.352], atol=1e-14)
        np.testing.assert_allclose(theta, [1.005, 1.991], atol=1e-15)

    def test_theta_uses_pre_update_omega(self):
        """With omega = 0 the primal variable cannot move on the first step."""
        theta, omega, _ = ges_update(np.ones(2), np.zeros(2), np.zeros(2), np.array([1.0, 0.0]),
                                     np.array([0.0, 1.0]), 5.0, 1.0, 0.5, 0.5, 0.9, 0.9)
        np.testing.assert_array_equal(theta, np.ones(2))
        assert np.any(omega != 0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6))
    def test_batch_matches_single(self, seed):
        rng = np.random.default_rng(seed)
        p = 3
        thetas, omegas = rng.standard_normal((4, p)), rng.standard_normal((4, p))
        alphas, betas = rng.uniform(0.01, 0.1, 4), rng.uniform(0.01, 0.1, 4)
        args = (rng.standard_normal(p), rng.standard_normal(p), rng.standard_normal(p), 0.3, 1.5)
        bt, bo, _ = ges_update(thetas, omegas, *args, alphas, betas, 0.9, 0.7)
        for i in range(4):
            t, o, _ = ges_update(thetas[i], omegas[i], *args, alphas[i], betas[i], 0.9, 0.7)
            np.testing.assert_allclose(bt[i], t, rtol=1e-13, atol=1e-15)
            np.testing.assert_allclose(bo[i], o, rtol=1e-13, atol=1e-15)


class TestGesStep:
    def test_trace_cleared_at_boundaries(self):
        state = LearnerState.zeros(2)
        for flag in ("terminal", "episode_end"):
            tr = transition([1, 0], [0, 1], r=1.0, **{flag: True})
            assert np.all(ges_step(state, tr, 0.1, 0.1, 0.9, 0.9).trace == 0)
        assert np.any(ges_step(state, transition([1, 0], [0, 1]), 0.1, 0.1, 0.9, 0.9).trace != 0)

    def test_terminal_drops_bootstrap(self):
        """At a terminal transition delta = r - theta.phi whatever expected_phi_next holds."""
        state = LearnerState(np.array([1.0, 1.0]), np.zeros(2), np.zeros(2))
        a = ges_step(state, transition([1, 0], [5, 5], r=2.0, terminal=True), 0.1, 0.1, 0.9, 0.0)
        np.testing.assert_allclose(a.omega, 0.1 * (2.0 - 1.0) * np.array([1.0, 0.0]))

    def test_validation(self):
        state = LearnerState.zeros(2)
        with pytest.raises(ValueError, match="positive"):
            ges_step(state, transition([1, 0], [0, 1]), 0.0, 0.1, 0.9, 0.9)
        with pytest.raises(ValueError, match="dimension"):
            ges_step(state, transition([1, 0, 0], [0, 1, 0]), 0.1, 0.1, 0.9, 0.9)

    def test_divergence_flag(self):
        state = LearnerState(np.full(2, 10 * DIVERGENCE_LIMIT), np.zeros(2), np.zeros(2), t=4)
        out = ges_step(state, transition([1, 0], [0, 1]), 0.1, 0.1, 0.9, 0.9)
        assert out.diverged and out.diverged_at == 5


class TestExpectedSteps:
    def test_saddle_step_formula(self):
        rng = np.random.default_rng(0)
        km = random_key_matrices(rng)
        th, w = rng.standard_normal(km.p), rng.standard_normal(km.p)
        out = expected_saddle_step(LearnerState(th, w, np.zeros(km.p)), km, 0.1, 0.2)
        np.testing.assert_allclose(out.omega, w + 0.2 * (km.A @ th + km.b - km.M @ w))
        np.testing.assert_allclose(out.theta, th - 0.1 * km.A.T @ w)
        assert out.t == 1

    def test_saddle_point_is_fixed(self):
        _, km = two_state_km(0.9, 0.5)
        ts = td_fixed_point(km)
        out = expected_saddle_step(LearnerState(ts, np.zeros(2), np.zeros(2)), km, 0.1, 0.2)
        np.testing.assert_allclose(out.theta, ts, atol=1e-12)
        np.testing.assert_allclose(out.omega, 0.0, atol=1e-12)

    def test_offline_step(self):
        _, km = two_state_km(0.999, 0.99, reward=((0.0, 0.0), (0.0, 0.0)))
        out = offline_expected_step([1.0, 0.0], km, 0.1)
        assert out[0] == pytest.approx(1 + 0.1 * km.A[0, 0])
        assert out[1] == pytest.approx(0.1 * km.A[1, 0])

    def test_monte_carlo_rejected(self):
        _, km = two_state_km()
        from dataclasses import replace
        with pytest.raises(ValueError, match="analytic"):
            expected_saddle_step(LearnerState.zeros(2), replace(km, provenance="monte-carlo"), 0.1, 0.1)

    def test_d_measure_zero_at_saddle(self):
        _, km = two_state_km(0.9, 0.5)
        ts = td_fixed_point(km)
        assert d_measure(km, 2.0, ts, np.zeros(2), ts) == pytest.approx(0.0, abs=1e-20)

    @pytest.mark.parametrize("seed", range(5))
    def test_derived_rates_contract(self, seed):
        km = well_conditioned_saddle(np.random.default_rng(seed), 3)
        rc = rate_constants(km)
        ts = td_fixed_point(km)
        state = LearnerState(ts + 1.0, np.ones(3), np.zeros(3))
        prev = d_measure(km, rc.nu, state.theta, state.omega, ts)
        for _ in range(200):
            state = expected_saddle_step(state, km, rc.alpha_star, rc.beta_star)
            cur = d_measure(km, rc.nu, state.theta, state.omega, ts)
            assert cur <= prev * rc.contraction + 1e-300
            prev = cur


class TestSchedules:
    def test_grid(self):
        g = step_size_grid()
        assert len(g) == 11
        assert g[-1] == 0.1 and g[0] == pytest.approx(0.1 / 1024)
        np.testing.assert_allclose(g[1:] / g[:-1], 2.0)

    def test_constant_and_ratio(self):
        s = make_schedule("constant", alpha=0.1, ratio=0.5)
        assert s.rates(1) == (0.1, 0.05) == s.rates(1000)
        assert s.ratio == pytest.approx(0.5)

    def test_inverse_sqrt(self):
        s = make_schedule("inverse-sqrt", alpha=0.2, beta=0.4)
        a, b = s.rates(4)
        assert a == pytest.approx(0.1) and b == pytest.approx(0.2)

    def test_array_schedule(self):
        s = make_schedule("constant", alpha=[0.1, 0.2], ratio=[1.0, 0.5])
        a, b = s.rates(3)
        np.testing.assert_allclose(b, [0.1, 0.1])

    def test_inverse_sqrt_gap_schedule(self):
        s = make_schedule("appendixE", C=10.0)
        a, b = s.rates(5)
        assert a == b == pytest.approx(2 / (10 * 5))

    def test_rate_constant_schedule(self):
        _, km = two_state_km(0.9, 0.99)
        rc = rate_constants(km)
        assert make_schedule("theorem2", constants=rc).rates(7) == (rc.alpha_star, rc.beta_star)

    @pytest.mark.parametrize("kind,params,match", [
        ("constant", {"beta": 0.1}, "alpha"),
        ("constant", {"alpha": 0.1}, "beta or ratio"),
        ("constant", {"alpha": -0.1, "beta": 0.1}, "positive"),
        ("theorem2", {}, "RateConstants"),
        ("appendixE", {"C": 0.0}, "positive"),
        ("cosine", {}, "unknown"),
    ])
    def test_errors(self, kind, params, match):
        with pytest.raises(ValueError, match=match):
            make_schedule(kind, **params)

    def test_steps_counted_from_one(self):
        with pytest.raises(ValueError):
            make_schedule("constant", alpha=0.1, beta=0.1).rates(0)

    def test_gap_rate_constant(self):
        """Hand computation with p = 1, phi_max = 1, rho_max = 1, gamma lambda = 1/2."""
        C = gap_rate_constant(1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 1.0, 1)
        C_e = 2.0
        C_A = 1.5 * C_e
        C1sq = C_e**2 + C_A**2 * 4 + 1.0 * 4
        expected = 4 * 4 * C1sq + 4 * C_A**2 * 4
        assert C == pytest.approx(expected)
        with pytest.raises(ValueError, match="bounded traces"):
            gap_rate_constant(1, 1, 1, 1, 2.0, 0.9, 0.9, 1)


class TestRunEpisodes:
    def _stream(self, n=30, seed=0):
        env = two_state_env(0.9, 0.5)
        return env, list(env.stream(n, rng_for(seed)))

    def test_batched_equals_individual(self):
        env, stream = self._stream()
        alphas = np.array([[0.01, 0.01], [0.05, 0.05]])
        ratios = np.array([[0.5, 2.0], [0.5, 2.0]])
        sched = make_schedule("constant", alpha=alphas, ratio=ratios)
        batched, _ = run_episodes(stream, sched, 0.9, 0.5, 2, stride=1000)
        for i in range(2):
            for j in range(2):
                single, _ = run_episodes(stream, make_schedule("constant", alpha=alphas[i, j], ratio=ratios[i, j]),
                                         0.9, 0.5, 2, stride=1000)
                np.testing.assert_allclose(batched.theta[i, j], single.theta, rtol=1e-12)
                np.testing.assert_allclose(batched.omega[i, j], single.omega, rtol=1e-12)

    def test_matches_ges_step_loop(self):
        env, stream = self._stream(5)
        final, _ = run_episodes(stream, make_schedule("constant", alpha=0.03, beta=0.02), 0.9, 0.5, 2)
        state = LearnerState.zeros(2)
        for tr in stream:
            state = ges_step(state, tr, 0.03, 0.02, 0.9, 0.5)
        np.testing.assert_array_equal(final.theta, state.theta)
        assert final.t == len(stream) == 500

    def test_recording_and_determinism(self):
        env, stream = self._stream(3)
        _, km = two_state_km(0.9, 0.5)
        diag = Diagnostics(km=km)
        sched = make_schedule("constant", alpha=0.01, beta=0.01)
        _, s1 = run_episodes(stream, sched, 0.9, 0.5, 2, stride=70, diagnostics=diag)
        _, s2 = run_episodes(list(env.stream(3, rng_for(0))), sched, 0.9, 0.5, 2, stride=70, diagnostics=diag)
        assert s1.steps == [0, 70, 140, 210, 280, 300]
        a1, a2 = s1.as_arrays(), s2.as_arrays()
        for key in a1:
            np.testing.assert_array_equal(a1[key], a2[key])
        assert s1.mspbe[0] == pytest.approx(mspbe(km, np.zeros(2)))

    def test_max_steps(self):
        env, stream = self._stream()
        final, _ = run_episodes(stream, make_schedule("constant", alpha=0.01, beta=0.01), 0.9, 0.5, 2, max_steps=17)
        assert final.t == 17

    def test_divergence_stops_single_run(self):
        env, stream = self._stream(50)
        final, _ = run_episodes(stream, make_schedule("constant", alpha=50.0, beta=50.0), 0.9, 0.5, 2)
        assert final.diverged and final.diverged_at % 8 == 0
        assert final.t == final.diverged_at

    def test_divergence_flags_cells_independently(self):
        env, stream = self._stream(50)
        sched = make_schedule("constant", alpha=np.array([50.0, 0.001]), ratio=np.array([1.0, 1.0]))
        final, _ = run_episodes(stream, sched, 0.9, 0.5, 2)
        np.testing.assert_array_equal(final.diverged, [True, False])
        assert final.diverged_at[1] == -1
        assert final.t == len(stream)

    @pytest.mark.slow
    def test_stable_two_state_converges(self):
        """Small constant steps reach MSPBE <= 1e-3 on a stable two-state problem in 5000 episodes."""
        env = two_state_env(0.5, 0.5)
        _, km = two_state_km(0.5, 0.5)
        assert km.A[0, 0] < 0
        sched = make_schedule("constant", alpha=0.003125, beta=0.003125)
        final, _ = run_episodes(env.stream(5000, rng_for(0)), sched, 0.5, 0.5, 2, stride=10**7)
        assert not final.diverged
        assert mspbe(km, final.theta) <= 1e-3


class TestAveraging:
    def test_averaged_iterates(self):
        th, w = averaged_iterates([[1.0], [3.0]], [[0.0], [2.0]], [1.0, 3.0])
        assert th[0] == pytest.approx(2.5) and w[0] == pytest.approx(1.5)
        with pytest.raises(ValueError):
            averaged_iterates([[1.0]], [[1.0]], [1.0, 2.0])
        with pytest.raises(ValueError):
            averaged_iterates(np.zeros((0, 1)), np.zeros((0, 1)), [])

    def test_run_averaged_matches_manual(self):
        env = two_state_env(0.9, 0.5)
        stream = list(env.stream(2, rng_for(1)))
        sched = make_schedule("inverse-sqrt", alpha=0.1, beta=0.1)
        steps, th_avg, om_avg = run_averaged(stream, sched, 0.9, 0.5, 2, [50, 200])
        np.testing.assert_array_equal(steps, [50, 200])
        state, ths, oms, ws = LearnerState.zeros(2), [], [], []
        for t, tr in enumerate(stream[:200], start=1):
            a, b = sched.rates(t)
            state = ges_step(state, tr, a, b, 0.9, 0.5)
            ths.append(state.theta)
            oms.append(state.omega)
            ws.append(a)
        ref_th, ref_om = averaged_iterates(ths, oms, ws)
        np.testing.assert_allclose(th_avg[-1], ref_th, rtol=1e-12)
        np.testing.assert_allclose(om_avg[-1], ref_om, rtol=1e-12)


class TestGap:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10**6))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        km = random_key_matrices(rng)
        ts = td_fixed_point(km)
        R = 2 * np.linalg.norm(ts) + 1
        th = rng.standard_normal(km.p) * R / (2 * math.sqrt(km.p))
        w = rng.standard_normal(km.p)
        assert primal_dual_gap(km, th, w, R, 2.0, ts) >= -1e-12

    def test_zero_at_saddle(self):
        _, km = two_state_km(0.9, 0.5)
        ts = td_fixed_point(km)
        assert abs(primal_dual_gap(km, ts, np.zeros(2), 2 * np.linalg.norm(ts), 1.0)) <= 1e-10

    def test_domain_must_contain_saddle(self):
        _, km = two_state_km(0.9, 0.5)
        with pytest.raises(DomainError, match="radius_theta"):
            primal_dual_gap(km, np.zeros(2), np.zeros(2), 0.1, 1.0)

    def test_trust_region_boundary(self):
        """When the unconstrained maximiser is outside the ball the maximum sits on the sphere."""
        _, km = two_state_km(0.9, 0.5)
        from gesarsa.learners import _ball_max_concave
        c = np.array([30.0, -40.0])
        w = _ball_max_concave(c, km.M, 0.5)
        assert np.linalg.norm(w) == pytest.approx(0.5, rel=1e-9)
        # random points on the ball do no better
        rng = np.random.default_rng(0)
        best = c @ w - 0.5 * w @ km.M @ w
        for _ in range(200):
            v = rng.standard_normal(2)
            v *= 0.5 * rng.random() ** 0.5 / np.linalg.norm(v)
            assert c @ v - 0.5 * v @ km.M @ v <= best + 1e-12

    def test_dual_value_is_mspbe(self):
        _, km = two_state_km(0.9, 0.5)
        th = np.array([1.0, -2.0])
        assert mspbe_dual_value(km, th) == pytest.approx(mspbe(km, th), rel=1e-12)
