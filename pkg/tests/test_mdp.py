import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gesarsa.environments import TwoStateSpec
from gesarsa.mdp import (
    ErgodicityError,
    FeatureMap,
    FiniteMdp,
    Policy,
    coverage_check,
    importance_ratios,
    load_mdp_file,
    random_mdp,
    random_policy,
    save_mdp_file,
    state_action_transition,
    stationary_distribution,
)


def two_state():
    return TwoStateSpec().as_finite_mdp()


class TestFiniteMdp:
    def test_rejects_bad_rows(self):
        p = np.full((2, 1, 2), 0.5)
        p[0, 0] = [0.7, 0.7]
        with pytest.raises(ValueError, match="sum to 1"):
            FiniteMdp(p, np.zeros((2, 1)), 0.9)

    def test_rejects_negative_probability(self):
        p = np.array([[[1.5, -0.5]], [[0.5, 0.5]]])
        with pytest.raises(ValueError, match="negative"):
            FiniteMdp(p, np.zeros((2, 1)), 0.9)

    @pytest.mark.parametrize("gamma", [0.0, 1.0, -0.1, 1.5])
    def test_gamma_range(self, gamma):
        with pytest.raises(ValueError, match="gamma"):
            FiniteMdp(np.full((2, 1, 2), 0.5), np.zeros((2, 1)), gamma)

    def test_reward_shape(self):
        with pytest.raises(ValueError, match="reward"):
            FiniteMdp(np.full((2, 1, 2), 0.5), np.zeros((2, 2)), 0.9)

    def test_pair_order_must_be_a_permutation(self):
        with pytest.raises(ValueError, match="pair_order"):
            FiniteMdp(np.full((2, 1, 2), 0.5), np.zeros((2, 1)), 0.9, pair_order=[(0, 0), (0, 0)])

    def test_terminal_must_absorb(self):
        with pytest.raises(ValueError, match="absorbing"):
            FiniteMdp(np.full((2, 1, 2), 0.5), np.zeros((2, 1)), 0.9, terminal={1})

    def test_reward_vector_follows_pair_order(self):
        mdp = FiniteMdp(np.full((2, 2, 2), 0.5), [[1, 2], [3, 4]], 0.5, pair_order=[(1, 1), (0, 0), (1, 0), (0, 1)])
        np.testing.assert_array_equal(mdp.reward_vector(), [4, 1, 3, 2])
        assert mdp.pair_index(1, 0) == 2


class TestStateActionTransition:
    def test_two_state_matrix(self):
        """Right always leads to s2 and the target keeps playing right."""
        mdp, pi, mu, _ = two_state()
        P = state_action_transition(mdp, pi)
        expected = np.array([
            [0, 1, 0, 0],
            [0, 1, 0, 0],
            [1, 0, 0, 0],
            [1, 0, 0, 0],
        ], dtype=float)
        np.testing.assert_array_equal(P, expected)

    def test_two_state_behaviour_matrix(self):
        mdp, pi, mu, _ = two_state()
        P = state_action_transition(mdp, mu)
        expected = 0.5 * np.array([
            [0, 1, 0, 1],
            [0, 1, 0, 1],
            [1, 0, 1, 0],
            [1, 0, 1, 0],
        ])
        np.testing.assert_array_equal(P, expected)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 5), st.integers(1, 3))
    def test_rows_are_distributions(self, seed, S, A):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng, S, A, 0.9)
        P = state_action_transition(mdp, random_policy(rng, S, A))
        assert P.shape == (S * A, S * A)
        assert np.all(P >= 0)
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)

    def test_policy_shape_mismatch(self):
        mdp, *_ = two_state()
        with pytest.raises(ValueError, match="policy shape"):
            state_action_transition(mdp, Policy.uniform(3, 2))


class TestStationaryDistribution:
    def test_two_state_uniform(self):
        mdp, pi, mu, _ = two_state()
        d = stationary_distribution(mdp, mu)
        np.testing.assert_allclose(d.xi, 0.25, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 5), st.integers(1, 3))
    def test_invariant_and_normalised(self, seed, S, A):
        rng = np.random.default_rng(seed)
        mdp = random_mdp(rng, S, A, 0.9)
        mu = random_policy(rng, S, A, floor=0.05)
        d = stationary_distribution(mdp, mu)
        P = state_action_transition(mdp, mu)
        assert abs(d.xi.sum() - 1.0) < 1e-12
        assert np.all(d.xi > 0)
        np.testing.assert_allclose(d.xi @ P, d.xi, atol=1e-10)

    def test_matches_eigenvector_oracle(self):
        rng = np.random.default_rng(3)
        mdp = random_mdp(rng, 4, 3, 0.9)
        mu = random_policy(rng, 4, 3, floor=0.1)
        P = state_action_transition(mdp, mu)
        w, v = np.linalg.eig(P.T)
        ref = np.real(v[:, np.argmin(np.abs(w - 1))])
        ref /= ref.sum()
        np.testing.assert_allclose(stationary_distribution(mdp, mu).xi, ref, atol=1e-10)

    def test_reducible_chain_raises(self):
        p = np.zeros((2, 1, 2))
        p[0, 0, 0] = p[1, 0, 1] = 1.0
        mdp = FiniteMdp(p, np.zeros((2, 1)), 0.9)
        with pytest.raises(ErgodicityError):
            stationary_distribution(mdp, Policy.uniform(2, 1))

    def test_unreachable_pair_raises(self):
        """A pair the behaviour policy never selects has zero stationary mass."""
        mdp, pi, mu, _ = two_state()
        with pytest.raises(ErgodicityError):
            stationary_distribution(mdp, Policy([[0.0, 1.0], [0.0, 1.0]]))


class TestPoliciesAndFeatures:
    def test_coverage(self):
        pi = Policy([[0.0, 1.0]])
        assert coverage_check(pi, Policy([[0.5, 0.5]]))
        assert coverage_check(pi, Policy([[0.0, 1.0]]))
        assert not coverage_check(pi, Policy([[1.0, 0.0]]))

    def test_importance_ratios(self):
        rho = importance_ratios(Policy([[0.0, 1.0]]), Policy([[0.5, 0.5]]))
        np.testing.assert_array_equal(rho, [[0.0, 2.0]])

    def test_feature_lookup_and_expected_next(self):
        mdp, pi, mu, f = two_state()
        np.testing.assert_array_equal(f.phi(1, 1), [2.0, 0.0])
        np.testing.assert_array_equal(f.expected_next(mu), [[0.5, 0.5], [1.0, 1.0]])
        assert f.phi_max == 2.0
        assert f.rank() == 2

    def test_phi_max_declaration_checked(self):
        mdp, *_ = two_state()
        with pytest.raises(ValueError, match="phi_max"):
            FeatureMap.for_mdp(mdp, np.ones((4, 1)) * 3, phi_max=1.0)

    def test_feature_row_count(self):
        mdp, *_ = two_state()
        with pytest.raises(ValueError, match="one row per pair"):
            FeatureMap.for_mdp(mdp, np.ones((3, 1)))

    def test_tabular_and_function_constructors(self):
        mdp, *_ = two_state()
        np.testing.assert_array_equal(FeatureMap.tabular(mdp).matrix, np.eye(4))
        f = FeatureMap.from_function(mdp, lambda s, a: [s, a])
        np.testing.assert_array_equal(f.phi(1, 0), [1, 0])


class TestMdpFile:
    def test_round_trip(self, tmp_path):
        mdp, pi, mu, f = two_state()
        path = tmp_path / "two_state.yaml"
        save_mdp_file(path, mdp, {"pi": pi, "mu": mu}, f, lam=0.5)
        doc = load_mdp_file(path)
        np.testing.assert_array_equal(doc.mdp.transition, mdp.transition)
        np.testing.assert_array_equal(doc.features.matrix, f.matrix)
        assert doc.mdp.pairs == mdp.pairs
        assert doc.lam == 0.5
        np.testing.assert_array_equal(doc.policies["mu"].probs, mu.probs)

    def test_schema_version_checked(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("schema_version: 7\ngamma: 0.9\ntransition: [[[1.0]]]\nreward: [[0.0]]\n")
        with pytest.raises(ValueError, match="schema_version"):
            load_mdp_file(path)
