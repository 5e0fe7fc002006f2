import itertools

import numpy as np
import pytest

from mcre.bounds import (BoundReport, lipschitz_estimate, max_policy_tv, q_gap_bound_empirical,
                         q_gap_bound_exact, suboptimality, suboptimality_bound,
                         v_gap_bound_empirical)
from mcre.data import fit_empirical_model, generate_dataset, model_deviation
from mcre.errors import BoundUndefinedError, LipschitzError
from mcre.mdp import TabularMdp, exact_q, exact_v, policy_iteration, policy_return, random_mdp
from mcre.operators import MreConfig, bc_table, fixed_point, upsilon_threshold


class TestFormulas:
    def test_exact_zero_penalty(self):
        assert q_gap_bound_exact(MreConfig(0.0, 0.0, 0.9), 0.0) == 0.0

    def test_exact_arithmetic(self):
        assert q_gap_bound_exact(MreConfig(0.1, 2.0, 0.5), 0.32) == pytest.approx(0.16 / 0.425)
        assert q_gap_bound_exact(MreConfig(0.1, 2.0, 0.5), 0.32) == pytest.approx(0.376470, abs=1e-6)

    def test_near_threshold_is_larger(self):
        t = upsilon_threshold(0.9)
        near = q_gap_bound_exact(MreConfig(0.99 * t, 1.0, 0.9), 0.5)
        assert np.isfinite(near) and near > q_gap_bound_exact(MreConfig(0.0, 1.0, 0.9), 0.5)

    def test_condition_violated(self):
        with pytest.raises(BoundUndefinedError) as info:
            q_gap_bound_exact(MreConfig(0.1, 1.0, 0.9), 0.5)
        assert info.value.threshold == pytest.approx(upsilon_threshold(0.9))

    def test_empirical_reduces_and_is_linear(self):
        cfg = MreConfig(0.01, 0.5, 0.9)
        exact = q_gap_bound_exact(cfg, 0.4)
        assert q_gap_bound_empirical(cfg, 0.4, 0.0, 1.0) == exact
        one = q_gap_bound_empirical(cfg, 0.4, 0.1, 1.0) - exact
        two = q_gap_bound_empirical(cfg, 0.4, 0.2, 1.0) - exact
        assert two == pytest.approx(2 * one)

    def test_v_gap(self):
        assert v_gap_bound_empirical(0.5, 0.0, 1.0) == 0.0
        assert v_gap_bound_empirical(0.5, 0.1, 1.0) == pytest.approx(0.2)

    def test_suboptimality_bound(self):
        assert suboptimality_bound(0.9, 0.0, 1.0, 1.0, 0.0) == 0.0
        assert suboptimality_bound(0.5, 1.0, 1.0, 1.0, 0.0) == pytest.approx(4.0)
        base = suboptimality_bound(0.5, 1.0, 1.0, 1.0, 0.2)
        assert suboptimality_bound(0.5, 1.0, 1.0, 1.0, 0.2, max_dev=0.1) == pytest.approx(
            base + 1.5 * 0.5 * 0.1 / 0.125)
        with pytest.raises(ValueError):
            suboptimality_bound(0.5, -1.0, 1.0, 1.0, 0.0)

    def test_report(self):
        rep = BoundReport(lhs=0.1, rhs=0.3, condition_met=True)
        assert rep.slack == pytest.approx(0.2) and rep.holds
        assert rep.to_dict()["slack"] == pytest.approx(0.2)


class TestExactCase:
    """Fixed point on the true model against the true Q-function."""

    @pytest.mark.parametrize("seed", range(5))
    def test_value_gap_is_zero(self, seed):
        mdp = random_mdp(8, 3, 0.9, seed=seed)
        pi = np.random.default_rng(seed).integers(0, 3, 8)
        cfg = MreConfig(0.05, 1.0, 0.9)
        q = fixed_point(mdp, pi, cfg, tol=1e-12).q_star
        np.testing.assert_allclose(q[np.arange(8), pi], exact_v(mdp, pi), atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_on_policy_q_gap_within_bound(self, seed):
        mdp = random_mdp(8, 3, 0.9, seed=seed)
        pi = np.random.default_rng(seed).integers(0, 3, 8)
        cfg = MreConfig(0.05, 1.0, 0.9)
        q = fixed_point(mdp, pi, cfg, tol=1e-12).q_star
        gap = np.abs(q - exact_q(mdp, pi))
        rhs = q_gap_bound_exact(cfg, float(bc_table(mdp.action_embedding, pi, 1.0).max()))
        assert gap.max() <= rhs + 1e-8

    def test_closed_form_of_gap(self, small_mdp):
        # Q* = Q - u g (Q - V) - g I follows from solving Z Q* = Q* with V* = V
        pi = np.array([0, 2, 1, 0, 2, 1])
        cfg = MreConfig(0.3, 0.7, 0.9)
        qpi = exact_q(small_mdp, pi)
        vpi = exact_v(small_mdp, pi)[:, None]
        predicted = qpi - 0.3 * 0.9 * (qpi - vpi) - 0.9 * bc_table(small_mdp.action_embedding, pi, 0.7)
        import warnings
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            q = fixed_point(small_mdp, pi, cfg, tol=1e-12).q_star
        np.testing.assert_allclose(q, predicted, atol=1e-10)


class TestEmpiricalCase:
    def test_sampling_bound_holds_on_gridworld(self, grid):
        ds = generate_dataset(grid, "random", 100_000, 0)
        em = fit_empirical_model(ds, grid.mdp)
        pi = grid.expert_table()
        cfg = MreConfig(0.004, 0.5, grid.mdp.gamma)
        dev = model_deviation(em, grid.mdp)
        q_hat = fixed_point(em, pi, cfg, strict=False).q_star
        gap = np.abs(q_hat - exact_q(grid.mdp, pi))[em.visited].max()
        max_bc = float(bc_table(grid.mdp.action_embedding, pi, 0.5)[em.visited].max())
        rhs = q_gap_bound_empirical(cfg, max_bc, float(dev.max()), grid.mdp.r_max)
        assert gap <= rhs
        v_gap = np.abs(q_hat[np.arange(grid.n_states), pi] - exact_v(grid.mdp, pi)).max()
        assert v_gap <= v_gap_bound_empirical(cfg.gamma, float(dev.max()), grid.mdp.r_max)


class TestSuboptimality:
    def test_identity_and_sign(self, grid):
        star = grid.expert_table()
        assert suboptimality(grid.mdp, star, star) == 0.0
        rng = np.random.default_rng(0)
        for _ in range(5):
            pi = rng.integers(0, grid.n_actions, grid.n_states)
            sub = suboptimality(grid.mdp, pi, star)
            assert sub <= 1e-10
            assert sub == pytest.approx(policy_return(grid.mdp, pi) - policy_return(grid.mdp, star),
                                        abs=1e-10)

    def test_bound_holds_for_perturbed_policy(self, grid):
        star = grid.expert_table()
        pi = star.copy()
        pi[::7] = (pi[::7] + 1) % grid.n_actions
        ell = lipschitz_estimate(grid.mdp)
        tv = max_policy_tv(grid.mdp, grid.mdp, pi, star)
        rhs = suboptimality_bound(grid.mdp.gamma, ell, grid.mdp.a_max, grid.mdp.r_max, tv)
        assert abs(suboptimality(grid.mdp, pi, star)) <= rhs


class TestConstants:
    def test_lipschitz_examples(self):
        p = np.full((1, 2, 1), 1.0)
        flat = TabularMdp(p, np.array([[0.3, 0.3]]), 0.5)
        assert lipschitz_estimate(flat) == 0.0
        step = TabularMdp(p, np.array([[0.0, 1.0]]), 0.5, action_embedding=np.array([[0.0], [1.0]]))
        assert lipschitz_estimate(step) == pytest.approx(1.0)
        clash = TabularMdp(p, np.array([[0.0, 1.0]]), 0.5, action_embedding=np.array([[0.5], [0.5]]))
        with pytest.raises(LipschitzError):
            lipschitz_estimate(clash)

    def test_lipschitz_brute_force(self):
        rng = np.random.default_rng(3)
        emb = rng.normal(size=(4, 2))
        mdp = random_mdp(5, 4, 0.9, seed=3).replace(action_embedding=emb, a_max=None)
        best = 0.0
        for s in range(5):
            for a1, a2 in itertools.permutations(range(4), 2):
                d = np.max(np.abs(emb[a1] - emb[a2]))
                best = max(best, abs(mdp.reward[s, a1] - mdp.reward[s, a2]) / d)
        assert lipschitz_estimate(mdp) == pytest.approx(best, rel=1e-12)

    def test_tv_examples(self, small_mdp):
        pi = np.zeros(6, dtype=int)
        assert max_policy_tv(small_mdp, small_mdp, pi, pi) == 0.0
        p = np.zeros((2, 2, 2))
        p[0, 0, 0] = p[0, 1, 1] = 1.0
        p[1, :, 1] = 1.0
        mdp = TabularMdp(p, np.zeros((2, 2)), 0.5)
        assert max_policy_tv(mdp, mdp, [0, 0], [1, 0]) == 1.0

    def test_tv_loop_oracle(self):
        a, b = random_mdp(6, 3, 0.9, seed=1), random_mdp(6, 3, 0.9, seed=2)
        rng = np.random.default_rng(0)
        pa, pb = rng.integers(0, 3, 6), rng.integers(0, 3, 6)
        best = max(0.5 * sum(abs(a.transition[s, pa[s], t] - b.transition[s, pb[s], t])
                             for t in range(6)) for s in range(6))
        assert max_policy_tv(a, b, pa, pb) == pytest.approx(best, abs=1e-14)

    def test_policy_iteration_is_its_own_optimum(self, grid):
        star = policy_iteration(grid.mdp)
        greedy = exact_q(grid.mdp, star).argmax(axis=1)
        np.testing.assert_allclose(exact_v(grid.mdp, greedy), exact_v(grid.mdp, star), atol=1e-10)
