import numpy as np
import pytest

from mcre import _accel, kernels
from mcre.mdp import random_mdp

pytestmark = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


def _uniforms(rng, n_ep, horizon):
    return (rng.random(n_ep), rng.random((n_ep, horizon)), rng.random((n_ep, horizon)),
            rng.random((n_ep, horizon)))


class TestBackendsAgree:
    def test_sample_episodes(self):
        mdp = random_mdp(7, 3, 0.9, seed=1, sparsity=0.5)
        cum = np.cumsum(mdp.transition, axis=2)
        start = np.cumsum(mdp.initial_dist)
        pi = np.array([0, 1, 2, 0, 1, 2, 0])
        u = _uniforms(np.random.default_rng(0), 50, 30)
        a = kernels.sample_episodes_numba(cum, start, pi, 0.3, 3, *u)
        b = kernels.sample_episodes_numpy(cum, start, pi, 0.3, 3, *u)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_count_transitions(self):
        rng = np.random.default_rng(2)
        s, a, s2 = rng.integers(0, 5, 1000), rng.integers(0, 3, 1000), rng.integers(0, 5, 1000)
        oracle = np.zeros((5, 3, 5), dtype=np.int64)
        np.add.at(oracle, (s, a, s2), 1)
        np.testing.assert_array_equal(kernels.count_transitions_numba(s, a, s2, 5, 3), oracle)
        np.testing.assert_array_equal(kernels.count_transitions_numpy(s, a, s2, 5, 3), oracle)

    def test_mcre_iterate(self):
        mdp = random_mdp(6, 3, 0.9, seed=4)
        pi = np.array([0, 1, 2, 2, 1, 0])
        bc = np.random.default_rng(0).random((6, 3))
        hist = np.zeros((5, 6, 3))
        qa, na, ra = kernels.mcre_iterate_numba(mdp.transition, mdp.reward, pi, bc, 0.9, 0.3,
                                                np.zeros((6, 3)), 1e-12, 5000, hist.copy())
        qb, nb, rb = kernels.mcre_iterate_numpy(mdp.transition, mdp.reward, pi, bc, 0.9, 0.3,
                                                np.zeros((6, 3)), 1e-12, 5000, hist.copy())
        assert abs(na - nb) <= 1
        np.testing.assert_allclose(qa, qb, atol=1e-12)

    def test_env_flag_switches_backend(self, monkeypatch):
        monkeypatch.setenv("MCRE_NUMBA", "0")
        assert _accel.backend_name() == "numpy"
        monkeypatch.setenv("MCRE_NUMBA", "1")
        assert _accel.backend_name() == "numba"


class TestSampling:
    def test_empirical_frequencies(self):
        # one state, two outcomes with p = (0.3, 0.7): the count is binomial
        p = np.zeros((2, 1, 2))
        p[:, 0] = [0.3, 0.7]
        cum = np.cumsum(p, axis=2)
        u = _uniforms(np.random.default_rng(5), 200, 100)
        _, _, nxt = kernels.sample_episodes(cum, np.array([1.0, 1.0]), np.zeros(2, dtype=int),
                                            0.0, 1, *u)
        frac = np.mean(nxt == 0)
        assert abs(frac - 0.3) < 4 * np.sqrt(0.3 * 0.7 / nxt.size)

    def test_full_exploration_is_uniform(self):
        p = np.ones((1, 4, 1))
        cum = np.cumsum(p, axis=2)
        u = _uniforms(np.random.default_rng(6), 100, 100)
        _, act, _ = kernels.sample_episodes(cum, np.array([1.0]), np.zeros(1, dtype=int), 1.0, 4, *u)
        counts = np.bincount(act.ravel(), minlength=4)
        assert np.all(np.abs(counts / act.size - 0.25) < 0.02)

    def test_residual_history(self):
        mdp = random_mdp(3, 2, 0.5, seed=0)
        q, n, res, hist = kernels.mcre_iterate(mdp.transition, mdp.reward, np.zeros(3, dtype=int),
                                               np.zeros((3, 2)), 0.5, 0.0, np.zeros((3, 2)),
                                               1e-12, 1000, n_history=3)
        assert hist.shape == (3, 3, 2)
        np.testing.assert_array_equal(hist[0], 0.0)
        assert len(res) == n and res[-1] <= 1e-12
