"""Bellman operator algebra of mildly conservative regularized evaluation.

``T`` is the standard policy backup, ``H`` the TD-corrected backup, ``I``
the behaviour-cloning penalty and ``Z = (1 - upsilon) T + upsilon H - gamma I``
the combined evaluation operator. Every operator accepts either a
:class:`~mcre.mdp.TabularMdp` (true dynamics) or an
:class:`~mcre.data.EmpiricalModel` (fitted dynamics).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from mcre import kernels
from mcre.data import EmpiricalModel
from mcre.errors import DimensionError, InvalidConfigError, NonConvergenceError
from mcre.mdp import check_policy, greedy_policy

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 200_000


@dataclass(frozen=True)
class MreConfig:
    upsilon: float = 0.0
    omega: float = 0.0
    gamma: float = 0.99

    def __post_init__(self):
        if not 0.0 <= self.upsilon <= 1.0:
            raise InvalidConfigError(f"upsilon must lie in [0, 1], got {self.upsilon}")
        if self.omega < 0.0:
            raise InvalidConfigError(f"omega must be >= 0, got {self.omega}")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidConfigError(f"gamma must lie in [0, 1), got {self.gamma}")

    @property
    def bound_denominator(self):
        g, u = self.gamma, self.upsilon
        return 1.0 - g - u * g * g - u * g

    @property
    def theorem_condition_met(self):
        return self.bound_denominator > 0.0


@dataclass
class FixedPointReport:
    q_star: np.ndarray
    iterations: int
    final_residual: float
    empirical_modulus: float
    residuals: np.ndarray
    history: np.ndarray | None = None


def contraction_modulus(cfg):
    g, u = cfg.gamma, cfg.upsilon
    return g + u * g - u * g * g


def upsilon_threshold(gamma):
    if gamma <= 0.0:
        raise InvalidConfigError("threshold undefined at gamma = 0 (condition is vacuous)")
    if gamma >= 1.0:
        raise InvalidConfigError("gamma must be < 1")
    return (1.0 - gamma) / (gamma * gamma + gamma)


def resolve_model(model, strict=True):
    if isinstance(model, EmpiricalModel):
        return model.to_mdp(strict=strict)
    return model


def _prepare(q, model, pi, strict):
    mdp = resolve_model(model, strict)
    pi = check_policy(mdp, pi)
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionError(f"Q-table must be {(mdp.n_states, mdp.n_actions)}, got {q.shape}")
    return mdp, pi, q


def _on_policy_values(q, pi):
    return q[np.arange(q.shape[0]), pi]


def _check_gamma(cfg, mdp):
    if cfg.gamma != mdp.gamma:
        raise InvalidConfigError(f"config gamma {cfg.gamma} differs from model gamma {mdp.gamma}")


def bellman_backup(q, model, pi, strict=True):
    """``(T q)(s, a) = r(s, a) + gamma E_{s'}[q(s', pi(s'))]``."""
    mdp, pi, q = _prepare(q, model, pi, strict)
    return mdp.reward + mdp.gamma * (mdp.transition @ _on_policy_values(q, pi))


def td_bellman_backup(q, model, pi, strict=True):
    """``(H q)(s, a) = (T q)(s, a) - gamma ((T q)(s, a) - q(s, pi(s)))``.

    Algebraically the same as bootstrapping on ``q(s', pi(s'))`` minus the
    one-step TD error, which pulls the backup toward the current on-policy
    estimate at ``s``.
    """
    mdp, pi, q = _prepare(q, model, pi, strict)
    t = mdp.reward + mdp.gamma * (mdp.transition @ _on_policy_values(q, pi))
    return t - mdp.gamma * (t - _on_policy_values(q, pi)[:, None])


def bc_term(pi_action, data_action, omega):
    pi_action = np.atleast_1d(np.asarray(pi_action, dtype=np.float64))
    data_action = np.atleast_1d(np.asarray(data_action, dtype=np.float64))
    if pi_action.shape != data_action.shape:
        raise DimensionError(f"action shapes differ: {pi_action.shape} vs {data_action.shape}")
    diff = pi_action - data_action
    return float(omega * np.dot(diff, diff))


def bc_table(embedding, pi, omega):
    """``I(s, a) = omega * ||emb(pi(s)) - emb(a)||^2`` for every pair."""
    embedding = np.asarray(embedding, dtype=np.float64)
    diff = embedding[pi][:, None, :] - embedding[None, :, :]
    return omega * np.einsum("sak,sak->sa", diff, diff)


def mcre_backup(q, model, pi, cfg, embedding=None, strict=True, h_scale=1.0):
    """One application of ``Z``.

    ``embedding`` defaults to the model's action embedding. ``h_scale``
    multiplies ``H`` and exists only for fault-injection checks.
    """
    mdp, pi, q = _prepare(q, model, pi, strict)
    _check_gamma(cfg, mdp)
    emb = mdp.action_embedding if embedding is None else embedding
    t = bellman_backup(q, mdp, pi)
    h = td_bellman_backup(q, mdp, pi)
    out = (1.0 - cfg.upsilon) * t + cfg.upsilon * h_scale * h
    if cfg.omega != 0.0:
        out = out - cfg.gamma * bc_table(emb, pi, cfg.omega)
    return out


def _empirical_modulus(residuals, q_scale):
    """Largest ratio of successive step sizes.

    Steps below ``1e-5 * q_scale`` are skipped: there a few ulps of rounding
    move the ratio by more than 1e-9.
    """
    if len(residuals) < 2:
        return 0.0
    prev, cur = residuals[:-1], residuals[1:]
    usable = prev > 1e-5 * max(q_scale, 1e-300)
    if not np.any(usable):
        return 0.0
    return float(np.max(cur[usable] / prev[usable]))


def stopping_step(tol, modulus, mdp, bc_max=0.0):
    """Step size at which the iterate is provably within ``tol`` of the fixed point.

    A contraction with modulus ``c`` satisfies ``|q_k - q*| <= c / (1 - c) *
    |q_k - q_{k-1}|``. The threshold is floored a few ulps above the value
    scale so iterations whose modulus is close to 1 still terminate.
    """
    exact = tol * (1.0 - modulus) / modulus if modulus > 0 else tol
    scale = (mdp.r_max + bc_max) / (1.0 - modulus)
    return max(exact, 1e-15 * scale)


def fixed_point(model, pi, cfg, q0=None, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                embedding=None, strict=True, record=0):
    """Iterate ``Z`` until the returned table is within ``tol`` (sup-norm) of its
    fixed point.

    ``record`` keeps that many leading iterates (``Q_0, Q_1, ...``) in the
    report for rate checks. A violated bound condition only warns: the
    iteration itself converges for every ``upsilon`` in ``[0, 1]``.
    """
    mdp = resolve_model(model, strict)
    pi = check_policy(mdp, pi)
    _check_gamma(cfg, mdp)
    modulus = contraction_modulus(cfg)
    if modulus >= 1.0:
        raise InvalidConfigError(f"contraction modulus {modulus} >= 1")
    if not cfg.theorem_condition_met:
        warnings.warn(f"upsilon={cfg.upsilon} exceeds the error-bound threshold "
                      f"{upsilon_threshold(cfg.gamma):.6g}; gap bounds do not apply",
                      RuntimeWarning, stacklevel=2)
    q0 = np.zeros((mdp.n_states, mdp.n_actions)) if q0 is None else np.asarray(q0, dtype=np.float64)
    if q0.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionError("q0 has the wrong shape")
    emb = mdp.action_embedding if embedding is None else embedding
    bc = bc_table(emb, pi, cfg.omega)
    step_tol = stopping_step(tol, modulus, mdp, float(np.max(bc)) * cfg.gamma)
    q, n_iter, residuals, history = kernels.mcre_iterate(
        mdp.transition, mdp.reward, pi, bc, cfg.gamma, cfg.upsilon, q0, step_tol, max_iter,
        n_history=record)
    final = float(residuals[-1]) if len(residuals) else 0.0
    if final > step_tol:
        raise NonConvergenceError(
            f"no convergence after {n_iter} iterations (step {final:.3g} > {step_tol:.3g})",
            final, n_iter)
    report = FixedPointReport(q, n_iter, final,
                              _empirical_modulus(residuals, float(np.max(np.abs(q)))),
                              residuals, history if record else None)
    log.debug("fixed point: %d iterations, residual %.3g", n_iter, final)
    return report


def affine_form(model, pi, cfg, embedding=None, strict=True):
    """Return ``(M, b)`` with ``Z q = M q + b`` on the flattened ``(S*A,)`` table.

    Built entry by entry from the operator definitions, independently of the
    iterative path.
    """
    mdp = resolve_model(model, strict)
    pi = check_policy(mdp, pi)
    n_s, n_a = mdp.n_states, mdp.n_actions
    emb = mdp.action_embedding if embedding is None else embedding
    g, u = cfg.gamma, cfg.upsilon
    m = np.zeros((n_s * n_a, n_s * n_a))
    b = np.zeros(n_s * n_a)
    for s in range(n_s):
        for a in range(n_a):
            row = s * n_a + a
            # T part: r + g sum_s' P q(s', pi(s')), weighted (1-u) + u(1-g)
            w_t = (1.0 - u) + u * (1.0 - g)
            for s2 in range(n_s):
                m[row, s2 * n_a + pi[s2]] += w_t * g * mdp.transition[s, a, s2]
            # H's pull toward q(s, pi(s))
            m[row, s * n_a + pi[s]] += u * g
            diff = emb[pi[s]] - emb[a]
            b[row] = w_t * mdp.reward[s, a] - g * cfg.omega * float(diff @ diff)
    return m, b


def solve_fixed_point_direct(model, pi, cfg, embedding=None, strict=True):
    """Fixed point of ``Z`` by a dense linear solve of ``(I - M) q = b``."""
    mdp = resolve_model(model, strict)
    m, b = affine_form(mdp, pi, cfg, embedding)
    q = np.linalg.solve(np.eye(len(b)) - m, b)
    return q.reshape(mdp.n_states, mdp.n_actions)


def mcre_policy_iteration(model, cfg, max_rounds=50, strict=True):
    """Alternate ``Z``-evaluation and greedy improvement.

    Stops when the greedy policy repeats; on a cycle the repeated policy is
    returned. Returns ``(policy, q)`` with ``q`` the fixed point evaluated for
    the policy that produced it.
    """
    mdp = resolve_model(model, strict)
    pi = np.zeros(mdp.n_states, dtype=np.int64)
    seen = set()
    q = None
    for _ in range(max_rounds):
        q = fixed_point(mdp, pi, cfg).q_star
        nxt = greedy_policy(q)
        if np.array_equal(nxt, pi) or nxt.tobytes() in seen:
            return nxt, q
        seen.add(nxt.tobytes())
        pi = nxt
    return pi, q
