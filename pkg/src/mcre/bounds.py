"""Right-hand sides of the value-gap and suboptimality bounds, plus the
measured constants (Lipschitz, total variation, model deviation) they need.

Where a bound is stated with ``c_p / sqrt(D_c)``, these calculators take the
measured maximum l1 transition deviation instead.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mcre.errors import BoundUndefinedError, DimensionError, LipschitzError
from mcre.mdp import check_policy, exact_v
from mcre.operators import resolve_model, upsilon_threshold


@dataclass(frozen=True)
class BoundReport:
    lhs: float
    rhs: float
    condition_met: bool

    @property
    def slack(self):
        return self.rhs - self.lhs

    @property
    def holds(self):
        return self.lhs <= self.rhs

    def to_dict(self):
        return {"lhs": self.lhs, "rhs": self.rhs, "slack": self.slack,
                "condition_met": self.condition_met}


def _require_condition(cfg):
    if not cfg.theorem_condition_met:
        threshold = upsilon_threshold(cfg.gamma) if cfg.gamma > 0 else float("inf")
        raise BoundUndefinedError(
            f"bound needs upsilon < {threshold:.6g} (got {cfg.upsilon})", threshold)


def q_gap_bound_exact(cfg, max_bc):
    _require_condition(cfg)
    return cfg.gamma * max_bc / cfg.bound_denominator


def q_gap_bound_empirical(cfg, max_bc, max_dev, r_max):
    _require_condition(cfg)
    g = cfg.gamma
    sampling = g * max_dev * r_max / (cfg.bound_denominator * (1.0 - g))
    return q_gap_bound_exact(cfg, max_bc) + sampling


def v_gap_bound_empirical(gamma, max_dev, r_max):
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    return gamma * max_dev * r_max / (1.0 - gamma) ** 2


def suboptimality(mdp, pi_hat, pi_star):
    """Expected initial-state value of ``pi_hat`` minus that of ``pi_star``."""
    gap = exact_v(mdp, pi_hat) - exact_v(mdp, pi_star)
    return float(mdp.initial_dist @ gap)


def suboptimality_bound(gamma, ell, a_max, r_max, max_tv, max_dev=None):
    """Bound on ``|suboptimality|``; pass ``max_dev`` for the sampled-model form."""
    for name, value in (("ell", ell), ("a_max", a_max), ("r_max", r_max), ("max_tv", max_tv)):
        if value < 0:
            raise ValueError(f"{name} must be nonnegative")
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    out = 2.0 * ell * a_max / (1.0 - gamma) + 2.0 * gamma * r_max * max_tv / (1.0 - gamma) ** 2
    if max_dev is not None:
        out += (1.0 + gamma) * gamma * max_dev * r_max / (1.0 - gamma) ** 3
    return out


def lipschitz_estimate(mdp):
    """Smallest ``l`` with ``|r(s,a1) - r(s,a2)| <= l ||emb(a1) - emb(a2)||_inf``."""
    emb = mdp.action_embedding
    dist = np.max(np.abs(emb[:, None, :] - emb[None, :, :]), axis=2)
    rdiff = np.abs(mdp.reward[:, :, None] - mdp.reward[:, None, :])
    off = ~np.eye(mdp.n_actions, dtype=bool)
    coincident = off & (dist == 0)
    if np.any(rdiff[:, coincident] > 0):
        raise LipschitzError("two actions share an embedding but earn different rewards")
    usable = off & (dist > 0)
    if not np.any(usable):
        return 0.0
    return float(np.max(rdiff[:, usable] / dist[usable]))


def max_policy_tv(model_a, model_b, pi_a, pi_b, strict=True):
    """``max_s TV(P_a(.|s, pi_a(s)), P_b(.|s, pi_b(s)))``."""
    a = resolve_model(model_a, strict)
    b = resolve_model(model_b, strict)
    if a.transition.shape != b.transition.shape:
        raise DimensionError("models have different shapes")
    pi_a = check_policy(a, pi_a)
    pi_b = check_policy(b, pi_b)
    idx = np.arange(a.n_states)
    rows_a = a.transition[idx, pi_a]
    rows_b = b.transition[idx, pi_b]
    return float(np.max(0.5 * np.abs(rows_a - rows_b).sum(axis=1)))
