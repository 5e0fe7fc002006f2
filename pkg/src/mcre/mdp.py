"""Finite MDPs, exact policy evaluation and the policy metrics every other
module checks itself against.

Q-tables are ``(n_states, n_actions)`` float arrays, V-tables ``(n_states,)``
arrays and deterministic policies ``(n_states,)`` integer arrays mapping a
state index to an action index.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from mcre.errors import DimensionError, SolverError, ValidationError

_ATOL = 1e-12


def _frozen(arr, dtype=np.float64):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Ground-truth finite MDP ``(S, A, P, r, rho0, gamma)``.

    ``action_embedding`` gives every discrete action a vector so the
    behaviour-cloning term and the reward Lipschitz constant can be measured;
    it defaults to one-hot rows, which makes ``a_max = 1``.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    r_max: float | None = None
    initial_dist: np.ndarray | None = None
    action_embedding: np.ndarray | None = None
    a_max: float | None = None

    def __post_init__(self):
        p = _frozen(self.transition)
        r = _frozen(self.reward)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise DimensionError(f"transition must be (S, A, S), got {p.shape}")
        n_s, n_a, _ = p.shape
        if n_s < 1 or n_a < 1:
            raise ValidationError("need at least one state and one action")
        if r.shape != (n_s, n_a):
            raise DimensionError(f"reward must be {(n_s, n_a)}, got {r.shape}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValidationError("transition has negative or non-finite entries")
        if np.max(np.abs(p.sum(axis=2) - 1.0)) > _ATOL:
            raise ValidationError("transition rows must sum to 1")
        if not np.all(np.isfinite(r)):
            raise ValidationError("reward has non-finite entries")
        if not 0.0 <= self.gamma < 1.0:
            raise ValidationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.r_max is None:
            r_max = float(np.max(np.abs(r))) or 1.0
        else:
            r_max = float(self.r_max)
        if r_max <= 0 or np.max(np.abs(r)) > r_max + _ATOL:
            raise ValidationError("|reward| exceeds r_max")
        rho = np.full(n_s, 1.0 / n_s) if self.initial_dist is None else self.initial_dist
        rho = _frozen(rho)
        if rho.shape != (n_s,) or np.any(rho < 0) or abs(rho.sum() - 1.0) > _ATOL:
            raise ValidationError("initial_dist must be a distribution over states")
        emb = np.eye(n_a) if self.action_embedding is None else self.action_embedding
        emb = _frozen(emb)
        if emb.ndim != 2 or emb.shape[0] != n_a:
            raise DimensionError("action_embedding needs one row per action")
        a_max = float(np.max(np.abs(emb))) if self.a_max is None else float(self.a_max)
        if a_max <= 0 or np.max(np.abs(emb)) > a_max + _ATOL:
            raise ValidationError("action embedding exceeds a_max")
        for name, value in (("transition", p), ("reward", r), ("r_max", r_max),
                            ("initial_dist", rho), ("action_embedding", emb),
                            ("a_max", a_max), ("gamma", float(self.gamma))):
            object.__setattr__(self, name, value)

    @property
    def n_states(self):
        return self.transition.shape[0]

    @property
    def n_actions(self):
        return self.transition.shape[1]

    def replace(self, **changes):
        fields = dict(transition=self.transition, reward=self.reward, gamma=self.gamma,
                      r_max=self.r_max, initial_dist=self.initial_dist,
                      action_embedding=self.action_embedding, a_max=self.a_max)
        fields.update(changes)
        return TabularMdp(**fields)

    def to_dict(self):
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "r_max": self.r_max,
            "a_max": self.a_max,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "action_embedding": self.action_embedding.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        mdp = cls(transition=doc["transition"], reward=doc["reward"], gamma=doc["gamma"],
                  r_max=doc["r_max"], initial_dist=doc["initial_dist"],
                  action_embedding=doc["action_embedding"], a_max=doc["a_max"])
        if (mdp.n_states, mdp.n_actions) != (doc["n_states"], doc["n_actions"]):
            raise ValidationError("declared n_states/n_actions disagree with arrays")
        return mdp


def save_mdp(mdp, path):
    with open(path, "w") as fh:
        json.dump(mdp.to_dict(), fh, sort_keys=True)


def load_mdp(path):
    with open(path) as fh:
        return TabularMdp.from_dict(json.load(fh))


def random_mdp(n_states, n_actions, gamma, seed=0, r_max=1.0, sparsity=0.0):
    """Dirichlet transition rows and uniform rewards in ``[-r_max, r_max]``.

    ``sparsity`` zeroes that fraction of each row's entries (one entry always
    survives), which makes total-variation gaps between actions larger.
    """
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    if sparsity > 0:
        mask = rng.random(p.shape) < sparsity
        keep = rng.integers(0, n_states, size=(n_states, n_actions))
        mask[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], keep] = False
        p = np.where(mask, 0.0, p)
        p /= p.sum(axis=2, keepdims=True)
    r = rng.uniform(-r_max, r_max, size=(n_states, n_actions))
    rho = rng.dirichlet(np.ones(n_states))
    return TabularMdp(p, r, gamma, r_max=r_max, initial_dist=rho)


def check_policy(mdp, pi):
    pi = np.asarray(pi)
    if pi.shape != (mdp.n_states,):
        raise DimensionError(f"policy must have one action per state, got {pi.shape}")
    if not np.issubdtype(pi.dtype, np.integer):
        raise ValidationError("policy entries must be integer action indices")
    if np.any(pi < 0) or np.any(pi >= mdp.n_actions):
        raise ValidationError("policy action index out of range")
    return pi.astype(np.int64)


def on_policy(mdp, pi):
    """``(P_pi, r_pi)``: the state-to-state chain and reward under ``pi``."""
    idx = np.arange(mdp.n_states)
    return mdp.transition[idx, pi], mdp.reward[idx, pi]


def exact_q(mdp, pi):
    pi = check_policy(mdp, pi)
    p_pi, r_pi = on_policy(mdp, pi)
    system = np.eye(mdp.n_states) - mdp.gamma * p_pi
    try:
        v = np.linalg.solve(system, r_pi)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"on-policy system is singular: {exc}") from exc
    if not np.all(np.isfinite(v)):
        raise SolverError("on-policy solve produced non-finite values")
    return mdp.reward + mdp.gamma * (mdp.transition @ v)


def exact_v(mdp, pi):
    pi = check_policy(mdp, pi)
    return exact_q(mdp, pi)[np.arange(mdp.n_states), pi]


def policy_return(mdp, pi):
    return float(mdp.initial_dist @ exact_v(mdp, pi))


def greedy_policy(q):
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ValidationError("Q-table has non-finite entries")
    # argmax returns the first maximiser, i.e. the lowest action index
    return np.argmax(q, axis=1).astype(np.int64)


def policy_iteration(mdp, pi0=None, max_iter=10_000):
    """Howard policy iteration; returns an optimal deterministic policy.

    Improvement only switches action when it is strictly better by more than
    a rounding margin, so the loop terminates and ties keep the incumbent.
    """
    pi = np.zeros(mdp.n_states, dtype=np.int64) if pi0 is None else check_policy(mdp, pi0)
    scale = mdp.r_max / (1.0 - mdp.gamma)
    idx = np.arange(mdp.n_states)
    for _ in range(max_iter):
        q = exact_q(mdp, pi)
        best = greedy_policy(q)
        gain = q[idx, best] - q[idx, pi]
        switch = gain > 1e-12 * max(scale, 1.0)
        if not np.any(switch):
            return pi
        pi = np.where(switch, best, pi)
    raise SolverError("policy iteration did not terminate")


def optimal_q(mdp):
    return exact_q(mdp, policy_iteration(mdp))


def tv_distance(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"length mismatch: {p.shape} vs {q.shape}")
    return float(0.5 * np.sum(np.abs(p - q)))


def stochastic_v(mdp, probs):
    """Value of a stochastic policy given as an ``(S, A)`` probability table."""
    probs = np.asarray(probs, dtype=np.float64)
    p_pi = np.einsum("sa,sat->st", probs, mdp.transition)
    r_pi = np.sum(probs * mdp.reward, axis=1)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * p_pi, r_pi)
