"""Desk-scale environments with known reference solutions.

``gridworld-8x8-v1`` is a slippery tabular grid whose exact
:class:`~mcre.mdp.TabularMdp` twin is available for oracles;
``pointmass-1d-v1`` is a continuous double integrator used by the neural
agent. Both carry random/expert reference returns for score normalisation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_are

from mcre import kernels
from mcre.errors import ConfigurationError, EpisodeCompleteError
from mcre.mdp import TabularMdp, check_policy, policy_iteration

GRIDWORLD_ID = "gridworld-8x8-v1"
POINTMASS_ID = "pointmass-1d-v1"


@dataclass
class EnvState:
    obs: object
    steps_elapsed: int = 0
    done: bool = False
    rng: np.random.Generator | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class ReferenceReturns:
    random_ref: float
    expert_ref: float

    def normalize(self, ret):
        return 100.0 * (ret - self.random_ref) / (self.expert_ref - self.random_ref)


# ---------------------------------------------------------------------------
# gridworld


@dataclass(frozen=True, eq=False)
class TablePolicy:
    """Epsilon-greedy wrapper around a deterministic action table."""

    table: np.ndarray
    eps: float = 0.0


def build_gridworld_mdp(size=8, slip=0.1, gamma=0.99):
    """Row-major grid, goal in the far corner (absorbing, reward 1 per step).

    Actions are up/right/down/left; with probability ``slip`` the move goes to
    one of the two perpendicular directions instead. Bumping a wall stays put.
    """
    n = size * size
    goal = n - 1
    moves = [(-1, 0), (0, 1), (1, 0), (0, -1)]
    p = np.zeros((n, 4, n))
    for s in range(n):
        if s == goal:
            p[s, :, s] = 1.0
            continue
        row, col = divmod(s, size)
        for a in range(4):
            outcomes = [(a, 1.0 - slip), ((a + 1) % 4, slip / 2), ((a + 3) % 4, slip / 2)]
            for direction, prob in outcomes:
                dr, dc = moves[direction]
                r2, c2 = row + dr, col + dc
                if not (0 <= r2 < size and 0 <= c2 < size):
                    r2, c2 = row, col
                p[s, a, r2 * size + c2] += prob
    reward = np.zeros((n, 4))
    reward[goal, :] = 1.0
    rho = np.full(n, 1.0 / (n - 1))
    rho[goal] = 0.0
    return TabularMdp(p, reward, gamma, r_max=1.0, initial_dist=rho)


class GridWorld:
    env_id = GRIDWORLD_ID
    horizon = 100
    # 100k-episode means, seed 0 (see reference_returns_estimate)
    reference_returns = ReferenceReturns(random_ref=16.63933, expert_ref=92.01476)

    def __init__(self):
        self.mdp = build_gridworld_mdp()
        self._cum_p = np.cumsum(self.mdp.transition, axis=2)
        self._start_cum = np.cumsum(self.mdp.initial_dist)
        self._expert = None

    @property
    def n_states(self):
        return self.mdp.n_states

    @property
    def n_actions(self):
        return self.mdp.n_actions

    def expert_table(self):
        if self._expert is None:
            self._expert = policy_iteration(self.mdp)
        return self._expert

    def reference_policies(self):
        zeros = np.zeros(self.n_states, dtype=np.int64)
        return {"random": TablePolicy(zeros, 1.0), "expert": TablePolicy(self.expert_table(), 0.0)}

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        s = int(rng.choice(self.n_states, p=self.mdp.initial_dist))
        return EnvState(obs=s, rng=rng)

    def step(self, state, action):
        if state.done:
            raise EpisodeCompleteError("episode already finished")
        a = int(action)
        if not 0 <= a < self.n_actions:
            raise ValueError(f"action {a} out of range")
        s = state.obs
        s2 = int(state.rng.choice(self.n_states, p=self.mdp.transition[s, a]))
        t = state.steps_elapsed + 1
        reward = float(self.mdp.reward[s, a])
        return EnvState(obs=s2, steps_elapsed=t, done=t >= self.horizon, rng=state.rng), reward

    def sample_episodes(self, policy, n_episodes, rng, horizon=None):
        """Vectorised rollouts; returns ``(states, actions, next_states)``."""
        if not isinstance(policy, TablePolicy):
            policy = TablePolicy(np.asarray(policy), 0.0)
        table = check_policy(self.mdp, policy.table)
        horizon = self.horizon if horizon is None else horizon
        u_start = rng.random(n_episodes)
        u_eps = rng.random((n_episodes, horizon))
        u_act = rng.random((n_episodes, horizon))
        u_next = rng.random((n_episodes, horizon))
        return kernels.sample_episodes(self._cum_p, self._start_cum, table, policy.eps,
                                       self.n_actions, u_start, u_eps, u_act, u_next)

    def episode_returns(self, policy, episodes, seed):
        s, a, _ = self.sample_episodes(policy, episodes, np.random.default_rng(seed))
        return self.mdp.reward[s, a].sum(axis=1)

    def expected_return(self, policy):
        """Exact expected undiscounted return over the horizon from rho0."""
        if not isinstance(policy, TablePolicy):
            policy = TablePolicy(np.asarray(policy), 0.0)
        probs = np.full((self.n_states, self.n_actions), policy.eps / self.n_actions)
        probs[np.arange(self.n_states), policy.table] += 1.0 - policy.eps
        p_pi = np.einsum("sa,sat->st", probs, self.mdp.transition)
        r_pi = np.sum(probs * self.mdp.reward, axis=1)
        value = np.zeros(self.n_states)
        for _ in range(self.horizon):
            value = r_pi + p_pi @ value
        return float(self.mdp.initial_dist @ value)


# ---------------------------------------------------------------------------
# point mass


class RandomPolicy:
    def __init__(self, bound, action_dim, rng):
        self.bound = bound
        self.action_dim = action_dim
        self.rng = rng

    def __call__(self, obs):
        obs = np.atleast_2d(obs)
        return self.rng.uniform(-self.bound, self.bound, size=(obs.shape[0], self.action_dim))


class LinearFeedbackPolicy:
    """Saturated linear state feedback ``a = clip(-K s)``."""

    def __init__(self, gain, bound):
        self.gain = np.asarray(gain, dtype=np.float64)
        self.bound = bound

    def __call__(self, obs):
        obs = np.atleast_2d(obs)
        return np.clip(-(obs @ self.gain)[:, None], -self.bound, self.bound)


class PointMass:
    """1-D double integrator ``x' = x + v dt, v' = v + a dt``.

    Reward is ``-(x^2 + 0.1 a^2) dt``; episodes always last ``horizon``
    steps and start at rest with ``x ~ U[-1, 1]``.
    """

    env_id = POINTMASS_ID
    state_dim = 2
    action_dim = 1
    action_bound = 1.0
    dt = 0.05
    horizon = 200
    start_low, start_high = -1.0, 1.0
    action_cost = 0.1
    # 100k-episode means, seed 0 (see reference_returns_estimate)
    reference_returns = ReferenceReturns(random_ref=-17.433067594238903,
                                         expert_ref=-0.3020478692613539)

    def __init__(self):
        self._gain = None

    def pd_gain(self):
        """Infinite-horizon LQR gain for the per-step cost; a PD law on (x, v)."""
        if self._gain is None:
            a = np.array([[1.0, self.dt], [0.0, 1.0]])
            b = np.array([[0.0], [self.dt]])
            q = np.diag([self.dt, 0.0])
            r = np.array([[self.action_cost * self.dt]])
            p = solve_discrete_are(a, b, q, r)
            self._gain = np.linalg.solve(r + b.T @ p @ b, b.T @ p @ a).ravel()
        return self._gain

    def reference_policies(self, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        return {"random": RandomPolicy(self.action_bound, self.action_dim, rng),
                "expert": LinearFeedbackPolicy(self.pd_gain(), self.action_bound)}

    def reset(self, seed):
        rng = np.random.default_rng(seed)
        x0 = rng.uniform(self.start_low, self.start_high)
        return EnvState(obs=np.array([x0, 0.0]), rng=rng)

    def _advance(self, obs, action):
        x, v = obs[..., 0], obs[..., 1]
        a = action[..., 0]
        reward = -(x * x + self.action_cost * a * a) * self.dt
        nxt = np.stack([x + v * self.dt, v + a * self.dt], axis=-1)
        return nxt, reward

    def step(self, state, action):
        if state.done:
            raise EpisodeCompleteError("episode already finished")
        action = np.clip(np.asarray(action, dtype=np.float64).reshape(self.action_dim),
                         -self.action_bound, self.action_bound)
        nxt, reward = self._advance(state.obs, action)
        t = state.steps_elapsed + 1
        return EnvState(obs=nxt, steps_elapsed=t, done=t >= self.horizon, rng=state.rng), float(reward)

    def start_states(self, n_episodes, rng):
        x0 = rng.uniform(self.start_low, self.start_high, size=n_episodes)
        return np.stack([x0, np.zeros(n_episodes)], axis=1)

    def rollout(self, policy, n_episodes, rng):
        """Run ``n_episodes`` in lock-step.

        Returns ``(obs, actions, rewards, next_obs)`` shaped
        ``(episodes, horizon, ...)``.
        """
        obs = self.start_states(n_episodes, rng)
        all_obs = np.empty((n_episodes, self.horizon, self.state_dim))
        all_act = np.empty((n_episodes, self.horizon, self.action_dim))
        all_rew = np.empty((n_episodes, self.horizon))
        all_next = np.empty_like(all_obs)
        for t in range(self.horizon):
            act = np.clip(policy(obs), -self.action_bound, self.action_bound)
            nxt, rew = self._advance(obs, act)
            all_obs[:, t], all_act[:, t], all_rew[:, t], all_next[:, t] = obs, act, rew, nxt
            obs = nxt
        return all_obs, all_act, all_rew, all_next

    def episode_returns(self, policy, episodes, seed):
        """Same draws as :meth:`rollout`, keeping only the running reward sums."""
        obs = self.start_states(episodes, np.random.default_rng(seed))
        total = np.zeros(episodes)
        for _ in range(self.horizon):
            act = np.clip(policy(obs), -self.action_bound, self.action_bound)
            obs, rew = self._advance(obs, act)
            total += rew
        return total


# ---------------------------------------------------------------------------
# registry

_REGISTRY = {GRIDWORLD_ID: GridWorld, POINTMASS_ID: PointMass}


def env_ids():
    return sorted(_REGISTRY)


def make_env(env_id):
    try:
        return _REGISTRY[env_id]()
    except KeyError:
        raise ConfigurationError(f"unknown env_id {env_id!r}; known: {env_ids()}") from None


REFERENCE_EPISODES = 100_000
_CHUNK = 5_000


def reference_returns_estimate(env, episodes=REFERENCE_EPISODES, seed=0):
    """Recompute the stored reference returns with fresh rollouts.

    Episodes run in chunks of at most 5000, each with its own child seed, so
    memory stays bounded for large counts.
    """
    root = np.random.SeedSequence(seed)
    policy_seed, rand_seed, exp_seed = root.spawn(3)
    if isinstance(env, GridWorld):
        pols = env.reference_policies()
    else:
        pols = env.reference_policies(np.random.default_rng(policy_seed))

    def mean_return(policy, seq):
        sizes = [min(_CHUNK, episodes - k) for k in range(0, episodes, _CHUNK)]
        total = sum(float(np.sum(env.episode_returns(policy, m, child)))
                    for m, child in zip(sizes, seq.spawn(len(sizes))))
        return total / episodes

    return ReferenceReturns(mean_return(pols["random"], rand_seed),
                            mean_return(pols["expert"], exp_seed))
