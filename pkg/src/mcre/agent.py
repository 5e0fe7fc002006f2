"""MCRQ: a TD3-style actor-critic trained on a fixed dataset.

The critic target blends the usual clipped double-Q target ``y1`` with a
TD-corrected target ``y2`` (weight ``upsilon``) and subtracts a behaviour
cloning penalty ``gamma * omega * ||pi(s) - a||^2``. The actor maximises a
normalised Q-value while regressing toward dataset actions (weight ``alpha``).
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from mcre import neural
from mcre.envs import make_env
from mcre.errors import ConfigurationError, InvalidConfigError, TrainingDivergenceError

log = logging.getLogger(__name__)

# (upsilon, omega, alpha) per dataset, halfcheetah / hopper / walker2d
PRESETS = {
    "halfcheetah-r": (0.0, 2.5, 25.0),
    "halfcheetah-m": (0.0, 0.0, 25.0),
    "halfcheetah-m-r": (0.1, 0.0, 25.0),
    "halfcheetah-m-e": (0.2, 2.0, 2.5),
    "halfcheetah-e": (0.2, 0.5, 2.5),
    "hopper-r": (0.0, 0.0, 20.0),
    "hopper-m": (0.0, 2.0, 10.0),
    "hopper-m-r": (0.0, 1.0, 20.0),
    "hopper-m-e": (0.0, 2.0, 2.5),
    "hopper-e": (0.3, 1.5, 2.5),
    "walker2d-r": (0.3, 2.0, 15.0),
    "walker2d-m": (0.0, 1.0, 5.0),
    "walker2d-m-r": (0.0, 2.0, 10.0),
    "walker2d-m-e": (0.0, 1.0, 5.0),
    "walker2d-e": (0.0, 2.5, 5.0),
}

LOG_COLUMNS = ("step", "critic_loss", "actor_loss", "eval_return", "normalized_score",
               "action_divergence")
VAR_FLOOR = 1e-6
LAMBDA_FLOOR = 1e-8


@dataclass
class McrqConfig:
    upsilon: float = 0.0
    omega: float = 0.0
    alpha: float = 2.5
    gamma: float = 0.99
    tau: float = 0.005
    policy_delay: int = 2
    batch_size: int = 256
    total_steps: int = 50_000
    target_noise_sigma: float = 0.2
    target_noise_clip: float = 0.5
    eval_interval: int = 5000
    eval_episodes: int = 10
    seed: int = 0
    hidden: tuple = (64, 64)
    lr: float = 3e-4

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        checks = [
            (0.0 <= self.upsilon <= 1.0, "upsilon must lie in [0, 1]"),
            (self.omega >= 0.0, "omega must be >= 0"),
            (self.alpha >= 0.0, "alpha must be >= 0"),
            (0.0 <= self.gamma < 1.0, "gamma must lie in [0, 1)"),
            (0.0 < self.tau <= 1.0, "tau must lie in (0, 1]"),
            (self.policy_delay >= 1, "policy_delay must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.total_steps >= 0, "total_steps must be >= 0"),
            (self.target_noise_sigma >= 0.0, "target_noise_sigma must be >= 0"),
            (self.target_noise_clip >= 0.0, "target_noise_clip must be >= 0"),
            (self.eval_interval >= 1, "eval_interval must be >= 1"),
            (self.eval_episodes >= 1, "eval_episodes must be >= 1"),
            (len(self.hidden) >= 1 and min(self.hidden) >= 1, "hidden sizes must be positive"),
            (self.lr > 0.0, "lr must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise InvalidConfigError(msg)

    def to_dict(self):
        doc = asdict(self)
        doc["hidden"] = list(self.hidden)
        return doc

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ConfigurationError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
        upsilon, omega, alpha = PRESETS[name]
        return cls(**{"upsilon": upsilon, "omega": omega, "alpha": alpha, **overrides})


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __post_init__(self):
        n = len(self.rewards)
        for name in ("states", "actions", "next_states", "dones"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"batch column {name} has the wrong length")


@dataclass
class AgentState:
    critic1: neural.Mlp
    critic2: neural.Mlp
    actor: neural.Mlp
    target_critic1: neural.Mlp
    target_critic2: neural.Mlp
    target_actor: neural.Mlp
    opt_critic1: neural.OptimState
    opt_critic2: neural.OptimState
    opt_actor: neural.OptimState
    state_mean: np.ndarray
    state_std: np.ndarray
    action_bound: float
    step: int = 0

    @property
    def action_dim(self):
        return self.actor.out_dim

    def normalize(self, obs):
        return (np.asarray(obs, dtype=np.float64) - self.state_mean) / self.state_std

    def policy(self):
        return AgentPolicy(self.actor, self.state_mean, self.state_std)

    def clone(self):
        return copy.deepcopy(self)


class AgentPolicy:
    """Deterministic policy on raw observations (normalises internally)."""

    def __init__(self, actor, state_mean, state_std):
        self.actor = actor
        self.state_mean = state_mean
        self.state_std = state_std

    def __call__(self, obs):
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        return self.actor((obs - self.state_mean) / self.state_std)


def init_agent(state_dim, action_dim, action_bound, cfg, rng, state_mean=None, state_std=None):
    hidden = list(cfg.hidden)
    critic_dims = [state_dim + action_dim] + hidden + [1]
    actor_dims = [state_dim] + hidden + [action_dim]
    c1 = neural.init_mlp(critic_dims, rng)
    c2 = neural.init_mlp(critic_dims, rng)
    actor = neural.init_mlp(actor_dims, rng, "tanh", action_bound)
    opt = lambda net: neural.OptimState.for_params(net.params, lr=cfg.lr)  # noqa: E731
    mean = np.zeros(state_dim) if state_mean is None else np.asarray(state_mean, dtype=np.float64)
    std = np.ones(state_dim) if state_std is None else np.asarray(state_std, dtype=np.float64)
    return AgentState(c1, c2, actor, c1.copy(), c2.copy(), actor.copy(),
                      opt(c1), opt(c2), opt(actor), mean, std, float(action_bound))


def _q(net, states, actions, cache=False):
    x = np.concatenate([states, actions], axis=1)
    if cache:
        out, c = neural.forward_with_cache(net, x)
        return out[:, 0], x, c
    return neural.forward(net, x)[:, 0]


def _finite(*arrays, what="critic output"):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise TrainingDivergenceError(f"non-finite {what}")


def target_action(agent, next_states, cfg, rng):
    """Smoothed target action: target actor plus clipped Gaussian noise, clamped."""
    base = agent.target_actor(next_states)
    noise = np.clip(rng.normal(0.0, cfg.target_noise_sigma, size=base.shape),
                    -cfg.target_noise_clip, cfg.target_noise_clip)
    return np.clip(base + noise, -agent.action_bound, agent.action_bound)


def td_target_parts(agent, batch, cfg, next_actions):
    """All intermediate quantities of the critic target, as a dict.

    ``bracket`` is the TD-corrected bootstrap inside ``y2``; ``correction``
    is what ``y2`` subtracts from the optimistic ``max`` bootstrap.
    """
    q1n = _q(agent.target_critic1, batch.next_states, next_actions)
    q2n = _q(agent.target_critic2, batch.next_states, next_actions)
    _finite(q1n, q2n)
    minq = np.minimum(q1n, q2n)
    not_done = 1.0 - batch.dones.astype(np.float64)
    y1 = batch.rewards + not_done * cfg.gamma * minq
    parts = {"y1": y1}
    pi_s = agent.actor(batch.states) if (cfg.upsilon != 0.0 or cfg.omega > 0.0) else None
    if cfg.upsilon == 0.0:
        y = y1
    else:
        cur = np.maximum(_q(agent.critic1, batch.states, pi_s), _q(agent.critic2, batch.states, pi_s))
        _finite(cur)
        maxq = np.maximum(q1n, q2n)
        correction = batch.rewards + cfg.gamma * minq - cur
        bracket = maxq - correction
        y2 = batch.rewards + not_done * cfg.gamma * bracket
        y = (1.0 - cfg.upsilon) * y1 + cfg.upsilon * y2
        parts.update(y2=y2, bracket=bracket, correction=correction, current=cur)
    if cfg.omega > 0.0:
        diff = pi_s - batch.actions
        bc = cfg.omega * np.sum(diff * diff, axis=1)
        y = y - cfg.gamma * bc
        parts["bc"] = bc
    parts["y"] = y
    return parts


def td_target(agent, batch, cfg, rng=None, next_actions=None):
    """Critic regression target, one value per row (a constant for all gradients)."""
    if next_actions is None:
        if rng is None:
            raise ValueError("need rng or next_actions")
        next_actions = target_action(agent, batch.next_states, cfg, rng)
    return td_target_parts(agent, batch, cfg, next_actions)["y"]


def critic_loss_and_grads(agent, batch, y, params1=None, params2=None):
    """Mean over rows and both critics of ``(y - Q_i(s, a))^2`` and its gradients."""
    n = len(y)
    losses, grads = [], []
    for net, params in ((agent.critic1, params1), (agent.critic2, params2)):
        if params is not None:
            net = neural.Mlp(net.layer_dims, net.output_activation, net.bound, params)
        q, x, cache = _q(net, batch.states, batch.actions, cache=True)
        err = q - y
        losses.append(np.mean(err * err))
        g, _ = neural.backward(net, x, (err / n)[:, None], cache=cache)
        grads.append(g)
    return 0.5 * (losses[0] + losses[1]), grads[0], grads[1]


def critic_update(agent, batch, y):
    loss, g1, g2 = critic_loss_and_grads(agent, batch, y)
    if not np.isfinite(loss):
        raise TrainingDivergenceError("non-finite critic loss")
    neural.adam_step(agent.critic1.params, g1, agent.opt_critic1)
    neural.adam_step(agent.critic2.params, g2, agent.opt_critic2)
    return float(loss)


def actor_lambda(agent, batch, alpha):
    denom = float(np.mean(np.abs(_q(agent.critic1, batch.states, batch.actions))))
    if denom < LAMBDA_FLOOR:
        log.debug("mean |Q| = %.3g below floor; lambda denominator clamped", denom)
        denom = LAMBDA_FLOOR
    return alpha / denom


def actor_loss_and_grad(agent, batch, cfg, params=None):
    """``-mean(lambda * Q1(s, pi(s)) - ||pi(s) - a||^2)`` and its actor gradient.

    ``lambda`` depends only on the critic and dataset actions, so it is a
    constant with respect to the actor parameters.
    """
    actor = agent.actor
    if params is not None:
        actor = neural.Mlp(actor.layer_dims, actor.output_activation, actor.bound, params)
    lam = actor_lambda(agent, batch, cfg.alpha)
    pi, pcache = neural.forward_with_cache(actor, batch.states)
    diff = pi - batch.actions
    sq = np.sum(diff * diff, axis=1)
    n = len(sq)
    if lam != 0.0:
        q, x, qcache = _q(agent.critic1, batch.states, pi, cache=True)
        _finite(q)
        _, gx = neural.backward(agent.critic1, x, np.full((n, 1), 1.0), cache=qcache)
        dq_da = gx[:, batch.states.shape[1]:]
    else:
        q = np.zeros(n)
        dq_da = np.zeros_like(pi)
    loss = -np.mean(lam * q - sq)
    upstream = (-lam * dq_da + 2.0 * diff) / n
    grad, _ = neural.backward(actor, batch.states, upstream, cache=pcache)
    return float(loss), grad, lam


def actor_update(agent, batch, cfg):
    loss, grad, _ = actor_loss_and_grad(agent, batch, cfg)
    if not np.isfinite(loss):
        raise TrainingDivergenceError("non-finite actor loss")
    neural.adam_step(agent.actor.params, grad, agent.opt_actor)
    return loss


def update_targets(agent, tau):
    neural.soft_update(agent.target_critic1, agent.critic1, tau)
    neural.soft_update(agent.target_critic2, agent.critic2, tau)
    neural.soft_update(agent.target_actor, agent.actor, tau)


# ---------------------------------------------------------------------------
# evaluation


def evaluate(env, policy, episodes, seed):
    """Mean undiscounted return of deterministic rollouts and its normalised score."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    refs = getattr(env, "reference_returns", None)
    if refs is None:
        raise ConfigurationError(f"{type(env).__name__} has no reference returns")
    returns = np.asarray(env.episode_returns(policy, episodes, seed), dtype=np.float64)
    mean = float(np.mean(returns))
    return {"mean_return": mean, "normalized_score": float(refs.normalize(mean)),
            "returns": returns.tolist()}


def gaussian_kl(mu_p, var_p, mu_q, var_q):
    """``KL(N(mu_p, var_p) || N(mu_q, var_q))`` for diagonal Gaussians."""
    mu_p, var_p, mu_q, var_q = (np.asarray(x, dtype=np.float64) for x in (mu_p, var_p, mu_q, var_q))
    return float(np.sum(0.5 * np.log(var_q / var_p)
                        + (var_p + (mu_p - mu_q) ** 2) / (2.0 * var_q) - 0.5))


def action_divergence(dataset, policy):
    """KL from a Gaussian fit of the policy's actions to one of the dataset's.

    Both fits are diagonal, over the dataset states; variances are floored
    at ``1e-6``.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    data_act = np.asarray(dataset.actions, dtype=np.float64).reshape(len(dataset), -1)
    pol_act = np.asarray(policy(dataset.states), dtype=np.float64).reshape(len(dataset), -1)
    fits = []
    for acts in (pol_act, data_act):
        var = acts.var(axis=0)
        if np.any(var < VAR_FLOOR):
            log.debug("action variance %s floored at %g", var, VAR_FLOOR)
        fits.append((acts.mean(axis=0), np.maximum(var, VAR_FLOOR)))
    (mu_p, var_p), (mu_d, var_d) = fits
    return gaussian_kl(mu_p, var_p, mu_d, var_d)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)

    def append(self, **row):
        self.rows.append({k: row[k] for k in LOG_COLUMNS})

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in self.rows:
            writer.writerow([row["step"]] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]])
        return buf.getvalue()

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv())


def state_stats(dataset):
    states = np.asarray(dataset.states, dtype=np.float64)
    return states.mean(axis=0), states.std(axis=0) + 1e-3


def train(dataset, cfg, env=None):
    """Run ``cfg.total_steps`` gradient steps; returns ``(agent, log)``.

    Every random draw (initialisation, minibatches, target noise, evaluation
    starts) comes from ``cfg.seed``, so a run is bit-reproducible.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.is_tabular:
        raise ConfigurationError("MCRQ needs a continuous-action dataset")
    env = make_env(dataset.env_id) if env is None else env
    init_ss, batch_ss, noise_ss, eval_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    mean, std = state_stats(dataset)
    states = (dataset.states - mean) / std
    next_states = (dataset.next_states - mean) / std
    actions = np.asarray(dataset.actions, dtype=np.float64).reshape(len(dataset), -1)
    rewards = np.asarray(dataset.rewards, dtype=np.float64)
    dones = np.asarray(dataset.dones, dtype=bool)
    agent = init_agent(states.shape[1], actions.shape[1], env.action_bound, cfg,
                       np.random.default_rng(init_ss), mean, std)
    batch_rng = np.random.default_rng(batch_ss)
    noise_rng = np.random.default_rng(noise_ss)
    eval_rng = np.random.default_rng(eval_ss)
    history = TrainingLog()
    snapshot = agent.clone()
    critic_loss = actor_loss = float("nan")
    n = len(dataset)
    for t in range(1, cfg.total_steps + 1):
        idx = batch_rng.integers(0, n, size=cfg.batch_size)
        batch = Batch(states[idx], actions[idx], rewards[idx], next_states[idx], dones[idx])
        try:
            y = td_target(agent, batch, cfg, rng=noise_rng)
            critic_loss = critic_update(agent, batch, y)
            if t % cfg.policy_delay == 0:
                actor_loss = actor_update(agent, batch, cfg)
                update_targets(agent, cfg.tau)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"step {t}: {exc}", state=snapshot) from exc
        agent.step = t
        if t % cfg.eval_interval == 0:
            seed = int(eval_rng.integers(2**62))
            result = evaluate(env, agent.policy(), cfg.eval_episodes, seed)
            div = action_divergence(dataset, agent.policy())
            history.append(step=t, critic_loss=critic_loss, actor_loss=actor_loss,
                           eval_return=result["mean_return"],
                           normalized_score=result["normalized_score"], action_divergence=div)
            log.info("step %d: return %.4f score %.2f", t, result["mean_return"],
                     result["normalized_score"])
            snapshot = agent.clone()
    return agent, history


# ---------------------------------------------------------------------------
# checkpoints

_NET_NAMES = ("critic1", "critic2", "actor", "target_critic1", "target_critic2", "target_actor")
_OPT_NAMES = ("opt_critic1", "opt_critic2", "opt_actor")


def save_agent(directory, agent, cfg):
    nets = {name: getattr(agent, name) for name in _NET_NAMES}
    arrays = {"state_mean": agent.state_mean, "state_std": agent.state_std}
    opt_meta = {}
    for name in _OPT_NAMES:
        st = getattr(agent, name)
        arrays[f"{name}.m"] = st.m
        arrays[f"{name}.v"] = st.v
        opt_meta[name] = {"step": st.step, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2,
                          "eps": st.eps}
    meta = {"step": agent.step, "action_bound": agent.action_bound, "optimizers": opt_meta}
    neural.save_checkpoint(directory, nets, arrays, meta)
    with open(os.path.join(directory, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_agent(directory):
    nets, arrays, meta = neural.load_checkpoint(directory)
    with open(os.path.join(directory, "config.json")) as fh:
        cfg = McrqConfig.from_dict(json.load(fh))
    opts = {}
    for name in _OPT_NAMES:
        om = meta["optimizers"][name]
        opts[name] = neural.OptimState(arrays[f"{name}.m"], arrays[f"{name}.v"], om["step"],
                                       om["lr"], om["beta1"], om["beta2"], om["eps"])
    agent = AgentState(**{k: nets[k] for k in _NET_NAMES}, **opts,
                       state_mean=arrays["state_mean"], state_std=arrays["state_std"],
                       action_bound=meta["action_bound"], step=meta["step"])
    return agent, cfg
