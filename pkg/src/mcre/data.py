"""Offline datasets: generation from graded behaviour policies, the
``mcre-ds/1`` JSON Lines format, empirical model fitting and the measured
transition deviation used in place of the concentration constant.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from mcre import kernels
from mcre.envs import GridWorld, TablePolicy, make_env
from mcre.errors import (ConfigurationError, DatasetIntegrityError, DatasetParseError,
                         MissingSupportError, ValidationError)
from mcre.mdp import TabularMdp

log = logging.getLogger(__name__)

FORMAT_VERSION = "mcre-ds/1"
BEHAVIOR_KINDS = ("random", "epsilon_greedy", "expert", "mixture", "replay_schedule")


@dataclass(frozen=True)
class BehaviorSpec:
    kind: str
    epsilon: float = 0.0
    # mixture: ((weight, spec), ...); replay_schedule: eps_start -> eps_end over segments
    components: tuple = ()
    eps_start: float = 1.0
    eps_end: float = 0.3
    segments: int = 8

    def __post_init__(self):
        if self.kind not in BEHAVIOR_KINDS:
            raise ValidationError(f"unknown behaviour kind {self.kind!r}")
        for eps in (self.epsilon, self.eps_start, self.eps_end):
            if not 0.0 <= eps <= 1.0:
                raise ValidationError(f"epsilon {eps} outside [0, 1]")
        if self.kind == "mixture":
            if not self.components:
                raise ValidationError("mixture needs components")
            weights = np.array([w for w, _ in self.components], dtype=float)
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
                raise ValidationError("mixture weights must form a distribution")
        if self.kind == "replay_schedule" and self.segments < 1:
            raise ValidationError("replay schedule needs at least one segment")

    def to_dict(self):
        doc = {"kind": self.kind}
        if self.kind == "epsilon_greedy":
            doc["epsilon"] = self.epsilon
        elif self.kind == "mixture":
            doc["components"] = [[w, c.to_dict()] for w, c in self.components]
        elif self.kind == "replay_schedule":
            doc.update(eps_start=self.eps_start, eps_end=self.eps_end, segments=self.segments)
        return doc

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        comps = tuple((float(w), cls.from_dict(c)) for w, c in doc.pop("components", ()))
        return cls(components=comps, **doc)


TIERS = {
    "random": BehaviorSpec("random"),
    "medium": BehaviorSpec("epsilon_greedy", epsilon=0.3),
    "expert": BehaviorSpec("epsilon_greedy", epsilon=0.05),
    "medium-replay": BehaviorSpec("replay_schedule", eps_start=1.0, eps_end=0.3, segments=8),
    "medium-expert": BehaviorSpec("mixture", components=(
        (0.5, BehaviorSpec("epsilon_greedy", epsilon=0.3)),
        (0.5, BehaviorSpec("epsilon_greedy", epsilon=0.05)))),
}


def tier_spec(name):
    try:
        return TIERS[name]
    except KeyError:
        raise ConfigurationError(f"unknown tier {name!r}; known: {sorted(TIERS)}") from None


@dataclass(frozen=True)
class Transition:
    state: object
    action: object
    reward: float
    next_state: object
    done: bool


@dataclass(eq=False)
class OfflineDataset:
    """Column-stored transition log.

    Tabular datasets hold integer ``(n,)`` state/action columns; continuous
    ones hold ``(n, dim)`` float columns.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.rewards)
        for name in ("states", "actions", "next_states", "dones"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"column {name} has wrong length")
        if not np.all(np.isfinite(self.rewards)):
            raise ValidationError("rewards must be finite")
        self.meta = dict(self.meta)
        self.meta["count"] = n

    def __len__(self):
        return len(self.rewards)

    @property
    def count(self):
        return len(self)

    @property
    def env_id(self):
        return self.meta.get("env_id")

    @property
    def is_tabular(self):
        return self.states.ndim == 1

    def __getitem__(self, i):
        conv = int if self.is_tabular else (lambda x: x.tolist())
        return Transition(conv(self.states[i]), conv(self.actions[i]), float(self.rewards[i]),
                          conv(self.next_states[i]), bool(self.dones[i]))

    @property
    def transitions(self):
        return [self[i] for i in range(len(self))]

    def episode_returns(self):
        """Undiscounted returns of the complete episodes (ending in ``done``)."""
        ends = np.flatnonzero(self.dones)
        sums = np.cumsum(self.rewards)
        totals = sums[ends]
        return np.diff(np.concatenate([[0.0], totals]))

    def concat(self, other):
        return OfflineDataset(*(np.concatenate([getattr(self, k), getattr(other, k)])
                                for k in ("states", "actions", "rewards", "next_states", "dones")),
                              meta=self.meta)

    def replicate(self, times):
        out = self
        for _ in range(times - 1):
            out = out.concat(self)
        return out


# ---------------------------------------------------------------------------
# generation


class _EpsilonGreedy:
    def __init__(self, expert, eps, bound, action_dim, rng):
        self.expert, self.eps, self.bound, self.action_dim, self.rng = expert, eps, bound, action_dim, rng

    def __call__(self, obs):
        act = self.expert(obs)
        u = self.rng.random(obs.shape[0])
        rand = self.rng.uniform(-self.bound, self.bound, size=(obs.shape[0], self.action_dim))
        return np.where((u < self.eps)[:, None], rand, act)


def _eps_of(spec):
    return {"random": 1.0, "expert": 0.0}.get(spec.kind, spec.epsilon)


def _rollout_columns(env, eps, n, seed_seq):
    rng = np.random.default_rng(seed_seq)
    n_ep = math.ceil(n / env.horizon)
    if isinstance(env, GridWorld):
        s, a, s2 = env.sample_episodes(TablePolicy(env.expert_table(), eps), n_ep, rng)
        r = env.mdp.reward[s, a]
    else:
        expert = env.reference_policies()["expert"]
        behavior = _EpsilonGreedy(expert, eps, env.action_bound, env.action_dim, rng)
        s, a, r, s2 = env.rollout(behavior, n_ep, rng)
    done = np.zeros(r.shape, dtype=bool)
    done[:, -1] = True

    def flat(x):
        return x.reshape((-1,) + x.shape[2:])[:n]

    return [flat(x) for x in (s, a, r, s2, done)]


def _generate(env, spec, n, seed_seq):
    if spec.kind in ("random", "epsilon_greedy", "expert"):
        return _rollout_columns(env, _eps_of(spec), n, seed_seq)
    if spec.kind == "replay_schedule":
        sizes = [n // spec.segments + (i < n % spec.segments) for i in range(spec.segments)]
        eps = np.linspace(spec.eps_start, spec.eps_end, spec.segments)
        parts = [_rollout_columns(env, float(e), m, ss)
                 for e, m, ss in zip(eps, sizes, seed_seq.spawn(spec.segments)) if m > 0]
    else:
        weights = [w for w, _ in spec.components]
        sizes = [int(round(w * n)) for w in weights[:-1]]
        sizes.append(n - sum(sizes))
        parts = [_generate(env, comp, m, ss)
                 for (_, comp), m, ss in zip(spec.components, sizes, seed_seq.spawn(len(sizes)))
                 if m > 0]
    return [np.concatenate(cols) for cols in zip(*parts)]


def generate_dataset(env, spec, n, seed):
    """Draw exactly ``n`` transitions from ``env`` under behaviour ``spec``.

    ``env`` may be an env instance or a registered env id, ``spec`` a
    :class:`BehaviorSpec` or a tier name. Episodes run to the env horizon and
    the last transition of each carries ``done``; the dataset is a pure
    function of ``(env, spec, n, seed)``.
    """
    if isinstance(env, str):
        env = make_env(env)
    if isinstance(spec, str):
        spec = tier_spec(spec)
    if n < 1:
        raise ValidationError("n must be at least 1")
    cols = _generate(env, spec, int(n), np.random.SeedSequence(int(seed)))
    meta = {"format": FORMAT_VERSION, "env_id": env.env_id,
            "behavior_spec": spec.to_dict(), "seed": int(seed)}
    return OfflineDataset(*cols, meta=meta)


# ---------------------------------------------------------------------------
# serialization


def _record(ds, i):
    if ds.is_tabular:
        s, a, s2 = int(ds.states[i]), int(ds.actions[i]), int(ds.next_states[i])
    else:
        s, a, s2 = ds.states[i].tolist(), ds.actions[i].tolist(), ds.next_states[i].tolist()
    return {"s": s, "a": a, "r": float(ds.rewards[i]), "s2": s2, "d": bool(ds.dones[i])}


def _dumps(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def dumps_dataset(ds):
    meta = {"format": FORMAT_VERSION, "env_id": ds.meta.get("env_id"),
            "behavior_spec": ds.meta.get("behavior_spec"), "seed": ds.meta.get("seed"),
            "count": len(ds)}
    lines = [_dumps(meta)]
    lines.extend(_dumps(_record(ds, i)) for i in range(len(ds)))
    return "\n".join(lines) + "\n"


def save_dataset(ds, path):
    with open(path, "w", newline="\n") as fh:
        fh.write(dumps_dataset(ds))


def _reject_constant(name):
    raise ValueError(f"non-finite number {name}")


def _parse_line(text, lineno):
    try:
        return json.loads(text, parse_constant=_reject_constant)
    except ValueError as exc:
        raise DatasetParseError(str(exc), lineno) from None


def _check_record(rec, lineno, env):
    if not isinstance(rec, dict) or set(rec) != {"s", "a", "r", "s2", "d"}:
        raise DatasetParseError("record must have exactly keys s, a, r, s2, d", lineno)
    r = rec["r"]
    if isinstance(r, bool) or not isinstance(r, (int, float)) or not math.isfinite(r):
        raise DatasetParseError(f"reward {r!r} is not a finite number", lineno)
    if not isinstance(rec["d"], bool):
        raise DatasetParseError("done flag must be boolean", lineno)
    if isinstance(env, GridWorld):
        for key, hi in (("s", env.n_states), ("a", env.n_actions), ("s2", env.n_states)):
            v = rec[key]
            if isinstance(v, bool) or not isinstance(v, int) or not 0 <= v < hi:
                raise DatasetParseError(f"field {key}={v!r} is not a valid index", lineno)
    elif env is not None:
        for key, dim in (("s", env.state_dim), ("a", env.action_dim), ("s2", env.state_dim)):
            v = rec[key]
            if (not isinstance(v, list) or len(v) != dim
                    or not all(isinstance(x, (int, float)) and not isinstance(x, bool)
                               and math.isfinite(x) for x in v)):
                raise DatasetParseError(f"field {key} must be {dim} finite numbers", lineno)


def loads_dataset(text):
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetParseError("empty file", 1)
    meta = _parse_line(lines[0], 1)
    if not isinstance(meta, dict) or meta.get("format") != FORMAT_VERSION:
        raise DatasetParseError(f"header must declare format {FORMAT_VERSION!r}", 1)
    if set(meta) != {"format", "env_id", "behavior_spec", "seed", "count"}:
        raise DatasetParseError("header keys must be format, env_id, behavior_spec, seed, count", 1)
    try:
        env = make_env(meta["env_id"]) if meta["env_id"] is not None else None
    except ConfigurationError as exc:
        raise DatasetParseError(str(exc), 1) from None
    records = []
    for lineno, text_line in enumerate(lines[1:], start=2):
        rec = _parse_line(text_line, lineno)
        _check_record(rec, lineno, env)
        records.append(rec)
    expected = meta["count"]
    if len(records) != expected:
        raise DatasetIntegrityError(
            f"header declares {expected} records but file holds {len(records)}",
            expected, len(records))
    if not records:
        raise DatasetIntegrityError("dataset has no records", expected, 0)
    kind = np.int64 if isinstance(records[0]["s"], int) else np.float64
    cols = (np.array([r["s"] for r in records], dtype=kind),
            np.array([r["a"] for r in records], dtype=kind),
            np.array([float(r["r"]) for r in records]),
            np.array([r["s2"] for r in records], dtype=kind),
            np.array([r["d"] for r in records], dtype=bool))
    return OfflineDataset(*cols, meta={k: meta[k] for k in ("format", "env_id", "behavior_spec", "seed")})


def load_dataset(path):
    with open(path, newline="\n") as fh:
        return loads_dataset(fh.read())


# ---------------------------------------------------------------------------
# empirical model


@dataclass(frozen=True, eq=False)
class EmpiricalModel:
    """Count-based fit of a tabular dataset.

    Rows of unvisited pairs are all-zero in ``p_hat``/``r_hat``; use
    :meth:`to_mdp` to obtain a model the operators can consume.
    """

    p_hat: np.ndarray
    r_hat: np.ndarray
    counts: np.ndarray
    template: TabularMdp
    min_reward: float

    @property
    def visited(self):
        return self.counts > 0

    @property
    def gamma(self):
        return self.template.gamma

    @property
    def n_states(self):
        return self.template.n_states

    @property
    def n_actions(self):
        return self.template.n_actions

    def to_mdp(self, strict=True):
        """Model with unvisited rows filled.

        Strict mode raises on any unvisited pair; permissive mode gives them a
        self-loop and the smallest reward seen in the data.
        """
        unvisited = ~self.visited
        p, r = self.p_hat.copy(), self.r_hat.copy()
        if np.any(unvisited):
            if strict:
                pairs = np.argwhere(unvisited)
                raise MissingSupportError(
                    f"{len(pairs)} state-action pairs have no data, e.g. {tuple(pairs[0])}")
            log.warning("filling %d unvisited pairs with self-loop, reward %g",
                        int(unvisited.sum()), self.min_reward)
            s_idx, a_idx = np.nonzero(unvisited)
            p[s_idx, a_idx, :] = 0.0
            p[s_idx, a_idx, s_idx] = 1.0
            r[s_idx, a_idx] = self.min_reward
        r_max = max(self.template.r_max, float(np.max(np.abs(r))))
        return self.template.replace(transition=p, reward=r, r_max=r_max)


def fit_empirical_model(ds, template):
    """Count-based ``P_hat``/``r_hat`` on the state/action grid of ``template``."""
    if not ds.is_tabular:
        raise ValidationError("empirical models need a tabular dataset")
    n_s, n_a = template.n_states, template.n_actions
    counts3 = kernels.count_transitions(ds.states, ds.actions, ds.next_states, n_s, n_a)
    counts = counts3.sum(axis=2)
    reward_sum = np.zeros((n_s, n_a))
    np.add.at(reward_sum, (ds.states, ds.actions), ds.rewards)
    with np.errstate(invalid="ignore", divide="ignore"):
        p_hat = np.where(counts[..., None] > 0, counts3 / counts[..., None], 0.0)
        r_hat = np.where(counts > 0, reward_sum / counts, 0.0)
    return EmpiricalModel(p_hat, r_hat, counts, template, float(np.min(ds.rewards)))


def model_deviation(em, mdp):
    """Per-pair l1 gap between fitted and true rows; 2 (the maximum) if unvisited."""
    dev = np.abs(em.p_hat - mdp.transition).sum(axis=2)
    return np.where(em.visited, dev, 2.0)


def dataset_pair_mask(ds, n_states, n_actions):
    mask = np.zeros((n_states, n_actions), dtype=bool)
    mask[ds.states, ds.actions] = True
    return mask
