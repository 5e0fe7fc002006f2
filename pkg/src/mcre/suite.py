"""Property-check cells behind ``mcre verify``, ``mcre bounds-report`` and the
acceptance tests.

A cell is a ``(kind, params)`` pair; running it returns a flat JSON-able dict
with the measured quantities, one boolean per sub-check and an overall
``passed``. Cells are independent and pure functions of their params, so they
can be farmed out to worker processes and merged in order.
"""
from __future__ import annotations

import json
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from mcre import agent as mcrq
from mcre import bounds, neural
from mcre.data import (dataset_pair_mask, dumps_dataset, fit_empirical_model, generate_dataset,
                       loads_dataset, model_deviation)
from mcre.envs import GRIDWORLD_ID, POINTMASS_ID, make_env
from mcre.errors import McreError
from mcre.mdp import exact_q, policy_iteration, random_mdp
from mcre.operators import (MreConfig, bc_table, contraction_modulus, fixed_point, mcre_backup,
                            solve_fixed_point_direct, upsilon_threshold)

SLACK = 1e-8
CONTRACTION_SLACK = 1e-9
FP_TOL = 1e-10
GRID_SAMPLES = 100_000


def _rng(*key):
    return np.random.default_rng([int(k) for k in key])


def _random_instance(rng, gamma, min_states=4, max_states=10):
    n_s = int(rng.integers(min_states, max_states + 1))
    n_a = int(rng.integers(2, 5))
    mdp = random_mdp(n_s, n_a, gamma, seed=int(rng.integers(2**31)),
                     sparsity=float(rng.choice([0.0, 0.5])))
    pi = rng.integers(0, n_a, size=n_s)
    return mdp, pi


# ---------------------------------------------------------------------------
# contraction and convergence rate


def contraction_cell(gamma, upsilon, trials=100, seed=0, h_scale=1.0):
    """Sup-norm Lipschitz ratio of ``Z`` on random MDPs and random Q pairs.

    Each trial tests a Gaussian pair and a constant-shift pair; the latter
    attains the modulus exactly, so any inflation of ``H`` shows up.
    """
    rng = _rng(seed, round(gamma * 1000), round(upsilon * 1000))
    modulus = None
    worst_ratio = 0.0
    worst_excess = -np.inf
    for _ in range(trials):
        mdp, pi = _random_instance(rng, gamma)
        omega = float(rng.choice([0.0, rng.uniform(0.0, 2.0)]))
        cfg = MreConfig(upsilon=upsilon, omega=omega, gamma=gamma)
        modulus = contraction_modulus(cfg)
        shape = (mdp.n_states, mdp.n_actions)
        q1 = rng.normal(0.0, 5.0, size=shape)
        pairs = [(q1, rng.normal(0.0, 5.0, size=shape)),
                 (q1, q1 + rng.uniform(0.5, 5.0))]
        for a, b in pairs:
            lhs = np.max(np.abs(mcre_backup(a, mdp, pi, cfg, h_scale=h_scale)
                                - mcre_backup(b, mdp, pi, cfg, h_scale=h_scale)))
            dist = np.max(np.abs(a - b))
            worst_ratio = max(worst_ratio, lhs / dist)
            worst_excess = max(worst_excess, lhs - (modulus * dist + CONTRACTION_SLACK))
    return {"modulus": modulus, "max_ratio": worst_ratio, "worst_excess": worst_excess,
            "trials": trials, "passed": bool(worst_excess <= 0.0)}


def rate_check(model, pi, cfg, rng, tol=FP_TOL, record=400):
    """Iterate from two starts; compare every recorded iterate to a dense solve.

    Returns ``(q_star, stats)`` where ``q_star`` is the zero-start iterate.
    """
    n_s, n_a = model.n_states, model.n_actions
    q_direct = solve_fixed_point_direct(model, pi, cfg)
    modulus = contraction_modulus(cfg)
    scale = model.r_max / (1.0 - cfg.gamma)
    rep0 = fixed_point(model, pi, cfg, tol=tol, record=record)
    rep1 = fixed_point(model, pi, cfg, q0=rng.uniform(-scale, scale, size=(n_s, n_a)), tol=tol,
                       record=record)
    excess = -np.inf
    for rep in (rep0, rep1):
        hist = rep.history
        err0 = np.max(np.abs(hist[0] - q_direct))
        for k in range(min(record, rep.iterations + 1)):
            err = np.max(np.abs(hist[k] - q_direct))
            excess = max(excess, err - (modulus ** k * err0 + CONTRACTION_SLACK))
    agree = float(np.max(np.abs(rep0.q_star - rep1.q_star)))
    stats = {"rate_excess": float(excess), "init_disagreement": agree,
             "rate_ok": bool(excess <= 0.0), "inits_agree": bool(agree <= 10 * tol),
             "empirical_modulus": rep0.empirical_modulus, "modulus": modulus}
    return rep0.q_star, stats


# ---------------------------------------------------------------------------
# value-gap bounds


def _random_pairs(rng, n_s, n_a):
    """Pairs seen by a uniform behaviour policy in ``n_s * n_a`` draws."""
    mask = np.zeros((n_s, n_a), dtype=bool)
    m = n_s * n_a
    mask[rng.integers(0, n_s, size=m), rng.integers(0, n_a, size=m)] = True
    return mask


def theorem2_cell(seed, gamma, upsilon, omega, v_only=False):
    """Exact model: fixed point of ``Z`` against the true ``Q^pi`` on dataset pairs."""
    rng = _rng(seed, 2)
    mdp, pi = _random_instance(rng, gamma)
    cfg = MreConfig(upsilon=upsilon, omega=omega, gamma=gamma)
    pairs = _random_pairs(rng, mdp.n_states, mdp.n_actions)
    q_star, rate = rate_check(mdp, pi, cfg, rng)
    q_pi = exact_q(mdp, pi)
    idx = np.arange(mdp.n_states)
    q_gap = float(np.max(np.abs(q_star - q_pi)[pairs]))
    v_gap = float(np.max(np.abs(q_star[idx, pi] - q_pi[idx, pi])))
    max_bc = float(np.max(bc_table(mdp.action_embedding, pi, omega)[pairs]))
    out = {"q_gap": q_gap, "v_gap": v_gap, "max_bc": max_bc,
           "condition_met": cfg.theorem_condition_met, **rate}
    checks = ["v_ok", "rate_ok", "inits_agree"]
    out["v_ok"] = v_gap <= SLACK
    if cfg.theorem_condition_met:
        rhs = bounds.q_gap_bound_exact(cfg, max_bc)
        out["q_bound"] = rhs
        out["q_ok"] = q_gap <= rhs + SLACK
    else:
        out["q_bound"] = None
        out["q_ok"] = None
    if not v_only:
        checks.append("q_ok")
    out["passed"] = all(bool(out[c]) for c in checks)
    return out


_GRID_CACHE = {}


def _grid_data(tier, seed):
    key = (tier, seed)
    if key not in _GRID_CACHE:
        env = make_env(GRIDWORLD_ID)
        ds = generate_dataset(env, tier, GRID_SAMPLES, seed)
        _GRID_CACHE.clear()
        _GRID_CACHE[key] = (env, ds, fit_empirical_model(ds, env.mdp))
    return _GRID_CACHE[key]


def _cell_policy(env, rng):
    """Expert actions, with roughly half the states re-drawn at random."""
    pi = env.expert_table().copy()
    flip = rng.random(env.n_states) < 0.5
    pi[flip] = rng.integers(0, env.n_actions, size=int(flip.sum()))
    return pi


def theorem3_cell(tier, seed, upsilon, omega):
    """Fitted model from a gridworld dataset against the true on-policy values."""
    env, ds, em = _grid_data(tier, seed)
    mdp = env.mdp
    rng = _rng(seed, 3, round(upsilon * 1e6), round(omega * 1000))
    pi = _cell_policy(env, rng)
    cfg = MreConfig(upsilon=upsilon, omega=omega, gamma=mdp.gamma)
    model = em.to_mdp(strict=False)
    q_hat, rate = rate_check(model, pi, cfg, rng)
    q_pi = exact_q(mdp, pi)
    pairs = dataset_pair_mask(ds, mdp.n_states, mdp.n_actions)
    states = np.unique(ds.states)
    idx = np.arange(mdp.n_states)
    q_gap = float(np.max(np.abs(q_hat - q_pi)[pairs]))
    v_gap = float(np.max(np.abs(q_hat[idx, pi] - q_pi[idx, pi])[states]))
    max_dev = float(np.max(model_deviation(em, mdp)))
    max_bc = float(np.max(bc_table(mdp.action_embedding, pi, omega)[pairs]))
    q_rhs = bounds.q_gap_bound_empirical(cfg, max_bc, max_dev, mdp.r_max)
    v_rhs = bounds.v_gap_bound_empirical(mdp.gamma, max_dev, mdp.r_max)
    out = {"q_gap": q_gap, "q_bound": q_rhs, "v_gap": v_gap, "v_bound": v_rhs,
           "max_dev": max_dev, "max_bc": max_bc, "coverage": float(pairs.mean()),
           "q_ok": q_gap <= q_rhs, "v_ok": v_gap <= v_rhs, **rate}
    out["passed"] = all(out[c] for c in ("q_ok", "v_ok", "rate_ok", "inits_agree"))
    return out


def suboptimality_cell(tier, seed):
    """Exact and sampled-model suboptimality bounds on the gridworld.

    ``tier=None`` checks the exact-model bound for a perturbed policy;
    otherwise the policy is optimal for the model fitted to ``tier`` data.
    """
    env = make_env(GRIDWORLD_ID)
    mdp = env.mdp
    pi_star = env.expert_table()
    ell = bounds.lipschitz_estimate(mdp)
    out = {"ell": ell, "a_max": mdp.a_max}
    if tier is None:
        pi_hat = _cell_policy(env, _rng(seed, 45))
        tv = bounds.max_policy_tv(mdp, mdp, pi_hat, pi_star)
        rhs = bounds.suboptimality_bound(mdp.gamma, ell, mdp.a_max, mdp.r_max, tv)
    else:
        _, _, em = _grid_data(tier, seed)
        model = em.to_mdp(strict=False)
        pi_hat = policy_iteration(model)
        tv = bounds.max_policy_tv(model, mdp, pi_hat, pi_star)
        max_dev = float(np.max(model_deviation(em, mdp)))
        rhs = bounds.suboptimality_bound(mdp.gamma, ell, mdp.a_max, mdp.r_max, tv, max_dev)
        out["max_dev"] = max_dev
    lhs = bounds.suboptimality(mdp, pi_hat, pi_star)
    self_gap = bounds.suboptimality(mdp, pi_star, policy_iteration(mdp))
    out.update({"suboptimality": lhs, "bound": rhs, "max_tv": tv, "optimal_self_gap": self_gap,
                "bound_ok": abs(lhs) <= rhs, "sign_ok": lhs <= 1e-10 and abs(self_gap) <= 1e-10})
    out["passed"] = out["bound_ok"] and out["sign_ok"]
    return out


# ---------------------------------------------------------------------------
# neural checks


def _probe_batch(rng, n, state_dim, action_dim, bound):
    return mcrq.Batch(rng.normal(size=(n, state_dim)),
                      rng.uniform(-bound, bound, size=(n, action_dim)),
                      rng.normal(size=n), rng.normal(size=(n, state_dim)),
                      rng.random(n) < 0.1)


def gradient_cell(hidden, seed=0, probes=10, alpha=2.5):
    """Finite-difference check of both critic losses and the actor loss."""
    rng = _rng(seed, 6, *hidden)
    cfg = mcrq.McrqConfig(hidden=tuple(hidden), alpha=alpha, upsilon=0.3, omega=0.5)
    state_dim, action_dim, bound = 2, 1, 1.0
    ag = mcrq.init_agent(state_dim, action_dim, bound, cfg, rng)
    batch = _probe_batch(rng, 32, state_dim, action_dim, bound)
    y = mcrq.td_target(ag, batch, cfg, rng=rng)
    _, g1, g2 = mcrq.critic_loss_and_grads(ag, batch, y)
    p1 = ag.critic1.params.copy()
    p2 = ag.critic2.params.copy()
    e1 = neural.finite_difference_check(
        lambda p: mcrq.critic_loss_and_grads(ag, batch, y, params1=p)[0], p1, g1, probes, rng)
    e2 = neural.finite_difference_check(
        lambda p: mcrq.critic_loss_and_grads(ag, batch, y, params2=p)[0], p2, g2, probes, rng)
    _, ga, _ = mcrq.actor_loss_and_grad(ag, batch, cfg)
    pa = ag.actor.params.copy()
    ea = neural.finite_difference_check(
        lambda p: mcrq.actor_loss_and_grad(ag, batch, cfg, params=p)[0], pa, ga, probes, rng)
    out = {"critic1_rel_err": e1, "critic2_rel_err": e2, "actor_rel_err": ea}
    out["passed"] = max(e1, e2, ea) <= 1e-4
    return out


def td3_collapse_cell(rows=10_000, seed=0):
    """``upsilon = omega = 0`` targets against a plain clipped double-Q target."""
    rng = _rng(seed, 7)
    cfg = mcrq.McrqConfig(upsilon=0.0, omega=0.0)
    ag = mcrq.init_agent(2, 1, 1.0, cfg, rng)
    batch = _probe_batch(rng, rows, 2, 1, 1.0)
    a2 = mcrq.target_action(ag, batch.next_states, cfg, rng)
    y = mcrq.td_target(ag, batch, cfg, next_actions=a2)
    x2 = np.concatenate([batch.next_states, a2], axis=1)
    tq = np.minimum(neural.forward(ag.target_critic1, x2), neural.forward(ag.target_critic2, x2))[:, 0]
    not_done = 1.0 - batch.dones.astype(np.float64)
    ref = batch.rewards + not_done * cfg.gamma * tq
    identical = bool(np.array_equal(y.view(np.uint64), ref.view(np.uint64)))
    return {"rows": rows, "bitwise_identical": identical, "passed": identical}


# ---------------------------------------------------------------------------
# determinism


def determinism_cell(what, seed=0):
    if what == "dataset":
        texts = [dumps_dataset(generate_dataset(GRIDWORLD_ID, "medium", 2000, seed)) for _ in range(2)]
        again = dumps_dataset(loads_dataset(texts[0]))
        cont = dumps_dataset(generate_dataset(POINTMASS_ID, "medium-replay", 1000, seed))
        cont_again = dumps_dataset(loads_dataset(cont))
        ok = texts[0] == texts[1] and again == texts[0] and cont == cont_again
        return {"passed": ok}
    if what == "training":
        ds = generate_dataset(POINTMASS_ID, "medium", 2000, seed)
        cfg = mcrq.McrqConfig(total_steps=40, batch_size=32, eval_interval=20, eval_episodes=2,
                              hidden=(16, 16), seed=seed, upsilon=0.2, omega=0.5)
        blobs = []
        for _ in range(2):
            ag, history = mcrq.train(ds, cfg)
            with tempfile.TemporaryDirectory() as tmp:
                mcrq.save_agent(tmp, ag, cfg)
                with open(os.path.join(tmp, "params.bin"), "rb") as fh:
                    blobs.append(fh.read() + history.to_csv().encode())
        return {"passed": blobs[0] == blobs[1]}
    raise ValueError(f"unknown determinism check {what!r}")


# ---------------------------------------------------------------------------
# grids and running

KINDS = {
    "contraction": contraction_cell,
    "theorem2": theorem2_cell,
    "theorem3": theorem3_cell,
    "suboptimality": suboptimality_cell,
    "gradient": gradient_cell,
    "td3_collapse": td3_collapse_cell,
    "determinism": determinism_cell,
}


def contraction_grid(trials=100):
    return [("contraction", {"gamma": g, "upsilon": u, "trials": trials})
            for g in (0.5, 0.9, 0.99) for u in (0.0, 0.25, 0.5, 1.0)]


def theorem2_grid(n_cells=50):
    """Mixed cells: ``upsilon`` is zero in every other cell, else below threshold."""
    cells = []
    for i in range(n_cells):
        rng = _rng(i, 20)
        gamma = (0.5, 0.9, 0.99)[i % 3]
        upsilon = 0.0 if i % 2 == 0 else float(rng.uniform(0.05, 0.95)) * upsilon_threshold(gamma)
        omega = 0.0 if (i // 2) % 2 == 0 else float(rng.uniform(0.1, 2.0))
        cells.append(("theorem2", {"seed": i, "gamma": gamma, "upsilon": upsilon, "omega": omega}))
    return cells


def theorem2_default_grid(n_cells=24):
    """Cells whose full claims hold: the Q-gap bound at ``upsilon = 0`` and the
    V-gap identity below the threshold."""
    cells = []
    for cell, params in theorem2_grid(n_cells):
        if params["upsilon"] > 0.0:
            params = {**params, "v_only": True}
        cells.append((cell, params))
    return cells


THEOREM3_CONFIGS = ((0.0, 0.0), (0.0, 1.0), (0.004, 0.0), (0.004, 1.0))
TIERS = ("random", "medium", "expert", "medium-replay", "medium-expert")


def theorem3_grid():
    return [("theorem3", {"tier": t, "seed": 0, "upsilon": u, "omega": w})
            for t in TIERS for u, w in THEOREM3_CONFIGS]


def suboptimality_grid():
    return ([("suboptimality", {"tier": None, "seed": s}) for s in range(5)]
            + [("suboptimality", {"tier": t, "seed": 0}) for t in TIERS])


def default_grid():
    return (contraction_grid() + theorem2_default_grid() + theorem3_grid() + suboptimality_grid()
            + [("gradient", {"hidden": [64, 64]}), ("gradient", {"hidden": [16]}),
               ("td3_collapse", {}), ("determinism", {"what": "dataset"}),
               ("determinism", {"what": "training"})])


def acceptance_grid():
    """Like the default grid, but with the full mixed Theorem-2 cells."""
    return (contraction_grid() + theorem2_grid() + theorem3_grid() + suboptimality_grid()
            + [("gradient", {"hidden": [64, 64]}), ("gradient", {"hidden": [16]}),
               ("td3_collapse", {}), ("determinism", {"what": "dataset"}),
               ("determinism", {"what": "training"})])


def parse_filter(text):
    """``"gamma=0.99,upsilon=0.5"`` -> ``{"gamma": 0.99, "upsilon": 0.5}``."""
    out = {}
    for item in text.split(","):
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"bad cell filter item {item!r} (want key=value)")
        value = value.strip()
        try:
            out[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            out[key.strip()] = value
    return out


def _matches(kind, params, flt):
    for key, want in flt.items():
        have = kind if key == "kind" else params.get(key, _MISSING)
        if have is _MISSING:
            return False
        if isinstance(want, (int, float)) and isinstance(have, (int, float)) \
                and not isinstance(have, bool):
            if not np.isclose(have, want, rtol=1e-12, atol=0.0):
                return False
        elif have != want:
            return False
    return True


_MISSING = object()


def select(cells, filters):
    if not filters:
        return list(cells)
    return [c for c in cells if any(_matches(c[0], c[1], f) for f in filters)]


def run_cell(cell, h_scale=1.0):
    kind, params = cell
    params = dict(params)
    if kind == "contraction" and h_scale != 1.0:
        params["h_scale"] = h_scale
    try:
        result = KINDS[kind](**params)
    except McreError as exc:
        result = {"passed": False, "error": f"{type(exc).__name__}: {exc}"}
    return {"kind": kind, "params": cell[1], **_plain(result)}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def run_cells(cells, jobs=1, h_scale=1.0):
    """Run cells, in a process pool when ``jobs > 1``; results keep cell order."""
    if jobs <= 1 or len(cells) <= 1:
        return [run_cell(c, h_scale) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_cell, cells, [h_scale] * len(cells)))
