"""Hot loops for the tabular side: episode sampling, transition counting and
the MCRE fixed-point iteration.

Each kernel exists as ``<name>_numba`` (compiled loops) and
``<name>_numpy`` (vectorised). The public ``<name>`` dispatches on
:func:`mcre._accel.numba_enabled` at call time. Both paths consume the same
pre-drawn uniforms, so their outputs agree exactly for the samplers and to
rounding for the iteration.
"""
import numpy as np

from mcre._accel import njit, numba_enabled


# ---------------------------------------------------------------------------
# episode sampling


def _sample_episodes_py(cum_p, start_cum, policy, eps, n_actions,
                        u_start, u_eps, u_act, u_next):
    n_ep, horizon = u_eps.shape
    n_states = start_cum.shape[0]
    states = np.empty((n_ep, horizon), dtype=np.int64)
    actions = np.empty((n_ep, horizon), dtype=np.int64)
    next_states = np.empty((n_ep, horizon), dtype=np.int64)
    for e in range(n_ep):
        s = 0
        while s < n_states - 1 and start_cum[s] <= u_start[e]:
            s += 1
        for t in range(horizon):
            if u_eps[e, t] < eps:
                a = int(u_act[e, t] * n_actions)
                if a > n_actions - 1:
                    a = n_actions - 1
            else:
                a = policy[s]
            s2 = 0
            while s2 < n_states - 1 and cum_p[s, a, s2] <= u_next[e, t]:
                s2 += 1
            states[e, t] = s
            actions[e, t] = a
            next_states[e, t] = s2
            s = s2
    return states, actions, next_states


sample_episodes_numba = njit(_sample_episodes_py)


def _inverse_cdf(cum_rows, u):
    n = cum_rows.shape[-1]
    return np.minimum((cum_rows <= u[:, None]).sum(axis=1), n - 1)


def sample_episodes_numpy(cum_p, start_cum, policy, eps, n_actions,
                          u_start, u_eps, u_act, u_next):
    n_ep, horizon = u_eps.shape
    states = np.empty((n_ep, horizon), dtype=np.int64)
    actions = np.empty((n_ep, horizon), dtype=np.int64)
    next_states = np.empty((n_ep, horizon), dtype=np.int64)
    s = _inverse_cdf(np.broadcast_to(start_cum, (n_ep, start_cum.shape[0])), u_start)
    for t in range(horizon):
        rand_a = np.minimum((u_act[:, t] * n_actions).astype(np.int64), n_actions - 1)
        a = np.where(u_eps[:, t] < eps, rand_a, policy[s])
        s2 = _inverse_cdf(cum_p[s, a], u_next[:, t])
        states[:, t] = s
        actions[:, t] = a
        next_states[:, t] = s2
        s = s2
    return states, actions, next_states


def sample_episodes(cum_p, start_cum, policy, eps, n_actions,
                    u_start, u_eps, u_act, u_next):
    """Roll out ``len(u_start)`` epsilon-greedy episodes on a tabular model.

    ``cum_p`` is the transition tensor cumulated over its last axis. At every
    step the behaviour explores with probability ``eps`` (uniform action),
    otherwise follows ``policy``. Returns ``(states, actions, next_states)``
    as ``(episodes, horizon)`` integer arrays.
    """
    args = (np.ascontiguousarray(cum_p, dtype=np.float64),
            np.ascontiguousarray(start_cum, dtype=np.float64),
            np.ascontiguousarray(policy, dtype=np.int64),
            float(eps), int(n_actions),
            np.ascontiguousarray(u_start, dtype=np.float64),
            np.ascontiguousarray(u_eps, dtype=np.float64),
            np.ascontiguousarray(u_act, dtype=np.float64),
            np.ascontiguousarray(u_next, dtype=np.float64))
    if numba_enabled():
        return sample_episodes_numba(*args)
    return sample_episodes_numpy(*args)


# ---------------------------------------------------------------------------
# transition counting


def _count_transitions_py(s, a, s2, n_states, n_actions):
    counts = np.zeros((n_states, n_actions, n_states), dtype=np.int64)
    for i in range(s.shape[0]):
        counts[s[i], a[i], s2[i]] += 1
    return counts


count_transitions_numba = njit(_count_transitions_py)


def count_transitions_numpy(s, a, s2, n_states, n_actions):
    flat = (s * n_actions + a) * n_states + s2
    counts = np.bincount(flat, minlength=n_states * n_actions * n_states)
    return counts.reshape(n_states, n_actions, n_states).astype(np.int64)


def count_transitions(s, a, s2, n_states, n_actions):
    args = (np.ascontiguousarray(s, dtype=np.int64),
            np.ascontiguousarray(a, dtype=np.int64),
            np.ascontiguousarray(s2, dtype=np.int64),
            int(n_states), int(n_actions))
    if numba_enabled():
        return count_transitions_numba(*args)
    return count_transitions_numpy(*args)


# ---------------------------------------------------------------------------
# MCRE fixed-point iteration


def _mcre_iterate_py(p, r, policy, bc, gamma, upsilon, q0, tol, max_iter, history):
    n_states, n_actions = r.shape
    q = q0.copy()
    qn = np.empty_like(q)
    v = np.empty(n_states)
    residuals = np.empty(max_iter)
    n_hist = history.shape[0]
    if n_hist > 0:
        history[0] = q
    for it in range(max_iter):
        for s in range(n_states):
            v[s] = q[s, policy[s]]
        res = 0.0
        for s in range(n_states):
            for a in range(n_actions):
                ev = 0.0
                for s2 in range(n_states):
                    ev += p[s, a, s2] * v[s2]
                t = r[s, a] + gamma * ev
                h = t - gamma * (t - v[s])
                z = (1.0 - upsilon) * t + upsilon * h - gamma * bc[s, a]
                qn[s, a] = z
                d = abs(z - q[s, a])
                if d > res:
                    res = d
        residuals[it] = res
        q, qn = qn, q
        if it + 1 < n_hist:
            history[it + 1] = q
        if res <= tol:
            return q, it + 1, residuals[: it + 1]
    return q, max_iter, residuals


mcre_iterate_numba = njit(_mcre_iterate_py)


def mcre_iterate_numpy(p, r, policy, bc, gamma, upsilon, q0, tol, max_iter, history):
    n_states = r.shape[0]
    idx = np.arange(n_states)
    q = q0.copy()
    residuals = np.empty(max_iter)
    n_hist = history.shape[0]
    if n_hist > 0:
        history[0] = q
    for it in range(max_iter):
        v = q[idx, policy]
        t = r + gamma * (p @ v)
        h = t - gamma * (t - v[:, None])
        qn = (1.0 - upsilon) * t + upsilon * h - gamma * bc
        res = float(np.max(np.abs(qn - q)))
        residuals[it] = res
        q = qn
        if it + 1 < n_hist:
            history[it + 1] = q
        if res <= tol:
            return q, it + 1, residuals[: it + 1]
    return q, max_iter, residuals


def mcre_iterate(p, r, policy, bc, gamma, upsilon, q0, tol, max_iter, n_history=0):
    """Iterate the MCRE backup from ``q0`` until the sup-norm step is <= tol.

    Returns ``(q, iterations, residuals, history)``; ``history`` holds the
    first ``n_history`` iterates starting with ``q0``. ``iterations ==
    max_iter`` with a final residual above ``tol`` means no convergence.
    """
    r = np.ascontiguousarray(r, dtype=np.float64)
    history = np.zeros((int(n_history),) + r.shape)
    args = (np.ascontiguousarray(p, dtype=np.float64), r,
            np.ascontiguousarray(policy, dtype=np.int64),
            np.ascontiguousarray(bc, dtype=np.float64),
            float(gamma), float(upsilon),
            np.ascontiguousarray(q0, dtype=np.float64),
            float(tol), int(max_iter), history)
    if numba_enabled():
        q, n_iter, residuals = mcre_iterate_numba(*args)
    else:
        q, n_iter, residuals = mcre_iterate_numpy(*args)
    return q, int(n_iter), residuals, history[: min(int(n_history), n_iter + 1)]
