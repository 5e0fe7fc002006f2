"""Time the numba kernels against their numpy fallbacks.

Run from the repository root:

    python3 benchmarks/bench_kernels.py --repeat 5

Each kernel is first called once per backend (numba compiles on that call),
then timed ``--repeat`` times; the table reports the best time. Outputs are
compared so a speedup never hides a disagreement.
"""
import argparse
import json
import sys
import time

import numpy as np

from mcre import _accel, kernels
from mcre.envs import build_gridworld_mdp
from mcre.mdp import policy_iteration, random_mdp


def best_time(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def case_sampling(episodes):
    mdp = build_gridworld_mdp()
    cum = np.cumsum(mdp.transition, axis=2)
    start = np.cumsum(mdp.initial_dist)
    pi = policy_iteration(mdp)
    rng = np.random.default_rng(0)
    horizon = 100
    u = (rng.random(episodes), rng.random((episodes, horizon)), rng.random((episodes, horizon)),
         rng.random((episodes, horizon)))
    args = (cum, start, pi, 0.3, mdp.n_actions) + u
    return (f"sample_episodes ({episodes}x{horizon})",
            lambda: kernels.sample_episodes_numba(*args),
            lambda: kernels.sample_episodes_numpy(*args))


def case_counts(n):
    rng = np.random.default_rng(1)
    s, a, s2 = rng.integers(0, 64, n), rng.integers(0, 4, n), rng.integers(0, 64, n)
    return (f"count_transitions (n={n})",
            lambda: kernels.count_transitions_numba(s, a, s2, 64, 4),
            lambda: kernels.count_transitions_numpy(s, a, s2, 64, 4))


def case_iterate(n_states, gamma):
    mdp = random_mdp(n_states, 4, gamma, seed=2)
    pi = np.arange(n_states) % 4
    bc = np.random.default_rng(3).random((n_states, 4))
    q0 = np.zeros((n_states, 4))

    def run(fn):
        return fn(mdp.transition, mdp.reward, pi, bc, gamma, 0.004, q0, 1e-10, 200_000,
                  np.zeros((0, n_states, 4)))[0]

    return (f"mcre_iterate (|S|={n_states}, gamma={gamma})",
            lambda: run(kernels.mcre_iterate_numba), lambda: run(kernels.mcre_iterate_numpy))


def agree(a, b):
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    return bool(np.allclose(a, b, rtol=0.0, atol=1e-9))


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--episodes", type=int, default=2000)
    parser.add_argument("--json", action="store_true", help="print JSON instead of a table")
    args = parser.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1
    cases = [case_sampling(args.episodes), case_counts(1_000_000), case_iterate(64, 0.99),
             case_iterate(256, 0.9)]
    rows = []
    for name, fast, slow in cases:
        fast(), slow()  # compile / warm caches
        t_fast, out_fast = best_time(fast, args.repeat)
        t_slow, out_slow = best_time(slow, args.repeat)
        rows.append({"kernel": name, "numba_s": t_fast, "numpy_s": t_slow,
                     "speedup": t_slow / t_fast, "outputs_agree": agree(out_fast, out_slow)})
    if args.json:
        print(json.dumps(rows, indent=1))
    else:
        print(f"{'kernel':44s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s}  agree")
        for r in rows:
            print(f"{r['kernel']:44s} {r['numba_s']:10.4f} {r['numpy_s']:10.4f} "
                  f"{r['speedup']:8.1f}  {r['outputs_agree']}")
    return 0 if all(r["outputs_agree"] for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
