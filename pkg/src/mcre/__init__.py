"""Mildly conservative regularized evaluation for offline RL.

Tabular operators, error-bound calculators and a from-scratch neural
actor-critic (MCRQ), with toy environments that have exact references.
"""
from mcre.mdp import TabularMdp, exact_q, exact_v, policy_iteration, random_mdp
from mcre.operators import MreConfig, fixed_point, mcre_backup

__version__ = "0.1.0"

__all__ = ["TabularMdp", "exact_q", "exact_v", "policy_iteration", "random_mdp",
           "MreConfig", "fixed_point", "mcre_backup", "__version__"]
