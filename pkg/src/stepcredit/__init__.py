"""Stepwise credit assignment for sparse-reward agents.

Simulated POMDPs, a small numpy MLP stack, behavior cloning, a learned
progress estimator that splits a terminal reward into per-step rewards, PPO
and trajectory-level policy-gradient baselines, and an experiment harness.
"""

__version__ = "0.1.0"
