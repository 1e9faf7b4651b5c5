"""Planner-guided reinforcement learning toolkit.

An anytime-feasible barrier-flow MPC planner, a guided soft actor-critic
trainer with dual replay and an advantage gate, a 2-D navigation
environment with static circular keep-outs, plus the verification oracles
and CLI harness that certify the whole stack.
"""

__version__ = "0.1.0"
