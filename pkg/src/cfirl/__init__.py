"""Counterfactual inverse reinforcement learning on synthetic BEV grids.

Subpackages cover the grid MDP and visitation machinery, the reward head,
the counterfactual IRL trainer, the synthetic world generator, candidate
trajectory generation, the active annotation loop, the arc-based local
planner with mission metrics, and the annotation HTTP service.
"""

__version__ = "0.1.0"
