"""Model-based RL with language-goal intrinsic rewards inside imagined rollouts."""

__version__ = "0.1.0"
