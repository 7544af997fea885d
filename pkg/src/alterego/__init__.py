"""Reward learning from ranked fund trajectories and KL-regularized policy optimization."""

from .core import FundTrajectory, MarketModel, RankedDemoSet, RewardParams
from .errors import AlterEgoError, ConfigError, DataError, NumericalError

__all__ = [
    "AlterEgoError",
    "ConfigError",
    "DataError",
    "FundTrajectory",
    "MarketModel",
    "NumericalError",
    "RankedDemoSet",
    "RewardParams",
]

__version__ = "0.1.0"
