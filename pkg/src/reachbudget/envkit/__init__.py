from .base import GoalAvoidMargins, ReachAvoidProblem
from .noise import ControlNoiseWrapper, NoiseWrapperConfig, wrap_with_control_noise
from .pendulum import PendulumSwingUp, pendulum_make
from .tabular import (
    GRID_ACTIONS,
    TabularMDP,
    TabularProblemView,
    two_start_bandit_make,
    grid_reachavoid_make,
)
from .windfield import WindFieldLite, windfield_make

__all__ = [
    "GoalAvoidMargins",
    "ReachAvoidProblem",
    "ControlNoiseWrapper",
    "NoiseWrapperConfig",
    "wrap_with_control_noise",
    "PendulumSwingUp",
    "pendulum_make",
    "GRID_ACTIONS",
    "TabularMDP",
    "TabularProblemView",
    "two_start_bandit_make",
    "grid_reachavoid_make",
    "WindFieldLite",
    "windfield_make",
]
