from encrl.envcore.baseline import random_policy_return
from encrl.envcore.gridroom import (
    AGENT_RGB,
    FLOOR_RGB,
    GOAL_RGB,
    SUPPORTED_SIZES,
    WALL_RGB,
    Direction,
    GridAction,
    GridRoom,
    GridRoomState,
    StepResult,
    grid_render,
    grid_reset,
    grid_step,
)
from encrl.envcore.landerlite import (
    LanderAction,
    LanderLite,
    LanderParams,
    LanderState,
    lander_reset,
    lander_step,
)

__all__ = [
    "AGENT_RGB", "FLOOR_RGB", "GOAL_RGB", "SUPPORTED_SIZES", "WALL_RGB",
    "Direction", "GridAction", "GridRoom", "GridRoomState", "StepResult",
    "grid_render", "grid_reset", "grid_step",
    "LanderAction", "LanderLite", "LanderParams", "LanderState", "lander_reset", "lander_step",
    "random_policy_return",
]
