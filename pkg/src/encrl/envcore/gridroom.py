"""Empty-room gridworld with MiniGrid-style semantics.

The room is ``size`` tiles per side including the outer wall ring. The agent
has a position and a heading and may turn left, turn right or move forward.
Reaching the goal in the bottom-right inner corner ends the episode with
reward ``1 - 0.9 * step_count / max_steps``; running out of steps ends it
with reward 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from encrl.errors import ConfigError, UsageError

SUPPORTED_SIZES = (5, 6, 8, 16)

WALL_RGB = (100, 100, 100)
FLOOR_RGB = (0, 0, 0)
GOAL_RGB = (0, 255, 0)
AGENT_RGB = (255, 0, 0)


class Direction(IntEnum):
    EAST = 0
    SOUTH = 1
    WEST = 2
    NORTH = 3


class GridAction(IntEnum):
    TURN_LEFT = 0
    TURN_RIGHT = 1
    FORWARD = 2


# (d_row, d_col) per heading
_DIR_VEC = {
    Direction.EAST: (0, 1),
    Direction.SOUTH: (1, 0),
    Direction.WEST: (0, -1),
    Direction.NORTH: (-1, 0),
}


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool


@dataclass
class GridRoomState:
    size: int
    agent_pos: tuple[int, int]
    agent_dir: Direction
    goal_pos: tuple[int, int]
    step_count: int
    max_steps: int
    done: bool = False

    def copy(self) -> GridRoomState:
        return GridRoomState(
            self.size, self.agent_pos, self.agent_dir, self.goal_pos,
            self.step_count, self.max_steps, self.done,
        )


def check_size(size: int) -> int:
    if size not in SUPPORTED_SIZES:
        raise ConfigError(f"unsupported grid size {size!r}; expected one of {SUPPORTED_SIZES}")
    return int(size)


def inner_cells(size: int) -> list[tuple[int, int]]:
    """All non-wall cells in row-major order."""
    return [(r, c) for r in range(1, size - 1) for c in range(1, size - 1)]


def grid_reset(size: int, start_mode: str, rng: np.random.Generator) -> GridRoomState:
    size = check_size(size)
    goal = (size - 2, size - 2)
    if start_mode == "fixed":
        pos, direction = (1, 1), Direction.EAST
    elif start_mode == "random":
        cells = [c for c in inner_cells(size) if c != goal]
        pos = cells[int(rng.integers(len(cells)))]
        direction = Direction(int(rng.integers(4)))
    else:
        raise ConfigError(f"unknown start_mode {start_mode!r}")
    return GridRoomState(
        size=size, agent_pos=pos, agent_dir=direction, goal_pos=goal,
        step_count=0, max_steps=4 * size * size,
    )


def grid_step(state: GridRoomState, action: int) -> StepResult:
    """Advance ``state`` in place by one action."""
    if state.done:
        raise UsageError("episode has terminated; call reset first")
    action = GridAction(action)
    if action == GridAction.TURN_LEFT:
        state.agent_dir = Direction((state.agent_dir - 1) % 4)
    elif action == GridAction.TURN_RIGHT:
        state.agent_dir = Direction((state.agent_dir + 1) % 4)
    else:
        dr, dc = _DIR_VEC[state.agent_dir]
        r, c = state.agent_pos[0] + dr, state.agent_pos[1] + dc
        if 1 <= r <= state.size - 2 and 1 <= c <= state.size - 2:
            state.agent_pos = (r, c)
    state.step_count += 1

    reward = 0.0
    if state.agent_pos == state.goal_pos:
        reward = 1.0 - 0.9 * (state.step_count / state.max_steps)
        state.done = True
    elif state.step_count >= state.max_steps:
        state.done = True
    return StepResult(grid_render(state, 1), reward, state.done)


def grid_render(state: GridRoomState, px_per_tile: int = 1) -> np.ndarray:
    """RGB image of the room, ``size * px_per_tile`` pixels per side, uint8."""
    if px_per_tile < 1:
        raise ConfigError("px_per_tile must be >= 1")
    n = state.size
    tiles = np.empty((n, n, 3), dtype=np.uint8)
    tiles[:] = WALL_RGB
    tiles[1:-1, 1:-1] = FLOOR_RGB
    tiles[state.goal_pos] = GOAL_RGB
    tiles[state.agent_pos] = AGENT_RGB
    if px_per_tile == 1:
        return tiles
    return np.repeat(np.repeat(tiles, px_per_tile, axis=0), px_per_tile, axis=1)


class GridRoom:
    """Stateful wrapper bundling a room configuration with its RNG."""

    n_actions = len(GridAction)

    def __init__(self, size: int, start_mode: str = "fixed", rng: np.random.Generator | None = None,
                 px_per_tile: int = 8):
        self.size = check_size(size)
        if start_mode not in ("fixed", "random"):
            raise ConfigError(f"unknown start_mode {start_mode!r}")
        self.start_mode = start_mode
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.px_per_tile = px_per_tile
        self.state: GridRoomState | None = None

    def reset(self) -> np.ndarray:
        self.state = grid_reset(self.size, self.start_mode, self.rng)
        return self.render()

    def step(self, action: int) -> StepResult:
        if self.state is None:
            raise UsageError("step called before reset")
        res = grid_step(self.state, action)
        return StepResult(self.render(), res.reward, res.done)

    def render(self) -> np.ndarray:
        return grid_render(self.state, self.px_per_tile)

    @property
    def optimal_return(self) -> float:
        """Return of the shortest path from the fixed start (BFS-free closed form)."""
        d = 2 * (self.size - 3) + 1
        return 1.0 - 0.9 * d / (4 * self.size * self.size)
