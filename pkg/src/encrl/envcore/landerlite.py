"""Simplified 2-D lander standing in for Box2D LunarLander.

A point mass with an orientation, integrated once per step. The observation
keeps the familiar 8-component layout
``(x, y, vx, vy, angle, angular_velocity, left_contact, right_contact)``;
velocities are reported scaled by ``obs_velocity_scale`` so that typical
values are O(1).

The pad sits at x = 0 on the ground line y = 0. Reward is potential shaping
(the decrease of a cost combining distance to pad, speed and tilt) plus a
terminal +100 for a soft landing or -100 for a crash or leaving the arena.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from encrl.envcore.gridroom import StepResult
from encrl.errors import UsageError


class LanderAction(IntEnum):
    NOOP = 0
    LEFT_THRUSTER = 1
    MAIN_THRUSTER = 2
    RIGHT_THRUSTER = 3


@dataclass(frozen=True)
class LanderParams:
    gravity: float = 0.005
    main_thrust: float = 0.01
    side_torque: float = 0.002
    side_push: float = 0.001
    angular_damping: float = 0.98
    max_steps: int = 1000
    land_vy: float = 0.05        # |vy| at touchdown below this is soft
    land_vx: float = 0.05
    land_angle: float = 0.3
    pad_halfwidth: float = 0.2
    arena_x: float = 1.5
    arena_y: float = 1.5
    start_y: float = 1.0
    obs_velocity_scale: float = 10.0


@dataclass
class LanderState:
    x: float
    y: float
    vx: float
    vy: float
    angle: float
    angular_velocity: float
    left_contact: bool = False
    right_contact: bool = False
    step_count: int = 0
    done: bool = False
    params: LanderParams = field(default_factory=LanderParams, repr=False)

    def observation(self) -> np.ndarray:
        s = self.params.obs_velocity_scale
        return np.array(
            [self.x, self.y, self.vx * s, self.vy * s, self.angle,
             self.angular_velocity * s, float(self.left_contact), float(self.right_contact)],
            dtype=np.float64,
        )


def _potential(st: LanderState) -> float:
    s = st.params.obs_velocity_scale
    dist = math.hypot(st.x, st.y)
    speed = math.hypot(st.vx * s, st.vy * s)
    return -100.0 * dist - 100.0 * speed - 100.0 * abs(st.angle)


def lander_reset(rng: np.random.Generator, params: LanderParams | None = None) -> LanderState:
    p = params or LanderParams()
    return LanderState(
        x=float(rng.uniform(-0.3, 0.3)),
        y=p.start_y,
        vx=float(rng.uniform(-0.01, 0.01)),
        vy=float(rng.uniform(-0.01, 0.0)),
        angle=float(rng.uniform(-0.1, 0.1)),
        angular_velocity=0.0,
        params=p,
    )


def lander_step(state: LanderState, action: int) -> StepResult:
    """Advance ``state`` in place by one step."""
    if state.done:
        raise UsageError("episode has terminated; call reset first")
    p = state.params
    action = LanderAction(action)
    before = _potential(state)

    ax, ay = 0.0, -p.gravity
    if action == LanderAction.MAIN_THRUSTER:
        ax += -math.sin(state.angle) * p.main_thrust
        ay += math.cos(state.angle) * p.main_thrust
    elif action == LanderAction.LEFT_THRUSTER:
        # left engine pushes the hull right and spins it clockwise
        state.angular_velocity -= p.side_torque
        ax += math.cos(state.angle) * p.side_push
    elif action == LanderAction.RIGHT_THRUSTER:
        state.angular_velocity += p.side_torque
        ax -= math.cos(state.angle) * p.side_push

    state.vx += ax
    state.vy += ay
    state.x += state.vx
    state.y += state.vy
    state.angular_velocity *= p.angular_damping
    state.angle = (state.angle + state.angular_velocity + math.pi) % (2 * math.pi) - math.pi
    state.step_count += 1

    reward = _potential(state) - before
    if state.y <= 0.0:
        state.y = 0.0
        soft = (abs(state.vy) < p.land_vy and abs(state.vx) < p.land_vx
                and abs(state.angle) < p.land_angle and abs(state.x) <= p.pad_halfwidth)
        state.left_contact = state.right_contact = True
        reward += 100.0 if soft else -100.0
        state.done = True
    elif abs(state.x) > p.arena_x or state.y > p.arena_y:
        reward -= 100.0
        state.done = True
    elif state.step_count >= p.max_steps:
        state.done = True
    return StepResult(state.observation(), float(reward), state.done)


class LanderLite:
    n_actions = len(LanderAction)

    def __init__(self, rng: np.random.Generator | None = None, params: LanderParams | None = None):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.params = params or LanderParams()
        self.state: LanderState | None = None

    def reset(self) -> np.ndarray:
        self.state = lander_reset(self.rng, self.params)
        return self.state.observation()

    def step(self, action: int) -> StepResult:
        if self.state is None:
            raise UsageError("step called before reset")
        return lander_step(self.state, action)
