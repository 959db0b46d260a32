"""Short chain MDP with a value-iteration oracle, used to sanity-check learning.

States ``0..n-1``, start in the middle. Action 0 moves left, action 1 moves
right. Leaving the chain on the left pays ``left_reward``, on the right pays
``right_reward``; both end the episode. All other moves pay 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from encrl.envcore.gridroom import StepResult
from encrl.errors import ConfigError, UsageError


@dataclass
class ChainState:
    position: int
    step_count: int = 0
    done: bool = False


class ChainMDP:
    n_actions = 2

    def __init__(self, n_states: int = 3, left_reward: float = 0.85, right_reward: float = 1.0,
                 max_steps: int = 50, rng: np.random.Generator | None = None):
        if n_states < 1:
            raise ConfigError("n_states must be >= 1")
        self.n_states = n_states
        self.left_reward = left_reward
        self.right_reward = right_reward
        self.max_steps = max_steps
        self.state: ChainState | None = None

    def observation(self) -> np.ndarray:
        return np.array([self.state.position])

    def reset(self) -> np.ndarray:
        self.state = ChainState(self.n_states // 2)
        return self.observation()

    def step(self, action: int) -> StepResult:
        st = self.state
        if st is None or st.done:
            raise UsageError("step on a finished or unstarted episode")
        if action not in (0, 1):
            raise ValueError(f"invalid action {action}")
        st.step_count += 1
        nxt = st.position + (1 if action == 1 else -1)
        reward = 0.0
        if nxt < 0:
            reward, st.done = self.left_reward, True
        elif nxt >= self.n_states:
            reward, st.done = self.right_reward, True
        else:
            st.position = nxt
            st.done = st.step_count >= self.max_steps
        return StepResult(self.observation(), reward, st.done)

    def value_iteration(self, gamma: float, tol: float = 1e-12) -> np.ndarray:
        """Optimal Q table of shape (n_states, 2), ignoring the step cap."""
        q = np.zeros((self.n_states, 2))
        while True:
            v = q.max(axis=1)
            new = np.empty_like(q)
            for s in range(self.n_states):
                new[s, 0] = self.left_reward if s == 0 else gamma * v[s - 1]
                new[s, 1] = self.right_reward if s == self.n_states - 1 else gamma * v[s + 1]
            if np.max(np.abs(new - q)) < tol:
                return new
            q = new
