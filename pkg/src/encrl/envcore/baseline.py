from __future__ import annotations

import numpy as np

from encrl.errors import ConfigError


def random_policy_return(env, episodes: int, rng: np.random.Generator) -> tuple[float, float | None]:
    """Mean and sample std of undiscounted return under uniform random actions.

    ``std`` is None for a single episode. ``env`` needs ``reset``, ``step`` and
    ``n_actions``; its own RNG drives start states, ``rng`` drives actions.
    """
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    returns = np.empty(episodes)
    for i in range(episodes):
        env.reset()
        total, done = 0.0, False
        while not done:
            res = env.step(int(rng.integers(env.n_actions)))
            total += res.reward
            done = res.done
        returns[i] = total
    std = float(returns.std(ddof=1)) if episodes > 1 else None
    return float(returns.mean()), std
