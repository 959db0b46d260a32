from collections import deque

import numpy as np
import pytest

from encrl import tensornet as tn
from encrl.cipher import CipherState, SchemeSpec
from encrl.config import EnvConfig, ExperimentConfig, TrainParams
from encrl.dqncore import (
    ReplayMemory,
    Transition,
    batch_inputs,
    build_context,
    epsilon_at,
    evaluate,
    moving_average,
    network_input,
    q_targets,
    run_scheme,
    select_action,
    sync_target,
    td_loss_and_grad,
    train_run,
    train_step,
)
from encrl.envcore import Direction, GridAction, GridRoomState, grid_step
from encrl.errors import ConfigError, UsageError
from encrl.pipeline import DIRECTION_INTENSITY, PaddingSpec


class FixedQ:
    """Stand-in network that returns the same Q-row for every input."""

    def __init__(self, row):
        self.row = np.asarray(row, float)
        self.output_shape = (len(self.row),)

    def __call__(self, x):
        return np.tile(self.row, (len(x), 1))


def _cipher(n=16):
    return CipherState(bytes(n), "noop", (n // 4, 4))


# -- action selection and schedules ----------------------------------------------------

def test_epsilon_one_is_uniform():
    rng = np.random.default_rng(0)
    net = FixedQ([0.0, 5.0, 0.0])
    counts = np.bincount([select_action(net, _cipher(), 1.0, rng) for _ in range(30_000)], minlength=3)
    assert np.all(np.abs(counts / 30_000 - 1 / 3) < 0.015)


def test_epsilon_zero_is_greedy_and_ties_go_low():
    rng = np.random.default_rng(0)
    assert select_action(FixedQ([0.0, 5.0, 1.0]), _cipher(), 0.0, rng) == 1
    assert select_action(FixedQ([2.0, 1.0, 2.0]), _cipher(), 0.0, rng) == 0
    assert select_action(FixedQ([1.0, 3.0, 3.0]), _cipher(), 0.0, rng) == 1


def test_epsilon_out_of_range():
    with pytest.raises(ConfigError):
        select_action(FixedQ([0.0]), _cipher(), 1.5, np.random.default_rng(0))


@pytest.mark.parametrize("t, expected", [(0, 1.0), (5000, 0.525), (10_000, 0.05), (10**6, 0.05)])
def test_epsilon_schedule(t, expected):
    assert epsilon_at(t, 1.0, 0.05, 10_000) == pytest.approx(expected)


def test_epsilon_schedule_monotone():
    values = [epsilon_at(t, 1.0, 0.05, 100) for t in range(200)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert epsilon_at(3, 1.0, 0.1, 0) == 0.1


def test_q_targets_examples():
    next_q = np.array([[0.0, 2.0], [5.0, 1.0]])
    y = q_targets([1.0, 0.5], next_q, [False, True], 0.9)
    np.testing.assert_allclose(y, [1.0 + 0.9 * 2.0, 0.5])
    with pytest.raises(ConfigError):
        q_targets([0.0], np.zeros((1, 2)), [False], 1.0)


def test_moving_average():
    np.testing.assert_allclose(moving_average([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
    assert moving_average([1, 2], 3).size == 0
    with pytest.raises(ConfigError):
        moving_average([1.0], 0)


# -- replay memory --------------------------------------------------------------------

def _transition(i, n=16):
    s = CipherState(bytes([i % 256]) * n, "aes_ecb", (n // 4, 4))
    return Transition(s, i % 3, float(i), s, i % 2 == 0)


def test_replay_fifo_eviction():
    mem = ReplayMemory(4)
    for i in range(6):
        mem.push(_transition(i))
    assert len(mem) == 4
    assert sorted(mem[j].reward for j in range(4)) == [2.0, 3.0, 4.0, 5.0]
    t = mem[0]
    assert isinstance(t.state, CipherState) and t.state.scheme == "aes_ecb"


def test_replay_rejects_mismatched_lengths_and_bad_reward():
    mem = ReplayMemory(4)
    mem.push(_transition(0))
    with pytest.raises(UsageError):
        mem.push(_transition(1, n=32))
    s = _transition(0).state
    with pytest.raises(ValueError):
        mem.push(Transition(s, 0, float("nan"), s, False))
    with pytest.raises(ConfigError):
        ReplayMemory(0)
    with pytest.raises(IndexError):
        mem[3]


def test_replay_uniform_sampling():
    mem = ReplayMemory(10)
    for i in range(10):
        mem.push(_transition(i))
    rng = np.random.default_rng(0)
    counts = np.zeros(10)
    draws = 20_000
    for _ in range(draws):
        idx = mem.sample_indices(1, rng)
        counts[idx] += 1
    assert np.all(np.abs(counts / draws - 0.1) < 0.01)
    batch = mem.sample_indices(10, rng)
    assert sorted(batch) == list(range(10))  # without replacement


def test_batch_inputs_match_single_path():
    rng = np.random.default_rng(0)
    for length, layout in ((16, (4, 4)), (32, (4, 4)), (48, (2, 16)), (17, (4, 4))):
        rows = rng.integers(0, 256, (3, length), dtype=np.uint8)
        batch = batch_inputs(rows, layout, False)
        for i in range(3):
            single = network_input(CipherState(rows[i].tobytes(), "x", layout))
            np.testing.assert_array_equal(batch[i], single)


# -- learning updates --------------------------------------------------------------------

def test_train_step_learns_fixed_point():
    """With a terminal reward of 1 on every transition, Q(s, a) must approach 1."""
    rng = np.random.default_rng(0)
    spec = tn.QNetworkSpec("mlp", (16,), 2, conv=[], hidden=[16])
    net = tn.build_qnetwork(spec, rng)
    target = net.copy()
    mem = ReplayMemory(100)
    for _ in range(8):
        s = CipherState(rng.bytes(16), "noop", (1, 16), is_vector=True)
        for a in (0, 1):
            mem.push(Transition(s, a, 1.0, s, True))
    opt = tn.AdamState.zeros_like([net.flat_params])
    for _ in range(500):
        train_step(net, target, mem, 8, 0.99, opt, rng, lr=5e-3)
    q = net(mem.network_inputs(np.arange(16)))
    assert np.abs(q - 1.0).max() < 0.05


def test_train_step_needs_full_batch():
    rng = np.random.default_rng(0)
    net = tn.build_qnetwork(tn.QNetworkSpec("mlp", (16,), 2, conv=[], hidden=[4]), rng)
    mem = ReplayMemory(10)
    mem.push(_transition(0))
    assert train_step(net, net.copy(), mem, 2, 0.9, tn.AdamState.zeros_like([net.flat_params]), rng) is None


def test_td_gradient_matches_finite_difference():
    rng = np.random.default_rng(1)
    net = tn.build_qnetwork(tn.QNetworkSpec("mlp", (5,), 3, conv=[], hidden=[6]), rng)
    x = rng.uniform(size=(8, 5))
    actions = rng.integers(0, 3, 8)
    y = rng.normal(scale=2.0, size=8)
    _, grads = td_loss_and_grad(net, x, actions, y, 1.0)
    grads = [g.copy() for g in grads]
    eps = 1e-5
    for p, g in zip(net.params(), grads):
        flat = p.reshape(-1)
        for j in range(0, flat.size, max(1, flat.size // 7)):
            old = flat[j]
            flat[j] = old + eps
            up = tn.huber_loss(net.forward(x)[np.arange(8), actions], y)[0]
            flat[j] = old - eps
            down = tn.huber_loss(net.forward(x)[np.arange(8), actions], y)[0]
            flat[j] = old
            num = (up - down) / (2 * eps)
            assert abs(num - g.reshape(-1)[j]) <= 1e-4 * max(1.0, abs(num))


def test_sync_target_copies_then_decouples():
    rng = np.random.default_rng(0)
    net = tn.build_qnetwork(tn.QNetworkSpec.default_mlp((4,), 2), rng)
    target = net.copy()
    net.flat_params += 0.5
    assert not np.array_equal(net.flat_params, target.flat_params)
    sync_target(net, target)
    np.testing.assert_array_equal(net.flat_params, target.flat_params)
    net.flat_params += 0.5
    assert not np.array_equal(net.flat_params, target.flat_params)


# -- wiring -------------------------------------------------------------------------

def _grid_config(kind="noop", **train):
    return ExperimentConfig(env=EnvConfig("gridroom", 5), scheme=SchemeSpec(kind, 32),
                            train=TrainParams(**train), seeds=(0,))


def test_shuffle_seed_mixes_run_seed():
    cfg = _grid_config("shuffle")
    assert run_scheme(cfg, 0).shuffle_seed != run_scheme(cfg, 1).shuffle_seed
    assert run_scheme(cfg, 3) == run_scheme(cfg, 3)
    assert run_scheme(_grid_config("aes_ecb"), 3) == _grid_config("aes_ecb").scheme


def _optimal_action(size, pos, heading):
    """First action of a BFS-shortest path to the goal."""
    goal = (size - 2, size - 2)
    start = (pos, int(heading))
    q = deque([(start, None)])
    seen = {start}
    while q:
        (p, d), first = q.popleft()
        for a in GridAction:
            st = GridRoomState(size, p, Direction(d), goal, 0, 10**9)
            grid_step(st, a)
            f = a if first is None else first
            if st.agent_pos == goal:
                return int(f)
            nxt = (st.agent_pos, int(st.agent_dir))
            if nxt not in seen:
                seen.add(nxt)
                q.append((nxt, f))
    raise AssertionError("unreachable")


def test_evaluate_with_tabular_oracle_policy():
    """A plaintext decoder with BFS-optimal actions scores exactly the optimal 5x5 return."""
    size = 5
    heading = {v / 255.0: d for d, v in DIRECTION_INTENSITY.items()}

    def oracle_q(batch):
        m = batch[0, 0]
        for (r, c), v in np.ndenumerate(m[: size - 2, : size - 2]):
            if v in heading:
                q = np.zeros((1, 3))
                q[0, _optimal_action(size, (r + 1, c + 1), heading[v])] = 1.0
                return q
        raise AssertionError("agent not found")

    mean, std = evaluate(oracle_q, _grid_config("noop"), 5)
    assert mean == pytest.approx(0.955, abs=1e-9)
    assert std == pytest.approx(0.0, abs=1e-12)


def test_evaluate_needs_episodes():
    with pytest.raises(ConfigError):
        evaluate(FixedQ([0, 0, 1]), _grid_config(), 0)


def test_train_run_smoke_and_determinism():
    cfg = _grid_config("aes_cbc", episodes=3, warmup_steps=50, replay_capacity=500)
    a = train_run(cfg, 0)
    b = train_run(cfg, 0)
    assert len(a.episodes) == 3
    np.testing.assert_array_equal(a.returns, b.returns)
    np.testing.assert_array_equal(a.net.flat_params, b.net.flat_params)
    assert a.env_steps == sum(e.steps for e in a.episodes)


def test_cbc_network_input_shape_includes_iv():
    cfg = _grid_config("aes_cbc")
    ctx = build_context(cfg, 0)
    state = ctx.observe(ctx.env.reset())
    assert len(state.data) == 32
    assert network_input(state).shape == (1, 8, 4)


def test_containment_no_plaintext_in_memory():
    cfg = _grid_config("aes_ecb", episodes=5, warmup_steps=10_000, replay_capacity=2000).replace(
        env=EnvConfig("gridroom", 5, "random"))
    m = train_run(cfg, 0, keep_memory=True)
    ctx = build_context(cfg, 0)
    plain = ctx.processor(ctx.env.reset(), ctx.env.state).data
    stored = {m.memory.states[i].tobytes() for i in range(len(m.memory))}
    assert plain not in stored
    assert all(len(s) == 16 for s in stored)


def test_default_padding_is_custom():
    assert _grid_config().padding == PaddingSpec("custom")
