"""DQN agent that only ever sees ciphertext.

Each observation runs through the processing chain and the run's encryption
primitive before it reaches the agent. Replay memory stores ciphertext bytes
only; network input is the ciphertext reassembled and scaled to [0, 1].
"""
from __future__ import annotations

import dataclasses
import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from encrl import tensornet as tn
from encrl.cipher import CipherState, Primitive, SchemeSpec, derive_key, make_primitive
from encrl.config import ExperimentConfig, TrainParams
from encrl.envcore import GridRoom, LanderLite
from encrl.envcore.chain import ChainMDP
from encrl.errors import ConfigError, UsageError
from encrl.pipeline import GridProcessor, LanderProcessor, ProcessedState, normalize, pad_state, reassemble

_training_lock = threading.Lock()
_active_runs = 0


@contextmanager
def training_active():
    """Marks a training run in progress (the benchmark harness refuses to run meanwhile)."""
    global _active_runs
    with _training_lock:
        _active_runs += 1
    try:
        yield
    finally:
        with _training_lock:
            _active_runs -= 1


def training_in_progress() -> bool:
    return _active_runs > 0


@dataclass(frozen=True)
class Transition:
    state: CipherState
    action: int
    reward: float
    next_state: CipherState
    done: bool


class ReplayMemory:
    """FIFO ring buffer of transitions, stored column-wise as ciphertext bytes.

    All ciphertexts in one run share a length and layout, so states are kept
    in a fixed-width uint8 array and rebuilt into ``CipherState`` on access.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("replay capacity must be >= 1")
        self.capacity = capacity
        self.cursor = 0
        self.size = 0
        self._width = None
        self._meta = None

    def _alloc(self, t: Transition):
        self._width = len(t.state.data)
        self._meta = (t.state.scheme, t.state.layout, t.state.is_vector)
        self.states = np.zeros((self.capacity, self._width), np.uint8)
        self.next_states = np.zeros((self.capacity, self._width), np.uint8)
        self.actions = np.zeros(self.capacity, np.int64)
        self.rewards = np.zeros(self.capacity, np.float64)
        self.dones = np.zeros(self.capacity, bool)

    def push(self, t: Transition) -> None:
        if self._width is None:
            self._alloc(t)
        if len(t.state.data) != self._width or len(t.next_state.data) != self._width:
            raise UsageError("all transitions in a memory must share one ciphertext length")
        if not np.isfinite(t.reward):
            raise ValueError("reward must be finite")
        i = self.cursor
        self.states[i] = np.frombuffer(t.state.data, np.uint8)
        self.next_states[i] = np.frombuffer(t.next_state.data, np.uint8)
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.dones[i] = t.done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __len__(self) -> int:
        return self.size

    def _cipher(self, row: np.ndarray) -> CipherState:
        scheme, layout, is_vector = self._meta
        return CipherState(row.tobytes(), scheme, layout, is_vector)

    def __getitem__(self, i: int) -> Transition:
        if not 0 <= i < self.size:
            raise IndexError(i)
        return Transition(self._cipher(self.states[i]), int(self.actions[i]), float(self.rewards[i]),
                          self._cipher(self.next_states[i]), bool(self.dones[i]))

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform sample without replacement."""
        return rng.choice(self.size, size=batch_size, replace=False)

    def network_inputs(self, idx: np.ndarray, which: str = "states") -> np.ndarray:
        rows = getattr(self, which)[idx]
        return batch_inputs(rows, self._meta[1], self._meta[2])


def batch_inputs(rows: np.ndarray, layout: tuple[int, int], is_vector: bool) -> np.ndarray:
    """Vectorized ``normalize(reassemble(.))`` for equal-length ciphertexts; adds the channel axis for 2-D."""
    n, width = rows.shape
    if is_vector:
        return rows / 255.0
    r, c = layout
    if width != r * c:
        r = -(-width // c)
        if width != r * c:
            rows = np.concatenate([rows, np.zeros((n, r * c - width), np.uint8)], axis=1)
    return (rows.reshape(n, 1, r, c)) / 255.0


def network_input(cipher: CipherState) -> np.ndarray:
    m = normalize(reassemble(cipher))
    return m if cipher.is_vector else m[None]


def select_action(net, cipher: CipherState | np.ndarray, epsilon: float, rng: np.random.Generator,
                  n_actions: int | None = None) -> int:
    """Epsilon-greedy; greedy ties go to the lowest action index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigError("epsilon must be in [0, 1]")
    x = network_input(cipher) if isinstance(cipher, CipherState) else cipher
    if n_actions is None:
        n_actions = net.output_shape[0]
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(n_actions))
    q = np.asarray(net(x[None]))[0]
    return int(np.argmax(q))


def epsilon_at(t: int, eps_start: float, eps_end: float, decay_steps: int) -> float:
    if decay_steps <= 0 or t >= decay_steps:
        return eps_end
    return eps_start + (eps_end - eps_start) * (t / decay_steps)


def q_targets(rewards: np.ndarray, next_q: np.ndarray, dones: np.ndarray, gamma: float) -> np.ndarray:
    """``r`` at terminals, else ``r + gamma * max_a Q_target(s', a)``; ``next_q`` is (N, |A|)."""
    if not 0.0 <= gamma < 1.0:
        raise ConfigError("gamma must be in [0, 1)")
    rewards = np.asarray(rewards, dtype=np.float64)
    boot = np.asarray(next_q, dtype=np.float64).max(axis=1)
    return np.where(np.asarray(dones, bool), rewards, rewards + gamma * boot)


def td_loss_and_grad(net: tn.Sequential, x: np.ndarray, actions: np.ndarray, targets: np.ndarray,
                     delta: float) -> tuple[float, list[np.ndarray]]:
    """Huber loss between Q(s, a) and the targets, plus parameter gradients."""
    q = net.forward(x)
    n = len(actions)
    loss, g = tn.huber_loss(q[np.arange(n), actions], targets, delta)
    dout = np.zeros_like(q)
    dout[np.arange(n), actions] = g
    return loss, net.backward(dout)


def train_step(net: tn.Sequential, target_net: tn.Sequential, memory: ReplayMemory, batch_size: int,
               gamma: float, opt: tn.AdamState, rng: np.random.Generator, lr: float = 1e-3,
               delta: float = 1.0) -> float | None:
    """One sampled Adam update. Returns the mean TD loss, or None if memory is too small."""
    if len(memory) < batch_size:
        return None
    idx = memory.sample_indices(batch_size, rng)
    x = memory.network_inputs(idx, "states")
    x_next = memory.network_inputs(idx, "next_states")
    y = q_targets(memory.rewards[idx], target_net.forward(x_next), memory.dones[idx], gamma)
    loss, grads = td_loss_and_grad(net, x, memory.actions[idx], y, delta)
    tn.adam_step([net.flat_params], [net.flat_grads], opt, lr)
    return loss


def sync_target(net: tn.Sequential, target_net: tn.Sequential) -> None:
    target_net.load_params_from(net)


# -- wiring --------------------------------------------------------------------

@dataclass
class RunContext:
    """Everything one run owns: environment, processing chain, primitive and RNG streams."""

    env: object
    processor: object
    primitive: Primitive
    agent_rng: np.random.Generator
    init_rng: np.random.Generator
    n_actions: int

    def observe(self, obs) -> CipherState:
        return self.primitive.encrypt(self.processor(obs, getattr(self.env, "state", None)))


class ChainProcessor:
    """One-hot position (255 at the agent's cell) as a byte vector, PKCS#7 padded."""

    def __init__(self, n_states: int, padding):
        self.n_states = n_states
        self.padding = padding

    def __call__(self, obs, state=None) -> ProcessedState:
        v = np.zeros(self.n_states, np.uint8)
        v[int(obs[0])] = 255
        return pad_state(ProcessedState(v.tobytes(), 1, self.n_states, is_vector=True), self.padding)


def run_scheme(config: ExperimentConfig, seed: int) -> SchemeSpec:
    """Scheme spec with the per-run shuffle seed mixed in."""
    if config.scheme.kind != "shuffle":
        return config.scheme
    mixed = np.random.SeedSequence([config.scheme.shuffle_seed, seed]).generate_state(1, np.uint64)[0]
    return dataclasses.replace(config.scheme, shuffle_seed=int(mixed))


def build_context(config: ExperimentConfig, seed: int) -> RunContext:
    env_ss, key_ss, iv_ss, agent_ss, init_ss = np.random.SeedSequence(seed).spawn(5)
    env_rng = np.random.default_rng(env_ss)
    ec = config.env
    if ec.kind == "gridroom":
        env = GridRoom(ec.size, ec.start_mode, env_rng, ec.px_per_tile)
        processor = GridProcessor(ec.size, config.padding)
    elif ec.kind == "landerlite":
        env = LanderLite(env_rng)
        processor = LanderProcessor(config.padding)
    else:
        env = ChainMDP(ec.size, rng=env_rng)
        processor = ChainProcessor(ec.size, config.padding)
    spec = run_scheme(config, seed)
    key = derive_key(spec, np.random.default_rng(key_ss))
    primitive = make_primitive(spec, key, np.random.default_rng(iv_ss))
    return RunContext(env, processor, primitive, np.random.default_rng(agent_ss),
                      np.random.default_rng(init_ss), env.n_actions)


def network_spec(config: ExperimentConfig, sample: CipherState, n_actions: int) -> tn.QNetworkSpec:
    shape = network_input(sample).shape
    if sample.is_vector:
        return tn.QNetworkSpec("mlp", shape, n_actions, conv=[], hidden=list(config.net.hidden_mlp),
                               dtype=config.net.dtype)
    return tn.QNetworkSpec("cnn", shape, n_actions, conv=list(config.net.conv),
                           conv_padding=config.net.conv_padding, hidden=list(config.net.hidden_cnn),
                           dtype=config.net.dtype)


@dataclass
class EpisodeRecord:
    seed: int
    episode: int
    steps: int
    ret: float
    epsilon: float
    mean_loss: float  # NaN before training starts


@dataclass
class TrainMetrics:
    seed: int
    episodes: list[EpisodeRecord]
    env_steps: int
    net: tn.Sequential | None = None
    net_spec: tn.QNetworkSpec | None = None
    memory: ReplayMemory | None = None

    @property
    def returns(self) -> np.ndarray:
        return np.array([e.ret for e in self.episodes])

    def moving_average(self, window: int = 100) -> np.ndarray:
        return moving_average(self.returns, window)

    def final_mean(self, window: int = 100) -> float:
        r = self.returns
        return float(r[-window:].mean())


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if window < 1:
        raise ConfigError("window must be >= 1")
    if len(x) < window:
        return np.empty(0)
    c = np.concatenate([[0.0], np.cumsum(x)])
    return (c[window:] - c[:-window]) / window


def train_run(config: ExperimentConfig, seed: int | None = None, keep_memory: bool = False) -> TrainMetrics:
    """Train one seed of ``config`` and return its per-episode metrics."""
    seed = config.seeds[0] if seed is None else seed
    hp: TrainParams = config.train
    ctx = build_context(config, seed)
    env, rng = ctx.env, ctx.agent_rng

    with training_active():
        obs = env.reset()
        state = ctx.observe(obs)
        spec = network_spec(config, state, ctx.n_actions)
        net = tn.build_qnetwork(spec, ctx.init_rng)
        target = net.copy()
        opt = tn.AdamState.zeros_like([net.flat_params])
        memory = ReplayMemory(hp.replay_capacity)

        records: list[EpisodeRecord] = []
        t = 0
        updates = 0
        for ep in range(config.episodes):
            if ep > 0:
                state = ctx.observe(env.reset())
            x = network_input(state)
            ret, steps, losses, done = 0.0, 0, [], False
            eps = epsilon_at(t, hp.eps_start, hp.eps_end, hp.eps_decay_steps)
            while not done:
                eps = epsilon_at(t, hp.eps_start, hp.eps_end, hp.eps_decay_steps)
                action = select_action(net, x, eps, rng, ctx.n_actions)
                res = env.step(action)
                nxt = ctx.observe(res.observation)
                memory.push(Transition(state, action, res.reward, nxt, res.done))
                t += 1
                steps += 1
                ret += res.reward
                done = res.done
                if t > hp.warmup_steps and t % hp.train_every == 0:
                    loss = train_step(net, target, memory, hp.batch_size, hp.gamma, opt, rng, hp.lr,
                                      hp.huber_delta)
                    if loss is not None:
                        losses.append(loss)
                        updates += 1
                        if updates % hp.target_sync == 0:
                            sync_target(net, target)
                state = nxt
                x = network_input(state)
            records.append(EpisodeRecord(seed, ep, steps, ret, eps,
                                         float(np.mean(losses)) if losses else float("nan")))

    return TrainMetrics(seed, records, t, net, spec, memory if keep_memory else None)


def evaluate(q_fn, config: ExperimentConfig, episodes: int, seed: int = 0) -> tuple[float, float | None]:
    """Greedy (epsilon = 0) mean and std return of ``q_fn`` on fresh episodes of ``config``'s environment.

    ``q_fn`` maps a batch of network inputs to Q-values; a ``Sequential`` works.
    """
    if episodes < 1:
        raise ConfigError("evaluate needs at least one episode")
    ctx = build_context(config, seed)
    out = np.empty(episodes)
    for i in range(episodes):
        state = ctx.observe(ctx.env.reset())
        total, done = 0.0, False
        while not done:
            q = np.asarray(q_fn(network_input(state)[None]))[0]
            res = ctx.env.step(int(np.argmax(q)))
            total += res.reward
            done = res.done
            state = ctx.observe(res.observation)
        out[i] = total
    return float(out.mean()), (float(out.std(ddof=1)) if episodes > 1 else None)
