"""Per-state encryption latency.

Each measurement times a single ``encrypt`` call on a gridworld state that
went through the full processing chain. Padding is timed separately and not
included. Warmup repetitions are discarded.

Homomorphic schemes are not benchmarked here because no backend ships with
the package. Any scheme registered through ``encrl.cipher.register_scheme``
is timed the same way as the built-ins.
"""
from __future__ import annotations

import itertools
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from encrl.cipher import SchemeSpec, derive_key, make_primitive
from encrl.dqncore import training_in_progress
from encrl.envcore.gridroom import GridRoom
from encrl.errors import ConfigError, UsageError
from encrl.pipeline import GridProcessor, PaddingSpec, ProcessedState, pad_state

DEFAULT_REPS = 1000
DEFAULT_WARMUP = 100
COLUMNS = ("scheme", "env_size", "reps", "median_s", "mean_s", "std_s", "min_s", "max_s")

_bench_lock = threading.Lock()


@dataclass
class BenchResult:
    scheme: str
    env_size: int
    samples: np.ndarray = field(repr=False)
    pad_samples: np.ndarray | None = field(default=None, repr=False)

    @property
    def reps(self) -> int:
        return int(self.samples.size)

    @property
    def median(self) -> float:
        return float(np.median(self.samples))

    @property
    def mean(self) -> float:
        return float(self.samples.mean())

    @property
    def std(self) -> float:
        return float(self.samples.std())

    @property
    def min(self) -> float:
        return float(self.samples.min())

    @property
    def max(self) -> float:
        return float(self.samples.max())

    @property
    def pad_median(self) -> float | None:
        return None if self.pad_samples is None else float(np.median(self.pad_samples))

    def row(self) -> tuple:
        return (self.scheme, self.env_size, self.reps, self.median, self.mean, self.std, self.min, self.max)


def representative_state(size: int, padding: PaddingSpec | None = None, seed: int = 0) -> ProcessedState:
    """Unpadded processed state of a fixed-start room of the given size."""
    env = GridRoom(size, "fixed", np.random.default_rng(seed))
    image = env.reset()
    proc = GridProcessor(size, padding or PaddingSpec())
    return proc.unpadded(image, env.state)


def time_calls(fn, reps: int, warmup: int = DEFAULT_WARMUP) -> np.ndarray:
    """Wall-clock seconds of ``reps`` individual calls to ``fn`` after ``warmup`` untimed ones."""
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    clock = time.perf_counter_ns
    for _ in range(warmup):
        fn()
    out = np.empty(reps)
    for i in range(reps):
        t0 = clock()
        fn()
        out[i] = clock() - t0
    return out * 1e-9


def time_interleaved(fns: list, reps: int, warmup: int = DEFAULT_WARMUP) -> np.ndarray:
    """Round-robin timing: each round times one call of every function.

    Returns seconds with shape ``(len(fns), reps)``. Slow drifts of the host
    (frequency scaling, noisy neighbours) then hit every function alike
    instead of whichever block happened to run during the drift. The order
    inside a round is reshuffled each time so no function owns the slot
    right after the loop overhead.
    """
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    clock = time.perf_counter_ns
    for fn in fns:
        for _ in range(warmup):
            fn()
    order_rng = np.random.default_rng(0)
    out = np.empty((len(fns), reps))
    for i in range(reps):
        for k in order_rng.permutation(len(fns)).tolist():
            fn = fns[k]
            t0 = clock()
            fn()
            out[k, i] = clock() - t0
    return out * 1e-9


def _primitive(spec: SchemeSpec, seed: int):
    rng = np.random.default_rng(seed)
    return make_primitive(spec, derive_key(spec, rng), rng)


def _encrypt_job(prim, state: ProcessedState, padding: PaddingSpec, copies: int = 16):
    # Cycle through separately allocated copies so the buffer placement of one
    # particular input object cannot bias its timing.
    nxt = itertools.cycle([pad_state(state, padding) for _ in range(copies)]).__next__
    return (lambda: pad_state(state, padding)), (lambda: prim.encrypt(nxt()))


def bench_encrypt(spec: SchemeSpec, state: ProcessedState, env_size: int, reps: int = DEFAULT_REPS,
                  padding: PaddingSpec | None = None, warmup: int = DEFAULT_WARMUP, seed: int = 0) -> BenchResult:
    """Time ``encrypt`` of one padded copy of ``state``; padding itself is timed on its own."""
    if training_in_progress():
        raise UsageError("refusing to benchmark while a training run is active in this process")
    padding = padding or PaddingSpec()
    pad_fn, enc_fn = _encrypt_job(_primitive(spec, seed), state, padding)
    with _bench_lock:
        pad_samples = time_calls(pad_fn, reps, warmup)
        samples = time_calls(enc_fn, reps, warmup)
    return BenchResult(spec.label, env_size, samples, pad_samples)


def run_benchmarks(schemes: list[SchemeSpec], sizes=(5, 6, 8, 16), reps: int = DEFAULT_REPS,
                   padding: PaddingSpec | None = None, warmup: int = DEFAULT_WARMUP) -> list[BenchResult]:
    """Every (size, scheme) pair, timed interleaved so the pairs are comparable with each other."""
    if training_in_progress():
        raise UsageError("refusing to benchmark while a training run is active in this process")
    padding = padding or PaddingSpec()
    # one primitive per scheme, so across sizes only the input length changes
    prims = {spec.label: _primitive(spec, 0) for spec in schemes}
    keys, pad_fns, enc_fns = [], [], []
    for size in sizes:
        state = representative_state(size, padding)
        for spec in schemes:
            pad_fn, enc_fn = _encrypt_job(prims[spec.label], state, padding)
            keys.append((spec.label, size))
            pad_fns.append(pad_fn)
            enc_fns.append(enc_fn)
    with _bench_lock:
        pad_samples = time_interleaved(pad_fns, reps, warmup)
        samples = time_interleaved(enc_fns, reps, warmup)
    return [BenchResult(label, size, samples[k], pad_samples[k]) for k, (label, size) in enumerate(keys)]


def bench_report(results: list[BenchResult], delimiter: str = ",") -> str:
    """Delimiter-separated table, rows sorted by (env_size, scheme)."""
    lines = [delimiter.join(COLUMNS)]
    for r in sorted(results, key=lambda r: (r.env_size, r.scheme)):
        scheme, size, reps, *stats = r.row()
        lines.append(delimiter.join([scheme, str(size), str(reps)] + [f"{v:.9f}" for v in stats]))
    return "\n".join(lines) + "\n"
