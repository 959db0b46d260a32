"""Acceptance gate: one test per criterion, each recording a PASS/FAIL verdict line.

Training-based criteria (4-7, 9) run the real default hyperparameters and
take tens of minutes in total on a single core. Runs are shared through a
session fixture and written with the experiment runner, so the numbers
checked here are read back from the same metrics files a user would get.
"""
from __future__ import annotations

import csv
import hashlib
from pathlib import Path

import numpy as np
import pytest

import conftest
from encrl import config as cfgmod
from encrl import expcli
from encrl import tensornet as tn
from encrl.cipher import SchemeSpec, derive_key, make_primitive
from encrl.config import EnvConfig, ExperimentConfig, TrainParams
from encrl.cryptobench import representative_state, run_benchmarks
from encrl.dqncore import build_context, network_input, train_run
from encrl.envcore import Direction, GridRoom, grid_render, grid_reset, random_policy_return
from encrl.envcore.chain import ChainMDP
from encrl.pipeline import GridProcessor, LanderProcessor, PaddingSpec, ProcessedState, pad_pkcs7, pad_state

SEEDS = (0, 1, 2, 3, 4)
THRESHOLD = 0.90


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    conftest.VERDICTS.append(line)
    assert ok, line


def grid_config(size, kind, key_len=32, padding="custom", seeds=SEEDS, **train):
    return ExperimentConfig(env=EnvConfig("gridroom", size, "fixed"), scheme=SchemeSpec(kind, key_len),
                            padding=PaddingSpec(padding), train=TrainParams(**train), seeds=seeds)


class RunCache:
    """Trains each configuration once per session and reads the per-seed finals back from disk."""

    def __init__(self, root: Path):
        self.root = root
        self.dirs: dict[ExperimentConfig, Path] = {}

    def run_dir(self, config: ExperimentConfig) -> Path:
        if config not in self.dirs:
            self.dirs[config] = expcli.run(config, self.root)
        return self.dirs[config]

    def finals(self, config: ExperimentConfig) -> np.ndarray:
        d = self.run_dir(config)
        w = config.train.final_window
        return np.array([expcli.read_metrics(expcli.metrics_path(d, s)).returns[-w:].mean() for s in config.seeds])


@pytest.fixture(scope="session")
def runs(tmp_path_factory) -> RunCache:
    return RunCache(tmp_path_factory.mktemp("acceptance_runs"))


def _fmt(arr: np.ndarray) -> str:
    return f"{arr.mean():.3f}±{arr.std():.3f}"


# -- 1. crypto conformance ------------------------------------------------------------------

def test_criterion_01_crypto_conformance():
    fips = make_primitive(SchemeSpec("aes_ecb", 16), bytes.fromhex("000102030405060708090a0b0c0d0e0f"))
    pt = ProcessedState(bytes.fromhex("00112233445566778899aabbccddeeff"), 4, 4)
    fips_ok = fips.encrypt(pt).data.hex() == "69c4e0d86a7b0430d8cdb78070b4c55a"

    rng = np.random.default_rng(2024)
    failures = 0
    for kind in ("aes_ecb", "aes_cbc"):
        for key_len in (16, 24, 32):
            spec = SchemeSpec(kind, key_len)
            prim = make_primitive(spec, derive_key(spec, rng), rng)
            for i in range(1000):
                rows, cols = int(rng.integers(1, 15)), int(rng.integers(1, 15))
                raw = ProcessedState(rng.integers(0, 256, rows * cols, dtype=np.uint8).tobytes(), rows, cols)
                padded = pad_state(raw, PaddingSpec("custom" if i % 2 else "pkcs7"))
                failures += prim.decrypt(prim.encrypt(padded)) != padded

    pkcs_bad = []
    for length in range(1, 65):
        p = 16 - (length % 16)
        out = pad_pkcs7(bytes(length), 16)
        if len(out) != length + p or out[length:] != bytes([p]) * p:
            pkcs_bad.append(length)

    ok = fips_ok and failures == 0 and not pkcs_bad
    verdict(1, ok, f"FIPS-197={fips_ok} round-trip failures={failures}/6000 pkcs7 mismatches={pkcs_bad}")


# -- 2. gradient correctness ------------------------------------------------------------------

def _fd_max_rel_error(net: tn.Sequential, x: np.ndarray, rng) -> float:
    for layer in net.layers:
        if hasattr(layer, "needs_input_grad"):
            layer.needs_input_grad = True
    w = rng.normal(size=(x.shape[0],) + net.output_shape)

    def loss():
        return float((net.forward(x) * w).sum())

    net.forward(x)
    dx = w
    for layer in reversed(net.layers):
        dx = layer.backward(dx)
    pairs = [(p, g.copy()) for p, g in zip(net.params(), net.grads())] + [(x, dx.copy())]
    worst = 0.0
    h = 1e-4
    for arr, g in pairs:
        num = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + h
            up = loss()
            arr[i] = old - h
            down = loss()
            arr[i] = old
            num[i] = (up - down) / (2 * h)
        scale = max(np.abs(num).max(), np.abs(g).max(), 1e-8)
        worst = max(worst, float(np.abs(num - g).max() / scale))
    return worst


def _random_network(kind: str, rng) -> tuple[tn.Sequential, np.ndarray]:
    batch = int(rng.integers(1, 4))
    if kind == "dense":
        n_in, n_out = int(rng.integers(1, 8)), int(rng.integers(1, 6))
        net = tn.Sequential([tn.Dense(n_in, n_out, rng)], (n_in,))
        x = rng.normal(size=(batch, n_in))
    elif kind == "conv":
        c, o, k = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h, w = int(rng.integers(k, 7)), int(rng.integers(k, 7))
        net = tn.Sequential([tn.Conv2D(c, o, k, s, p, rng)], (c, h, w))
        x = rng.normal(size=(batch, c, h, w))
    elif kind == "cnn":
        spec = tn.QNetworkSpec("cnn", (1, 4, 4), 3, conv=[(int(rng.integers(2, 4)), 3, 1), (2, 3, 1)], hidden=[5])
        net = tn.build_qnetwork(spec, rng)
        x = rng.uniform(size=(batch, 1, 4, 4))
    else:
        spec = tn.QNetworkSpec("mlp", (int(rng.integers(2, 9)),), 4, conv=[], hidden=[6, 5])
        net = tn.build_qnetwork(spec, rng)
        x = rng.uniform(size=(batch,) + spec.input_shape)
    for p in net.params():
        p[...] = rng.normal(scale=0.5, size=p.shape)
    return net, x


def _kink_margin(net: tn.Sequential, x: np.ndarray) -> float:
    """Smallest |pre-activation| feeding any ReLU; inf when there is none."""
    margin = np.inf
    for layer in net.layers:
        if isinstance(layer, tn.ReLU):
            margin = min(margin, float(np.abs(x).min()))
        x = layer.forward(x)
    return margin


def test_criterion_02_gradient_correctness():
    rng = np.random.default_rng(7)
    kinds = ["dense"] * 7 + ["conv"] * 7 + ["cnn"] * 4 + ["mlp"] * 4
    errors, redrawn = [], 0
    for kind in kinds:
        net, x = _random_network(kind, rng)
        # central differences with h=1e-4 are meaningless across a ReLU kink, so redraw those
        while _kink_margin(net, x) < 1e-3:
            redrawn += 1
            net, x = _random_network(kind, rng)
        errors.append(_fd_max_rel_error(net, x, rng))
    worst = max(errors)
    verdict(2, worst < 1e-4 and len(errors) >= 20,
            f"{len(errors)} configurations (dense, conv, cnn, mlp), worst relative error {worst:.2e} (< 1e-4), "
            f"{redrawn} redrawn for a ReLU input within 1e-3 of 0")


# -- 3. tabular oracle --------------------------------------------------------------------

def chain_config(seeds=tuple(range(10))):
    return ExperimentConfig(env=EnvConfig("chain", 3), scheme=SchemeSpec("noop"), padding=PaddingSpec("pkcs7"),
                            train=TrainParams(episodes=300, gamma=0.9, warmup_steps=64, eps_decay_steps=500,
                                              target_sync=25, replay_capacity=5000),
                            seeds=seeds)


def test_criterion_03_tabular_oracle():
    cfg = chain_config()
    optimal = [int(a) for a in ChainMDP(3).value_iteration(cfg.train.gamma).argmax(axis=1)]
    recovered = 0
    for seed in cfg.seeds:
        m = train_run(cfg, seed)
        ctx = build_context(cfg, seed)
        policy = [int(np.argmax(m.net(network_input(ctx.observe(np.array([s])))[None])[0])) for s in range(3)]
        recovered += policy == optimal
    verdict(3, recovered == 10, f"greedy policy matches value iteration {optimal} in {recovered}/10 seeds")


# -- 4-7. grid convergence ablations -----------------------------------------------------------

@pytest.mark.slow
def test_criterion_04_plaintext_and_deterministic_convergence(runs):
    results = {}
    for size in (5, 6):
        for kind in ("noop", "shuffle", "aes_ecb"):
            results[(size, kind)] = runs.finals(grid_config(size, kind))
    ok = all(v.mean() >= THRESHOLD for v in results.values())
    cells = ", ".join(f"{s}x{s} {k}={_fmt(v)}" for (s, k), v in results.items())
    verdict(4, ok, f"final-100 mean over {len(SEEDS)} seeds >= {THRESHOLD}: {cells}")


@pytest.mark.slow
def test_criterion_05_ecb_key_size_insensitive(runs):
    e16 = runs.finals(grid_config(5, "aes_ecb", 16))
    e32 = runs.finals(grid_config(5, "aes_ecb", 32))
    gap = abs(e16.mean() - e32.mean())
    verdict(5, gap < 0.02, f"ECB(16)={_fmt(e16)} ECB(32)={_fmt(e32)} |diff|={gap:.4f} (< 0.02)")


BASELINE_EPISODES = 1000


@pytest.mark.slow
def test_criterion_06_cbc_partial_learning(runs):
    cbc = runs.finals(grid_config(5, "aes_cbc", 32))
    env = GridRoom(5, "fixed", np.random.default_rng(11))
    base_mean, base_std = random_policy_return(env, BASELINE_EPISODES, np.random.default_rng(12))
    # "baseline std" is the uncertainty of the baseline mean; the per-episode spread (~0.32) would put
    # the bar above the largest attainable return
    std_err = base_std / np.sqrt(BASELINE_EPISODES)
    bar = base_mean + 3 * std_err
    m = cbc.mean()
    ok = 0.35 <= m <= 0.60 and m > bar
    verdict(6, ok, f"CBC(32)={_fmt(cbc)} in [0.35, 0.60] and > random {base_mean:.3f} + 3*{std_err:.4f} "
                   f"= {bar:.3f} (per-episode random std {base_std:.3f}, {BASELINE_EPISODES} episodes)")


@pytest.mark.slow
def test_criterion_07_padding_equivalence(runs):
    custom = runs.finals(grid_config(5, "aes_ecb", 32, "custom"))
    pkcs = runs.finals(grid_config(5, "aes_ecb", 32, "pkcs7"))
    gap = abs(custom.mean() - pkcs.mean())
    verdict(7, gap < 0.02, f"ECB+custom={_fmt(custom)} ECB+PKCS={_fmt(pkcs)} |diff|={gap:.4f} (< 0.02)")


# -- 8. encryption overhead --------------------------------------------------------------------

def _median_diff_ci(a: np.ndarray, b: np.ndarray, n_boot: int = 2000) -> tuple[float, float]:
    """95% bootstrap interval of the median of the paired per-round differences b - a."""
    d = b - a
    idx = np.random.default_rng(8).integers(0, d.size, (n_boot, d.size))
    meds = np.median(d[idx], axis=1)
    return float(np.percentile(meds, 2.5)), float(np.percentile(meds, 97.5))


def test_criterion_08_encryption_overhead():
    sizes = (5, 6, 8, 16)
    schemes = [SchemeSpec("shuffle"), SchemeSpec("aes_ecb", 32), SchemeSpec("aes_cbc", 32)]
    results = run_benchmarks(schemes, sizes, reps=1000)
    med = {(r.scheme, r.env_size): r.median for r in results}
    samples = {(r.scheme, r.env_size): r.samples for r in results}
    nbytes = {s: len(pad_state(representative_state(s), PaddingSpec()).data) for s in sizes}

    ratios = {(k, s): med[(k, s)] / med[("shuffle", s)] for k in ("aes_ecb(32)", "aes_cbc(32)") for s in sizes}
    within = all(v <= 10.0 for v in ratios.values())
    # Monotone in the state size: no strictly larger state may be significantly faster. Samples are
    # interleaved round by round, so they pair up and host drift cancels in the differences.
    decreases = []
    for k in ("aes_ecb(32)", "aes_cbc(32)"):
        for a in sizes:
            for b in sizes:
                if nbytes[a] < nbytes[b] and _median_diff_ci(samples[(k, a)], samples[(k, b)])[1] < 0:
                    decreases.append(f"{k[:7]}@{b}<@{a}")
    # and the trend must actually be visible: the largest state is significantly slower than the smallest
    lo, hi = min(sizes, key=nbytes.get), max(sizes, key=nbytes.get)
    grows = all(_median_diff_ci(samples[(k, lo)], samples[(k, hi)])[0] > 0 for k in ("aes_ecb(32)", "aes_cbc(32)"))
    monotone = not decreases and grows
    detail = " ".join(f"{k[:7]}@{s}={med[(k, s)] * 1e6:.2f}us" for k in ("shuffle", "aes_ecb(32)", "aes_cbc(32)")
                      for s in sizes)
    verdict(8, within and monotone,
            f"max ratio to shuffle {max(ratios.values()):.2f} (<= 10), monotone={monotone} "
            f"(significant decreases {decreases or 'none'}, {nbytes[hi]}B slower than {nbytes[lo]}B: {grows}), "
            f"state bytes {nbytes}; {detail}")


# -- 9. LanderLite ------------------------------------------------------------------------------

def lander_config(kind, episodes=0, seeds=(0,)):
    return ExperimentConfig(env=EnvConfig("landerlite"), scheme=SchemeSpec(kind, 32), padding=PaddingSpec("pkcs7"),
                            train=TrainParams(episodes=episodes), seeds=seeds)


@pytest.mark.slow
def test_criterion_09_lander_pipeline(runs, tmp_path):
    problems = []
    env_probe = build_context(lander_config("noop"), 0)
    obs = env_probe.env.reset()
    eight = len(LanderProcessor().unpadded(obs).data) == 8

    for kind in ("noop", "aes_ecb", "aes_cbc"):
        cfg = lander_config(kind)
        try:
            d = runs.run_dir(cfg)
            sm = expcli.read_metrics(expcli.metrics_path(d, 0))
        except Exception as exc:  # any failure in the pipeline is a criterion failure
            problems.append(f"{kind}: {exc!r}")
            continue
        if len(sm.returns) != 2000 or list(sm.episode) != list(range(2000)):
            problems.append(f"{kind}: {len(sm.returns)} episodes")
        if not (np.all(np.isfinite(sm.returns)) and np.all(sm.steps >= 1) and np.all(sm.steps <= 1000)):
            problems.append(f"{kind}: malformed rows")
        # seed determinism: a shorter run of the same seed reproduces the file's prefix byte for byte
        short = expcli.run(lander_config(kind, episodes=50), tmp_path / kind)
        head = expcli.metrics_path(short, 0).read_text()
        if not expcli.metrics_path(d, 0).read_text().startswith(head):
            problems.append(f"{kind}: rerun of seed 0 diverged")
    verdict(9, eight and not problems,
            f"2000 episodes for noop/ECB/CBC, discretized state 8 bytes={eight}, problems={problems or 'none'}")


# -- 10. determinism and containment ------------------------------------------------------------

def _digest(run_dir: Path) -> dict[str, str]:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(run_dir.iterdir())}


def _all_5x5_plaintexts(padding: PaddingSpec) -> tuple[set[bytes], set[bytes]]:
    proc = GridProcessor(5, padding)
    padded, unpadded = set(), set()
    for r in range(1, 4):
        for c in range(1, 4):
            if (r, c) == (3, 3):
                continue
            for d in Direction:
                st = grid_reset(5, "fixed", np.random.default_rng(0))
                st.agent_pos, st.agent_dir = (r, c), d
                img = grid_render(st, 8)
                padded.add(proc(img, st).data)
                unpadded.add(proc.unpadded(img, st).data)
    return padded, unpadded


def _audit(kind: str, padding: str) -> tuple[int, bool]:
    """Returns (distinct plaintexts recovered from memory, whether any plaintext was found stored)."""
    pad = PaddingSpec(padding)
    cfg = ExperimentConfig(env=EnvConfig("gridroom", 5, "random"), scheme=SchemeSpec(kind, 32), padding=pad,
                           train=TrainParams(episodes=400, warmup_steps=10**9, eps_start=1.0, eps_end=1.0),
                           seeds=(0,))
    m = train_run(cfg, 0, keep_memory=True)
    padded, unpadded = _all_5x5_plaintexts(pad)
    prim = build_context(cfg, 0).primitive
    mem = m.memory
    leaked, seen = False, set()
    for table in (mem.states, mem.next_states):
        for row in table[: len(mem)]:
            raw = row.tobytes()
            if raw in padded or any(u in raw for u in unpadded):
                leaked = True
            seen.add(prim.decrypt(mem._cipher(row)).data)
    return len(seen & padded), leaked


def test_criterion_10_determinism_and_containment(tmp_path):
    cfg_file = tmp_path / "det.txt"
    det_cfg = grid_config(5, "aes_cbc", seeds=(0, 1), episodes=40, warmup_steps=200)
    cfg_file.write_text(cfgmod.serialize(det_cfg))
    digests = []
    for out in ("a", "b"):
        assert expcli.main(["train", "--config", str(cfg_file), "--out", str(tmp_path / out)]) == 0
        digests.append(_digest(tmp_path / out / det_cfg.name))
    identical = digests[0] == digests[1] and len(digests[0]) == 6

    audits = {f"{k}+{p}": _audit(k, p) for k in ("shuffle", "aes_ecb", "aes_cbc") for p in ("custom", "pkcs7")}
    control = _audit("noop", "custom")  # the audit must be able to see a leak
    contained = all(n == 32 and not leaked for n, leaked in audits.values()) and control[1]
    verdict(10, identical and contained,
            f"byte-identical reruns={identical}; audit (states covered, leaked): {audits}; noop control {control}")


def test_summary_files_are_consistent(runs):
    """Every summary written during the session matches a recomputation from its metrics files."""
    for config, d in runs.dirs.items():
        with open(d / "summary.csv", newline="") as fh:
            row = next(csv.DictReader(fh))
        assert float(row["mean"]) == pytest.approx(runs.finals(config).mean(), abs=1e-6)
