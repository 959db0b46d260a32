"""Encryption primitives applied to processed states.

Four built-in schemes: ``noop`` (identity), ``shuffle`` (a fixed keyed byte
permutation), ``aes_ecb`` and ``aes_cbc``. CBC output is ``IV || ciphertext``
with the IV derived from a seeded generator so runs replay exactly; this is a
reproducibility choice, not a recommendation for real deployments.

Further schemes (e.g. a homomorphic backend) plug in through
``register_scheme``; nothing downstream assumes ciphertext length equals
plaintext length.
"""
from __future__ import annotations

import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from encrl.errors import ConfigError, IntegrityError, LengthError
from encrl.pipeline import BLOCK_SIZE, ProcessedState

AES_KEY_LENGTHS = (16, 24, 32)


@dataclass(frozen=True)
class SchemeSpec:
    kind: str = "noop"
    key_len: int = 32
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.kind not in _REGISTRY:
            raise ConfigError(f"unknown scheme {self.kind!r}; known: {sorted(_REGISTRY)}")
        if self.kind in ("aes_ecb", "aes_cbc") and self.key_len not in AES_KEY_LENGTHS:
            raise ConfigError(f"AES key length must be one of {AES_KEY_LENGTHS}, got {self.key_len}")
        if not 0 <= self.shuffle_seed < 2**64:
            raise ConfigError("shuffle_seed must be a 64-bit unsigned integer")

    @property
    def label(self) -> str:
        if self.kind in ("aes_ecb", "aes_cbc"):
            return f"{self.kind}({self.key_len})"
        return self.kind


@dataclass(frozen=True)
class CipherState:
    data: bytes
    scheme: str
    layout: tuple[int, int]
    is_vector: bool = False


class Primitive(ABC):
    kind: str

    @abstractmethod
    def encrypt(self, plaintext: ProcessedState) -> CipherState: ...

    @abstractmethod
    def decrypt(self, cipher: CipherState) -> ProcessedState: ...

    def _wrap(self, data: bytes, plaintext: ProcessedState) -> CipherState:
        return CipherState(data, self.kind, (plaintext.rows, plaintext.cols), plaintext.is_vector)

    @staticmethod
    def _unwrap(data: bytes, cipher: CipherState) -> ProcessedState:
        return ProcessedState(data, cipher.layout[0], cipher.layout[1], cipher.is_vector)


class NoopPrimitive(Primitive):
    kind = "noop"

    def encrypt(self, plaintext):
        return self._wrap(plaintext.data, plaintext)

    def decrypt(self, cipher):
        return self._unwrap(cipher.data, cipher)


def shuffle_permutation(seed: int, n: int) -> np.ndarray:
    """Fisher-Yates permutation of ``range(n)`` driven by a PCG64 stream seeded with ``seed``."""
    if n < 1:
        raise ConfigError("permutation length must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = np.arange(n)
    # one draw per swap; j uniform in [0, i]
    draws = [int(rng.integers(0, i + 1)) for i in range(n - 1, 0, -1)]
    for i, j in zip(range(n - 1, 0, -1), draws):
        perm[i], perm[j] = perm[j], perm[i]
    return perm


class ShufflePrimitive(Primitive):
    """Output byte i is input byte perm[i], same permutation for every state of a given length."""

    kind = "shuffle"

    def __init__(self, seed: int):
        self.seed = seed
        self._perms: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _perm(self, n: int):
        if n not in self._perms:
            p = shuffle_permutation(self.seed, n)
            p.setflags(write=False)
            inv = np.argsort(p)
            inv.setflags(write=False)
            self._perms[n] = (p, inv)
        return self._perms[n]

    def encrypt(self, plaintext):
        buf = np.frombuffer(plaintext.data, dtype=np.uint8)
        perm, _ = self._perm(buf.size)
        return self._wrap(buf[perm].tobytes(), plaintext)

    def decrypt(self, cipher):
        buf = np.frombuffer(cipher.data, dtype=np.uint8)
        _, inv = self._perm(buf.size)
        return self._unwrap(buf[inv].tobytes(), cipher)


def _check_blocks(n: int):
    if n == 0 or n % BLOCK_SIZE:
        raise LengthError(f"block cipher input of {n} bytes is not a positive multiple of {BLOCK_SIZE}; pad first")


class EcbPrimitive(Primitive):
    """AES-ECB. One encryptor and one decryptor context live as long as the primitive.

    ECB keeps no state between blocks, so feeding whole blocks to a long-lived
    context is the same as a fresh context per call, minus the setup cost.
    """

    kind = "aes_ecb"

    def __init__(self, key: bytes):
        cipher = Cipher(algorithms.AES(bytes(key)), modes.ECB())
        self._enc = cipher.encryptor()
        self._dec = cipher.decryptor()
        self._lock = threading.Lock()

    def encrypt(self, plaintext):
        _check_blocks(len(plaintext.data))
        with self._lock:
            out = self._enc.update(plaintext.data)
        return self._wrap(out, plaintext)

    def decrypt(self, cipher):
        try:
            _check_blocks(len(cipher.data))
        except LengthError as exc:
            raise IntegrityError(str(exc)) from None
        with self._lock:
            out = self._dec.update(cipher.data)
        return self._unwrap(out, cipher)


class CbcPrimitive(Primitive):
    """AES-CBC with a fresh random IV per message, output ``IV || ciphertext``.

    A single CBC context stays open across messages. Each message is preceded
    by one random block ``r``; its ciphertext ``E(r xor chain)`` becomes the
    message IV, i.e. the IV is the forward cipher applied to a random nonce.
    The output decrypts with plain CBC under that IV. The random blocks come
    from ``rng`` in batches, so a seeded generator gives reproducible IVs.
    """

    kind = "aes_cbc"
    _POOL = 256

    def __init__(self, key: bytes, rng: np.random.Generator):
        self._algo = algorithms.AES(bytes(key))
        self._rng = rng
        self._enc = Cipher(self._algo, modes.CBC(bytes(BLOCK_SIZE))).encryptor()
        self._pool = b""
        self._pos = 0
        self._lock = threading.Lock()

    def _nonce(self) -> bytes:
        if self._pos == len(self._pool):
            self._pool = self._rng.bytes(BLOCK_SIZE * self._POOL)
            self._pos = 0
        start = self._pos
        self._pos += BLOCK_SIZE
        return self._pool[start:self._pos]

    def encrypt(self, plaintext):
        _check_blocks(len(plaintext.data))
        with self._lock:
            out = self._enc.update(self._nonce() + plaintext.data)
        return self._wrap(out, plaintext)

    def decrypt(self, cipher):
        n = len(cipher.data)
        if n < 2 * BLOCK_SIZE or n % BLOCK_SIZE:
            raise IntegrityError(f"CBC message of {n} bytes is not IV plus whole blocks")
        iv, body = cipher.data[:BLOCK_SIZE], cipher.data[BLOCK_SIZE:]
        dec = Cipher(self._algo, modes.CBC(iv)).decryptor()
        return self._unwrap(dec.update(body) + dec.finalize(), cipher)


Factory = Callable[[SchemeSpec, bytes, "np.random.Generator | None"], Primitive]


def _cbc_factory(spec, key, rng):
    if rng is None:
        raise ConfigError("aes_cbc needs an RNG for IV generation")
    return CbcPrimitive(key, rng)


_REGISTRY: dict[str, Factory] = {
    "noop": lambda spec, key, rng: NoopPrimitive(),
    "shuffle": lambda spec, key, rng: ShufflePrimitive(spec.shuffle_seed),
    "aes_ecb": lambda spec, key, rng: EcbPrimitive(key),
    "aes_cbc": _cbc_factory,
}


def register_scheme(kind: str, factory: Factory) -> None:
    """Make an external scheme available to ``SchemeSpec`` and ``make_primitive``."""
    if kind in _REGISTRY:
        raise ConfigError(f"scheme {kind!r} is already registered")
    _REGISTRY[kind] = factory


def unregister_scheme(kind: str) -> None:
    if kind in ("noop", "shuffle", "aes_ecb", "aes_cbc"):
        raise ConfigError("built-in schemes cannot be removed")
    _REGISTRY.pop(kind, None)


def required_key_len(spec: SchemeSpec) -> int:
    return spec.key_len if spec.kind in ("aes_ecb", "aes_cbc") else 0


def make_primitive(spec: SchemeSpec, key: bytes = b"", rng: np.random.Generator | None = None) -> Primitive:
    need = required_key_len(spec)
    if spec.kind in ("aes_ecb", "aes_cbc", "noop", "shuffle") and len(key) != need:
        raise ConfigError(f"{spec.kind} expects a {need}-byte key, got {len(key)} bytes")
    return _REGISTRY[spec.kind](spec, key, rng)


def derive_key(spec: SchemeSpec, rng: np.random.Generator) -> bytes:
    """Run key drawn from the run's seeded generator (one key per run)."""
    return rng.bytes(required_key_len(spec))
