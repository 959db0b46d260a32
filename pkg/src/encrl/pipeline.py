"""State processing: turns raw observations into the plaintext bytes that get encrypted.

Gridworld chain: resize to one pixel per tile, greyscale, crop the wall ring,
re-encode the agent heading as a pixel intensity, pad to the cipher block.
Lander chain: bin each of the 8 observation components into a byte, then
PKCS#7-pad.

``reassemble`` goes the other way for the agent: ciphertext bytes back into a
matrix (or flat vector) that the Q-network can consume.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from encrl.envcore.gridroom import Direction, GridRoomState
from encrl.errors import ConfigError, DataError, IntegrityError, ShapeError, UsageError

BLOCK_SIZE = 16

DIRECTION_INTENSITY = {
    Direction.EAST: 60,
    Direction.SOUTH: 120,
    Direction.WEST: 180,
    Direction.NORTH: 240,
}

# lo, hi per observation component; contact flags are handled separately
LANDER_RANGES = np.array(
    [
        [-1.5, 1.5],
        [-1.5, 1.5],
        [-2.0, 2.0],
        [-2.0, 2.0],
        [-math.pi, math.pi],
        [-2.0, 2.0],
        [0.0, 1.0],
        [0.0, 1.0],
    ]
)
LANDER_BOOL_DIMS = (6, 7)


@dataclass(frozen=True)
class ProcessedState:
    """Plaintext bytes plus the 2-D geometry needed to rebuild network input.

    For custom-padded and unpadded states ``len(data) == rows * cols``. After
    PKCS#7 padding the geometry of the unpadded image is kept and the extra
    bytes trail it.
    """

    data: bytes
    rows: int
    cols: int
    is_vector: bool = False

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ShapeError("rows and cols must be positive")
        if len(self.data) < self.rows * self.cols:
            raise ShapeError(f"{len(self.data)} bytes cannot fill a {self.rows}x{self.cols} layout")

    def matrix(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=np.uint8)[: self.rows * self.cols].reshape(self.rows, self.cols)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> ProcessedState:
        m = np.ascontiguousarray(m, dtype=np.uint8)
        if m.ndim != 2:
            raise ShapeError("expected a 2-D matrix")
        return cls(m.tobytes(), m.shape[0], m.shape[1])


@dataclass(frozen=True)
class PaddingSpec:
    mode: str = "custom"
    block_size: int = BLOCK_SIZE
    pad_intensity: int = 255

    def __post_init__(self):
        if self.mode not in ("custom", "pkcs7"):
            raise ConfigError(f"unknown padding mode {self.mode!r}")
        if not 1 <= self.block_size <= 255:
            raise ConfigError("block_size must be in [1, 255]")
        if not 0 <= self.pad_intensity <= 255:
            raise ConfigError("pad_intensity must be a byte")
        if self.pad_intensity in DIRECTION_INTENSITY.values():
            raise ConfigError("pad_intensity collides with a heading intensity")


# -- image reduction -----------------------------------------------------------

def resize_to_one_px_per_tile(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if h != w or h % size:
        raise ShapeError(f"{h}x{w} image is not a whole number of pixels per tile for size {size}")
    p = h // size
    centre = p // 2
    return np.ascontiguousarray(image[centre::p, centre::p])


def greyscale(image: np.ndarray) -> np.ndarray:
    """ITU-R 601 luma, rounded half-up."""
    rgb = image.astype(np.float64)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)


def crop_walls(matrix: np.ndarray) -> np.ndarray:
    if matrix.shape[0] < 3 or matrix.shape[1] < 3:
        raise ShapeError(f"cannot crop a {matrix.shape} matrix")
    return np.ascontiguousarray(matrix[1:-1, 1:-1])


def remap_agent_direction(matrix: np.ndarray, agent_cell: tuple[int, int], direction: int) -> np.ndarray:
    out = matrix.copy()
    out[agent_cell] = DIRECTION_INTENSITY[Direction(direction)]
    return out


# -- padding -------------------------------------------------------------------

def custom_pad_shape(rows: int, cols: int, k: int) -> tuple[int, int]:
    """Smallest rows' >= rows, cols' >= cols with rows'*cols' divisible by k.

    Minimal area first; among equal areas the one that keeps rows smallest
    (i.e. grows columns first).
    """
    area = -(-rows * cols // k) * k
    while True:
        for r in range(rows, area // cols + 1):
            if area % r == 0 and area // r >= cols:
                return r, area // r
        area += k


def pad_custom(state: ProcessedState, spec: PaddingSpec) -> ProcessedState:
    if spec.mode != "custom":
        raise UsageError(f"pad_custom called with {spec.mode!r} padding")
    if state.is_vector:
        raise UsageError("custom padding needs a 2-D state")
    r, c = custom_pad_shape(state.rows, state.cols, spec.block_size)
    out = np.full((r, c), spec.pad_intensity, dtype=np.uint8)
    out[: state.rows, : state.cols] = state.matrix()
    return ProcessedState.from_matrix(out)


def pad_pkcs7(data: bytes, k: int = BLOCK_SIZE) -> bytes:
    if not 1 <= k <= 255:
        raise ConfigError("PKCS#7 block size must be in [1, 255]")
    p = k - len(data) % k
    return bytes(data) + bytes([p]) * p


def unpad_pkcs7(data: bytes, k: int = BLOCK_SIZE) -> bytes:
    if not data or len(data) % k:
        raise IntegrityError("padded length is not a positive multiple of the block size")
    p = data[-1]
    if not 1 <= p <= k or data[-p:] != bytes([p]) * p:
        raise IntegrityError("malformed PKCS#7 padding")
    return bytes(data[:-p])


def pad_state(state: ProcessedState, spec: PaddingSpec) -> ProcessedState:
    if spec.mode == "custom":
        return pad_custom(state, spec)
    return ProcessedState(pad_pkcs7(state.data, spec.block_size), state.rows, state.cols, state.is_vector)


# -- lander --------------------------------------------------------------------

def discretize(obs, ranges=LANDER_RANGES, bool_dims=LANDER_BOOL_DIMS, bins: int = 256) -> bytes:
    """One byte per component: clamp to [lo, hi] then floor into ``bins`` bins.

    Components listed in ``bool_dims`` map to 0 or 255 instead.
    """
    x = np.asarray(obs, dtype=np.float64)
    ranges = np.asarray(ranges, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("observation contains non-finite values")
    if ranges.shape != (x.size, 2) or not np.all(ranges[:, 0] < ranges[:, 1]):
        raise ConfigError("ranges must be finite [lo, hi] pairs with lo < hi, one per component")
    lo, hi = ranges[:, 0], ranges[:, 1]
    frac = (np.clip(x, lo, hi) - lo) / (hi - lo)
    b = np.minimum(bins - 1, np.floor(frac * bins)).astype(np.uint8)
    for d in bool_dims:
        b[d] = 255 if x[d] > 0.5 else 0
    return b.tobytes()


# -- agent side ----------------------------------------------------------------

def reassemble(cipher) -> np.ndarray:
    """Lay ciphertext bytes out for the network.

    Vector states stay flat. If the byte count matches the stored layout the
    bytes are reshaped row-major into it; otherwise (PKCS#7 tail, CBC IV) the
    width is kept and rows are added, zero-filling the final partial row.
    """
    buf = np.frombuffer(cipher.data, dtype=np.uint8)
    rows, cols = cipher.layout
    if cipher.is_vector:
        return buf.copy()
    if buf.size == rows * cols:
        return buf.reshape(rows, cols).copy()
    n_rows = -(-buf.size // cols)
    out = np.zeros(n_rows * cols, dtype=np.uint8)
    out[: buf.size] = buf
    return out.reshape(n_rows, cols)


def normalize(matrix: np.ndarray) -> np.ndarray:
    return np.asarray(matrix, dtype=np.float64) / 255.0


# -- composed processors -------------------------------------------------------

class GridProcessor:
    """Full processing chain for gridworld observations."""

    def __init__(self, size: int, padding: PaddingSpec):
        self.size = size
        self.padding = padding

    def unpadded(self, image: np.ndarray, state: GridRoomState) -> ProcessedState:
        m = crop_walls(greyscale(resize_to_one_px_per_tile(image, self.size)))
        cell = (state.agent_pos[0] - 1, state.agent_pos[1] - 1)
        return ProcessedState.from_matrix(remap_agent_direction(m, cell, state.agent_dir))

    def __call__(self, image: np.ndarray, state: GridRoomState) -> ProcessedState:
        return pad_state(self.unpadded(image, state), self.padding)


class LanderProcessor:
    """Discretize then PKCS#7-pad lander observations."""

    def __init__(self, padding: PaddingSpec | None = None, ranges=LANDER_RANGES):
        self.padding = padding or PaddingSpec("pkcs7")
        if self.padding.mode != "pkcs7":
            raise ConfigError("lander states only support pkcs7 padding")
        self.ranges = ranges

    def unpadded(self, obs, state=None) -> ProcessedState:
        data = discretize(obs, self.ranges)
        return ProcessedState(data, 1, len(data), is_vector=True)

    def __call__(self, obs, state=None) -> ProcessedState:
        return pad_state(self.unpadded(obs), self.padding)
