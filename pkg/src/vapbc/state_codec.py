"""The 256-state voice activity projection codec.

A state packs 2 channels x 4 future time bins into one byte. Channel 0
occupies the high nibble and the nearest bin is the most significant bit of
each nibble, so bins[c][k] contributes 2 ** (7 - (4c + k)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OutOfRange

N_STATES = 256
N_BINS = 4

# STATE_BITS[s, c, k] is bins[c][k] of state s.
STATE_BITS = np.array(
    [[[(s >> (7 - (4 * c + k))) & 1 for k in range(N_BINS)] for c in range(2)] for s in range(N_STATES)],
    dtype=np.int64,
)
STATE_BITS.setflags(write=False)
_WEIGHTS = np.array([[2 ** (7 - (4 * c + k)) for k in range(N_BINS)] for c in range(2)], dtype=np.int64)


@dataclass(frozen=True)
class BinGrid:
    """Future projection intervals in milliseconds."""

    boundaries_ms: tuple = (0, 200, 600, 1200, 2000)
    activity_threshold: float = 0.5

    def __post_init__(self):
        b = self.boundaries_ms
        if len(b) != N_BINS + 1 or b[0] != 0 or any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError(f"bin boundaries must be {N_BINS + 1} strictly increasing values from 0")
        if not 0.0 < self.activity_threshold <= 1.0:
            raise ValueError("activity threshold must lie in (0, 1]")

    @property
    def horizon_ms(self) -> int:
        return self.boundaries_ms[-1]

    def frame_edges(self, frame_rate: float) -> np.ndarray:
        edges = np.asarray(self.boundaries_ms, dtype=np.float64) * frame_rate / 1000.0
        if not np.allclose(edges, np.round(edges)):
            raise ValueError(f"bin boundaries {self.boundaries_ms} ms do not fall on frames at {frame_rate} Hz")
        return np.round(edges).astype(np.int64)


DEFAULT_GRID = BinGrid()


@dataclass(frozen=True)
class VapState:
    bins: np.ndarray  # (2, 4) of {0, 1}
    index: int


def encode_state(bins) -> int:
    b = np.asarray(bins)
    if b.shape != (2, N_BINS) or not np.isin(b, (0, 1)).all():
        raise ValueError(f"bins must be a 2x{N_BINS} binary array")
    return int((b.astype(np.int64) * _WEIGHTS).sum())


def decode_state(index: int) -> np.ndarray:
    if not 0 <= int(index) < N_STATES or int(index) != index:
        raise OutOfRange(f"state index {index} outside [0, {N_STATES})")
    return STATE_BITS[int(index)].copy()


def _coverage(vad: np.ndarray, frame_rate: float, grid: BinGrid) -> np.ndarray:
    """Active fraction per (frame, channel, bin), frames past the end inactive."""
    vad = np.asarray(vad, dtype=bool)
    T = vad.shape[0]
    edges = grid.frame_edges(frame_rate)
    csum = np.zeros((T + edges[-1] + 1, 2), dtype=np.int64)
    csum[1 : T + 1] = np.cumsum(vad, axis=0)
    csum[T + 1 :] = csum[T]
    t = np.arange(T)
    cov = np.empty((T, 2, N_BINS))
    for k in range(N_BINS):
        lo, hi = edges[k], edges[k + 1]
        cov[:, :, k] = (csum[t + hi] - csum[t + lo]) / (hi - lo)
    return cov


def project_future_activity(vad, t: int, frame_rate: float, grid: BinGrid = DEFAULT_GRID) -> VapState:
    """Discretise the next ``grid.horizon_ms`` of activity after frame ``t``.

    Bin k of channel c is active when at least ``activity_threshold`` of the
    frames in [t + b_k, t + b_{k+1}) are active.
    """
    vad = np.asarray(vad, dtype=bool)
    edges = grid.frame_edges(frame_rate)
    bins = np.zeros((2, N_BINS), dtype=np.int64)
    for k in range(N_BINS):
        lo, hi = t + edges[k], t + edges[k + 1]
        seg = vad[max(lo, 0) : max(min(hi, len(vad)), 0)]
        frac = seg.sum(axis=0) / (hi - lo)
        bins[:, k] = frac >= grid.activity_threshold
    return VapState(bins, encode_state(bins))


def vap_states(vad, frame_rate: float, grid: BinGrid = DEFAULT_GRID) -> np.ndarray:
    """Vectorised ``project_future_activity`` for every frame, as indices."""
    cov = _coverage(vad, frame_rate, grid)
    bits = (cov >= grid.activity_threshold).astype(np.int64)
    return (bits * _WEIGHTS).sum(axis=(1, 2))


def marginals(dist) -> np.ndarray:
    """P(bin active) for every (channel, bin); shape (..., 2, 4)."""
    p = np.asarray(dist, dtype=np.float64)
    return (p @ STATE_BITS.reshape(N_STATES, 2 * N_BINS)).reshape(p.shape[:-1] + (2, N_BINS))


def bin_marginal(dist, channel: int, bin: int):
    p = np.asarray(dist, dtype=np.float64)
    return p @ STATE_BITS[:, channel, bin].astype(np.float64)


def _listener_near(dist, listener: int, agg: str):
    if agg == "mean":
        return marginals(dist)[..., listener, :3].mean(axis=-1)
    bits = STATE_BITS[:, listener, :3]
    mask = bits.any(axis=1) if agg == "any" else bits.all(axis=1)
    return np.asarray(dist, dtype=np.float64) @ mask.astype(np.float64)


def zero_shot_bc_score(dist, listener: int = 1, listener_agg: str = "mean"):
    """Backchannel score read off the projection distribution.

    Averages listener activity in the first three bins (0-1.2 s) with speaker
    activity in the last bin (1.2-2 s). ``listener_agg`` chooses how the
    three listener bins combine: mean of marginals, or probability that any
    or all of them are active. Works on a single distribution or (T, 256).
    """
    if listener not in (0, 1):
        raise ValueError(f"listener must be 0 or 1, got {listener}")
    if listener_agg not in ("mean", "any", "all"):
        raise ValueError(f"unknown listener aggregation {listener_agg!r}")
    speaker = 1 - listener
    near = _listener_near(dist, listener, listener_agg)
    late = bin_marginal(dist, speaker, 3)
    return np.clip((near + late) / 2.0, 0.0, 1.0)
