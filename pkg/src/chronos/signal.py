"""Per-step confidence signal extraction and input normalization.

The signal value at step t is the negative mean log-probability of the top
k_stat candidate tokens: 0 means the model was certain, larger values mean
more spread-out (less confident) next-token distributions. The scorer only
sees the final l_tail positions; shorter signals are left-padded with 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from chronos.trajectory_store import Trajectory

DEFAULT_K_STAT = 20
PAD_VALUE = 0.0
STD_FLOOR = 1e-8


@dataclass(frozen=True)
class TemporalSignal:
    """Fixed-length non-negative signal; the last valid_len positions are real,
    everything left of them is padding."""

    values: np.ndarray  # shape (l_tail,), float64, all >= 0
    valid_len: int

    def __post_init__(self):
        if self.values.ndim != 1:
            raise ValueError("signal values must be one-dimensional")
        if not 1 <= self.valid_len <= len(self.values):
            raise ValueError(f"valid_len {self.valid_len} out of range for length {len(self.values)}")

    @property
    def l_tail(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class Standardizer:
    """Affine normalization fitted on training signals (non-padded positions only)."""

    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError(f"std must be strictly positive, got {self.std}")


def compute_signal(traj: Trajectory, k_stat: int = DEFAULT_K_STAT) -> np.ndarray:
    """Negative mean log-probability of the top k_stat candidates at each step."""
    if k_stat < 1:
        raise ValueError(f"k_stat must be >= 1, got {k_stat}")
    if k_stat > traj.k:
        raise ValueError(f"k_stat={k_stat} exceeds stored k={traj.k} for trajectory {traj.key}")
    steps = np.array([s.top_k_logprobs[:k_stat] for s in traj.steps], dtype=np.float64)
    return -steps.mean(axis=1)


def tail_window(raw: Sequence[float] | np.ndarray, l_tail: int) -> TemporalSignal:
    """Keep the last l_tail values; left-pad with 0 when the signal is shorter."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise ValueError("cannot window an empty signal")
    if l_tail < 1:
        raise ValueError(f"l_tail must be >= 1, got {l_tail}")
    if raw.size >= l_tail:
        return TemporalSignal(values=raw[-l_tail:].copy(), valid_len=l_tail)
    values = np.full(l_tail, PAD_VALUE, dtype=np.float64)
    values[l_tail - raw.size :] = raw
    return TemporalSignal(values=values, valid_len=int(raw.size))


def fit_standardizer(signals: Iterable[TemporalSignal]) -> Standardizer:
    """Mean/std over the non-padded positions of a training set; std floored at 1e-8."""
    parts = [sig.values[sig.l_tail - sig.valid_len :] for sig in signals]
    if not parts:
        raise ValueError("cannot fit a standardizer on an empty signal set")
    flat = np.concatenate(parts)
    if flat.size == 0:
        raise ValueError("all positions are padded; nothing to fit")
    mean = float(flat.mean())
    std = float(flat.std())
    return Standardizer(mean=mean, std=max(std, STD_FLOOR))


def standardize(sig: TemporalSignal, z: Standardizer) -> np.ndarray:
    """Map non-padded positions to (v - mean)/std and padded positions to 0."""
    out = np.zeros_like(sig.values)
    start = sig.l_tail - sig.valid_len
    out[start:] = (sig.values[start:] - z.mean) / z.std
    return out


def signal_batch(
    trajs: Sequence[Trajectory],
    k_stat: int,
    l_tail: int,
    z: Standardizer | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Stack trajectories into network inputs: (signals (B, l_tail), valid_lens (B,)).

    Standardized when z is given, raw otherwise.
    """
    xs = np.zeros((len(trajs), l_tail), dtype=np.float64)
    valid = np.zeros(len(trajs), dtype=np.int64)
    for i, traj in enumerate(trajs):
        sig = tail_window(compute_signal(traj, k_stat), l_tail)
        xs[i] = standardize(sig, z) if z is not None else sig.values
        valid[i] = sig.valid_len
    return xs, valid
