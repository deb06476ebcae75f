"""Confidence accumulation, inhibition of return and next-fixation selection.

State is batched: every array carries a leading image axis, and rows never
interact, so a batch of ``B`` episodes behaves exactly like ``B`` separate
single-image episodes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import IMAGE_SIDE

IOR_AMPLITUDE = 1.0
IOR_DECAY = 0.5


@dataclass(frozen=True)
class ConfidenceState:
    accumulator: np.ndarray  # (B, 14, 14)
    ior: np.ndarray  # (B, 14, 14)
    history: np.ndarray  # (B, k, 2) fixations as (x, y)
    updates: int = 0

    @classmethod
    def fresh(cls, batch: int = 1, side: int = IMAGE_SIDE) -> "ConfidenceState":
        zeros = np.zeros((batch, side, side))
        return cls(zeros, zeros.copy(), np.zeros((batch, 0, 2), dtype=np.int64))

    @property
    def batch(self) -> int:
        return self.accumulator.shape[0]

    def select(self, rows) -> "ConfidenceState":
        return ConfidenceState(self.accumulator[rows], self.ior[rows], self.history[rows], self.updates)


def update_accumulator(state: ConfidenceState, weights, centers, valid=None) -> ConfidenceState:
    """Deposit each attention weight at its region center, additively.

    ``weights`` is ``(B, L)``, ``centers`` ``(B, L, 2)`` as ``(x, y)``;
    rows where ``valid`` is false are skipped.
    """
    weights = np.asarray(weights, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.int64)
    if weights.ndim == 1:
        weights, centers = weights[None], centers[None]
    if weights.shape != centers.shape[:2] or centers.shape[-1] != 2:
        raise ValueError(f"weights {weights.shape} and centers {centers.shape} are misaligned")
    if valid is None:
        valid = np.ones(weights.shape, dtype=bool)
    valid = np.asarray(valid, dtype=bool).reshape(weights.shape)
    b, side = state.batch, state.accumulator.shape[-1]
    acc = state.accumulator.reshape(b, -1).copy()
    rows = np.broadcast_to(np.arange(b)[:, None], weights.shape)[valid]
    cells = (centers[..., 1] * side + centers[..., 0])[valid]
    np.add.at(acc, (rows, cells), weights[valid])
    return replace(state, accumulator=acc.reshape(state.accumulator.shape), updates=state.updates + 1)


def register_fixation(state: ConfidenceState, fixations) -> ConfidenceState:
    """Halve the existing IOR map, then stamp the 3x3 neighborhood of each fixation."""
    fixations = np.asarray(fixations, dtype=np.int64).reshape(state.batch, 2)
    side = state.ior.shape[-1]
    ior = state.ior * IOR_DECAY
    for i, (x, y) in enumerate(fixations):
        y0, y1 = max(y - 1, 0), min(y + 2, side)
        x0, x1 = max(x - 1, 0), min(x + 2, side)
        np.maximum(ior[i, y0:y1, x0:x1], IOR_AMPLITUDE, out=ior[i, y0:y1, x0:x1])
    history = np.concatenate([state.history, fixations[:, None, :]], axis=1)
    return replace(state, ior=ior, history=history)


def priority_map(state: ConfidenceState) -> np.ndarray:
    return state.accumulator - state.ior


def next_fixation(state: ConfidenceState) -> np.ndarray:
    """Argmax of accumulator minus IOR; ties go to the smallest row-major index."""
    if state.updates == 0:
        raise RuntimeError("next_fixation called before any accumulator update")
    side = state.accumulator.shape[-1]
    flat = priority_map(state).reshape(state.batch, -1).argmax(axis=1)
    return np.stack([flat % side, flat // side], axis=1)


def random_fixation(rng: np.random.Generator, side: int = IMAGE_SIDE) -> np.ndarray:
    """Uniform ``(x, y)``; always exactly one draw of two integers."""
    return rng.integers(0, side, size=2)
