"""Per-step trajectory selection: contextual, random, and full strategies.

Contextual selection ranks every data column by a fused distance: the plain
Euclidean distance of its past-output block to the current initial outputs,
plus the output-weighted distance of its future block to the upcoming
reference. Both distance vectors are z-scored before summing so neither scale
dominates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .trajectory_data import DataMatrices, DimensionMismatchError

logger = logging.getLogger(__name__)

_DEGENERATE_STD = 1e-9


@dataclass(frozen=True)
class SelectionRequest:
    """Inputs to contextual selection, already in the coordinates of the data matrices."""

    y_ini: np.ndarray          # flat (t_ini * p,) current initial outputs
    reference: np.ndarray      # flat (horizon * p,) future reference
    q_weights: np.ndarray      # (p,) per-channel output weights (diag of Q)
    n_samples: int

    def __post_init__(self):
        object.__setattr__(self, "y_ini", np.asarray(self.y_ini, dtype=float).ravel())
        object.__setattr__(self, "reference", np.asarray(self.reference, dtype=float).ravel())
        object.__setattr__(self, "q_weights", np.asarray(self.q_weights, dtype=float).ravel())
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")


@dataclass(frozen=True)
class SelectionResult:
    """Selected column indices plus the fused distances kept for diagnostics."""

    indices: np.ndarray
    combined_distances: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=int))
        if len(np.unique(self.indices)) != self.indices.size:
            raise ValueError("selected indices must be distinct")


def past_distances(y_past: np.ndarray, y_ini: np.ndarray) -> np.ndarray:
    """Euclidean distance of each past-output column to the current initial outputs."""
    y_ini = np.asarray(y_ini, dtype=float).ravel()
    if y_past.shape[0] != y_ini.size:
        raise DimensionMismatchError(
            f"y_past has {y_past.shape[0]} rows but y_ini has {y_ini.size} entries"
        )
    return np.linalg.norm(y_past - y_ini[:, None], axis=0)


def future_distances(y_future: np.ndarray, reference: np.ndarray,
                     q_weights: np.ndarray) -> np.ndarray:
    """Q-weighted distance of each future-output column to the reference.

    ``q_weights`` holds one nonnegative weight per output channel and is
    repeated blockwise over the horizon; channels without a reference get
    weight zero and drop out of the metric.
    """
    reference = np.asarray(reference, dtype=float).ravel()
    q_weights = np.asarray(q_weights, dtype=float).ravel()
    rows = y_future.shape[0]
    if reference.size != rows:
        raise DimensionMismatchError(
            f"y_future has {rows} rows but reference has {reference.size} entries"
        )
    if np.any(q_weights < 0):
        raise ValueError("q_weights must be nonnegative")
    if q_weights.size == rows:
        w = q_weights
    elif rows % q_weights.size == 0:
        w = np.tile(q_weights, rows // q_weights.size)
    else:
        raise DimensionMismatchError(
            f"cannot repeat {q_weights.size} channel weights over {rows} rows"
        )
    diff = y_future - reference[:, None]
    return np.sqrt(np.sum(w[:, None] * diff * diff, axis=0))


def combine_distances(d_past: np.ndarray, d_future: np.ndarray) -> np.ndarray:
    """Z-score both distance vectors (population std) and sum them.

    A distance vector with near-zero spread carries no ranking information, so
    its term contributes zero instead of blowing up.
    """
    d_past = np.asarray(d_past, dtype=float).ravel()
    d_future = np.asarray(d_future, dtype=float).ravel()
    if d_past.size != d_future.size:
        raise DimensionMismatchError("distance vectors differ in length")
    return _zscore_or_zero(d_past) + _zscore_or_zero(d_future)


def _zscore_or_zero(d: np.ndarray) -> np.ndarray:
    std = d.std()
    if std < _DEGENERATE_STD:
        return np.zeros_like(d)
    return (d - d.mean()) / std


def select_contextual(matrices: DataMatrices, request: SelectionRequest,
                      rng_seed: int | None = None,
                      temperature: float | None = None) -> SelectionResult:
    """Pick the n_samples columns with smallest fused distance.

    Deterministic mode (temperature None) takes the exact smallest entries with
    ties broken by ascending column index. Softmin mode samples without
    replacement with probability proportional to exp(-d/temperature), seeded by
    ``rng_seed``.
    """
    d_p = past_distances(matrices.y_past, request.y_ini)
    d_f = future_distances(matrices.y_future, request.reference, request.q_weights)
    d = combine_distances(d_p, d_f)
    K = d.size
    n = request.n_samples
    if n > K:
        logger.warning("n_samples=%d exceeds column count K=%d; using all columns", n, K)
        n = K
    if temperature is None:
        # stable sort on (distance, index) gives deterministic tie-breaking
        order = np.lexsort((np.arange(K), d))
        indices = order[:n]
    else:
        if temperature <= 0:
            raise ValueError("softmin temperature must be positive")
        rng = np.random.default_rng(rng_seed)
        # Gumbel top-k == sampling without replacement with p_i ∝ exp(-d_i/τ)
        keys = -d / temperature + rng.gumbel(size=K)
        indices = np.argsort(-keys, kind="stable")[:n]
    return SelectionResult(indices=indices, combined_distances=d)


def select_random(column_count: int, n_samples: int,
                  rng_seed: int | None = None) -> SelectionResult:
    """Uniform sample of distinct column indices, reproducible from the seed."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    n = min(n_samples, column_count)
    rng = np.random.default_rng(rng_seed)
    indices = rng.choice(column_count, size=n, replace=False)
    return SelectionResult(indices=indices, combined_distances=None)


def restrict(matrices: DataMatrices, indices) -> DataMatrices:
    """Column subset of all four blocks, in the order the indices are given."""
    indices = np.asarray(indices, dtype=int)
    if indices.size and (indices.min() < 0 or indices.max() >= matrices.column_count):
        raise IndexError(
            f"selection index out of range [0, {matrices.column_count})"
        )
    return DataMatrices(
        u_past=matrices.u_past[:, indices],
        y_past=matrices.y_past[:, indices],
        u_future=matrices.u_future[:, indices],
        y_future=matrices.y_future[:, indices],
        t_ini=matrices.t_ini,
        horizon=matrices.horizon,
        input_dim=matrices.input_dim,
        output_dim=matrices.output_dim,
        column_sources=matrices.column_sources[indices],
    )
