"""Recorded trajectory storage, Hankel matrix construction, and excitation diagnostics.

A :class:`Dataset` holds one or more recorded input-output trajectories together
with per-channel normalization statistics. :func:`build_data_matrices` turns a
dataset into the four past/future data blocks used by the controller, built as a
mosaic (horizontal concatenation) of per-trajectory Hankel matrices.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

RANK_RTOL = 1e-12
STD_FLOOR = 1e-9


class InsufficientDataError(ValueError):
    """Signal too short for the requested window depth."""


class DimensionMismatchError(ValueError):
    """Inconsistent vector or matrix dimensions."""


def _as_2d(signal) -> np.ndarray:
    """Coerce a sequence of samples to a (T, d) float array (scalars become d=1)."""
    arr = np.asarray(signal, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise DimensionMismatchError(f"expected 1-D or 2-D signal, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Trajectory:
    """One recorded input-output trajectory sampled at a fixed period.

    inputs:  (T, m) applied inputs
    outputs: (T, p) measured outputs, sample k paired with the input applied
             at the same recording tick
    """

    inputs: np.ndarray
    outputs: np.ndarray
    sample_period: float

    def __post_init__(self):
        object.__setattr__(self, "inputs", _as_2d(self.inputs))
        object.__setattr__(self, "outputs", _as_2d(self.outputs))
        if len(self.inputs) != len(self.outputs):
            raise DimensionMismatchError(
                f"inputs ({len(self.inputs)}) and outputs ({len(self.outputs)}) differ in length"
            )
        if len(self.inputs) < 1:
            raise InsufficientDataError("trajectory must contain at least one sample")
        if self.sample_period <= 0:
            raise ValueError("sample_period must be positive")

    @property
    def length(self) -> int:
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.outputs.shape[1]


@dataclass(frozen=True)
class NormalizationStats:
    """Per-channel z-score statistics mapping physical units to normalized ones.

    Channels whose raw standard deviation falls below ``STD_FLOOR`` are
    degenerate (constant); their std is replaced by 1.0 and the channel is
    flagged so diagnostics can report it.
    """

    input_mean: np.ndarray
    input_std: np.ndarray
    output_mean: np.ndarray
    output_std: np.ndarray
    degenerate_inputs: np.ndarray = field(default=None)
    degenerate_outputs: np.ndarray = field(default=None)

    def __post_init__(self):
        for name in ("input_mean", "input_std", "output_mean", "output_std"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if self.degenerate_inputs is None:
            object.__setattr__(self, "degenerate_inputs", np.zeros(self.input_mean.size, dtype=bool))
        if self.degenerate_outputs is None:
            object.__setattr__(self, "degenerate_outputs", np.zeros(self.output_mean.size, dtype=bool))
        if np.any(self.input_std <= 0) or np.any(self.output_std <= 0):
            raise ValueError("normalization std entries must be strictly positive")

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory]) -> "NormalizationStats":
        u = np.vstack([t.inputs for t in trajectories])
        y = np.vstack([t.outputs for t in trajectories])
        um, us, uflag = _safe_stats(u)
        ym, ys, yflag = _safe_stats(y)
        return cls(um, us, ym, ys, uflag, yflag)

    def normalize_inputs(self, u: np.ndarray) -> np.ndarray:
        return (np.asarray(u, dtype=float) - self.input_mean) / self.input_std

    def denormalize_inputs(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u, dtype=float) * self.input_std + self.input_mean

    def normalize_outputs(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.output_mean) / self.output_std

    def denormalize_outputs(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) * self.output_std + self.output_mean

    def to_dict(self) -> dict:
        return {
            "input_mean": self.input_mean.tolist(),
            "input_std": self.input_std.tolist(),
            "output_mean": self.output_mean.tolist(),
            "output_std": self.output_std.tolist(),
            "degenerate_inputs": self.degenerate_inputs.tolist(),
            "degenerate_outputs": self.degenerate_outputs.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            np.array(d["input_mean"]),
            np.array(d["input_std"]),
            np.array(d["output_mean"]),
            np.array(d["output_std"]),
            np.array(d.get("degenerate_inputs", []), dtype=bool) if d.get("degenerate_inputs") else None,
            np.array(d.get("degenerate_outputs", []), dtype=bool) if d.get("degenerate_outputs") else None,
        )


def _safe_stats(data: np.ndarray):
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    degenerate = std < STD_FLOOR
    std = np.where(degenerate, 1.0, std)
    return mean, std, degenerate


@dataclass(frozen=True)
class FrameRule:
    """Declarative description of the local-frame alignment applied per window.

    kind:
      - "none": no alignment
      - "planar_pose": translate ``position_channels`` (x, y) to the origin and
        rotate them (and the ``heading_channel``) by the negative anchor heading
      - "position_shift": translate ``position_channels`` so the anchor maps to
        ``origin``
    """

    kind: str = "none"
    position_channels: tuple = ()
    heading_channel: int | None = None
    origin: tuple = ()

    def __post_init__(self):
        if self.kind not in ("none", "planar_pose", "position_shift"):
            raise ValueError(f"unknown frame rule kind {self.kind!r}")
        if self.kind == "planar_pose" and (len(self.position_channels) != 2 or self.heading_channel is None):
            raise ValueError("planar_pose rule needs two position channels and a heading channel")
        if self.kind == "position_shift" and len(self.origin) != len(self.position_channels):
            raise ValueError("position_shift rule needs one origin entry per position channel")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "position_channels": list(self.position_channels),
            "heading_channel": self.heading_channel,
            "origin": list(self.origin),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FrameRule":
        return cls(d["kind"], tuple(d.get("position_channels", ())),
                   d.get("heading_channel"), tuple(d.get("origin", ())))


IDENTITY_FRAME = FrameRule("none")


@dataclass(frozen=True)
class TransformInfo:
    """Bookkeeping for a preprocessed dataset: how stored channels map to physical ones.

    base_m / base_p are the physical input/output dimensions before the
    incremental-input and input-augmentation steps.
    """

    frame: FrameRule
    base_m: int
    base_p: int
    incremental: bool
    augmented: bool

    def to_dict(self) -> dict:
        return {
            "frame": self.frame.to_dict(),
            "base_m": self.base_m,
            "base_p": self.base_p,
            "incremental": self.incremental,
            "augmented": self.augmented,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TransformInfo":
        return cls(FrameRule.from_dict(d["frame"]), d["base_m"], d["base_p"],
                   d["incremental"], d["augmented"])


@dataclass(frozen=True)
class Dataset:
    """A collection of recorded trajectories sharing dimensions and sample period.

    ``stats`` are computed once at construction and are immutable. When
    ``normalized`` is true the stored trajectories are already z-scored and
    ``stats`` holds the mapping back to (transformed) physical units.
    """

    trajectories: tuple
    stats: NormalizationStats
    aligned: bool = False
    normalized: bool = False
    transform: TransformInfo | None = None

    def __post_init__(self):
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        if not self.trajectories:
            raise ValueError("dataset must contain at least one trajectory")
        m = self.trajectories[0].input_dim
        p = self.trajectories[0].output_dim
        dt = self.trajectories[0].sample_period
        for i, t in enumerate(self.trajectories):
            if t.input_dim != m or t.output_dim != p:
                raise DimensionMismatchError(f"trajectory {i} dimensions differ from trajectory 0")
            if abs(t.sample_period - dt) > 1e-12:
                raise ValueError(f"trajectory {i} sample period differs from trajectory 0")

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], *,
                          normalize: bool = False, aligned: bool = False,
                          transform: TransformInfo | None = None) -> "Dataset":
        trajectories = list(trajectories)
        stats = NormalizationStats.from_trajectories(trajectories)
        if normalize:
            trajectories = [
                Trajectory(stats.normalize_inputs(t.inputs), stats.normalize_outputs(t.outputs),
                           t.sample_period)
                for t in trajectories
            ]
        return cls(tuple(trajectories), stats, aligned=aligned, normalized=normalize,
                   transform=transform)

    @property
    def input_dim(self) -> int:
        return self.trajectories[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.trajectories[0].output_dim

    @property
    def sample_period(self) -> float:
        return self.trajectories[0].sample_period

    def save(self, directory) -> None:
        """Write one CSV per trajectory plus a JSON manifest with stats."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = []
        for i, traj in enumerate(self.trajectories):
            name = f"trajectory_{i:03d}.csv"
            _write_trajectory_csv(directory / name, traj)
            files.append(name)
        manifest = {
            "files": files,
            "m": self.input_dim,
            "p": self.output_dim,
            "sample_period": self.sample_period,
            "stats": self.stats.to_dict(),
            "aligned": self.aligned,
            "normalized": self.normalized,
            "transform": self.transform.to_dict() if self.transform else None,
        }
        with open(directory / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=2)

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
        with open(manifest_path) as f:
            manifest = json.load(f)
        trajectories = [
            _read_trajectory_csv(directory / name, manifest["m"], manifest["p"],
                                 manifest["sample_period"])
            for name in manifest["files"]
        ]
        transform = manifest.get("transform")
        return cls(
            tuple(trajectories),
            NormalizationStats.from_dict(manifest["stats"]),
            aligned=manifest.get("aligned", False),
            normalized=manifest.get("normalized", False),
            transform=TransformInfo.from_dict(transform) if transform else None,
        )


def _write_trajectory_csv(path: Path, traj: Trajectory) -> None:
    header = ["t"] + [f"u_{j}" for j in range(traj.input_dim)] + [f"y_{j}" for j in range(traj.output_dim)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for k in range(traj.length):
            row = [repr(float(k * traj.sample_period))]
            row += [repr(float(v)) for v in traj.inputs[k]]
            row += [repr(float(v)) for v in traj.outputs[k]]
            writer.writerow(row)


def _read_trajectory_csv(path: Path, m: int, p: int, sample_period: float) -> Trajectory:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 1 + m + p:
        raise DimensionMismatchError(
            f"{path.name}: expected {1 + m + p} columns, found {data.shape[1]}"
        )
    return Trajectory(data[:, 1:1 + m], data[:, 1 + m:], sample_period)


@dataclass(frozen=True)
class DataMatrices:
    """Past/future partitioned mosaic-Hankel blocks.

    Each column j is a contiguous length-(t_ini + horizon) window of one source
    trajectory; ``column_sources[j] = (trajectory_index, offset)`` records where
    it came from.
    """

    u_past: np.ndarray
    y_past: np.ndarray
    u_future: np.ndarray
    y_future: np.ndarray
    t_ini: int
    horizon: int
    input_dim: int
    output_dim: int
    column_sources: np.ndarray = None

    def __post_init__(self):
        K = self.u_past.shape[1]
        blocks = {
            "u_past": (self.u_past, self.t_ini * self.input_dim),
            "y_past": (self.y_past, self.t_ini * self.output_dim),
            "u_future": (self.u_future, self.horizon * self.input_dim),
            "y_future": (self.y_future, self.horizon * self.output_dim),
        }
        for name, (block, rows) in blocks.items():
            if block.shape != (rows, K):
                raise DimensionMismatchError(
                    f"{name} has shape {block.shape}, expected ({rows}, {K})"
                )
        if self.column_sources is None:
            object.__setattr__(self, "column_sources", np.full((K, 2), -1, dtype=int))

    @property
    def column_count(self) -> int:
        return self.u_past.shape[1]

    def stacked(self) -> np.ndarray:
        """col(U_p, Y_p, U_f, Y_f) as one matrix."""
        return np.vstack([self.u_past, self.y_past, self.u_future, self.y_future])


def build_hankel(signal, depth: int) -> np.ndarray:
    """Hankel matrix of a (possibly vector-valued) signal.

    Column j stacks samples j .. j+depth-1 vertically, giving a
    (depth*d, T-depth+1) matrix.
    """
    arr = _as_2d(signal)
    T, d = arr.shape
    if depth < 1:
        raise ValueError("depth must be at least 1")
    if depth > T:
        raise InsufficientDataError(
            f"insufficient data length: depth {depth} exceeds signal length {T}"
        )
    windows = np.lib.stride_tricks.sliding_window_view(arr, depth, axis=0)
    # windows: (T-depth+1, d, depth) -> columns of stacked samples
    return windows.transpose(2, 1, 0).reshape(depth * d, T - depth + 1)


def build_data_matrices(dataset: Dataset, t_ini: int, horizon: int) -> DataMatrices:
    """Mosaic-Hankel blocks of depth t_ini + horizon, partitioned past/future.

    Columns preserve trajectory order then window order, so column indices are
    stable identifiers for a given dataset.
    """
    if t_ini < 1 or horizon < 1:
        raise ValueError("t_ini and horizon must be positive")
    depth = t_ini + horizon
    m, p = dataset.input_dim, dataset.output_dim
    u_blocks, y_blocks, sources = [], [], []
    for i, traj in enumerate(dataset.trajectories):
        if traj.length < depth:
            raise InsufficientDataError(
                f"trajectory {i} has length {traj.length}, need at least {depth}"
            )
        u_blocks.append(build_hankel(traj.inputs, depth))
        y_blocks.append(build_hankel(traj.outputs, depth))
        n_windows = traj.length - depth + 1
        sources.append(np.column_stack([np.full(n_windows, i), np.arange(n_windows)]))
    Hu = np.hstack(u_blocks)
    Hy = np.hstack(y_blocks)
    return DataMatrices(
        u_past=Hu[: t_ini * m],
        u_future=Hu[t_ini * m:],
        y_past=Hy[: t_ini * p],
        y_future=Hy[t_ini * p:],
        t_ini=t_ini,
        horizon=horizon,
        input_dim=m,
        output_dim=p,
        column_sources=np.vstack(sources),
    )


def is_persistently_exciting(signal, order: int) -> bool:
    """Full-row-rank check of the depth-``order`` Hankel matrix.

    Rank is counted from singular values with a relative tolerance
    (sigma > max_dim * sigma_max * 1e-12); exact rank is meaningless in floats.
    """
    arr = _as_2d(signal)
    H = build_hankel(arr, order)
    s = np.linalg.svd(H, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return False
    rank = int(np.sum(s > max(H.shape) * s[0] * RANK_RTOL))
    return rank == order * arr.shape[1]


def min_singular_value(matrices: DataMatrices) -> float:
    """Smallest singular value of the stacked data matrix col(U_p, Y_p, U_f, Y_f)."""
    if matrices.column_count < 1:
        raise ValueError("need at least one column")
    s = np.linalg.svd(matrices.stacked(), compute_uv=False)
    return float(s[-1])
