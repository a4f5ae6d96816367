"""Regularized data-driven predictive controller with per-step data selection.

The controller works on a preprocessed dataset: inputs stored as increments,
outputs augmented with the absolute inputs, everything z-scored once, and each
data window re-expressed in a local frame anchored at the final sample of its
own initial segment. The same transform is applied online to the measurement
buffers and the reference preview, so data columns and the live window are
directly comparable.

The per-step optimization is transcribed into a dense standard-form QP over
the decision vector col(g, u, y, t+, t-), where sigma_y = t+ - t- linearizes
the 1-norm slack penalty. Equality rows carry the data-consistency blocks and
the affine row sum(g) = 1; box rows carry input/output constraints and
t+, t- >= 0.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .plants import wrap_angle
from .qp_solver import AdmmWorkspace, QpProblem, QpSettings, QpSolution
from .sampling import SelectionRequest, restrict, select_contextual, select_random
from .trajectory_data import (
    Dataset,
    DataMatrices,
    DimensionMismatchError,
    FrameRule,
    IDENTITY_FRAME,
    NormalizationStats,
    Trajectory,
    TransformInfo,
    build_data_matrices,
    min_singular_value,
)

logger = logging.getLogger(__name__)

STRATEGIES = ("contextual", "random", "full")

VEHICLE_FRAME = FrameRule("planar_pose", position_channels=(0, 1), heading_channel=3)
QUADROTOR_FRAME = FrameRule("position_shift", position_channels=(0, 1, 2), origin=(0.0, 0.0, 1.0))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def preprocess_dataset(raw: Dataset, frame: FrameRule = IDENTITY_FRAME, *,
                       incremental: bool = True, augment: bool = True) -> Dataset:
    """Apply the preprocessing pipeline to a raw recorded dataset.

    Inputs are rewritten as increments (the first one relative to a zero prior
    input), outputs get the absolute inputs appended as extra channels, and all
    channels are z-scored with statistics computed once here. The frame rule is
    stored for per-window alignment at matrix-build time; window frames depend
    on each window's own initial segment, so alignment cannot happen per
    trajectory.
    """
    if raw.normalized:
        raise ValueError("dataset is already preprocessed")
    transformed = []
    for traj in raw.trajectories:
        u = traj.inputs
        if incremental:
            du = np.vstack([u[:1], np.diff(u, axis=0)])
        else:
            du = u
        out = np.hstack([traj.outputs, u]) if augment else traj.outputs
        transformed.append(Trajectory(du, out, traj.sample_period))
    info = TransformInfo(frame=frame, base_m=raw.input_dim, base_p=raw.output_dim,
                         incremental=incremental, augmented=augment)
    return Dataset.from_trajectories(transformed, normalize=True,
                                     aligned=frame.kind != "none", transform=info)


def apply_frame(rows: np.ndarray, anchor: np.ndarray, frame: FrameRule,
                anchor_position: int | None = None) -> np.ndarray:
    """Re-express output rows (..., T, p) in the local frame of ``anchor`` (..., p).

    The heading channel becomes a continuous relative angle: the sequence is
    unwrapped along time so windows spanning the +-pi seam (or several turns)
    stay linear coordinates. ``anchor_position`` is the time index the anchor
    corresponds to; None means the anchor immediately precedes the rows (used
    for reference previews).
    """
    rows = np.array(rows, dtype=float)
    if frame.kind == "none":
        return rows
    a = np.asarray(anchor, dtype=float)
    if frame.kind == "position_shift":
        for ch, origin in zip(frame.position_channels, frame.origin):
            rows[..., ch] += origin - a[..., ch][..., None]
        return rows
    px, py = frame.position_channels
    h = frame.heading_channel
    ah = a[..., h][..., None]
    c, s = np.cos(ah), np.sin(ah)
    dx = rows[..., px] - a[..., px][..., None]
    dy = rows[..., py] - a[..., py][..., None]
    rows[..., px] = c * dx + s * dy
    rows[..., py] = -s * dx + c * dy
    if anchor_position is None:
        seq = np.unwrap(np.concatenate([ah, rows[..., h]], axis=-1), axis=-1)
        rows[..., h] = seq[..., 1:] - seq[..., :1]
    else:
        seq = np.unwrap(rows[..., h], axis=-1)
        rows[..., h] = seq - seq[..., anchor_position:anchor_position + 1]
    return rows


def invert_frame(rows: np.ndarray, anchor: np.ndarray, frame: FrameRule) -> np.ndarray:
    """Map local-frame output rows back to the world frame (inverse of apply_frame)."""
    rows = np.array(rows, dtype=float)
    if frame.kind == "none":
        return rows
    a = np.asarray(anchor, dtype=float)
    if frame.kind == "position_shift":
        for ch, origin in zip(frame.position_channels, frame.origin):
            rows[..., ch] += a[..., ch][..., None] - origin
        return rows
    px, py = frame.position_channels
    h = frame.heading_channel
    ah = a[..., h][..., None]
    c, s = np.cos(ah), np.sin(ah)
    xl = rows[..., px].copy()
    yl = rows[..., py].copy()
    rows[..., px] = a[..., px][..., None] + c * xl - s * yl
    rows[..., py] = a[..., py][..., None] + s * xl + c * yl
    rows[..., h] = wrap_angle(rows[..., h] + ah)
    return rows


def align_window_columns(matrices: DataMatrices, dataset: Dataset) -> DataMatrices:
    """Re-express every data column in its own local frame.

    The anchor of column j is the final sample of its past output block, read
    in physical units; only the physical output channels are touched (the
    appended input channels and the input blocks are frame-independent).
    """
    info = dataset.transform
    if info is None or info.frame.kind == "none":
        return matrices
    stats = dataset.stats
    K = matrices.column_count
    p = matrices.output_dim
    t_ini = matrices.t_ini
    past = stats.denormalize_outputs(matrices.y_past.T.reshape(K, t_ini, p))
    future = stats.denormalize_outputs(matrices.y_future.T.reshape(K, matrices.horizon, p))
    window = np.concatenate([past, future], axis=1)
    anchors = window[:, t_ini - 1, :].copy()
    window = apply_frame(window, anchors, info.frame, anchor_position=t_ini - 1)
    local = stats.normalize_outputs(window)
    return replace(
        matrices,
        y_past=local[:, :t_ini].reshape(K, -1).T.copy(),
        y_future=local[:, t_ini:].reshape(K, -1).T.copy(),
    )


# ---------------------------------------------------------------------------
# configuration and state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ControllerConfig:
    t_ini: int
    horizon: int
    n_samples: int
    q_weights: np.ndarray            # (p,) diagonal output weights, physical channels
    r_weights: np.ndarray            # (m,) diagonal input weights
    lambda_g_bar: float = 1.0
    lambda_sigma: float = 100.0
    input_bounds: tuple | None = None    # per input channel: (lo, hi), None entries unbounded
    output_bounds: tuple | None = None
    strategy: str = "contextual"
    softmin_temperature: float | None = None
    solver: QpSettings = field(default_factory=QpSettings)

    def __post_init__(self):
        object.__setattr__(self, "q_weights", np.asarray(self.q_weights, dtype=float).ravel())
        object.__setattr__(self, "r_weights", np.asarray(self.r_weights, dtype=float).ravel())
        if min(self.t_ini, self.horizon, self.n_samples) < 1:
            raise ValueError("t_ini, horizon and n_samples must be positive")
        if np.any(self.q_weights < 0) or np.any(self.r_weights < 0):
            raise ValueError("Q and R weights must be nonnegative")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        for bounds, dim, name in ((self.input_bounds, self.r_weights.size, "input_bounds"),
                                  (self.output_bounds, self.q_weights.size, "output_bounds")):
            if bounds is None:
                continue
            if len(bounds) != dim:
                raise DimensionMismatchError(f"{name} needs one entry per channel")
            for entry in bounds:
                if entry is None:
                    continue
                lo, hi = entry
                if lo is not None and hi is not None and lo > hi:
                    raise ValueError(f"{name} interval {entry} is not well ordered")


@dataclass
class ControllerState:
    """Measurement buffers in physical units, committed by the harness.

    ``u_hist`` keeps t_ini + 1 inputs (one extra prior so the increment window
    is complete); ``y_hist`` keeps the t_ini outputs they produced.
    """

    t_ini: int
    input_dim: int
    output_dim: int
    u_hist: deque = None
    y_hist: deque = None
    warm_start: QpSolution | None = None

    @classmethod
    def initialize(cls, t_ini: int, input_dim: int, output_dim: int,
                   initial_input=None) -> "ControllerState":
        state = cls(t_ini=t_ini, input_dim=input_dim, output_dim=output_dim)
        state.u_hist = deque(maxlen=t_ini + 1)
        state.y_hist = deque(maxlen=t_ini)
        prior = np.zeros(input_dim) if initial_input is None else np.asarray(initial_input, dtype=float)
        state.u_hist.append(prior.copy())
        return state

    def commit(self, applied_input, measured_output) -> None:
        u = np.asarray(applied_input, dtype=float).ravel()
        y = np.asarray(measured_output, dtype=float).ravel()
        if u.size != self.input_dim or y.size != self.output_dim:
            raise DimensionMismatchError("committed sample has wrong dimensions")
        self.u_hist.append(u.copy())
        self.y_hist.append(y.copy())

    @property
    def warmed_up(self) -> bool:
        return len(self.y_hist) == self.t_ini and len(self.u_hist) == self.t_ini + 1

    @property
    def last_applied_input(self) -> np.ndarray:
        return np.array(self.u_hist[-1])


@dataclass(frozen=True)
class StepResult:
    applied_input: np.ndarray
    planned_inputs: np.ndarray
    predicted_outputs: np.ndarray
    g: np.ndarray | None
    sigma_y: np.ndarray | None
    solve_time: float
    selected_indices: np.ndarray
    sigma_min: float
    qp_status: str
    qp_iterations: int = 0


def tracking_error(y, r, q) -> float:
    """Weighted instantaneous tracking error sqrt((y-r)' Q (y-r))."""
    y = np.asarray(y, dtype=float).ravel()
    r = np.asarray(r, dtype=float).ravel()
    q = np.asarray(q, dtype=float)
    if y.size != r.size:
        raise DimensionMismatchError("output and reference dimensions differ")
    w = np.diag(q) if q.ndim == 2 else q.ravel()
    if w.size != y.size:
        raise DimensionMismatchError("weight dimension does not match outputs")
    d = y - r
    return float(np.sqrt(np.sum(w * d * d)))


# ---------------------------------------------------------------------------
# QP transcription
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _QpLayout:
    """Everything needed to transcribe the problem for one matrix geometry."""

    t_ini: int
    horizon: int
    m: int                      # matrix-space input channels
    p: int                      # matrix-space output channels
    w_u_mag: np.ndarray         # (m,) input-magnitude weights on the input block
    w_u_delta: np.ndarray       # (m,) input-increment weights (data-relative units)
    w_y: np.ndarray             # (p,) quadratic weights on the output block
    lambda_g_bar: float
    lambda_sigma: float
    delta_penalty: bool         # direct mode: penalize consecutive input differences
    u_bounds: np.ndarray        # (m, 2) bounds on the input block, +-inf if free
    y_bounds: np.ndarray        # (p, 2) bounds on the output block
    u_target: np.ndarray = None  # (m,) magnitude-penalty target on the input block


def _make_layout(config: ControllerConfig, info: TransformInfo,
                 stats: NormalizationStats | None,
                 local_scale: np.ndarray | None = None) -> _QpLayout:
    base_m, base_p = info.base_m, info.base_p
    if config.q_weights.size != base_p or config.r_weights.size != base_m:
        raise DimensionMismatchError("Q/R weight dimensions do not match the plant channels")
    m = base_m
    p = base_p + (base_m if info.augmented else 0)
    if info.augmented:
        # tracking weights on physical channels, input-magnitude weights on the
        # appended absolute-input channels
        w_y = np.concatenate([config.q_weights, config.r_weights])
    else:
        w_y = config.q_weights.copy()
    # All cost terms act on z-scored channels. Aligned channels concentrate far
    # below their dataset-wide spread, so their errors are re-expressed in
    # units of the aligned-window population std; this keeps every term O(1)
    # and lets one lambda grid serve both plants.
    if local_scale is not None:
        w_y = w_y / np.maximum(np.asarray(local_scale, dtype=float), 1e-2) ** 2
    w_u_mag = config.r_weights.copy()
    w_u_delta = config.r_weights.copy()

    u_bounds = np.tile([-np.inf, np.inf], (m, 1))
    y_bounds = np.tile([-np.inf, np.inf], (p, 1))
    if config.output_bounds is not None:
        for j, entry in enumerate(config.output_bounds):
            if entry is not None:
                y_bounds[j] = _normalize_interval(entry, stats, "output", j)
    if config.input_bounds is not None:
        for j, entry in enumerate(config.input_bounds):
            if entry is None:
                continue
            if info.augmented:
                y_bounds[base_p + j] = _normalize_interval(entry, stats, "output", base_p + j)
            else:
                u_bounds[j] = _normalize_interval(entry, stats, "input", j)
    # Direct mode penalizes the physical input magnitude (energy), so the
    # target is the normalized image of zero input. In the incremental
    # representation the input block already holds increments, whose natural
    # target is the channel mean, i.e. zero in normalized coordinates.
    if info.incremental or stats is None:
        u_target = np.zeros(m)
    else:
        u_target = stats.normalize_inputs(np.zeros(m))
    return _QpLayout(
        t_ini=config.t_ini, horizon=config.horizon, m=m, p=p,
        w_u_mag=w_u_mag, w_u_delta=w_u_delta, w_y=w_y,
        lambda_g_bar=config.lambda_g_bar, lambda_sigma=config.lambda_sigma,
        delta_penalty=not info.incremental,
        u_bounds=u_bounds, y_bounds=y_bounds, u_target=u_target,
    )


def _normalize_interval(entry, stats, kind, channel):
    lo, hi = entry
    lo = -np.inf if lo is None else float(lo)
    hi = np.inf if hi is None else float(hi)
    if stats is None:
        return np.array([lo, hi])
    mean = stats.input_mean if kind == "input" else stats.output_mean
    std = stats.input_std if kind == "input" else stats.output_std
    return np.array([(lo - mean[channel]) / std[channel] if np.isfinite(lo) else -np.inf,
                     (hi - mean[channel]) / std[channel] if np.isfinite(hi) else np.inf])


class _QpStructure:
    """Dense P and A for one column selection, plus vector builders."""

    def __init__(self, sub: DataMatrices, layout: _QpLayout):
        lay = layout
        K = sub.column_count
        nu = lay.horizon * lay.m
        ny = lay.horizon * lay.p
        ns = lay.t_ini * lay.p
        nui = lay.t_ini * lay.m
        self.layout = lay
        self.K = K
        self.off_g, self.off_u = 0, K
        self.off_y = self.off_u + nu
        self.off_tp = self.off_y + ny
        self.off_tm = self.off_tp + ns
        self.n = self.off_tm + ns
        self.nu, self.ny, self.ns, self.nui = nu, ny, ns, nui

        lam_g = lay.lambda_g_bar * K
        pdiag = np.zeros(self.n)
        pdiag[:K] = 2.0 * lam_g
        if lay.delta_penalty:
            # direct mode: magnitude penalty on the inputs themselves
            pdiag[self.off_u:self.off_y] = 2.0 * np.tile(lay.w_u_mag, lay.horizon)
        else:
            # incremental mode: the input block already holds increments
            pdiag[self.off_u:self.off_y] = 2.0 * np.tile(lay.w_u_delta, lay.horizon)
        pdiag[self.off_y:self.off_tp] = 2.0 * np.tile(lay.w_y, lay.horizon)
        P = np.diag(pdiag)
        self._w_y_rep = np.tile(lay.w_y, lay.horizon)
        if lay.delta_penalty:
            D = np.eye(nu)
            D[lay.m:, :-lay.m] -= np.eye(nu - lay.m)
            R_rep = np.diag(np.tile(lay.w_u_delta, lay.horizon))
            P[self.off_u:self.off_y, self.off_u:self.off_y] += 2.0 * D.T @ R_rep @ D
            self._delta_op = D
            self._delta_R = R_rep
        self.P = P

        bounded_u = np.where(np.isfinite(lay.u_bounds).any(axis=1))[0]
        bounded_y = np.where(np.isfinite(lay.y_bounds).any(axis=1))[0]
        c_eq = nui + ns + nu + ny + 1
        c = c_eq + 2 * ns + lay.horizon * (bounded_u.size + bounded_y.size)
        A = np.zeros((c, self.n))
        row = 0
        A[row:row + nui, :K] = sub.u_past
        self._rows_u_ini = slice(row, row + nui)
        row += nui
        A[row:row + ns, :K] = sub.y_past
        A[row:row + ns, self.off_tp:self.off_tm] = -np.eye(ns)
        A[row:row + ns, self.off_tm:] = np.eye(ns)
        self._rows_y_ini = slice(row, row + ns)
        row += ns
        A[row:row + nu, :K] = sub.u_future
        A[row:row + nu, self.off_u:self.off_y] = -np.eye(nu)
        row += nu
        A[row:row + ny, :K] = sub.y_future
        A[row:row + ny, self.off_y:self.off_tp] = -np.eye(ny)
        row += ny
        A[row, :K] = 1.0
        row += 1
        A[row:row + 2 * ns, self.off_tp:] = np.eye(2 * ns)
        row += 2 * ns

        l = np.zeros(c)
        u = np.zeros(c)
        l[c_eq:c_eq + 2 * ns] = 0.0
        u[c_eq:c_eq + 2 * ns] = np.inf
        for j in bounded_u:
            for k in range(lay.horizon):
                A[row, self.off_u + k * lay.m + j] = 1.0
                l[row], u[row] = lay.u_bounds[j]
                row += 1
        for j in bounded_y:
            for k in range(lay.horizon):
                A[row, self.off_y + k * lay.p + j] = 1.0
                l[row], u[row] = lay.y_bounds[j]
                row += 1
        self.A = A
        self._l_template = l
        self._u_template = u
        self._c_eq = c_eq

    def vectors(self, u_ini, y_ini, reference, prev_input=None):
        """q, l, u for the current step; reference already carries zero targets
        on channels without one."""
        lay = self.layout
        u_ini = np.asarray(u_ini, dtype=float).ravel()
        y_ini = np.asarray(y_ini, dtype=float).ravel()
        reference = np.asarray(reference, dtype=float).ravel()
        if u_ini.size != self.nui or y_ini.size != self.ns or reference.size != self.ny:
            raise DimensionMismatchError("window vectors do not match QP geometry")
        q = np.zeros(self.n)
        q[self.off_y:self.off_tp] = -2.0 * self._w_y_rep * reference
        q[self.off_tp:] = lay.lambda_sigma
        if lay.u_target is not None and np.any(lay.u_target):
            q[self.off_u:self.off_y] += -2.0 * np.tile(lay.w_u_mag * lay.u_target, lay.horizon)
        if lay.delta_penalty:
            b = np.zeros(self.nu)
            b[:lay.m] = np.zeros(lay.m) if prev_input is None else np.asarray(prev_input, dtype=float)
            q[self.off_u:self.off_y] += -2.0 * self._delta_op.T @ (self._delta_R @ b)
        l = self._l_template.copy()
        u = self._u_template.copy()
        rhs = np.concatenate([u_ini, y_ini, np.zeros(self.nu + self.ny), [1.0]])
        l[:self._c_eq] = rhs
        u[:self._c_eq] = rhs
        return q, l, u


def assemble_qp(matrices: DataMatrices, u_ini, y_ini, reference,
                config: ControllerConfig, *, transform: TransformInfo | None = None,
                stats: NormalizationStats | None = None, prev_input=None) -> QpProblem:
    """Transcribe one step into a standard-form QP.

    ``u_ini``, ``y_ini`` and ``reference`` must be flat vectors in the same
    coordinates as ``matrices``. Without a transform the problem is built in
    direct mode: the input block carries the magnitude and difference
    penalties, with the first difference taken against ``prev_input``.
    """
    if transform is None:
        transform = TransformInfo(IDENTITY_FRAME, matrices.input_dim, matrices.output_dim,
                                  incremental=False, augmented=False)
    layout = _make_layout(config, transform, stats)
    structure = _QpStructure(matrices, layout)
    q, l, u = structure.vectors(u_ini, y_ini, reference, prev_input)
    return QpProblem(P=structure.P, q=q, A=structure.A, l=l, u=u)


# ---------------------------------------------------------------------------
# controller
# ---------------------------------------------------------------------------

class DeepcController:
    """Receding-horizon controller over a preprocessed dataset.

    Holds the aligned, normalized data matrices and a factorization cache: as
    long as consecutive steps select the same columns (always true for the
    full strategy) only the QP vectors are rebuilt and the solve is
    warm-started from the previous step.
    """

    def __init__(self, dataset: Dataset, config: ControllerConfig):
        if not dataset.normalized or dataset.transform is None:
            raise ValueError("controller requires a preprocessed dataset (see preprocess_dataset)")
        self.dataset = dataset
        self.config = config
        self.info = dataset.transform
        self.stats = dataset.stats
        raw_matrices = build_data_matrices(dataset, config.t_ini, config.horizon)
        self.matrices = align_window_columns(raw_matrices, dataset)
        local_scale = np.vstack([
            self.matrices.y_past.reshape(config.t_ini, self.matrices.output_dim, -1).transpose(0, 2, 1).reshape(-1, self.matrices.output_dim),
            self.matrices.y_future.reshape(config.horizon, self.matrices.output_dim, -1).transpose(0, 2, 1).reshape(-1, self.matrices.output_dim),
        ]).std(axis=0)
        self.layout = _make_layout(config, self.info, self.stats, local_scale)
        if config.n_samples > self.matrices.column_count and config.strategy != "full":
            logger.warning("n_samples=%d exceeds K=%d; selection degrades to the full baseline",
                           config.n_samples, self.matrices.column_count)
        # selection distance weights: tracked channels weighted as in the cost,
        # channels without a reference drop out
        self._q_select = self.layout.w_y.copy()
        if self.info.augmented:
            self._q_select[self.info.base_p:] = 0.0
        self._structure_key = None
        self._structure = None
        self._workspace = None
        self._sigma_full = None

    def make_state(self, initial_input=None) -> ControllerState:
        return ControllerState.initialize(self.config.t_ini, self.info.base_m,
                                          self.info.base_p, initial_input)

    # -- window transforms ---------------------------------------------------

    def _input_window(self, state: ControllerState) -> np.ndarray:
        hist = np.array(state.u_hist)
        seq = np.diff(hist, axis=0) if self.info.incremental else hist[1:]
        return self.stats.normalize_inputs(seq).ravel()

    def _output_window(self, state: ControllerState):
        y = np.array(state.y_hist)
        anchor = y[-1].copy()
        rows = np.hstack([y, np.array(state.u_hist)[1:]]) if self.info.augmented else y
        rows = apply_frame(rows, anchor, self.info.frame, anchor_position=len(y) - 1)
        return self.stats.normalize_outputs(rows).ravel(), anchor

    def _reference_window(self, reference: np.ndarray, anchor: np.ndarray) -> np.ndarray:
        ref = np.atleast_2d(np.asarray(reference, dtype=float))
        if ref.shape != (self.config.horizon, self.info.base_p):
            raise DimensionMismatchError(
                f"reference must be ({self.config.horizon}, {self.info.base_p}), got {ref.shape}"
            )
        ref = apply_frame(ref, anchor, self.info.frame)
        if self.info.augmented:
            filler = np.tile(self.stats.output_mean[self.info.base_p:], (self.config.horizon, 1))
            ref = np.hstack([ref, filler])
        return self.stats.normalize_outputs(ref).ravel()

    # -- main step -----------------------------------------------------------

    def control_step(self, state: ControllerState, reference, rng_seed=None) -> StepResult:
        """Run one selection + solve cycle. Measurement buffers are not touched;
        the caller commits (applied input, resulting measurement) afterwards."""
        t0 = time.perf_counter()
        cfg = self.config
        if not state.warmed_up:
            applied = state.last_applied_input
            return StepResult(
                applied_input=applied,
                planned_inputs=np.tile(applied, (cfg.horizon, 1)),
                predicted_outputs=np.full((cfg.horizon, self.info.base_p), np.nan),
                g=None, sigma_y=None,
                solve_time=time.perf_counter() - t0,
                selected_indices=np.empty(0, dtype=int),
                sigma_min=np.nan, qp_status="warmup",
            )

        u_ini = self._input_window(state)
        y_ini, anchor = self._output_window(state)
        ref_vec = self._reference_window(reference, anchor)

        K = self.matrices.column_count
        if cfg.strategy == "full" or cfg.n_samples >= K:
            indices = np.arange(K)
        elif cfg.strategy == "contextual":
            request = SelectionRequest(y_ini=y_ini, reference=ref_vec,
                                       q_weights=self._q_select, n_samples=cfg.n_samples)
            indices = select_contextual(self.matrices, request, rng_seed=rng_seed,
                                        temperature=cfg.softmin_temperature).indices
        else:
            indices = select_random(K, cfg.n_samples, rng_seed=rng_seed).indices
        sub = restrict(self.matrices, indices)
        sigma = self._sigma_min(sub, full=indices.size == K)

        key = indices.tobytes()
        if key != self._structure_key or self._workspace is None:
            self._structure = _QpStructure(sub, self.layout)
            q, l, u = self._structure.vectors(u_ini, y_ini, ref_vec,
                                              prev_input=self._prev_input_normalized(state))
            self._workspace = AdmmWorkspace(self._structure.P, self._structure.A, l, u,
                                            cfg.solver, q=q)
            self._structure_key = key
        else:
            q, l, u = self._structure.vectors(u_ini, y_ini, ref_vec,
                                              prev_input=self._prev_input_normalized(state))
        warm = state.warm_start
        x0 = warm.x if warm is not None and warm.x.size == self._structure.n else None
        y0 = warm.y if x0 is not None and warm.y is not None and warm.y.size == self._workspace.m else None
        solution = self._workspace.solve(q, l, u, x0=x0, y0=y0)
        state.warm_start = solution

        result = self._extract(solution, state, anchor, indices, sigma)
        return replace(result, solve_time=time.perf_counter() - t0)

    def _prev_input_normalized(self, state):
        if not self.layout.delta_penalty:
            return None
        return self.stats.normalize_inputs(state.last_applied_input)

    def _sigma_min(self, sub: DataMatrices, full: bool) -> float:
        if full:
            if self._sigma_full is None:
                self._sigma_full = min_singular_value(sub)
            return self._sigma_full
        return min_singular_value(sub)

    def _extract(self, solution: QpSolution, state: ControllerState, anchor,
                 indices, sigma) -> StepResult:
        cfg = self.config
        st = self._structure
        last = state.last_applied_input
        if not solution.solved:
            # hold the last applied input (zero increment) and report the status
            logger.warning("qp status %s; holding last input", solution.status)
            applied = last
            planned = np.tile(applied, (cfg.horizon, 1))
            predicted = np.full((cfg.horizon, self.info.base_p), np.nan)
            g = sigma_y = None
        else:
            x = solution.x
            g = x[:st.K].copy()
            u_block = x[st.off_u:st.off_y].reshape(cfg.horizon, self.layout.m)
            y_block = x[st.off_y:st.off_tp].reshape(cfg.horizon, self.layout.p)
            sigma_y = (x[st.off_tp:st.off_tm] - x[st.off_tm:]).copy()
            u_steps = self.stats.denormalize_inputs(u_block)
            if self.info.incremental:
                planned = last + np.cumsum(u_steps, axis=0)
            else:
                planned = u_steps
            applied = planned[0].copy()
            rows = self.stats.denormalize_outputs(y_block)
            rows = invert_frame(rows, anchor, self.info.frame)
            predicted = rows[:, :self.info.base_p]
        return StepResult(
            applied_input=applied, planned_inputs=planned, predicted_outputs=predicted,
            g=g, sigma_y=sigma_y, solve_time=0.0,
            selected_indices=np.asarray(indices, dtype=int),
            sigma_min=float(sigma), qp_status=solution.status,
            qp_iterations=solution.iterations,
        )
