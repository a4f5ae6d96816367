"""Closed-loop experiment harness: data collection, references, seeded runs.

Reproduces the evaluation protocol at desk scale: excitation-based data
collection, seeded multi-run sweeps over selection strategies and sample
counts, per-step logging, and nearest-rank aggregation of tracking errors and
solve times. Each run consumes two independent seeded streams (plant noise and
selection randomness) so strategies sharing a seed see identical disturbances.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .deepc_controller import (
    ControllerConfig,
    DeepcController,
    QUADROTOR_FRAME,
    VEHICLE_FRAME,
    preprocess_dataset,
)
from .plants import (
    NoiseConfig,
    QuadrotorParams,
    QuadrotorState,
    VehicleParams,
    VehicleState,
    add_measurement_noise,
    double_integrator,
    quadrotor_step,
    vehicle_step,
    wrap_angle,
)
from .qp_solver import QpSettings
from .trajectory_data import (
    Dataset,
    IDENTITY_FRAME,
    Trajectory,
    build_data_matrices,
    is_persistently_exciting,
    min_singular_value,
)

logger = logging.getLogger(__name__)

PLANTS = ("vehicle", "quadrotor", "lti")
_CONSECUTIVE_FAILURE_LIMIT = 25
_FLAG_FAILURE_FRACTION = 0.01

# stream tags for per-run seed derivation
_NOISE_STREAM = 0
_SAMPLING_STREAM = 1
_INIT_STREAM = 2


# ---------------------------------------------------------------------------
# reference generators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StadiumTrack:
    """Closed course of two straights joined by two half-circle arcs.

    Arc-length parametrized, starting at the lower-left corner of the lower
    straight, heading +x, counterclockwise. The speed profile is trapezoidal:
    ``v_corner`` in the arcs, ramping linearly over ``ramp_length`` to
    ``v_straight`` on the straights.
    """

    radius: float = 2.0
    straight_length: float = 6.0
    v_straight: float = 2.0
    v_corner: float = 1.2
    ramp_length: float = 1.0

    def __post_init__(self):
        if min(self.radius, self.straight_length, self.v_straight, self.v_corner) <= 0:
            raise ValueError("track geometry and speeds must be positive")

    @property
    def lap_length(self) -> float:
        return 2.0 * self.straight_length + 2.0 * math.pi * self.radius

    def pose(self, s: float):
        """(x, y, heading) of the centerline at arc length s (wraps around)."""
        L, R = self.straight_length, self.radius
        s = float(s) % self.lap_length
        if s < L:
            return (-L / 2 + s, -R, 0.0)
        s -= L
        if s < math.pi * R:
            phi = s / R - math.pi / 2
            return (L / 2 + R * math.cos(phi), R * math.sin(phi),
                    float(wrap_angle(phi + math.pi / 2)))
        s -= math.pi * R
        if s < L:
            return (L / 2 - s, R, math.pi)
        s -= L
        phi = s / R + math.pi / 2
        return (-L / 2 + R * math.cos(phi), R * math.sin(phi),
                float(wrap_angle(phi + math.pi / 2)))

    def curvature(self, s: float) -> float:
        L, R = self.straight_length, self.radius
        s = float(s) % self.lap_length
        in_first_arc = L <= s < L + math.pi * R
        in_second_arc = s >= 2 * L + math.pi * R
        return 1.0 / R if (in_first_arc or in_second_arc) else 0.0

    def speed(self, s: float) -> float:
        L, R = self.straight_length, self.radius
        s = float(s) % self.lap_length
        if L <= s < L + math.pi * R or s >= 2 * L + math.pi * R:
            return self.v_corner
        d = s if s < L else s - (L + math.pi * R)  # distance into the straight
        edge = min(d, L - d)
        ramp = min(edge / self.ramp_length, 1.0)
        return self.v_corner + (self.v_straight - self.v_corner) * ramp

    def sample(self, dt: float, n_steps: int, s0: float = 0.0) -> np.ndarray:
        """Time-parametrized reference rows (x, y, v, psi), wrapping laps."""
        rows = np.empty((n_steps, 4))
        s = s0
        for k in range(n_steps):
            x, y, psi = self.pose(s)
            v = self.speed(s)
            rows[k] = (x, y, v, psi)
            s += v * dt
        return rows


@dataclass(frozen=True)
class FigureEight:
    """Planar lemniscate with a sinusoidal altitude component, C1-smooth."""

    radius: float = 0.3
    period_s: float = 8.0
    z_center: float = 1.0
    z_amplitude: float = 0.1

    def __post_init__(self):
        if self.radius <= 0 or self.period_s <= 0:
            raise ValueError("radius and period must be positive")

    def position(self, t) -> np.ndarray:
        th = 2.0 * math.pi * np.asarray(t, dtype=float) / self.period_s
        x = self.radius * np.sin(th)
        y = self.radius * np.sin(th) * np.cos(th)
        z = self.z_center + self.z_amplitude * np.sin(th)
        return np.stack([x, y, z], axis=-1)

    def sample(self, dt: float, n_steps: int, t0: float = 0.0) -> np.ndarray:
        return self.position(t0 + dt * np.arange(n_steps))


def reference_vehicle_track(track: StadiumTrack, dt: float, n_steps: int,
                            s0: float = 0.0) -> np.ndarray:
    return track.sample(dt, n_steps, s0)


def reference_quadrotor_figure8(fig8: FigureEight, dt: float, n_steps: int) -> np.ndarray:
    return fig8.sample(dt, n_steps)


def weighted_tracking_error(y, r, q_weights, angle_channels=()) -> float:
    """Instantaneous weighted error with angle differences wrapped to (-pi, pi]."""
    d = np.asarray(y, dtype=float) - np.asarray(r, dtype=float)
    for ch in angle_channels:
        d[ch] = wrap_angle(d[ch])
    w = np.asarray(q_weights, dtype=float)
    return float(np.sqrt(np.sum(w * d * d)))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LtiSetup:
    sample_period: float = 0.1
    reference: tuple = (0.5,)
    x0: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class ExperimentConfig:
    plant: str
    sample_period: float
    duration_s: float
    collect_duration_s: float
    collect_seed: int
    strategies: tuple
    n_s_values: tuple
    seeds: tuple
    controller: ControllerConfig
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    track: StadiumTrack | None = None
    figure8: FigureEight | None = None
    lti: LtiSetup | None = None
    label: str = ""

    def __post_init__(self):
        if self.plant not in PLANTS:
            raise ValueError(f"plant must be one of {PLANTS}")
        object.__setattr__(self, "strategies", tuple(self.strategies))
        object.__setattr__(self, "n_s_values", tuple(int(n) for n in self.n_s_values))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.label:
            object.__setattr__(self, "label", self.plant)

    @property
    def steps(self) -> int:
        return int(round(self.duration_s / self.sample_period))

    def to_dict(self) -> dict:
        ctrl = self.controller
        return {
            "plant": self.plant,
            "label": self.label,
            "sample_period": self.sample_period,
            "duration_s": self.duration_s,
            "collect": {"duration_s": self.collect_duration_s, "seed": self.collect_seed},
            "strategies": list(self.strategies),
            "n_s_values": list(self.n_s_values),
            "seeds": list(self.seeds),
            "controller": {
                "t_ini": ctrl.t_ini,
                "horizon": ctrl.horizon,
                "n_samples": ctrl.n_samples,
                "q_weights": ctrl.q_weights.tolist(),
                "r_weights": ctrl.r_weights.tolist(),
                "lambda_g_bar": ctrl.lambda_g_bar,
                "lambda_sigma": ctrl.lambda_sigma,
                "input_bounds": _bounds_to_json(ctrl.input_bounds),
                "output_bounds": _bounds_to_json(ctrl.output_bounds),
                "strategy": ctrl.strategy,
                "softmin_temperature": ctrl.softmin_temperature,
                "solver": {
                    "eps_abs": ctrl.solver.eps_abs,
                    "eps_rel": ctrl.solver.eps_rel,
                    "max_iter": ctrl.solver.max_iter,
                    "rho": ctrl.solver.rho,
                    "sigma": ctrl.solver.sigma,
                    "alpha": ctrl.solver.alpha,
                    "adaptive_rho": ctrl.solver.adaptive_rho,
                },
            },
            "noise": {
                "sigma_xy": self.noise.sigma_xy,
                "sigma_v": self.noise.sigma_v,
                "sigma_psi": self.noise.sigma_psi,
                "sigma_wind": self.noise.sigma_wind,
                "seed": self.noise.seed,
            },
            "track": None if self.track is None else {
                "radius": self.track.radius,
                "straight_length": self.track.straight_length,
                "v_straight": self.track.v_straight,
                "v_corner": self.track.v_corner,
                "ramp_length": self.track.ramp_length,
            },
            "figure8": None if self.figure8 is None else {
                "radius": self.figure8.radius,
                "period_s": self.figure8.period_s,
                "z_center": self.figure8.z_center,
                "z_amplitude": self.figure8.z_amplitude,
            },
            "lti": None if self.lti is None else {
                "sample_period": self.lti.sample_period,
                "reference": list(self.lti.reference),
                "x0": list(self.lti.x0),
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        ctrl = d["controller"]
        solver = ctrl.get("solver", {})
        controller = ControllerConfig(
            t_ini=ctrl["t_ini"], horizon=ctrl["horizon"], n_samples=ctrl["n_samples"],
            q_weights=ctrl["q_weights"], r_weights=ctrl["r_weights"],
            lambda_g_bar=ctrl.get("lambda_g_bar", 1.0),
            lambda_sigma=ctrl.get("lambda_sigma", 100.0),
            input_bounds=_bounds_from_json(ctrl.get("input_bounds")),
            output_bounds=_bounds_from_json(ctrl.get("output_bounds")),
            strategy=ctrl.get("strategy", "contextual"),
            softmin_temperature=ctrl.get("softmin_temperature"),
            solver=QpSettings(**solver) if solver else QpSettings(),
        )
        noise = d.get("noise", {})
        collect = d.get("collect", {})
        return cls(
            plant=d["plant"],
            sample_period=d["sample_period"],
            duration_s=d["duration_s"],
            collect_duration_s=collect.get("duration_s", 120.0),
            collect_seed=collect.get("seed", 1234),
            strategies=tuple(d.get("strategies", ("contextual", "random", "full"))),
            n_s_values=tuple(d.get("n_s_values", ())),
            seeds=tuple(d.get("seeds", range(10))),
            controller=controller,
            noise=NoiseConfig(**noise) if noise else NoiseConfig(),
            track=StadiumTrack(**d["track"]) if d.get("track") else None,
            figure8=FigureEight(**d["figure8"]) if d.get("figure8") else None,
            lti=LtiSetup(
                sample_period=d["lti"].get("sample_period", 0.1),
                reference=tuple(d["lti"].get("reference", (0.5,))),
                x0=tuple(d["lti"].get("x0", (0.0, 0.0))),
            ) if d.get("lti") else None,
            label=d.get("label", ""),
        )


def _bounds_to_json(bounds):
    if bounds is None:
        return None
    return [None if b is None else [b[0], b[1]] for b in bounds]


def _bounds_from_json(raw):
    if raw is None:
        return None
    return tuple(None if b is None else (b[0], b[1]) for b in raw)


def default_vehicle_config(**overrides) -> ExperimentConfig:
    controller = ControllerConfig(
        t_ini=5, horizon=10, n_samples=60,
        q_weights=[1.0, 1.0, 0.1, 0.1],
        r_weights=[0.1, 1.0],
        lambda_g_bar=3.0, lambda_sigma=100.0,
        input_bounds=((-5.0, 5.0), (-0.4, 0.4)),
        strategy="contextual",
        solver=QpSettings(eps_abs=1e-3, eps_rel=1e-3),
    )
    base = dict(
        plant="vehicle", sample_period=0.1, duration_s=16.0,
        collect_duration_s=120.0, collect_seed=1234,
        strategies=("contextual", "random", "full"),
        n_s_values=(30, 60, 90), seeds=tuple(range(10)),
        controller=controller, noise=NoiseConfig(),
        track=StadiumTrack(),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def default_quadrotor_config(**overrides) -> ExperimentConfig:
    params = QuadrotorParams()
    controller = ControllerConfig(
        t_ini=5, horizon=15, n_samples=70,
        q_weights=[1.0, 1.0, 1.0],
        r_weights=[0.1, 0.1, 0.1, 0.0],
        lambda_g_bar=0.1, lambda_sigma=100.0,
        input_bounds=((0.0, params.thrust_max), (-params.tilt_max, params.tilt_max),
                      (-params.tilt_max, params.tilt_max), (-0.8, 0.8)),
        strategy="contextual",
        solver=QpSettings(eps_abs=1e-3, eps_rel=1e-3),
    )
    base = dict(
        plant="quadrotor", sample_period=0.04, duration_s=16.0,
        collect_duration_s=120.0, collect_seed=1234,
        strategies=("contextual", "random", "full"),
        n_s_values=(40, 70, 100), seeds=tuple(range(10)),
        controller=controller, noise=NoiseConfig(),
        figure8=FigureEight(),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def default_lti_config(**overrides) -> ExperimentConfig:
    controller = ControllerConfig(
        t_ini=4, horizon=8, n_samples=64,
        q_weights=[1.0], r_weights=[0.0],
        lambda_g_bar=1e-9, lambda_sigma=1e4,
        strategy="full",
        solver=QpSettings(eps_abs=1e-9, eps_rel=1e-9),
    )
    base = dict(
        plant="lti", sample_period=0.1, duration_s=20.0,
        collect_duration_s=30.0, collect_seed=1234,
        strategies=("full",), n_s_values=(64,), seeds=(0,),
        controller=controller,
        noise=NoiseConfig(sigma_xy=0.0, sigma_v=0.0, sigma_psi=0.0, sigma_wind=0.0),
        lti=LtiSetup(),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def default_config(plant: str, **overrides) -> ExperimentConfig:
    factories = {"vehicle": default_vehicle_config, "quadrotor": default_quadrotor_config,
                 "lti": default_lti_config}
    if plant not in factories:
        raise ValueError(f"plant must be one of {PLANTS}")
    return factories[plant](**overrides)


# ---------------------------------------------------------------------------
# data collection
# ---------------------------------------------------------------------------

def collect_excitation_data(config: ExperimentConfig, duration_s: float | None = None,
                            seed: int | None = None) -> Dataset:
    """Record one excitation trajectory from the configured plant.

    The vehicle is driven with inputs uniform over the clamp ranges, held for
    random dwell times; the quadrotor tracks randomized waypoints around hover
    through a proportional position law; the linear plant gets i.i.d. uniform
    inputs. Failed attempts (ground contact) retry with the next sub-seed.
    """
    duration = config.collect_duration_s if duration_s is None else float(duration_s)
    seed = config.collect_seed if seed is None else int(seed)
    dt = config.sample_period
    samples = int(round(duration / dt))
    ctrl = config.controller
    depth = ctrl.t_ini + ctrl.horizon
    m = ctrl.r_weights.size
    minimum = (m + 1) * depth - 1
    if samples < minimum:
        raise ValueError(
            f"collection of {samples} samples is too short; need at least {minimum}"
        )
    last_error = None
    for attempt in range(5):
        rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
        try:
            if config.plant == "vehicle":
                traj = _collect_vehicle(config, samples, rng)
            elif config.plant == "quadrotor":
                traj = _collect_quadrotor(config, samples, rng)
            else:
                traj = _collect_lti(config, samples, rng)
            dataset = Dataset.from_trajectories([traj])
            order = depth + 4
            if not is_persistently_exciting(traj.inputs, order):
                logger.warning("collected inputs fail the excitation check at order %d", order)
            return dataset
        except _CollectionFailure as exc:
            last_error = exc
            logger.warning("collection attempt %d failed (%s); retrying", attempt, exc)
    raise RuntimeError(f"data collection failed after 5 attempts: {last_error}")


class _CollectionFailure(RuntimeError):
    pass


def _collect_vehicle(config: ExperimentConfig, samples: int, rng,
                     v_low: float = 0.3, v_high: float = 2.6) -> Trajectory:
    params = VehicleParams()
    dt = config.sample_period
    stds = config.noise.vehicle_stds()
    state = VehicleState(v=1.0)
    dwell_left = 0.0
    command = np.zeros(2)
    inputs, outputs = [], []
    for _ in range(samples):
        if dwell_left <= 0.0:
            command = rng.uniform([-params.accel_max, -params.steer_max],
                                  [params.accel_max, params.steer_max])
            dwell_left = rng.uniform(0.2, 1.0)
        dwell_left -= dt
        # speed governor: keep the data in the dynamic envelope of the task
        # (high speeds spin the car several turns inside one data window)
        applied = command.copy()
        if state.v > v_high:
            applied[0] = -abs(applied[0])
        elif state.v < v_low:
            applied[0] = abs(applied[0])
        state = vehicle_step(state, applied, dt, params)
        measured = add_measurement_noise(state.output(), stds, rng)
        measured[3] = wrap_angle(measured[3])
        inputs.append(applied)
        outputs.append(measured)
    return Trajectory(np.array(inputs), np.array(outputs), dt)


def _collect_quadrotor(config: ExperimentConfig, samples: int, rng) -> Trajectory:
    params = QuadrotorParams()
    dt = config.sample_period
    sigma_wind = config.noise.sigma_wind
    state = QuadrotorState()
    waypoint = np.array([0.0, 0.0, 1.0])
    dwell_left = 0.0
    kp, kd = 4.0, 3.0
    # per-step command dither: the position law alone produces commands far
    # smoother than closed-loop control needs, which starves excitation
    dither = np.array([0.2 * params.hover_thrust, 0.05, 0.05, 0.0])
    inputs, outputs = [], []
    for _ in range(samples):
        if dwell_left <= 0.0:
            waypoint = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                                 rng.uniform(0.6, 1.4)])
            dwell_left = rng.uniform(0.5, 1.5)
        dwell_left -= dt
        a_des = kp * (waypoint - state.position) - kd * state.velocity
        thrust = params.mass * (params.gravity + a_des[2])
        command = np.array([
            thrust,
            -a_des[1] / params.gravity,
            a_des[0] / params.gravity,
            0.0,
        ]) + rng.uniform(-dither, dither)
        wind = rng.normal(0.0, sigma_wind, size=3)
        state = quadrotor_step(state, command, wind, dt, params)
        if state.position[2] < 0.0:
            raise _CollectionFailure("ground contact during collection")
        inputs.append(command)
        outputs.append(state.output())
    return Trajectory(np.array(inputs), np.array(outputs), dt)


def _collect_lti(config: ExperimentConfig, samples: int, rng) -> Trajectory:
    setup = config.lti or LtiSetup()
    plant = double_integrator(config.sample_period)
    x = np.zeros(plant.state_dim)
    inputs, outputs = [], []
    for _ in range(samples):
        u = rng.uniform(-1.0, 1.0, size=plant.input_dim)
        x = plant.step(x, u)
        inputs.append(u)
        outputs.append(plant.output(x))
    return Trajectory(np.array(inputs), np.array(outputs), config.sample_period)


def preprocess_for_plant(config: ExperimentConfig, dataset: Dataset) -> Dataset:
    """Plant-specific preprocessing rule."""
    if config.plant == "vehicle":
        return preprocess_dataset(dataset, VEHICLE_FRAME)
    if config.plant == "quadrotor":
        return preprocess_dataset(dataset, QUADROTOR_FRAME)
    return preprocess_dataset(dataset, IDENTITY_FRAME, incremental=False, augment=False)


def angle_channels_for(plant: str) -> tuple:
    return (3,) if plant == "vehicle" else ()


# ---------------------------------------------------------------------------
# closed-loop execution
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    """Per-step closed-loop log for one (strategy, n_s, seed) cell."""

    plant: str
    strategy: str
    n_samples: int
    seed: int
    sample_period: float
    times: np.ndarray
    outputs: np.ndarray
    references: np.ndarray
    inputs: np.ndarray
    errors: np.ndarray
    solve_ms: np.ndarray
    sigma_min: np.ndarray
    statuses: list
    selected_indices: list
    terminal_status: str
    disturbances: np.ndarray | None = None

    @property
    def step_count(self) -> int:
        return self.times.size

    @property
    def failure_flagged(self) -> bool:
        bad = sum(1 for s in self.statuses if s not in ("solved", "warmup"))
        return bad > _FLAG_FAILURE_FRACTION * max(len(self.statuses), 1)

    def save_csv(self, path) -> None:
        p = self.outputs.shape[1]
        m = self.inputs.shape[1]
        frame = pd.DataFrame({"step": np.arange(self.step_count), "t": self.times})
        for j in range(p):
            frame[f"y_{j}"] = self.outputs[:, j]
        for j in range(p):
            frame[f"r_{j}"] = self.references[:, j]
        for j in range(m):
            frame[f"u_{j}"] = self.inputs[:, j]
        frame["e_t"] = self.errors
        frame["solve_ms"] = self.solve_ms
        frame["sigma_min"] = self.sigma_min
        frame["status"] = self.statuses
        _atomic_write(path, frame.to_csv(index=False))


def run_closed_loop(config: ExperimentConfig, dataset: Dataset, strategy: str,
                    n_samples: int | None, seed: int) -> RunRecord:
    """Simulate one full run; measurements are committed after every plant step."""
    if strategy not in config.strategies and strategy not in ("contextual", "random", "full"):
        raise ValueError(f"unknown strategy {strategy!r}")
    pre = preprocess_for_plant(config, dataset)
    ctrl_cfg = replace(config.controller, strategy=strategy,
                       n_samples=int(n_samples) if n_samples else config.controller.n_samples)
    controller = DeepcController(pre, ctrl_cfg)
    effective_n = controller.matrices.column_count if strategy == "full" else min(
        ctrl_cfg.n_samples, controller.matrices.column_count)

    noise_rng = np.random.default_rng(
        np.random.SeedSequence([config.noise.seed, seed, _NOISE_STREAM]))
    sampling_rng = np.random.default_rng(np.random.SeedSequence([seed, _SAMPLING_STREAM]))
    init_rng = np.random.default_rng(np.random.SeedSequence([seed, _INIT_STREAM]))

    if config.plant == "vehicle":
        session = _VehicleSession(config, init_rng, noise_rng)
    elif config.plant == "quadrotor":
        session = _QuadrotorSession(config, init_rng, noise_rng)
    else:
        session = _LtiSession(config)

    steps = config.steps
    horizon = ctrl_cfg.horizon
    refs = session.references(steps + horizon + 1)
    state = controller.make_state(initial_input=session.initial_input)
    q_weights = config.controller.q_weights
    angles = angle_channels_for(config.plant)

    rows = {name: [] for name in
            ("t", "y", "r", "u", "e", "ms", "sig", "status", "sel", "dist")}
    terminal = "completed"
    consecutive_bad = 0
    for k in range(steps):
        res = controller.control_step(state, refs[k + 1:k + 1 + horizon],
                                      rng_seed=int(sampling_rng.integers(2 ** 63)))
        y_true = session.step(res.applied_input)
        y_meas = session.measure(y_true)
        disturbance = session.last_disturbance
        state.commit(res.applied_input, y_meas)
        rows["t"].append((k + 1) * config.sample_period)
        rows["y"].append(y_meas)
        rows["r"].append(refs[k + 1])
        rows["u"].append(res.applied_input)
        rows["e"].append(weighted_tracking_error(y_meas, refs[k + 1], q_weights, angles))
        rows["ms"].append(res.solve_time * 1e3)
        rows["sig"].append(res.sigma_min)
        rows["status"].append(res.qp_status)
        rows["sel"].append(res.selected_indices)
        rows["dist"].append(disturbance)
        if session.failed(y_true):
            terminal = "ground_contact"
            break
        if res.qp_status in ("max_iter", "primal_infeasible"):
            consecutive_bad += 1
            if consecutive_bad >= _CONSECUTIVE_FAILURE_LIMIT:
                terminal = "infeasible_abort"
                break
        else:
            consecutive_bad = 0

    record = RunRecord(
        plant=config.plant, strategy=strategy, n_samples=effective_n, seed=seed,
        sample_period=config.sample_period,
        times=np.array(rows["t"]), outputs=np.array(rows["y"]),
        references=np.array(rows["r"]), inputs=np.array(rows["u"]),
        errors=np.array(rows["e"]), solve_ms=np.array(rows["ms"]),
        sigma_min=np.array(rows["sig"]), statuses=rows["status"],
        selected_indices=rows["sel"], terminal_status=terminal,
        disturbances=np.array(rows["dist"]),
    )
    if record.failure_flagged and terminal == "completed":
        logger.warning("run %s/%s/ns%s/seed%d: more than 1%% of steps not solved",
                       config.plant, strategy, effective_n, seed)
    return record


class _VehicleSession:
    def __init__(self, config, init_rng, noise_rng):
        self.config = config
        self.params = VehicleParams()
        self.noise_rng = noise_rng
        self.stds = config.noise.vehicle_stds()
        self.track = config.track or StadiumTrack()
        start = self.track.pose(0.0)
        self.state = VehicleState(
            x=start[0] + init_rng.normal(0.0, 0.03),
            y=start[1] + init_rng.normal(0.0, 0.03),
            v=self.track.speed(0.0),
            psi=start[2] + init_rng.normal(0.0, 0.02),
        )
        self.initial_input = np.zeros(2)
        self.last_disturbance = np.zeros(4)

    def references(self, n):
        return self.track.sample(self.config.sample_period, n)

    def step(self, u):
        self.state = vehicle_step(self.state, u, self.config.sample_period, self.params)
        return self.state.output()

    def measure(self, y_true):
        y = add_measurement_noise(y_true, self.stds, self.noise_rng)
        self.last_disturbance = y - y_true
        y[3] = wrap_angle(y[3])
        return y

    def failed(self, y_true):
        return False


class _QuadrotorSession:
    def __init__(self, config, init_rng, noise_rng):
        self.config = config
        self.params = QuadrotorParams()
        self.noise_rng = noise_rng
        self.fig8 = config.figure8 or FigureEight()
        start = self.fig8.position(0.0)
        self.state = QuadrotorState(position=start + init_rng.normal(0.0, 0.01, size=3))
        self.initial_input = np.array([self.params.hover_thrust, 0.0, 0.0, 0.0])
        self.last_disturbance = np.zeros(3)

    def references(self, n):
        return self.fig8.sample(self.config.sample_period, n)

    def step(self, u):
        wind = self.noise_rng.normal(0.0, self.config.noise.sigma_wind, size=3)
        self.last_disturbance = wind
        self.state = quadrotor_step(self.state, u, wind, self.config.sample_period, self.params)
        return self.state.output()

    def measure(self, y_true):
        return y_true.copy()

    def failed(self, y_true):
        return y_true[2] < 0.0


class _LtiSession:
    def __init__(self, config):
        self.config = config
        setup = config.lti or LtiSetup()
        self.plant = double_integrator(config.sample_period)
        self.x = np.array(setup.x0, dtype=float)
        self.reference = np.array(setup.reference, dtype=float)
        self.initial_input = np.zeros(self.plant.input_dim)
        self.last_disturbance = np.zeros(1)

    def references(self, n):
        return np.tile(self.reference, (n, 1))

    def step(self, u):
        self.x = self.plant.step(self.x, u)
        return self.plant.output(self.x)

    def measure(self, y_true):
        return y_true.copy()

    def failed(self, y_true):
        return False


# ---------------------------------------------------------------------------
# aggregation and sweep
# ---------------------------------------------------------------------------

def nearest_rank_percentile(values, pct: float) -> float:
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("cannot take a percentile of no data")
    k = max(1, math.ceil(pct / 100.0 * v.size))
    return float(v[k - 1])


def aggregate(records) -> pd.DataFrame:
    """Concatenate errors/solve times per (plant, strategy, n_s) and summarize."""
    if not records:
        raise ValueError("no records to aggregate")
    groups = {}
    for rec in records:
        groups.setdefault((rec.plant, rec.strategy, rec.n_samples), []).append(rec)
    rows = []
    for (plant, strategy, n_s), recs in sorted(groups.items()):
        errors = np.concatenate([r.errors for r in recs])
        solve_ms = np.concatenate([r.solve_ms for r in recs])
        rows.append({
            "plant": plant,
            "strategy": strategy,
            "n_s": n_s,
            "seed_count": len(recs),
            "median_err": nearest_rank_percentile(errors, 50),
            "q1_err": nearest_rank_percentile(errors, 25),
            "q3_err": nearest_rank_percentile(errors, 75),
            "p99_ms": nearest_rank_percentile(solve_ms, 99),
            "max_ms": float(solve_ms.max()),
        })
    return pd.DataFrame(rows)


def sweep_cells(config: ExperimentConfig):
    """(strategy, n_s, seed) grid; the full baseline has no n_s dimension."""
    cells = []
    for strategy in config.strategies:
        if strategy == "full":
            cells.extend(("full", None, seed) for seed in config.seeds)
        else:
            cells.extend((strategy, n_s, seed)
                         for n_s in config.n_s_values for seed in config.seeds)
    return cells


def cell_name(config: ExperimentConfig, strategy: str, n_s, seed: int) -> str:
    ns_part = "nsall" if n_s is None else f"ns{int(n_s)}"
    return f"{config.plant}_{strategy}_{ns_part}_seed{seed}"


def _run_cell(args):
    config, dataset, strategy, n_s, seed = args
    record = run_closed_loop(config, dataset, strategy, n_s, seed)
    return (strategy, n_s, seed), record


def run_sweep(config: ExperimentConfig, dataset: Dataset, out_dir, *,
              jobs: int = 1, force: bool = False, dataset_path=None) -> pd.DataFrame:
    """Execute every cell, write per-step logs, summary.csv and manifest.json."""
    out = Path(out_dir)
    summary_path = out / "summary.csv"
    if summary_path.exists() and not force:
        raise FileExistsError(f"{summary_path} exists; pass force=True to overwrite")
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)

    cells = sweep_cells(config)
    tasks = [(config, dataset, strategy, n_s, seed) for strategy, n_s, seed in cells]
    results = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for key, record in pool.map(_run_cell, tasks):
                results[key] = record
    else:
        for task in tasks:
            key, record = _run_cell(task)
            results[key] = record

    records = []
    for strategy, n_s, seed in cells:
        record = results[(strategy, n_s, seed)]
        record.save_csv(runs_dir / (cell_name(config, strategy, n_s, seed) + ".csv"))
        records.append(record)

    summary = aggregate(records)
    _atomic_write(summary_path, summary.to_csv(index=False))
    manifest = {
        "config": config.to_dict(),
        "dataset_path": str(dataset_path) if dataset_path else None,
        "cells": [cell_name(config, s, n, sd) for s, n, sd in cells],
        "terminal_statuses": {cell_name(config, s, n, sd): results[(s, n, sd)].terminal_status
                              for s, n, sd in cells},
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2))
    return summary


def sweep_completed(out_dir) -> bool:
    manifest_path = Path(out_dir) / "manifest.json"
    if not manifest_path.exists():
        return False
    manifest = json.loads(manifest_path.read_text())
    return all(status == "completed" for status in manifest["terminal_statuses"].values())


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def write_report(out_dir) -> dict:
    """Emit plot-ready CSVs (boxplot_data.csv / timing_table.csv) from a sweep."""
    out = Path(out_dir)
    summary_path = out / "summary.csv"
    if not summary_path.exists():
        raise FileNotFoundError(f"no summary at {summary_path}; run a sweep first")
    runs_dir = out / "runs"
    run_files = sorted(runs_dir.glob("*.csv")) if runs_dir.exists() else []
    if not run_files:
        raise FileNotFoundError(f"no per-run logs under {runs_dir}")
    manifest = json.loads((out / "manifest.json").read_text())
    config = ExperimentConfig.from_dict(manifest["config"])

    chunks = []
    for path in run_files:
        name = path.stem
        parts = name.split("_")
        strategy = parts[1]
        ns_token = parts[2]
        frame = pd.read_csv(path, usecols=["e_t"])
        frame["strategy"] = strategy
        frame["n_s"] = -1 if ns_token == "nsall" else int(ns_token[2:])
        frame["plant"] = parts[0]
        chunks.append(frame[["plant", "strategy", "n_s", "e_t"]])
    box = pd.concat(chunks, ignore_index=True)
    summary = pd.read_csv(summary_path)
    # the full baseline runs at n_s = K; propagate that label into the long table
    full_rows = summary[summary.strategy == "full"]
    if len(full_rows):
        box.loc[box.strategy == "full", "n_s"] = int(full_rows.iloc[0]["n_s"])
    boxplot_path = out / "boxplot_data.csv"
    _atomic_write(boxplot_path, box.to_csv(index=False))

    timing = summary[["plant", "strategy", "n_s", "p99_ms", "max_ms"]]
    timing_path = out / "timing_table.csv"
    _atomic_write(timing_path, timing.to_csv(index=False))
    return {"boxplot_data": boxplot_path, "timing_table": timing_path}


# ---------------------------------------------------------------------------
# coarse regularization grid search
# ---------------------------------------------------------------------------

def grid_search(config: ExperimentConfig, dataset: Dataset,
                lambda_g_values=(1e-2, 1e-1, 1.0, 10.0),
                lambda_sigma_values=(1.0, 100.0, 1000.0),
                n_seeds: int = 2, duration_s: float | None = None) -> pd.DataFrame:
    """Coarse sweep over the two regularization weights on a reduced setting."""
    duration = duration_s or min(config.duration_s, 8.0)
    seeds = config.seeds[:n_seeds]
    n_s = config.n_s_values[len(config.n_s_values) // 2] if config.n_s_values else None
    rows = []
    for lam_g in lambda_g_values:
        for lam_s in lambda_sigma_values:
            trial = replace(
                config, duration_s=duration, seeds=seeds,
                controller=replace(config.controller, lambda_g_bar=lam_g, lambda_sigma=lam_s),
            )
            records = [run_closed_loop(trial, dataset, "contextual", n_s, seed)
                       for seed in seeds]
            errors = np.concatenate([r.errors for r in records])
            solve_ms = np.concatenate([r.solve_ms for r in records])
            rows.append({
                "lambda_g_bar": lam_g,
                "lambda_sigma": lam_s,
                "median_err": nearest_rank_percentile(errors, 50),
                "p99_ms": nearest_rank_percentile(solve_ms, 99),
                "completed": all(r.terminal_status == "completed" for r in records),
            })
    return pd.DataFrame(rows)


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
