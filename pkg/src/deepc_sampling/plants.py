"""Desk-scale discrete-time plant simulators.

Three self-contained plants: a kinematic single-track vehicle (F1TENTH scale),
a simplified quadrotor with a first-order inner attitude loop (Crazyflie
scale), and a configurable linear plant for exactness checks. All are pure
value-object updates, bitwise reproducible for a fixed input sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def wrap_angle(angle):
    """Wrap an angle (or array of angles) to (-pi, pi]."""
    return np.pi - (np.pi - np.asarray(angle)) % (2.0 * np.pi)


@dataclass(frozen=True)
class NoiseConfig:
    """Measurement-noise and wind-disturbance magnitudes."""

    sigma_xy: float = 0.05
    sigma_v: float = 0.05
    sigma_psi: float = math.radians(0.6)
    sigma_wind: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if min(self.sigma_xy, self.sigma_v, self.sigma_psi, self.sigma_wind) < 0:
            raise ValueError("noise standard deviations must be nonnegative")

    def vehicle_stds(self) -> np.ndarray:
        return np.array([self.sigma_xy, self.sigma_xy, self.sigma_v, self.sigma_psi])


# ---------------------------------------------------------------------------
# vehicle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 0.33
    accel_max: float = 5.0
    steer_max: float = 0.4


@dataclass(frozen=True)
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    v: float = 0.0
    psi: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "psi", float(wrap_angle(self.psi)))

    def output(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.psi])


def vehicle_step(state: VehicleState, control, dt: float,
                 params: VehicleParams = VehicleParams()) -> VehicleState:
    """Forward-Euler kinematic single-track update.

    Inputs are (acceleration, steering angle), clamped to the physical limits;
    speed is clamped nonnegative.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    accel = float(np.clip(control[0], -params.accel_max, params.accel_max))
    steer = float(np.clip(control[1], -params.steer_max, params.steer_max))
    x = state.x + state.v * math.cos(state.psi) * dt
    y = state.y + state.v * math.sin(state.psi) * dt
    psi = state.psi + state.v / params.wheelbase * math.tan(steer) * dt
    v = max(state.v + accel * dt, 0.0)
    return VehicleState(x=x, y=y, v=v, psi=psi)


# ---------------------------------------------------------------------------
# quadrotor
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadrotorParams:
    mass: float = 0.027
    gravity: float = 9.81
    attitude_tau: float = 0.15
    substeps: int = 4
    thrust_min: float = 0.0
    thrust_max: float = 0.60
    tilt_max: float = 0.6

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.gravity


@dataclass(frozen=True)
class QuadrotorState:
    position: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    attitude: np.ndarray = field(default_factory=lambda: np.zeros(3))  # roll, pitch, yaw
    angular_velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("position", "velocity", "attitude", "angular_velocity"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).copy())

    def output(self) -> np.ndarray:
        return self.position.copy()


def rotation_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Body-to-world rotation, ZYX convention."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def quadrotor_step(state: QuadrotorState, command, wind, dt: float,
                   params: QuadrotorParams = QuadrotorParams()) -> QuadrotorState:
    """One control period of the simplified quadrotor.

    ``command`` is (thrust, roll_ref, pitch_ref, yaw_ref); the inner loop
    tracks the attitude references through first-order dynamics with time
    constant ``attitude_tau``. Translation integrates
    m * dv = R(attitude) (0, 0, thrust) - (0, 0, m g) + wind over ``substeps``
    internal Euler steps for inner-loop stability.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    thrust = float(np.clip(command[0], params.thrust_min, params.thrust_max))
    att_ref = np.array([
        float(np.clip(command[1], -params.tilt_max, params.tilt_max)),
        float(np.clip(command[2], -params.tilt_max, params.tilt_max)),
        float(command[3]),
    ])
    wind = np.asarray(wind, dtype=float)
    gravity = np.array([0.0, 0.0, params.mass * params.gravity])

    pos = state.position.copy()
    vel = state.velocity.copy()
    att = state.attitude.copy()
    att_rate = state.angular_velocity.copy()
    h = dt / params.substeps
    for _ in range(params.substeps):
        att_rate = wrap_angle(att_ref - att) / params.attitude_tau
        force = rotation_matrix(*att) @ np.array([0.0, 0.0, thrust]) - gravity + wind
        pos = pos + h * vel
        vel = vel + h * force / params.mass
        att = wrap_angle(att + h * att_rate)
    return QuadrotorState(position=pos, velocity=vel, attitude=att, angular_velocity=att_rate)


# ---------------------------------------------------------------------------
# linear verification plant
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LtiPlant:
    """Discrete plant x+ = A x + B u, y = C x."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", np.atleast_2d(np.asarray(self.A, dtype=float)))
        object.__setattr__(self, "B", np.atleast_2d(np.asarray(self.B, dtype=float)))
        object.__setattr__(self, "C", np.atleast_2d(np.asarray(self.C, dtype=float)))

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    @property
    def output_dim(self) -> int:
        return self.C.shape[0]

    def step(self, x, u) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=float) + self.B @ np.atleast_1d(np.asarray(u, dtype=float))

    def output(self, x) -> np.ndarray:
        return self.C @ np.asarray(x, dtype=float)


def lti_step(plant: LtiPlant, state, control) -> np.ndarray:
    return plant.step(state, control)


def double_integrator(dt: float) -> LtiPlant:
    return LtiPlant(A=[[1.0, dt], [0.0, 1.0]], B=[[0.0], [dt]], C=[[1.0, 0.0]])


def add_measurement_noise(output, stds, rng: np.random.Generator) -> np.ndarray:
    """Per-channel Gaussian perturbation; zero stds reproduce the input exactly.

    The random stream is consumed even for zero stds so noise-free and noisy
    configurations stay stream-aligned.
    """
    output = np.asarray(output, dtype=float)
    stds = np.broadcast_to(np.asarray(stds, dtype=float), output.shape)
    return output + rng.normal(0.0, 1.0, size=output.shape) * stds
