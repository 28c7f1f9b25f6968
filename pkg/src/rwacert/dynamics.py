"""Discrete-time spacecraft dynamics, an RK4 oracle, and trajectory simulation.

The in-plane relative motion of the deputy spacecraft around the chief is
linear, so holding the thrust constant over one time step gives an exact
affine update ``s' = A s + B u``. ``cw_step`` evaluates that update via the
closed-form expressions; ``affine_step`` builds the same map as explicit
matrices for the verifier. ``rk4_reference`` integrates the underlying ODE
numerically and is used only as an independent cross-check, never in the
synthesis or verification pipeline.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import geometry, nn
from .geometry import RwaTask
from .nn import Mlp

__all__ = [
    "State",
    "ControlInput",
    "SystemParams",
    "AffineStep",
    "Plant",
    "Outcome",
    "Trajectory",
    "BatchStats",
    "clip_thrust",
    "cw_step",
    "affine_step",
    "rk4_reference",
    "spacecraft_plant",
    "double_integrator_plant",
    "as_controller",
    "simulate",
    "simulate_batch",
]


@dataclass(frozen=True)
class State:
    """Planar spacecraft state: position (m) and velocity (m/s)."""

    x: float
    y: float
    xdot: float
    ydot: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.xdot, self.ydot)):
            raise ValueError("state components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.xdot, self.ydot])

    @staticmethod
    def from_array(vec) -> State:
        x, y, xdot, ydot = np.asarray(vec, dtype=np.float64)
        return State(float(x), float(y), float(xdot), float(ydot))


@dataclass(frozen=True)
class ControlInput:
    """Thrust forces (N) along x and y."""

    fx: float
    fy: float

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy])

    @staticmethod
    def from_array(vec) -> ControlInput:
        fx, fy = np.asarray(vec, dtype=np.float64)
        return ControlInput(float(fx), float(fy))


@dataclass(frozen=True)
class SystemParams:
    """Physical constants of the docking scenario."""

    m: float = 12.0
    n: float = geometry.MEAN_MOTION
    t_step: float = 1.0
    thrust_limit: float = 1.0

    def __post_init__(self):
        if min(self.m, self.n, self.t_step, self.thrust_limit) <= 0:
            raise ValueError("all system parameters must be positive")


def clip_thrust(u: ControlInput, params: SystemParams) -> ControlInput:
    """Componentwise clamp of the thrust command to the actuator limits."""
    lim = params.thrust_limit
    return ControlInput(
        fx=min(max(u.fx, -lim), lim),
        fy=min(max(u.fy, -lim), lim),
    )


def _trig(params: SystemParams) -> tuple[float, float, float]:
    """cos(nT), sin(nT) and a cancellation-free 1 - cos(nT)."""
    nt = params.n * params.t_step
    # 1 - cos(nt) underflows badly for nt ~ 1e-3; 2 sin^2(nt/2) does not.
    return math.cos(nt), math.sin(nt), 2.0 * math.sin(0.5 * nt) ** 2


def cw_step(s: State, u: ControlInput, params: SystemParams) -> State:
    """Exact next state after one step of constant (already clipped) thrust."""
    m, n, t = params.m, params.n, params.t_step
    c, sn, omc = _trig(params)  # omc = 1 - cos(nT)
    ax, ay = u.fx / m, u.fy / m
    x, y, xd, yd = s.x, s.y, s.xdot, s.ydot
    x1 = (
        (4.0 - 3.0 * c) * x
        + (sn / n) * xd
        + (2.0 * omc / n) * yd
        + (omc / n**2) * ax
        + (2.0 * t / n - 2.0 * sn / n**2) * ay
    )
    y1 = (
        6.0 * (sn - n * t) * x
        + y
        - (2.0 * omc / n) * xd
        + ((4.0 * sn - 3.0 * n * t) / n) * yd
        + (-2.0 * t / n + 2.0 * sn / n**2) * ax
        + (4.0 * omc / n**2 - 1.5 * t**2) * ay
    )
    xd1 = (
        3.0 * n * sn * x
        + c * xd
        + 2.0 * sn * yd
        + (sn / n) * ax
        + (2.0 * omc / n) * ay
    )
    yd1 = (
        -6.0 * n * omc * x
        - 2.0 * sn * xd
        + (4.0 * c - 3.0) * yd
        - (2.0 * omc / n) * ax
        + (4.0 * sn / n - 3.0 * t) * ay
    )
    return State(x1, y1, xd1, yd1)


@dataclass(frozen=True, eq=False)
class AffineStep:
    """One-step map s' = A s + B u + c. c is zero for these dynamics but kept
    so other affine plants fit the same interface."""

    a_matrix: np.ndarray
    b_matrix: np.ndarray
    c_vector: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a_matrix, dtype=np.float64)
        b = np.asarray(self.b_matrix, dtype=np.float64)
        c = np.asarray(self.c_vector, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("A must be square")
        if b.ndim != 2 or b.shape[0] != a.shape[0]:
            raise ValueError("B rows must match state dimension")
        if c.shape != (a.shape[0],):
            raise ValueError("c must be a state-dimension vector")
        for arr in (a, b, c):
            arr.flags.writeable = False
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "b_matrix", b)
        object.__setattr__(self, "c_vector", c)

    @property
    def state_dim(self) -> int:
        return self.a_matrix.shape[0]

    @property
    def control_dim(self) -> int:
        return self.b_matrix.shape[1]

    def apply(self, s, u) -> np.ndarray:
        """Apply the map to one state/control pair or to (N, .) batches."""
        sv = np.asarray(s, dtype=np.float64)
        uv = np.asarray(u, dtype=np.float64)
        return sv @ self.a_matrix.T + uv @ self.b_matrix.T + self.c_vector


def affine_step(params: SystemParams) -> AffineStep:
    """The exact one-step map of the in-plane dynamics as matrices."""
    m, n, t = params.m, params.n, params.t_step
    c, sn, omc = _trig(params)
    a = np.array(
        [
            [4.0 - 3.0 * c, 0.0, sn / n, 2.0 * omc / n],
            [6.0 * (sn - n * t), 1.0, -2.0 * omc / n, (4.0 * sn - 3.0 * n * t) / n],
            [3.0 * n * sn, 0.0, c, 2.0 * sn],
            [-6.0 * n * omc, 0.0, -2.0 * sn, 4.0 * c - 3.0],
        ]
    )
    b = np.array(
        [
            [omc / (m * n**2), 2.0 * t / (m * n) - 2.0 * sn / (m * n**2)],
            [-2.0 * t / (m * n) + 2.0 * sn / (m * n**2), 4.0 * omc / (m * n**2) - 1.5 * t**2 / m],
            [sn / (m * n), 2.0 * omc / (m * n)],
            [-2.0 * omc / (m * n), 4.0 * sn / (m * n) - 3.0 * t / m],
        ]
    )
    return AffineStep(a, b, np.zeros(4))


def _ode_rhs(states: np.ndarray, accel: np.ndarray, n: float) -> np.ndarray:
    """Right-hand side of the relative-motion ODE, batched over rows."""
    x = states[:, 0]
    xd = states[:, 2]
    yd = states[:, 3]
    out = np.empty_like(states)
    out[:, 0] = xd
    out[:, 1] = yd
    out[:, 2] = 2.0 * n * yd + 3.0 * n**2 * x + accel[:, 0]
    out[:, 3] = -2.0 * n * xd + accel[:, 1]
    return out


def rk4_reference_batch(
    states: np.ndarray, controls: np.ndarray, params: SystemParams, substeps: int
) -> np.ndarray:
    """Classical RK4 integration of the ODE over one time step, batched."""
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    s = np.array(states, dtype=np.float64, ndmin=2)
    accel = np.array(controls, dtype=np.float64, ndmin=2) / params.m
    h = params.t_step / substeps
    for _ in range(substeps):
        k1 = _ode_rhs(s, accel, params.n)
        k2 = _ode_rhs(s + 0.5 * h * k1, accel, params.n)
        k3 = _ode_rhs(s + 0.5 * h * k2, accel, params.n)
        k4 = _ode_rhs(s + h * k3, accel, params.n)
        s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return s


def rk4_reference(s: State, u: ControlInput, params: SystemParams, substeps: int) -> State:
    """Independent numerical oracle for one step of constant-thrust motion."""
    out = rk4_reference_batch(s.as_array()[None, :], u.as_array()[None, :], params, substeps)
    return State.from_array(out[0])


# ---------------------------------------------------------------------------
# Plants
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Plant:
    """An affine discrete-time plant with symmetric componentwise input clipping."""

    step: AffineStep
    control_limit: float

    @property
    def state_dim(self) -> int:
        return self.step.state_dim

    @property
    def control_dim(self) -> int:
        return self.step.control_dim

    def clip(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, -self.control_limit, self.control_limit)

    def next_state(self, s: np.ndarray, u_raw: np.ndarray) -> np.ndarray:
        return self.step.apply(s, self.clip(u_raw))


def spacecraft_plant(params: SystemParams | None = None) -> Plant:
    params = params or SystemParams()
    return Plant(affine_step(params), params.thrust_limit)


def double_integrator_plant(
    t_step: float = 1.0, mass: float = 1.0, accel_limit: float = 1.0
) -> Plant:
    """2-state double integrator (p, v) with exact zero-order-hold discretization."""
    if min(t_step, mass, accel_limit) <= 0:
        raise ValueError("plant parameters must be positive")
    a = np.array([[1.0, t_step], [0.0, 1.0]])
    b = np.array([[0.5 * t_step**2 / mass], [t_step / mass]])
    return Plant(AffineStep(a, b, np.zeros(2)), accel_limit)


def as_controller(controller) -> Callable[[np.ndarray], np.ndarray]:
    """Adapt an ``Mlp`` or a callable into a batched state -> control map."""
    if isinstance(controller, Mlp):
        return lambda s: nn.forward(controller, s)
    if callable(controller):
        return controller
    raise TypeError(f"controller must be an Mlp or callable, got {type(controller)!r}")


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


class Outcome(enum.Enum):
    DOCKED = "docked"
    UNSAFE = "unsafe"
    TRUNCATED = "truncated"


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A rollout: states has one more row than inputs."""

    states: np.ndarray
    inputs: np.ndarray
    outcome: Outcome

    def __post_init__(self):
        if self.states.shape[0] != self.inputs.shape[0] + 1:
            raise ValueError("states must have exactly one more row than inputs")

    @property
    def steps(self) -> int:
        return self.inputs.shape[0]


def simulate(
    controller,
    s0,
    task: RwaTask,
    plant: Plant,
    max_steps: int = 2000,
) -> Trajectory:
    """Roll the closed loop until goal entry, unsafe entry, or the step budget.

    The raw controller output is clipped before it reaches the plant. The
    outcome classification is exhaustive: exactly one of docked / unsafe /
    truncated.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    ctrl = as_controller(controller)
    s = np.asarray(s0.as_array() if isinstance(s0, State) else s0, dtype=np.float64)
    states = [s.copy()]
    inputs: list[np.ndarray] = []
    if geometry.region_contains(task.goal, s):
        return Trajectory(np.array(states), np.zeros((0, plant.control_dim)), Outcome.DOCKED)
    if geometry.region_contains(task.unsafe, s):
        return Trajectory(np.array(states), np.zeros((0, plant.control_dim)), Outcome.UNSAFE)
    outcome = Outcome.TRUNCATED
    for _ in range(max_steps):
        u = plant.clip(np.asarray(ctrl(s), dtype=np.float64).reshape(plant.control_dim))
        s = plant.step.apply(s, u)
        states.append(s.copy())
        inputs.append(u)
        if geometry.region_contains(task.unsafe, s):
            outcome = Outcome.UNSAFE
            break
        if geometry.region_contains(task.goal, s):
            outcome = Outcome.DOCKED
            break
    return Trajectory(np.array(states), np.array(inputs), outcome)


@dataclass(frozen=True)
class BatchStats:
    """Aggregate closed-loop statistics over sampled starts."""

    trials: int
    safety_success_pct: float
    docking_success_pct: float
    mean_docking_steps: float  # NaN when nothing docked
    outcome_counts: dict

    def as_dict(self) -> dict:
        return {
            "trials": self.trials,
            "safety_success_pct": self.safety_success_pct,
            "docking_success_pct": self.docking_success_pct,
            "mean_docking_steps": self.mean_docking_steps,
            **{f"n_{k}": v for k, v in self.outcome_counts.items()},
        }


def simulate_batch(
    controller,
    task: RwaTask,
    plant: Plant,
    trials: int,
    max_steps: int = 2000,
    seed: int = 0,
) -> BatchStats:
    """Run ``trials`` rollouts from starts sampled uniformly in the initial set.

    All trials advance in lockstep on one array, so the statistics depend only
    on the seed, not on any worker or chunking configuration.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    ctrl = as_controller(controller)
    starts = geometry.sample_region(task.initial, task.domain, trials, seed)
    s = starts.copy()
    active = np.ones(trials, dtype=bool)
    docked = np.zeros(trials, dtype=bool)
    unsafe = np.zeros(trials, dtype=bool)
    dock_steps = np.zeros(trials, dtype=np.int64)

    goal0 = geometry.region_contains(task.goal, s)
    unsafe0 = geometry.region_contains(task.unsafe, s) & ~goal0
    docked |= goal0
    unsafe |= unsafe0
    active &= ~(goal0 | unsafe0)

    for step in range(1, max_steps + 1):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        u = plant.clip(np.asarray(ctrl(s[idx]), dtype=np.float64))
        s[idx] = plant.step.apply(s[idx], u)
        hit_unsafe = geometry.region_contains(task.unsafe, s[idx])
        hit_goal = geometry.region_contains(task.goal, s[idx]) & ~hit_unsafe
        unsafe[idx[hit_unsafe]] = True
        docked[idx[hit_goal]] = True
        dock_steps[idx[hit_goal]] = step
        active[idx[hit_unsafe | hit_goal]] = False

    n_docked = int(docked.sum())
    n_unsafe = int(unsafe.sum())
    n_trunc = trials - n_docked - n_unsafe
    return BatchStats(
        trials=trials,
        safety_success_pct=100.0 * (trials - n_unsafe) / trials,
        docking_success_pct=100.0 * n_docked / trials,
        mean_docking_steps=float(dock_steps[docked].mean()) if n_docked else float("nan"),
        outcome_counts={"docked": n_docked, "unsafe": n_unsafe, "truncated": n_trunc},
    )
