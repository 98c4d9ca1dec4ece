"""Fixed-step integration of the coupled body + lag ODE and target extraction.

The integrator advances the stacked state [q; qdot; xi] with classical RK4,
driving the actuated joints with PD tracking of sinusoidal references. At a
configurable decimation it extracts the aerodynamic generalized force by
inverse dynamics: every non-aero term of the manipulator equation is
evaluated with the same compiled tapes the simulator integrates with, so the
residual isolates the aero contribution to rounding error.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import multibody as mb

__all__ = [
    "SimError", "DivergenceError", "JointWave", "SimConfig", "TrainingSample",
    "RunResult", "forward_dynamics", "step_rk4", "pd_tracking_torque",
    "make_reference", "default_flapping_trajectory", "extract_training_sample",
    "run_experiment",
]

DEFAULT_KP = 0.5     # N*m/rad, sized for gram-scale wing joints under aero load
DEFAULT_KD = 0.003   # N*m*s/rad


class SimError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Integration produced a non-finite state."""

    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} at t={t:.6g} s")
        self.t = t


@dataclass(frozen=True)
class JointWave:
    """Sinusoidal joint reference: amplitude*sin(2*pi*f*t + phase)."""
    amplitude: float = 0.0   # rad
    frequency: float = 0.0   # Hz
    phase: float = 0.0       # rad

    def angle(self, t):
        return self.amplitude * math.sin(2.0 * math.pi * self.frequency * t + self.phase)

    def rate(self, t):
        w = 2.0 * math.pi * self.frequency
        return self.amplitude * w * math.cos(w * t + self.phase)


@dataclass
class SimConfig:
    dt: float = 1e-4
    duration: float = 0.2
    joint_trajectory: dict = field(default_factory=dict)  # dof name -> JointWave
    kp: float = DEFAULT_KP
    kd: float = DEFAULT_KD
    sample_stride: int = 100
    seed: int = 0
    aero_enabled: bool = True
    damping_enabled: bool = True
    accel_mode: str = "model"      # "model" | "fd" (see extract notes)
    q0: np.ndarray = None
    qdot0: np.ndarray = None

    def validate(self, terms=None):
        if not (self.dt >= 0.0 and math.isfinite(self.dt)):
            raise SimError("dt must be a finite, non-negative number")
        if self.duration < 0.0:
            raise SimError("duration must be >= 0")
        if int(self.sample_stride) != self.sample_stride or self.sample_stride < 1:
            raise SimError("sample_stride must be an integer >= 1")
        if self.accel_mode not in ("model", "fd"):
            raise SimError(f"unknown accel_mode {self.accel_mode!r}")
        if self.dt > 0.0:
            # keep the drive far below Nyquist so the fixed step resolves it
            f_max = 1.0 / (200.0 * self.dt)
            for name, wave in self.joint_trajectory.items():
                if wave.frequency > f_max:
                    raise SimError(
                        f"joint {name!r} reference at {wave.frequency} Hz exceeds "
                        f"1/100 of the Nyquist rate ({f_max} Hz) for dt={self.dt}")
        if terms is not None:
            unknown = set(self.joint_trajectory) - set(terms.model.actuated_names)
            if unknown:
                raise SimError(f"joint_trajectory names {sorted(unknown)} are not "
                               "actuated dofs")


@dataclass
class TrainingSample:
    """One inverse-dynamics training pair."""
    x: np.ndarray    # [q; qdot], (2 n_q,)
    a: np.ndarray    # measured generalized aero force, (n_q,)
    t: float


@dataclass
class RunResult:
    times: np.ndarray        # (n_steps,), t_k = k*dt
    states: np.ndarray       # (n_steps, 2 n_q), state after step k
    samples: list            # decimated TrainingSample stream
    applied: np.ndarray      # aero generalized force applied at each sample, (m, n_q)
    config: SimConfig
    n_q: int


def default_flapping_trajectory(terms, amplitude=0.5, frequency=6.0):
    """Symmetric flap/fold references for every actuated joint.

    Fold joints run at reduced amplitude a quarter cycle behind the flap
    stroke; left and right get identical waves, which is mirror-symmetric
    for mirrored joint axes.
    """
    waves = {}
    for name in terms.model.actuated_names:
        if "fold" in name:
            waves[name] = JointWave(0.6 * amplitude, frequency, -math.pi / 2)
        else:
            waves[name] = JointWave(amplitude, frequency, 0.0)
    return waves


def make_reference(terms, joint_trajectory):
    """Reference angle/rate vectors over the actuated dofs as a function of t."""
    act = terms.model.actuated_names
    waves = [joint_trajectory.get(name) for name in act]

    def reference(t):
        ang = np.array([w.angle(t) if w else 0.0 for w in waves])
        rate = np.array([w.rate(t) if w else 0.0 for w in waves])
        return ang, rate

    return reference


def pd_tracking_torque(q, qdot, n_a, ref_angles, ref_rates, kp, kd):
    """u1 = kp (ref - q_a) + kd (refdot - qdot_a) on the actuated dofs.

    The actuated coordinates sit at the tail of q by construction.
    """
    if n_a == 0:
        return np.zeros(0)
    qa = q[len(q) - n_a:]
    qda = qdot[len(qdot) - n_a:]
    return kp * (ref_angles - qa) + kd * (ref_rates - qda)


def forward_dynamics(terms, ground_truth, state, xi, u1, damping=None):
    """Accelerations and lag rates at one state.

    Solves D qddot = B1 u1 + B2 u2 - C qdot - G - damping*qdot with a
    Cholesky factorization of D. Returns (qddot, xidot, aero_output);
    aero_output is None when no ground truth is attached.
    """
    out = mb.eval_terms(terms, state)
    qdot = np.asarray(state.qdot, dtype=float)
    rhs = out["B1"] @ np.asarray(u1, dtype=float) - out["C"] @ qdot - out["G"]
    if damping is not None:
        rhs = rhs - damping * qdot
    forces = None
    if ground_truth is not None:
        forces, xidot = ground_truth.evaluate(out, qdot, xi)
        rhs = rhs + forces.generalized
    else:
        xidot = np.zeros_like(np.asarray(xi, dtype=float))
    try:
        factor = cho_factor(out["D"], lower=True)
        qddot = cho_solve(factor, rhs)
    except np.linalg.LinAlgError as exc:
        raise mb.SingularityError(
            f"mass matrix not positive definite at t={state.t:.6g}: "
            f"q={np.array2string(state.q, precision=6)}") from exc
    except ValueError as exc:
        # scipy's finite-input check: a non-finite force or state reached the solve
        raise DivergenceError(f"non-finite dynamics input ({exc})", t=state.t) from exc
    return qddot, xidot, forces


def step_rk4(terms, ground_truth, state, xi, u1_fn, dt, damping=None):
    """One classical RK4 step of the stacked ODE [qdot; qddot; xidot].

    ``u1_fn(t, q, qdot) -> u1`` runs inside every stage, so feedback laws
    see the substep states and times.
    """
    if dt == 0.0:
        return state, np.array(xi, dtype=float, copy=True)

    def rates(t, q, qdot, xi_c):
        u1 = u1_fn(t, q, qdot)
        qdd, xid, _ = forward_dynamics(
            terms, ground_truth, mb.VehicleState(q=q, qdot=qdot, t=t),
            xi_c, u1, damping)
        return qdot, qdd, xid

    t0, q0, qd0, xi0 = state.t, state.q, state.qdot, np.asarray(xi, dtype=float)
    k1q, k1v, k1x = rates(t0, q0, qd0, xi0)
    k2q, k2v, k2x = rates(t0 + 0.5 * dt, q0 + 0.5 * dt * k1q,
                          qd0 + 0.5 * dt * k1v, xi0 + 0.5 * dt * k1x)
    k3q, k3v, k3x = rates(t0 + 0.5 * dt, q0 + 0.5 * dt * k2q,
                          qd0 + 0.5 * dt * k2v, xi0 + 0.5 * dt * k2x)
    k4q, k4v, k4x = rates(t0 + dt, q0 + dt * k3q, qd0 + dt * k3v, xi0 + dt * k3x)
    q1 = q0 + dt / 6.0 * (k1q + 2.0 * k2q + 2.0 * k3q + k4q)
    qd1 = qd0 + dt / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v)
    xi1 = xi0 + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
    if not (np.isfinite(q1).all() and np.isfinite(qd1).all()
            and np.isfinite(xi1).all()):
        raise DivergenceError("integration produced a non-finite state", t=t0 + dt)
    return mb.VehicleState(q=q1, qdot=qd1, t=t0 + dt), xi1


def extract_training_sample(terms, state, qddot, u1, damping=None):
    """Aerodynamic generalized force by inverse dynamics.

    a = D qddot + C qdot + G + damping*qdot - B1 u1. With qddot taken from
    the model at the same state this closes to the applied aero force up to
    the linear-solve rounding; damping sits on the right-hand side so the
    residual isolates aerodynamics only.
    """
    out = mb.eval_terms(terms, state)
    qdot = np.asarray(state.qdot, dtype=float)
    a = out["D"] @ np.asarray(qddot, dtype=float) + out["C"] @ qdot + out["G"]
    if damping is not None:
        a = a + damping * qdot
    a = a - out["B1"] @ np.asarray(u1, dtype=float)
    return TrainingSample(x=np.concatenate([state.q, qdot]), a=a, t=state.t)


def run_experiment(terms, config, ground_truth=None):
    """Integrate one run and extract the decimated training-sample stream.

    ``ground_truth`` defaults to the model's blade-element aero when enabled
    in the config. Trajectory rows are the post-step states at t = k*dt,
    k = 1..round(duration/dt); samples are taken every ``sample_stride``-th
    step. Deterministic: identical (terms, config) give identical arrays.
    """
    config.validate(terms)
    n_q = terms.n_q
    gt = None
    if config.aero_enabled and terms.n_elements > 0:
        if ground_truth is None:
            from .aero import AeroGroundTruth
            ground_truth = AeroGroundTruth(terms)
        gt = ground_truth
    damping = terms.model.damping_vector() if config.damping_enabled else None

    q = np.zeros(n_q) if config.q0 is None else np.asarray(config.q0, dtype=float)
    qd = np.zeros(n_q) if config.qdot0 is None else np.asarray(config.qdot0, dtype=float)
    if q.shape != (n_q,) or qd.shape != (n_q,):
        raise SimError(f"initial state must have {n_q} coordinates")
    xi = gt.zero_lag_states() if gt is not None else np.zeros((terms.n_elements, 2))
    state = mb.VehicleState(q=q, qdot=qd, t=0.0)

    reference = make_reference(terms, config.joint_trajectory)
    n_a = terms.n_a

    def u1_fn(t, q_c, qd_c):
        ang, rate = reference(t)
        return pd_tracking_torque(q_c, qd_c, n_a, ang, rate, config.kp, config.kd)

    n_steps = int(round(config.duration / config.dt)) if config.dt > 0 else 0
    times = np.empty(n_steps)
    states = np.empty((n_steps, 2 * n_q))
    samples = []
    applied = []
    sampled_points = []   # (step k, state, xi at k) for post-pass extraction

    # blow-ups surface as DivergenceError from the finiteness checks, so
    # the transient overflow warnings on the way there are just noise
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for k in range(1, n_steps + 1):
            state, xi = step_rk4(terms, gt, state, xi, u1_fn, config.dt, damping)
            state = mb.VehicleState(q=state.q, qdot=state.qdot, t=k * config.dt)
            times[k - 1] = state.t
            states[k - 1, :n_q] = state.q
            states[k - 1, n_q:] = state.qdot
            if k % config.sample_stride == 0:
                sampled_points.append((k, state, xi.copy()))

    for k, s, xi_k in sampled_points:
        u1 = u1_fn(s.t, s.q, s.qdot)
        qdd, _, forces = forward_dynamics(terms, gt, s, xi_k, u1, damping)
        if config.accel_mode == "fd":
            # sensing-style acceleration: central difference of the logged
            # rates (one-sided at the ends); closure degrades to O(dt^2)
            if 1 < k < n_steps:
                qdd = (states[k, n_q:] - states[k - 2, n_q:]) / (2.0 * config.dt)
            elif k == 1 and n_steps > 1:
                qdd = (states[1, n_q:] - states[0, n_q:]) / config.dt
            elif k > 1:
                qdd = (states[k - 1, n_q:] - states[k - 2, n_q:]) / config.dt
        samples.append(extract_training_sample(terms, s, qdd, u1, damping))
        applied.append(forces.generalized if forces is not None else np.zeros(n_q))

    return RunResult(times=times, states=states, samples=samples,
                     applied=np.asarray(applied).reshape(len(samples), n_q),
                     config=config, n_q=n_q)
