"""Blade-element aerodynamic ground truth with two-pole circulation lag.

Each blade element carries two dimensionless lag states (per-element shape
(2,)) that relax toward the quasi-steady angle of attack at rates set by the
local semichord convective time. Forces are quasi-steady lift/drag evaluated
at the lag-corrected effective angle, resolved in the owning wing segment's
frame, and mapped to generalized forces through the stacked position
Jacobian of the quarter-chord points.
"""

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AeroError", "AeroParams", "ElementFlow", "AeroOutput", "AeroGroundTruth",
    "quasi_steady_alpha", "lag_rates", "section_loads",
]

# below this in-plane speed the flow direction is undefined; treated as rest
V_EPS = 1e-9


class AeroError(ValueError):
    pass


@dataclass(frozen=True)
class AeroParams:
    """Constants of the blade-element + lag model.

    The lag gains/poles are the classical flat-plate two-pole fit expressed
    in semichord time; they are configuration, not identified values.
    """
    rho: float = 1.225            # air density, kg/m^3
    cl_alpha: float = 2.0 * math.pi   # lift slope, 1/rad
    alpha_max: float = 0.35      # stall clamp on angle of attack, rad
    cd0: float = 0.02            # profile drag
    k_d: float = 0.05            # induced-drag factor: CD = cd0 + k_d CL^2
    a1: float = 0.165            # lag gains (dimensionless)
    a2: float = 0.335
    b1: float = 0.0455           # lag poles (per semichord)
    b2: float = 0.3

    def __post_init__(self):
        if self.rho <= 0.0:
            raise AeroError("air density must be positive")
        if self.alpha_max <= 0.0:
            raise AeroError("stall clamp alpha_max must be positive")
        if self.b1 <= 0.0 or self.b2 <= 0.0:
            raise AeroError("lag poles b1, b2 must be positive (stable lag)")
        if self.a1 < 0.0 or self.a2 < 0.0 or self.a1 + self.a2 > 1.0:
            raise AeroError("lag gains must satisfy a1, a2 >= 0 and a1 + a2 <= 1")

    @classmethod
    def from_model(cls, model):
        """Read the aero constants block of a model description (or defaults)."""
        block = dict(getattr(model, "aero", None) or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(block) - known)
        if unknown:
            raise AeroError(f"unknown aero constants {unknown}; known: {sorted(known)}")
        return cls(**{k: float(v) for k, v in block.items()})


@dataclass
class ElementFlow:
    """Per-element in-plane flow state, resolved in each segment's frame."""
    w_x: np.ndarray       # element velocity along local chord, (N,)
    w_z: np.ndarray       # element velocity along local normal, (N,)
    v_plane: np.ndarray   # in-plane speed hypot(w_x, w_z), (N,)
    alpha_qs: np.ndarray  # quasi-steady angle of attack, (N,); 0 when at rest
    rel: np.ndarray       # owning segment's world orientation per element, (N, 3, 3)


@dataclass
class AeroOutput:
    """Element forces plus their generalized image."""
    force_world: np.ndarray   # per-element aero force, world frame, (N, 3)
    generalized: np.ndarray   # Pjac^T times the stacked element forces, (n_q,)
    lift: np.ndarray          # signed in-plane magnitudes, (N,)
    drag: np.ndarray
    alpha_eff: np.ndarray     # lag-corrected, clamped angle of attack, (N,)
    flow: ElementFlow


def quasi_steady_alpha(w_x, w_z):
    """Angle of attack and in-plane speed from element velocity components.

    Still air: the oncoming flow is minus the element velocity. alpha is
    positive when the element descends through the air (flow from below),
    so pure descent gives alpha = +pi/2. Below V_EPS the direction is
    meaningless and alpha is defined as 0.
    """
    w_x = np.asarray(w_x, dtype=float)
    w_z = np.asarray(w_z, dtype=float)
    v_plane = np.hypot(w_x, w_z)
    alpha = np.where(v_plane < V_EPS, 0.0, np.arctan2(-w_z, w_x))
    return alpha, v_plane


def lag_rates(params, chord, v_plane, alpha_qs, xi):
    """Time derivative of the lag states.

    xidot_j = -b_j (2|V|/c) xi_j + A_j (2|V|/c) alpha_qs: linear in xi with
    stable poles, driven by the quasi-steady angle; at rest (|V| = 0) the
    states freeze.
    """
    xi = np.asarray(xi, dtype=float)
    srate = 2.0 * np.asarray(v_plane, dtype=float) / np.asarray(chord, dtype=float)
    drive = srate * np.asarray(alpha_qs, dtype=float)
    return np.stack([
        -params.b1 * srate * xi[..., 0] + params.a1 * drive,
        -params.b2 * srate * xi[..., 1] + params.a2 * drive,
    ], axis=-1)


def section_loads(params, area, w_x, w_z, v_plane, alpha_qs, xi):
    """In-plane force components per element in its segment frame.

    The lag states remove part of the circulation: alpha_eff =
    alpha_qs - b1 xi1 - b2 xi2, clamped at the stall limit; a frozen-alpha
    step therefore settles at the (1 - a1 - a2) fraction of its quasi-steady
    lift. Drag uses the quasi-steady (clamped) lift coefficient so that the
    whole output stays affine in xi. Lift is perpendicular and drag parallel
    to the local airspeed.

    Returns (f_x, f_z, lift, drag, alpha_eff).
    """
    xi = np.asarray(xi, dtype=float)
    alpha_eff = np.clip(alpha_qs - params.b1 * xi[..., 0] - params.b2 * xi[..., 1],
                        -params.alpha_max, params.alpha_max)
    cl = params.cl_alpha * alpha_eff
    cl_qs = params.cl_alpha * np.clip(alpha_qs, -params.alpha_max, params.alpha_max)
    cd = params.cd0 + params.k_d * cl_qs * cl_qs
    qdyn = 0.5 * params.rho * v_plane * v_plane * area
    live = v_plane >= V_EPS
    inv = np.where(live, 1.0 / np.where(live, v_plane, 1.0), 0.0)
    lift = np.where(live, qdyn * cl, 0.0)
    drag = np.where(live, qdyn * cd, 0.0)
    # unit airspeed in the chord plane; lift is the airspeed rotated -90deg
    # about the span axis so positive alpha pushes along +normal
    f_x = -w_x * inv
    f_z = -w_z * inv
    force_x = drag * f_x + lift * f_z
    force_z = drag * f_z - lift * f_x
    return force_x, force_z, lift, drag, alpha_eff


class AeroGroundTruth:
    """Vectorized blade-element model bound to one vehicle's dynamics terms."""

    def __init__(self, terms, params=None):
        if terms.n_elements == 0:
            raise AeroError(f"model {terms.model.name!r} has no wing segments")
        self.terms = terms
        self.params = params if params is not None else AeroParams.from_model(terms.model)
        self.n_elements = terms.n_elements
        self.chord = terms.elem_chord
        self.area = terms.elem_area

    def zero_lag_states(self):
        return np.zeros((self.n_elements, 2))

    def element_kinematics(self, out, qdot):
        """Resolve every element's velocity in its segment frame.

        ``out`` is an evaluated dynamics-terms dict (needs Pjac and Rel).
        """
        qdot = np.asarray(qdot, dtype=float)
        vel = (out["Pjac"] @ qdot).reshape(self.n_elements, 3)
        rel = out["Rel"][self.terms.elem_segment]
        w = np.einsum("nij,ni->nj", rel, vel)   # per element: rel^T @ v_world
        alpha, v_plane = quasi_steady_alpha(w[:, 0], w[:, 2])
        return ElementFlow(w_x=w[:, 0], w_z=w[:, 2], v_plane=v_plane,
                           alpha_qs=alpha, rel=rel)

    def lag_dynamics(self, flow, xi):
        return lag_rates(self.params, self.chord, flow.v_plane, flow.alpha_qs,
                         np.reshape(xi, (self.n_elements, 2)))

    def element_forces(self, out, flow, xi):
        xi = np.reshape(np.asarray(xi, dtype=float), (self.n_elements, 2))
        f_x, f_z, lift, drag, alpha_eff = section_loads(
            self.params, self.area, flow.w_x, flow.w_z, flow.v_plane,
            flow.alpha_qs, xi)
        f_seg = np.stack([f_x, np.zeros_like(f_x), f_z], axis=1)
        f_world = np.einsum("nij,nj->ni", flow.rel, f_seg)
        generalized = out["Pjac"].T @ f_world.ravel()
        return AeroOutput(force_world=f_world, generalized=generalized,
                          lift=lift, drag=drag, alpha_eff=alpha_eff, flow=flow)

    def evaluate(self, out, qdot, xi):
        """One-call flow + forces + lag rates; returns (AeroOutput, xidot)."""
        flow = self.element_kinematics(out, qdot)
        forces = self.element_forces(out, flow, xi)
        return forces, self.lag_dynamics(flow, xi)
