"""Articulated rigid-body models and Euler-Lagrange dynamics derivation.

Models are declarative YAML files (``format: 1``): a floating base with a
configurable subset of [x, y, z, yaw, pitch, roll] passive coordinates, a
tree of revolute joints, per-link mass properties, and optional wing
segments whose quarter-chord points feed the aerodynamic mapping.

``derive_dynamics`` builds the Lagrangian symbolically on an expression
graph, forms the manipulator equation

    D(q) q̈ + C(q, q̇) q̇ + G(q) = B1 u1 + (external generalized forces)

with C assembled from the Christoffel symbols of D, and compiles everything
(including the quarter-chord stack P(q), its Jacobian, and per-segment
orientation matrices) into one evaluation tape.
"""

import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from . import exprgraph as eg
from .exprgraph import Expr, ExprGraph, cse, differentiate
from .tape import compile_tape

__all__ = [
    "ModelError", "SingularityError", "MultibodyModel", "VehicleState",
    "DynamicsTerms", "load_model", "load_model_dict", "bundled_model_names",
    "derive_dynamics", "eval_terms", "quarter_chord_points", "total_energy",
    "wrap_angles",
]

BASE_DOF_NAMES = ("x", "y", "z", "yaw", "pitch", "roll")
PITCH_LIMIT = math.pi / 2 - 1e-3


class ModelError(ValueError):
    """Malformed or physically invalid model description."""


class SingularityError(ValueError):
    """Configuration too close to the Euler-angle singularity |pitch| = pi/2."""


@dataclass
class Link:
    name: str
    parent: str
    mass: float
    com: np.ndarray
    inertia: np.ndarray          # 3x3 about the COM, link frame
    joint_name: str = ""         # empty: rigidly attached to parent frame
    axis: np.ndarray = None
    origin: np.ndarray = None
    actuated: bool = True


@dataclass
class WingSegment:
    parent: str
    chord: float
    span: float
    n_elem: int
    qc_root: np.ndarray          # root quarter-chord point, parent link frame
    span_dir: np.ndarray
    chord_dir: np.ndarray


@dataclass
class MultibodyModel:
    name: str
    gravity: float
    base_dofs: tuple
    links: list
    wing_segments: list
    damping: dict                # dof name -> viscous coefficient
    aero: dict = None            # raw constants block, parsed by flapkit.aero
    source_text: str = ""        # canonical dump, used as derivation cache key

    @property
    def joint_names(self):
        return [lk.joint_name for lk in self.links if lk.joint_name]

    @property
    def q_names(self):
        passive = [lk.joint_name for lk in self.links
                   if lk.joint_name and not lk.actuated]
        active = [lk.joint_name for lk in self.links
                  if lk.joint_name and lk.actuated]
        return list(self.base_dofs) + passive + active

    @property
    def actuated_names(self):
        return [lk.joint_name for lk in self.links
                if lk.joint_name and lk.actuated]

    @property
    def n_q(self):
        return len(self.q_names)

    @property
    def n_a(self):
        return len(self.actuated_names)

    @property
    def n_elements(self):
        return sum(seg.n_elem for seg in self.wing_segments)

    def damping_vector(self):
        return np.array([float(self.damping.get(n, 0.0)) for n in self.q_names])


@dataclass
class VehicleState:
    """x = [q; qdot] with angles in radians, wrapped to (-pi, pi]."""
    q: np.ndarray
    qdot: np.ndarray
    t: float = 0.0


def _vec3(raw, what):
    v = np.asarray(raw, dtype=float)
    if v.shape != (3,):
        raise ModelError(f"{what} must be a 3-vector, got {raw!r}")
    return v


def _inertia_matrix(raw, name):
    vals = np.asarray(raw, dtype=float).ravel()
    if vals.size == 3:
        ine = np.diag(vals)
    elif vals.size == 6:
        xx, yy, zz, xy, xz, yz = vals
        ine = np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])
    elif vals.size == 9:
        ine = vals.reshape(3, 3)
    else:
        raise ModelError(f"link {name!r}: inertia needs 3, 6, or 9 numbers")
    if not np.allclose(ine, ine.T, atol=1e-12):
        raise ModelError(f"link {name!r}: inertia tensor not symmetric")
    w = np.linalg.eigvalsh(ine)
    if w.min() < -1e-12 * max(1.0, w.max()):
        raise ModelError(f"link {name!r}: inertia tensor not positive semidefinite")
    return 0.5 * (ine + ine.T)


def load_model_dict(data, name="<dict>"):
    """Validate a parsed model description and build a MultibodyModel."""
    if not isinstance(data, dict):
        raise ModelError("model description must be a mapping")
    if data.get("format") != 1:
        raise ModelError(f"unsupported model format {data.get('format')!r} (expected 1)")

    base = data.get("base", {}) or {}
    base_dofs = tuple(base.get("dofs", []) or [])
    for d in base_dofs:
        if d not in BASE_DOF_NAMES:
            raise ModelError(f"unknown base dof {d!r}")
    if len(set(base_dofs)) != len(base_dofs):
        raise ModelError("duplicate base dof")
    canon = tuple(d for d in BASE_DOF_NAMES if d in base_dofs)
    if canon != base_dofs:
        raise ModelError(f"base dofs must be in canonical order {BASE_DOF_NAMES}")

    links = []
    seen_names = {"base"}
    seen_joints = set()
    for raw in data.get("links", []) or []:
        lname = raw.get("name")
        if not lname or lname in seen_names:
            raise ModelError(f"missing or duplicate link name {lname!r}")
        parent = raw.get("parent")
        if parent not in seen_names:
            # parents must precede children: enforces the tree/no-loop invariant
            raise ModelError(
                f"link {lname!r}: parent {parent!r} unknown (links must be "
                "listed parents-first; loops are not representable)")
        mass = float(raw.get("mass", 0.0))
        if mass <= 0.0:
            raise ModelError(f"link {lname!r}: mass must be > 0")
        com = _vec3(raw.get("com", [0, 0, 0]), f"link {lname!r} com")
        inertia = _inertia_matrix(raw.get("inertia", [0, 0, 0]), lname)
        joint = raw.get("joint")
        if joint:
            jname = joint.get("name")
            if not jname or jname in seen_joints or jname in BASE_DOF_NAMES:
                raise ModelError(f"bad joint name {jname!r} on link {lname!r}")
            axis = _vec3(joint.get("axis"), f"joint {jname!r} axis")
            nrm = float(np.linalg.norm(axis))
            if abs(nrm - 1.0) > 1e-6:
                raise ModelError(f"joint {jname!r}: axis must be a unit vector")
            links.append(Link(
                name=lname, parent=parent, mass=mass, com=com, inertia=inertia,
                joint_name=jname, axis=axis / nrm,
                origin=_vec3(joint.get("origin", [0, 0, 0]), f"joint {jname!r} origin"),
                actuated=bool(joint.get("actuated", True))))
            seen_joints.add(jname)
        else:
            links.append(Link(name=lname, parent=parent, mass=mass, com=com,
                              inertia=inertia,
                              origin=_vec3(raw.get("origin", [0, 0, 0]),
                                           f"link {lname!r} origin")))
        seen_names.add(lname)
    if not links:
        raise ModelError("model has no links")

    segments = []
    for raw in data.get("wing_segments", []) or []:
        parent = raw.get("parent")
        if parent not in seen_names or parent == "base":
            raise ModelError(f"wing segment parent {parent!r} is not a link")
        chord = float(raw.get("chord", 0.0))
        span = float(raw.get("span", 0.0))
        n_elem = int(raw.get("n_elem", 4))
        if chord <= 0 or span <= 0 or n_elem < 1:
            raise ModelError("wing segment needs chord > 0, span > 0, n_elem >= 1")
        span_dir = _vec3(raw.get("span_dir", [0, 1, 0]), "span_dir")
        chord_dir = _vec3(raw.get("chord_dir", [1, 0, 0]), "chord_dir")
        span_dir = span_dir / np.linalg.norm(span_dir)
        chord_dir = chord_dir / np.linalg.norm(chord_dir)
        if abs(span_dir @ chord_dir) > 1e-9:
            raise ModelError("span_dir and chord_dir must be orthogonal")
        segments.append(WingSegment(
            parent=parent, chord=chord, span=span, n_elem=n_elem,
            qc_root=_vec3(raw.get("qc_root", [0, 0, 0]), "qc_root"),
            span_dir=span_dir, chord_dir=chord_dir))

    damping = dict(data.get("damping", {}) or {})
    model = MultibodyModel(
        name=str(data.get("name", name)),
        gravity=float(data.get("gravity", 9.81)),
        base_dofs=base_dofs,
        links=links,
        wing_segments=segments,
        damping=damping,
        aero=data.get("aero"),
        source_text=yaml.safe_dump(data, sort_keys=True),
    )
    qn = model.q_names
    if len(set(qn)) != len(qn):
        raise ModelError("coordinate names collide")
    for dof in damping:
        if dof not in qn:
            raise ModelError(f"damping references unknown dof {dof!r}")
    if model.n_q == 0:
        raise ModelError("model has no degrees of freedom")
    return model


def bundled_model_names():
    pkg = resources.files("flapkit.models")
    return sorted(p.name[:-4] for p in pkg.iterdir() if p.name.endswith(".mdl"))


def load_model(spec):
    """Load a model from a file path or a bundled model name."""
    import os
    if isinstance(spec, dict):
        return load_model_dict(spec)
    if os.path.exists(spec):
        with open(spec) as fh:
            data = yaml.safe_load(fh)
        return load_model_dict(data, name=os.path.basename(spec))
    name = spec[:-4] if str(spec).endswith(".mdl") else spec
    candidate = resources.files("flapkit.models") / f"{name}.mdl"
    try:
        found = candidate.is_file()
    except OSError:
        found = False
    if found:
        data = yaml.safe_load(candidate.read_text())
        return load_model_dict(data, name=name)
    raise ModelError(
        f"model {spec!r} not found (no such file; bundled: {bundled_model_names()})")


# -- symbolic kinematics helpers ----------------------------------------------

def _matmul3(a, b):
    return [[sum((a[i][k] * b[k][j] for k in range(1, 3)), a[i][0] * b[0][j])
             for j in range(3)] for i in range(3)]


def _matvec3(a, v):
    return [sum((a[i][k] * v[k] for k in range(1, 3)), a[i][0] * v[0])
            for i in range(3)]


def _transpose3(a):
    return [[a[j][i] for j in range(3)] for i in range(3)]


def _const_vec(g, v):
    return [g.const(float(c)) for c in v]


def _const_mat(g, m):
    return [[g.const(float(m[i][j])) for j in range(3)] for i in range(3)]


def _axis_rotation(g, axis, theta):
    """Rodrigues rotation about a fixed unit axis by a symbolic angle."""
    kx, ky, kz = (float(c) for c in axis)
    c = eg.cos(theta)
    s = eg.sin(theta)
    v = g.const(1.0) - c
    return [
        [c + v * (kx * kx), v * (kx * ky) - s * kz, v * (kx * kz) + s * ky],
        [v * (ky * kx) + s * kz, c + v * (ky * ky), v * (ky * kz) - s * kx],
        [v * (kz * kx) - s * ky, v * (kz * ky) + s * kx, c + v * (kz * kz)],
    ]


def _is_zero(g, e):
    return g.ops[e.idx] == eg.OP_CONST and g.vals[e.idx] == 0.0


def _sum_exprs(g, terms):
    acc = None
    for t in terms:
        if _is_zero(g, t):
            continue
        acc = t if acc is None else acc + t
    return g.const(0.0) if acc is None else acc


def _time_derivative(g, expr, q_syms, dq_syms):
    """d(expr)/dt along the flow: sum_j (d expr / d q_j) * dq_j."""
    grads = differentiate(expr, q_syms)
    return _sum_exprs(g, [gr * dq for gr, dq in zip(grads, dq_syms)
                          if not _is_zero(g, gr)])


def _remap_nested(res, obj):
    if isinstance(obj, Expr):
        return res.remap(obj)
    if isinstance(obj, list):
        return [_remap_nested(res, o) for o in obj]
    if isinstance(obj, dict):
        return {k: _remap_nested(res, v) for k, v in obj.items()}
    return obj


# -- derivation ----------------------------------------------------------------

@dataclass
class DynamicsTerms:
    """Compiled manipulator-equation terms for one model."""
    model: MultibodyModel
    tape: object
    energy_tape: object
    q_names: list
    n_q: int
    n_a: int
    n_elements: int
    elem_segment: np.ndarray     # element index -> wing segment index
    elem_area: np.ndarray
    elem_chord: np.ndarray
    pitch_index: int             # -1 when the model has no pitch dof
    naive_d_nodes: int           # live D(q) DAG nodes, as derived (pre-CSE)
    naive_d_expansion: int       # D(q) node count if fully expanded (no sharing)
    cse_d_nodes: int             # live D(q) subgraph after CSE
    naive_graph: object          # as-derived graph, naive benchmark backend
    naive_outputs: dict          # name -> [Expr] into naive_graph (D, C, G, P, Pjac)
    derivation_seconds: float

    @property
    def input_names(self):
        return list(self.tape.input_names)

    def naive_binding(self, q, qdot):
        """Symbol binding for recursive evaluation of the as-derived graph."""
        x = self.pack_inputs(q, qdot)
        return dict(zip(self.input_names, x.tolist()))

    def pack_inputs(self, q, qdot):
        q = np.asarray(q, dtype=float)
        qdot = np.asarray(qdot, dtype=float)
        if q.shape != (self.n_q,) or qdot.shape != (self.n_q,):
            raise ModelError(f"state must have {self.n_q} coordinates")
        return np.concatenate([q, qdot])


_DERIVE_CACHE = {}


def derive_dynamics(model, use_cache=True):
    """Derive and compile D, C, G, B1, P, dP/dq, and segment orientations.

    The derivation is pure (depends only on the model description), so
    results are memoized on the model's canonical source text.
    """
    key = model.source_text
    if use_cache and key and key in _DERIVE_CACHE:
        return _DERIVE_CACHE[key]

    import time
    t_start = time.perf_counter()

    n_q = model.n_q
    q_names = model.q_names
    g = ExprGraph()
    q_syms = [g.symbol(n) for n in q_names]
    dq_syms = [g.symbol("d" + n) for n in q_names]
    zero = g.const(0.0)
    qmap = {n: s for n, s in zip(q_names, q_syms)}

    def base_coord(name):
        return qmap.get(name, zero)

    # base frame: world position + ZYX Euler orientation (absent dofs pinned 0)
    r_base = _matmul3(
        _axis_rotation(g, (0.0, 0.0, 1.0), base_coord("yaw")),
        _matmul3(_axis_rotation(g, (0.0, 1.0, 0.0), base_coord("pitch")),
                 _axis_rotation(g, (1.0, 0.0, 0.0), base_coord("roll"))))
    p_base = [base_coord("x"), base_coord("y"), base_coord("z")]

    frames = {"base": (r_base, p_base)}
    for lk in model.links:
        r_par, p_par = frames[lk.parent]
        if lk.joint_name:
            p_joint = [p + o for p, o in zip(p_par, _matvec3(r_par, _const_vec(g, lk.origin)))]
            r_joint = _axis_rotation(g, lk.axis, qmap[lk.joint_name])
            frames[lk.name] = (_matmul3(r_par, r_joint), p_joint)
        else:
            p_fixed = [p + o for p, o in zip(p_par, _matvec3(r_par, _const_vec(g, lk.origin)))]
            frames[lk.name] = (r_par, p_fixed)

    # Lagrangian pieces: T from COM velocities and body-frame angular rates,
    # V from COM heights. All velocities come from reverse-mode derivatives
    # of the position-level kinematics contracted with the rate symbols.
    t_terms = []
    v_terms = []
    for lk in model.links:
        r_lk, p_lk = frames[lk.name]
        p_com = [p + o for p, o in zip(p_lk, _matvec3(r_lk, _const_vec(g, lk.com)))]
        v_com = [_time_derivative(g, comp, q_syms, dq_syms) for comp in p_com]
        t_terms.append(g.const(0.5 * lk.mass) *
                       _sum_exprs(g, [v * v for v in v_com]))
        if np.any(lk.inertia):
            r_dot = [[_time_derivative(g, r_lk[i][j], q_syms, dq_syms)
                      for j in range(3)] for i in range(3)]
            omega_hat = _matmul3(_transpose3(r_lk), r_dot)
            w = [omega_hat[2][1], omega_hat[0][2], omega_hat[1][0]]
            rot = []
            for i in range(3):
                for j in range(3):
                    coeff = lk.inertia[i][j]
                    if coeff != 0.0:
                        rot.append(g.const(0.5 * coeff) * (w[i] * w[j]))
            t_terms.append(_sum_exprs(g, rot))
        v_terms.append(g.const(lk.mass * model.gravity) * p_com[2])
    kinetic = _sum_exprs(g, t_terms)
    potential = _sum_exprs(g, v_terms)

    # quarter-chord stack and per-segment orientation matrices
    p_exprs = []
    rel_exprs = []
    elem_segment = []
    elem_area = []
    elem_chord = []
    for si, seg in enumerate(model.wing_segments):
        r_lk, p_lk = frames[seg.parent]
        normal = np.cross(seg.chord_dir, seg.span_dir)
        r_seg = np.column_stack([seg.chord_dir, seg.span_dir, normal])
        rel = _matmul3(r_lk, _const_mat(g, r_seg))
        rel_exprs.extend(rel[i][j] for i in range(3) for j in range(3))
        for e in range(seg.n_elem):
            station = seg.qc_root + (e + 0.5) / seg.n_elem * seg.span * seg.span_dir
            p_w = [p + o for p, o in zip(p_lk, _matvec3(r_lk, _const_vec(g, station)))]
            p_exprs.extend(p_w)
            elem_segment.append(si)
            elem_area.append(seg.chord * seg.span / seg.n_elem)
            elem_chord.append(seg.chord)

    # D rows: Hessian of T in the rates (T is quadratic in them)
    grad_t = differentiate(kinetic, dq_syms)
    d_rows = [differentiate(grad_t[i], dq_syms) for i in range(n_q)]
    naive_d_nodes = len(eg._live_set(g, [e.idx for row in d_rows for e in row]))

    # C from Christoffel symbols of D:
    #   C_ij = sum_k 1/2 (dD_ij/dq_k + dD_ik/dq_j - dD_jk/dq_i) qdot_k
    d_dq = {}
    for i in range(n_q):
        for j in range(i, n_q):
            d_dq[(i, j)] = differentiate(d_rows[i][j], q_syms)

    def ddq(i, j, k):
        return d_dq[(i, j)][k] if i <= j else d_dq[(j, i)][k]

    half = g.const(0.5)
    c_rows = []
    for i in range(n_q):
        row = []
        for j in range(n_q):
            terms = []
            for k in range(n_q):
                gamma = ddq(i, j, k) + ddq(i, k, j) - ddq(j, k, i)
                if not _is_zero(g, gamma):
                    terms.append(half * gamma * dq_syms[k])
            row.append(_sum_exprs(g, terms))
        c_rows.append(row)

    grav = differentiate(potential, q_syms)

    pjac_exprs = []
    for comp in p_exprs:
        pjac_exprs.extend(differentiate(comp, q_syms))

    act = model.actuated_names
    b1_exprs = []
    for n in q_names:
        for a in act:
            b1_exprs.append(g.const(1.0 if n == a else 0.0))

    # raw handles kept for the naive-evaluation benchmark backend
    naive_outputs = {
        "D": [e for row in d_rows for e in row],
        "C": [e for row in c_rows for e in row],
        "G": list(grav),
        "P": list(p_exprs),
        "Pjac": list(pjac_exprs),
    }
    naive_d_expansion = eg.expansion_size(g, naive_outputs["D"])

    res = cse(g)
    g2 = res.graph
    outs = {
        "D": _remap_nested(res, naive_outputs["D"]),
        "C": _remap_nested(res, naive_outputs["C"]),
        "G": _remap_nested(res, grav),
        "B1": _remap_nested(res, b1_exprs),
        "P": _remap_nested(res, p_exprs),
        "Pjac": _remap_nested(res, pjac_exprs),
        "Rel": _remap_nested(res, rel_exprs),
    }
    input_names = q_names + ["d" + n for n in q_names]
    tape = compile_tape(g2, input_names, outs)
    energy_tape = compile_tape(g2, input_names, {
        "T": _remap_nested(res, kinetic),
        "V": _remap_nested(res, potential),
    })
    cse_d_nodes = len(eg._live_set(g2, [e.idx for e in outs["D"]]))

    terms = DynamicsTerms(
        model=model,
        tape=tape,
        energy_tape=energy_tape,
        q_names=q_names,
        n_q=n_q,
        n_a=model.n_a,
        n_elements=len(elem_segment),
        elem_segment=np.asarray(elem_segment, dtype=int),
        elem_area=np.asarray(elem_area, dtype=float),
        elem_chord=np.asarray(elem_chord, dtype=float),
        pitch_index=q_names.index("pitch") if "pitch" in q_names else -1,
        naive_d_nodes=naive_d_nodes,
        naive_d_expansion=naive_d_expansion,
        cse_d_nodes=cse_d_nodes,
        naive_graph=g,
        naive_outputs=naive_outputs,
        derivation_seconds=time.perf_counter() - t_start,
    )
    if use_cache and key:
        _DERIVE_CACHE[key] = terms
    return terms


# -- evaluation ----------------------------------------------------------------

def _check_singularity(terms, q):
    if terms.pitch_index >= 0:
        pitch = _wrap_angle(float(q[terms.pitch_index]))
        if abs(pitch) >= PITCH_LIMIT:
            raise SingularityError(
                f"pitch {pitch:.6f} rad is within 1e-3 of the +/-pi/2 "
                "Euler-angle singularity")


def eval_terms(terms, state):
    """Evaluate all compiled dynamics terms at one state.

    Returns a dict with D (symmetrized), C, G, B1, P, Pjac, and per-segment
    world orientation matrices Rel.
    """
    x = terms.pack_inputs(state.q, state.qdot)
    _check_singularity(terms, state.q)
    raw = terms.tape.eval(x)
    n, na, ne = terms.n_q, terms.n_a, terms.n_elements
    d_mat = raw["D"].reshape(n, n)
    return {
        "D": 0.5 * (d_mat + d_mat.T),
        "C": raw["C"].reshape(n, n),
        "G": raw["G"],
        "B1": raw["B1"].reshape(n, na),
        "P": raw["P"].reshape(ne, 3),
        "Pjac": raw["Pjac"].reshape(ne * 3, n),
        "Rel": raw["Rel"].reshape(len(terms.model.wing_segments), 3, 3),
    }


def quarter_chord_points(terms, state):
    """World positions of every blade element's quarter-chord point, (N, 3)."""
    out = eval_terms(terms, state)
    return out["P"]


def total_energy(terms, state):
    """(kinetic, potential) at one state; conservative-system diagnostics."""
    x = terms.pack_inputs(state.q, state.qdot)
    _check_singularity(terms, state.q)
    raw = terms.energy_tape.eval(x)
    return float(raw["T"][0]), float(raw["V"][0])


def _wrap_angle(a):
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def wrap_angles(model_or_terms, q):
    """Wrap every angular coordinate (Euler angles, joints) to (-pi, pi]."""
    model = getattr(model_or_terms, "model", model_or_terms)
    q = np.array(q, dtype=float)
    for i, name in enumerate(model.q_names):
        if name not in ("x", "y", "z"):
            q[i] = _wrap_angle(q[i])
    return q
