"""Command-line experiment runner: simulate, train, bench, validate.

Every command is deterministic under a fixed seed (timing columns aside),
and all CSVs are written in full-precision %.17g so a read/re-emit cycle
is byte-identical.
"""

import argparse
import os
import sys
import time

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import ckf, csvio, exprgraph, multibody, neuralnet, simulate
from .tape import compile_tape

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
CONFIG_FORMAT = 1

CONFIG_DEFAULTS = {
    "model": None,
    "seed": 0,
    "simulate": {
        "dt": 1e-4,
        "duration": 0.2,
        "stride": 100,
        "kp": simulate.DEFAULT_KP,
        "kd": simulate.DEFAULT_KD,
        "aero": True,
        "damping": True,
        "accel_mode": "model",
        "flap_amplitude": 0.5,
        "flap_frequency": 6.0,
        "q0": None,
        "qdot0": None,
    },
    "filter": {
        "hidden": [14, 14],
        "p0": 8e-3,
        "sigma0": 0.1,
        "q": 1e-8,
        "r": 1e-6,
        "epochs": 40,
        "warmup": None,
    },
    "bench": {
        "iterations": 1000,
    },
}


class InputError(ValueError):
    pass


def _merge_config(base, override, path=""):
    out = dict(base)
    for key, val in override.items():
        if key not in base:
            raise InputError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise InputError(f"config key {path + key!r} must be a mapping")
            out[key] = _merge_config(base[key], val, path + key + ".")
        else:
            out[key] = val
    return out


def load_config(path):
    """Versioned YAML config; returns the defaults overlaid with the file."""
    if path is None:
        return dict(CONFIG_DEFAULTS)
    if not os.path.exists(path):
        raise InputError(f"config file not found: {path}")
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise InputError(f"config file {path} is not a mapping")
    fmt = data.pop("format", None)
    if fmt != CONFIG_FORMAT:
        raise InputError(
            f"config file {path} has format {fmt!r}, expected {CONFIG_FORMAT}")
    return _merge_config(CONFIG_DEFAULTS, data)


def apply_flags(cfg, args):
    """CLI flags take precedence over config-file values."""
    if getattr(args, "model", None):
        cfg["model"] = args.model
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    for flag, key in [("duration", "duration"), ("dt", "dt"),
                      ("stride", "stride")]:
        val = getattr(args, flag, None)
        if val is not None:
            cfg["simulate"][key] = val
    return cfg


def _load_terms(cfg):
    if not cfg["model"]:
        raise InputError("no model given (use --model or a config file)")
    model = multibody.load_model(cfg["model"])
    return multibody.derive_dynamics(model)


def _sim_config(cfg, terms):
    s = cfg["simulate"]
    trajectory = {}
    if terms.n_a and s["flap_amplitude"]:
        trajectory = simulate.default_flapping_trajectory(
            terms, amplitude=float(s["flap_amplitude"]),
            frequency=float(s["flap_frequency"]))
    q0 = None if s["q0"] is None else np.asarray(s["q0"], dtype=float)
    qdot0 = None if s["qdot0"] is None else np.asarray(s["qdot0"], dtype=float)
    config = simulate.SimConfig(
        dt=float(s["dt"]), duration=float(s["duration"]),
        joint_trajectory=trajectory, kp=float(s["kp"]), kd=float(s["kd"]),
        sample_stride=int(s["stride"]), seed=int(cfg["seed"]),
        aero_enabled=bool(s["aero"]), damping_enabled=bool(s["damping"]),
        accel_mode=str(s["accel_mode"]), q0=q0, qdot0=qdot0)
    config.validate(terms)
    return config


def _ensure_out(out_dir):
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def _divergence_step(exc, dt):
    t = getattr(exc, "t", None)
    if t is None or dt <= 0:
        return None
    return int(round(t / dt))


def cmd_simulate(cfg, out_dir):
    terms = _load_terms(cfg)
    config = _sim_config(cfg, terms)
    result = simulate.run_experiment(terms, config)
    _ensure_out(out_dir)
    traj_path = os.path.join(out_dir, "trajectory.csv")
    samp_path = os.path.join(out_dir, "samples.csv")
    csvio.write_trajectory(traj_path, result)
    csvio.write_samples(samp_path, result)
    print(f"wrote {traj_path} ({len(result.times)} rows)")
    print(f"wrote {samp_path} ({len(result.samples)} samples)")
    return EXIT_OK


def _load_samples(path, n_q):
    header, arr = csvio.read_csv(path)
    want = list(csvio.samples_header(n_q))
    if header != want:
        raise InputError(f"{path} does not match the sample schema")
    xs = arr[:, 1:1 + 2 * n_q]
    targets = arr[:, 1 + 2 * n_q:]
    return arr[:, 0], xs, targets


def _resume_init(path, spec):
    ck_spec, w, extras = neuralnet.load_checkpoint(path)
    if ck_spec != spec:
        raise InputError(
            f"checkpoint {path} was trained with architecture "
            f"{ck_spec.layer_sizes}, config wants {spec.layer_sizes}")
    needed = ("sqrt_cov", "step", "epochs_done",
              "in_mean", "in_scale", "tgt_mean", "tgt_scale")
    if any(key not in extras for key in needed):
        raise InputError(f"checkpoint {path} lacks filter state; cannot resume")
    state = ckf.CkfState(w, extras["sqrt_cov"], int(extras["step"]))
    in_scaler = neuralnet.Standardizer(extras["in_mean"], extras["in_scale"])
    tgt_scaler = neuralnet.Standardizer(extras["tgt_mean"], extras["tgt_scale"])
    return state, in_scaler, tgt_scaler, int(extras["epochs_done"])


def cmd_train(cfg, out_dir, resume):
    terms = _load_terms(cfg)
    if terms.n_elements == 0:
        raise InputError(
            f"model {terms.model.name!r} has no wing surfaces; there is no "
            f"aerodynamic force to learn")
    _ensure_out(out_dir)

    samp_path = os.path.join(out_dir, "samples.csv")
    if os.path.exists(samp_path):
        times, xs, targets = _load_samples(samp_path, terms.n_q)
    else:
        config = _sim_config(cfg, terms)
        result = simulate.run_experiment(terms, config)
        csvio.write_samples(samp_path, result)
        times = np.array([s.t for s in result.samples])
        xs = np.array([s.x for s in result.samples])
        targets = np.array([s.a for s in result.samples])
    if len(xs) == 0:
        raise InputError("no training samples (duration or stride too large)")

    f = cfg["filter"]
    spec = neuralnet.MlpSpec(
        (2 * terms.n_q, *[int(h) for h in f["hidden"]], terms.n_q))
    init = None if resume is None else _resume_init(resume, spec)
    start_step = 0 if init is None else init[0].k

    result = ckf.train_online(
        spec, xs, targets, seed=int(cfg["seed"]), sigma0=float(f["sigma0"]),
        p0=float(f["p0"]), q=float(f["q"]), r=float(f["r"]),
        epochs=int(f["epochs"]),
        warmup=None if f["warmup"] is None else int(f["warmup"]), init=init)

    trace_path = os.path.join(out_dir, "mse_trace.csv")
    rows = [(start_step + 1 + i, m, v)
            for i, (m, v) in enumerate(zip(result.mse_trace, result.var_trace))]
    csvio.write_csv(trace_path, ["step", "innovation_mse", "max_var"], rows)

    forces_path = os.path.join(out_dir, "forces.csv")
    names = terms.q_names
    header = (["t"] + [f"a_{n}" for n in names]
              + [f"pred_{n}" for n in names])
    csvio.write_csv(forces_path, header,
                    np.hstack([times[:, None], targets, result.predictions]))

    ck_path = os.path.join(out_dir, "checkpoint.npz")
    neuralnet.save_checkpoint(
        ck_path, spec, result.state.w,
        extras={
            "sqrt_cov": result.state.S,
            "step": np.array(result.state.k),
            "epochs_done": np.array(result.epochs_done),
            "in_mean": result.in_scaler.mean,
            "in_scale": result.in_scaler.scale,
            "tgt_mean": result.tgt_scaler.mean,
            "tgt_scale": result.tgt_scaler.scale,
        })

    max_var = float(result.var_trace[-1]) if len(result.var_trace) else float(
        (result.state.S ** 2).sum(axis=1).max())
    print(f"trained {result.state.k} filter steps "
          f"({len(xs)} samples x {result.epochs_done} sweeps)")
    print(f"final normalized MSE: {result.nmse:.6e} ({result.nmse * 100:.4f}%)")
    print(f"final max weight variance: {max_var:.6e}")
    print(f"wrote {trace_path}, {forces_path}, {ck_path}")
    return EXIT_OK


def _bench_state(terms, seed):
    rng = np.random.default_rng(seed)
    q = 0.2 * rng.standard_normal(terms.n_q)
    if terms.pitch_index is not None:
        q[terms.pitch_index] = np.clip(q[terms.pitch_index], -1.0, 1.0)
    qdot = rng.standard_normal(terms.n_q)
    return q, qdot


def _percentiles(samples_us):
    arr = np.sort(np.asarray(samples_us))
    return float(np.median(arr)), float(arr[int(0.95 * (len(arr) - 1))])


def cmd_bench(cfg, out_dir):
    terms = _load_terms(cfg)
    iters = int(cfg["bench"]["iterations"])
    q, qdot = _bench_state(terms, int(cfg["seed"]))
    binding = terms.naive_binding(q, qdot)
    xvec = terms.pack_inputs(q, qdot)

    # one shared CSE pass, then a dedicated tape per term so each row
    # times exactly one quantity
    shared = exprgraph.cse(terms.naive_graph)
    term_names = ["D", "C", "G", "Pjac"]
    if terms.n_elements == 0:
        term_names.remove("Pjac")  # wingless model has no chord points
    tapes = {}
    for name in term_names:
        outs = {name: [shared.remap(e) for e in terms.naive_outputs[name]]}
        tapes[name] = compile_tape(shared.graph, inputs=terms.input_names,
                                   outputs=outs)

    # correctness gate before timing: identical inputs, identical values
    worst = 0.0
    for name in term_names:
        naive_vals = np.array(exprgraph.eval_graph(
            terms.naive_graph, terms.naive_outputs[name], binding))
        tape_vals = tapes[name].eval_flat(xvec)
        scale = np.abs(naive_vals).max() + 1.0
        worst = max(worst, float(np.abs(naive_vals - tape_vals).max() / scale))
    agree = worst < 1e-15

    rows = []
    with threadpool_limits(limits=1):
        for name in term_names:
            tape = tapes[name]
            for _ in range(50):
                tape.eval_flat(xvec)
            samples = []
            for _ in range(iters):
                t0 = time.perf_counter_ns()
                tape.eval_flat(xvec)
                samples.append((time.perf_counter_ns() - t0) / 1e3)
            med_t, p95_t = _percentiles(samples)

            outputs = terms.naive_outputs[name]
            for _ in range(3):
                exprgraph.eval_graph(terms.naive_graph, outputs, binding)
            samples = []
            for _ in range(iters):
                t0 = time.perf_counter_ns()
                exprgraph.eval_graph(terms.naive_graph, outputs, binding)
                samples.append((time.perf_counter_ns() - t0) / 1e3)
            med_n, p95_n = _percentiles(samples)

            rows.append((name, "naive", med_n, p95_n, iters))
            rows.append((name, "tape", med_t, p95_t, iters))

    _ensure_out(out_dir)
    bench_path = os.path.join(out_dir, "bench.csv")
    with open(bench_path, "w", newline="\n") as fh:
        fh.write("term,backend,median_us,p95_us,iterations\n")
        for name, backend, med, p95, n in rows:
            fh.write(f"{name},{backend},{med:.3f},{p95:.3f},{n}\n")

    print(f"model {terms.model.name}: {terms.n_q} coordinates, "
          f"naive graph {terms.naive_graph.n_nodes} nodes")
    print(f"value agreement (naive vs tape): "
          f"{'ok' if agree else 'MISMATCH'} (max rel dev {worst:.2e})")
    print(f"{'term':<6} {'backend':<8} {'median us':>12} {'p95 us':>12}")
    for name, backend, med, p95, _ in rows:
        print(f"{name:<6} {backend:<8} {med:>12.3f} {p95:>12.3f}")
    for name in term_names:
        med_n = next(r[2] for r in rows if r[0] == name and r[1] == "naive")
        med_t = next(r[2] for r in rows if r[0] == name and r[1] == "tape")
        print(f"speedup {name}: {med_n / med_t:.1f}x")
    print(f"wrote {bench_path}")
    return EXIT_OK if agree else EXIT_NUMERIC


def _check(label, fn):
    try:
        ok, detail = fn()
    except Exception as exc:  # a crashed check is a failed check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    print(f"[{'ok' if ok else 'FAIL'}] {label}: {detail}")
    return ok


def cmd_validate(cfg):
    terms = _load_terms(cfg)
    rng = np.random.default_rng(int(cfg["seed"]))

    def fuzz_state():
        q = 0.3 * rng.standard_normal(terms.n_q)
        if terms.pitch_index is not None:
            q[terms.pitch_index] = np.clip(q[terms.pitch_index], -1.2, 1.2)
        return multibody.VehicleState(q, 0.5 * rng.standard_normal(terms.n_q))

    def spd():
        worst = np.inf
        for _ in range(25):
            out = multibody.eval_terms(terms, fuzz_state())
            worst = min(worst, float(np.linalg.eigvalsh(out["D"]).min()))
        return worst > 0.0, f"min inertia eigenvalue {worst:.3e}"

    def skew():
        worst = 0.0
        for _ in range(10):
            state = fuzz_state()
            binding = terms.naive_binding(state.q, state.qdot)
            seed = {name: float(v)
                    for name, v in zip(terms.q_names, state.qdot)}
            _, ddot = exprgraph.eval_dual(
                terms.naive_graph, terms.naive_outputs["D"], binding, seed)
            ddot = np.array(ddot).reshape(terms.n_q, terms.n_q)
            cmat = multibody.eval_terms(terms, state)["C"]
            val = state.qdot @ (ddot - 2.0 * cmat) @ state.qdot
            scale = 1.0 + abs(state.qdot @ ddot @ state.qdot)
            worst = max(worst, abs(val) / scale)
        return worst < 1e-9, f"max |qdot'(Ddot-2C)qdot| {worst:.3e}"

    def tape_agreement():
        worst = 0.0
        for _ in range(5):
            state = fuzz_state()
            binding = terms.naive_binding(state.q, state.qdot)
            flat = terms.tape.eval(terms.pack_inputs(state.q, state.qdot))
            for name in ("D", "C", "G"):
                ref = np.array(exprgraph.eval_graph(
                    terms.naive_graph, terms.naive_outputs[name], binding))
                worst = max(worst, float(
                    np.abs(ref - flat[name].ravel()).max()))
        return worst == 0.0, f"max |tape - reference| {worst:.3e} (bitwise)"

    def jacobian():
        if terms.n_elements == 0:
            return True, "skipped (no wing surfaces)"
        h = 1e-7
        worst = 0.0
        for _ in range(3):
            state = fuzz_state()
            out = multibody.eval_terms(terms, state)
            pjac = out["Pjac"]
            for k in range(terms.n_q):
                qp, qm = state.q.copy(), state.q.copy()
                qp[k] += h
                qm[k] -= h
                pp = multibody.quarter_chord_points(
                    terms, multibody.VehicleState(qp, state.qdot))
                pm = multibody.quarter_chord_points(
                    terms, multibody.VehicleState(qm, state.qdot))
                fd = (pp - pm).ravel() / (2.0 * h)
                worst = max(worst, float(np.abs(fd - pjac[:, k]).max()))
        return worst < 1e-6, f"max |FD - Jacobian| {worst:.3e}"

    def closure():
        config = simulate.SimConfig(
            dt=1e-4, duration=0.02, sample_stride=10, aero_enabled=False,
            joint_trajectory=(simulate.default_flapping_trajectory(terms)
                              if terms.n_a else {}))
        result = simulate.run_experiment(terms, config)
        worst = max((float(np.abs(s.a).max()) for s in result.samples),
                    default=0.0)
        return worst < 1e-8, f"max |target| with aero off {worst:.3e}"

    def energy():
        # unforced: default PD gains would pump energy into the free swing
        config = simulate.SimConfig(
            dt=1e-4, duration=0.1, sample_stride=10 ** 9,
            aero_enabled=False, damping_enabled=False, kp=0.0, kd=0.0,
            qdot0=0.2 * rng.standard_normal(terms.n_q))
        result = simulate.run_experiment(terms, config)
        e0 = sum(multibody.total_energy(
            terms, multibody.VehicleState(result.states[0, :terms.n_q],
                                         result.states[0, terms.n_q:])))
        e1 = sum(multibody.total_energy(
            terms, multibody.VehicleState(result.states[-1, :terms.n_q],
                                         result.states[-1, terms.n_q:])))
        scale = max(abs(e0), 1e-6)
        drift = abs(e1 - e0) / scale
        return drift < 1e-8, f"relative energy drift {drift:.3e} over 0.1 s"

    checks = [
        ("inertia matrix symmetric positive definite", spd),
        ("Coriolis factorization identity", skew),
        ("compiled tape matches reference evaluation", tape_agreement),
        ("quarter-chord Jacobian matches finite differences", jacobian),
        ("inverse-dynamics closure with aero disabled", closure),
        ("conservative energy drift", energy),
    ]
    passed = [_check(label, fn) for label, fn in checks]
    print(f"{sum(passed)}/{len(passed)} checks passed")
    return EXIT_OK if all(passed) else EXIT_NUMERIC


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flapkit",
        description="Articulated flapping-flight dynamics toolkit: simulate "
                    "a model, train the aerodynamic force surrogate, "
                    "benchmark the dynamics backends, validate invariants.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--model", help="bundled model name or .mdl path")
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="RNG seed override")
        if out:
            p.add_argument("--out", default="flapkit-out",
                           help="output directory (default: %(default)s)")

    p = sub.add_parser("simulate", help="run a flight and write CSVs")
    common(p)
    p.add_argument("--duration", type=float, help="simulated seconds")
    p.add_argument("--dt", type=float, help="integrator step")
    p.add_argument("--stride", type=int, help="steps between samples")

    p = sub.add_parser("train", help="fit the force surrogate online")
    common(p)
    p.add_argument("--duration", type=float, help="simulated seconds")
    p.add_argument("--dt", type=float, help="integrator step")
    p.add_argument("--stride", type=int, help="steps between samples")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("bench", help="time naive vs compiled-tape backends")
    common(p)

    p = sub.add_parser("validate", help="run the invariant battery")
    common(p, out=False)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_flags(load_config(args.config), args)
    except (InputError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        if args.command == "simulate":
            return cmd_simulate(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out, args.resume)
        if args.command == "bench":
            return cmd_bench(cfg, args.out)
        return cmd_validate(cfg)
    except (simulate.DivergenceError, multibody.SingularityError,
            ckf.FilterDivergence) as exc:
        step = _divergence_step(exc, float(cfg["simulate"]["dt"]))
        where = f" (around step {step})" if step is not None else ""
        print(f"numerical failure: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, multibody.ModelError, neuralnet.NetError,
            simulate.SimError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
