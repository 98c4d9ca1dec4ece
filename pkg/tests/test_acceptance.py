"""Acceptance gate: one end-to-end check per shipped guarantee.

Each test prints a single [PASS]/[FAIL] line (run with ``pytest -s`` to see
them live). The checks intentionally go through the public surface: the CLI
for training and benchmarking, the library API for the numerical identities.
"""

import functools
import math
import re

import numpy as np
import yaml

from flapkit import ckf, cli, csvio, exprgraph, multibody, neuralnet, simulate


def report(num, label, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {num} ({label}): {detail}")
    assert ok, f"criterion {num} ({label}): {detail}"


@functools.lru_cache(maxsize=None)
def terms_for(name):
    return multibody.derive_dynamics(multibody.load_model(name))


def write_config(path, data):
    path.write_text(yaml.safe_dump({"format": 1, **data}))
    return str(path)


# -- 1: spherical-radial rule integrates degree <= 3 exactly -----------------

def test_criterion_1_cubature_exactness():
    rng = np.random.default_rng(11)
    worst = 0.0
    for n in range(1, 9):
        a, b, c = rng.standard_normal((3, n))
        d = rng.standard_normal()

        def poly(pts):
            return (pts @ a) ** 3 + (pts @ b) ** 2 + (pts @ c) + d

        got = ckf.gaussian_expectation(poly, np.zeros(n), np.eye(n))
        want = b @ b + d         # odd terms vanish under N(0, I)
        worst = max(worst, abs(got - want))

    # degree 4 is outside the rule: E[x1^4] = 3 but the rule returns n
    gaps = []
    for n in (2, 5):
        got = ckf.gaussian_expectation(
            lambda pts: pts[:, 0] ** 4, np.zeros(n), np.eye(n))
        gaps.append(abs(got - 3.0))
        assert math.isclose(got, n, rel_tol=1e-12)
    report(1, "cubature exactness", worst < 1e-12 and min(gaps) > 0.5,
           f"degree<=3 err {worst:.2e}, degree-4 gap {min(gaps):.2f}")


# -- 2: square-root filter reproduces the textbook Kalman filter -------------

def test_criterion_2_linear_kalman_equivalence():
    rng = np.random.default_rng(7)
    n, m = 4, 2
    w_true = rng.standard_normal(n)
    r_cov = 1e-2 * np.eye(m)
    q = 1e-6

    state = ckf.CkfState(np.zeros(n), 0.3 * np.eye(n))
    w_kf, p_kf = np.zeros(n), 0.09 * np.eye(n)

    worst_w = worst_p = 0.0
    for _ in range(100):
        h_mat = rng.standard_normal((m, n))
        a = h_mat @ w_true + 0.05 * rng.standard_normal(m)

        state = ckf.predict(state, q)
        state, _ = ckf.update(state, lambda pts: pts @ h_mat.T, a, r_cov)

        p_kf = p_kf + q * np.eye(n)
        s_inn = h_mat @ p_kf @ h_mat.T + r_cov
        gain = np.linalg.solve(s_inn, h_mat @ p_kf).T
        w_kf = w_kf + gain @ (a - h_mat @ w_kf)
        p_kf = p_kf - gain @ h_mat @ p_kf

        worst_w = max(worst_w, np.abs(state.w - w_kf).max())
        worst_p = max(worst_p, np.abs(state.S @ state.S.T - p_kf).max())

    ok = worst_w < 1e-8 and worst_p < 1e-8
    report(2, "linear Kalman equivalence", ok,
           f"max |w - w_kf| {worst_w:.2e}, max |P - P_kf| {worst_p:.2e} "
           f"over 100 steps")


# -- 3: inverse-dynamics targets close against the applied aero force --------

def test_criterion_3_inverse_dynamics_closure():
    worst_off = 0.0
    for name in ("planar-flapper", "aerobat-lite"):
        terms = terms_for(name)
        config = simulate.SimConfig(
            dt=1e-4, duration=0.02, sample_stride=10, aero_enabled=False,
            joint_trajectory=simulate.default_flapping_trajectory(terms))
        result = simulate.run_experiment(terms, config)
        assert result.samples
        worst_off = max(worst_off, max(
            float(np.abs(s.a).max()) for s in result.samples))

    terms = terms_for("aerobat-lite")
    config = simulate.SimConfig(
        dt=1e-4, duration=0.05, sample_stride=50,
        joint_trajectory=simulate.default_flapping_trajectory(terms))
    result = simulate.run_experiment(terms, config)
    targets = np.array([s.a for s in result.samples])
    rel = np.abs(targets - result.applied).max() / np.abs(result.applied).max()

    ok = worst_off < 1e-8 and rel < 1e-8
    report(3, "inverse-dynamics closure", ok,
           f"aero-off max |a| {worst_off:.2e}, aero-on rel err {rel:.2e}")


# -- 4: online training reaches the headline accuracy through the CLI --------

def test_criterion_4_training_accuracy(tmp_path, capsys):
    cfg = write_config(tmp_path / "headline.yaml", {
        "model": "aerobat-lite",
        "seed": 2,
        "filter": {"hidden": [14, 14], "p0": 8e-3, "sigma0": 0.1,
                   "q": 1e-8, "r": 1e-6, "epochs": 40},
    })
    out = tmp_path / "fit"
    rc = cli.main(["train", "--config", cfg, "--out", str(out)])
    stdout = capsys.readouterr().out
    assert rc == 0, stdout

    nmse = float(re.search(r"final normalized MSE: (\S+)", stdout).group(1))
    var = float(re.search(r"final max weight variance: (\S+)", stdout).group(1))

    # cross-check the printed figure against the written predictions
    _, arr = csvio.read_csv(out / "forces.csv")
    n_q = terms_for("aerobat-lite").n_q
    targets, preds = arr[:, 1:1 + n_q], arr[:, 1 + n_q:]
    nmse_csv = float(((preds - targets) ** 2).sum() / (targets ** 2).sum())
    assert math.isclose(nmse, nmse_csv, rel_tol=1e-4)

    ok = nmse <= 5e-3 and var < 1e-2
    report(4, "training accuracy", ok,
           f"normalized MSE {nmse:.3e} (<= 5.0e-03), "
           f"max weight variance {var:.3e} (< 1e-2)")


# -- 5: unforced flight conserves energy over a full second ------------------

def test_criterion_5_energy_conservation():
    terms = terms_for("aerobat-lite")
    rng = np.random.default_rng(3)
    config = simulate.SimConfig(
        dt=1e-4, duration=1.0, sample_stride=10 ** 9,
        aero_enabled=False, damping_enabled=False, kp=0.0, kd=0.0,
        qdot0=0.05 * rng.standard_normal(terms.n_q))
    result = simulate.run_experiment(terms, config)

    def energy(row):
        state = multibody.VehicleState(row[:terms.n_q], row[terms.n_q:])
        return sum(multibody.total_energy(terms, state))

    e0, e1 = energy(result.states[0]), energy(result.states[-1])
    drift = abs(e1 - e0) / max(abs(e0), 1e-6)
    report(5, "energy conservation", drift < 1e-6,
           f"relative drift {drift:.2e} over 1.0 s (< 1e-6)")


# -- 6: reverse-mode derivatives agree with finite differences and duals ----

def test_criterion_6_derivative_consistency():
    terms = terms_for("planar-flapper")
    graph = terms.naive_graph
    names = terms.input_names
    outs = terms.naive_outputs
    n_q = terms.n_q

    picks = [outs["D"][1 * n_q + 2], outs["C"][2 * n_q + 3], outs["G"][4],
             outs["P"][0], outs["P"][10], outs["P"][23]]
    wrt = [exprgraph.Expr(graph, graph.inputs[n]) for n in names]
    grads = [exprgraph.differentiate(e, wrt) for e in picks]

    rng = np.random.default_rng(21)
    worst_fd = worst_dual = 0.0
    for _ in range(50):
        x = rng.uniform(-1.0, 1.0, len(names))
        x[terms.pitch_index] = np.clip(x[terms.pitch_index], -1.0, 1.0)
        binding = dict(zip(names, x.tolist()))

        flat_grads = [g for gs in grads for g in gs]
        rev = np.array(exprgraph.eval_graph(graph, flat_grads, binding))
        rev = rev.reshape(len(picks), len(names))

        for k, nm in enumerate(names):
            h = 1e-6 * max(1.0, abs(x[k]))
            up = dict(binding, **{nm: x[k] + h})
            dn = dict(binding, **{nm: x[k] - h})
            fd = (np.array(exprgraph.eval_graph(graph, picks, up))
                  - np.array(exprgraph.eval_graph(graph, picks, dn))) / (2 * h)
            scale = np.maximum(1.0, np.abs(rev[:, k]))
            worst_fd = max(worst_fd, float(
                (np.abs(fd - rev[:, k]) / scale).max()))

            _, dual = exprgraph.eval_dual(graph, picks, binding, {nm: 1.0})
            worst_dual = max(worst_dual, float(
                (np.abs(np.array(dual) - rev[:, k]) / scale).max()))

    ok = worst_fd < 1e-6 and worst_dual < 1e-12
    report(6, "derivative consistency", ok,
           f"reverse vs FD {worst_fd:.2e} (< 1e-6), "
           f"forward vs reverse {worst_dual:.2e} (< 1e-12) at 50 states")


# -- 7: compiled tape beats naive recursive evaluation by 5x -----------------

def test_criterion_7_tape_speedup(tmp_path, capsys):
    out = tmp_path / "bench"
    rc = cli.main(["bench", "--model", "aerobat-lite", "--out", str(out)])
    stdout = capsys.readouterr().out
    assert rc == 0, stdout
    assert "value agreement (naive vs tape): ok" in stdout

    med = {}
    with open(out / "bench.csv") as fh:
        fh.readline()
        for line in fh:
            term, backend, med_us, _, _ = line.strip().split(",")
            med[term, backend] = float(med_us)
    speedups = {t: med[t, "naive"] / med[t, "tape"]
                for t in ("D", "C", "G", "Pjac")}
    worst = min(speedups.values())
    report(7, "tape speedup", worst >= 5.0,
           f"min speedup {worst:.1f}x across {sorted(speedups)} (>= 5x)")


# -- 8: manipulator-equation structure holds ---------------------------------

def test_criterion_8_equation_structure():
    terms = terms_for("aerobat-lite")
    rng = np.random.default_rng(17)
    worst_spd, worst_skew = -np.inf, 0.0
    min_eig = np.inf
    for _ in range(100):
        q = rng.uniform(-1.0, 1.0, terms.n_q)
        if terms.pitch_index >= 0:
            q[terms.pitch_index] = np.clip(q[terms.pitch_index], -1.0, 1.0)
        qd = rng.uniform(-3.0, 3.0, terms.n_q)
        state = multibody.VehicleState(q, qd)
        out = multibody.eval_terms(terms, state)

        dmat = out["D"]
        worst_spd = max(worst_spd, float(np.abs(dmat - dmat.T).max()))
        min_eig = min(min_eig, float(np.linalg.eigvalsh(dmat).min()))

        binding = terms.naive_binding(q, qd)
        seed = {n: float(v) for n, v in zip(terms.q_names, qd)}
        _, ddot = exprgraph.eval_dual(
            terms.naive_graph, terms.naive_outputs["D"], binding, seed)
        ddot = np.array(ddot).reshape(terms.n_q, terms.n_q)
        val = qd @ (ddot - 2.0 * out["C"]) @ qd
        worst_skew = max(worst_skew,
                         abs(val) / (1.0 + abs(qd @ ddot @ qd)))

    # closed-form cross-check on the two-link pendulum
    pend = terms_for("pendulum2")
    m1, lc1, m2, lc2, l1, grav = 1.2, 0.8, 0.7, 0.5, 0.8, 9.81
    worst_pend = 0.0
    for _ in range(25):
        t1, t2 = rng.uniform(-math.pi, math.pi, 2)
        qd = rng.uniform(-5.0, 5.0, 2)
        out = multibody.eval_terms(pend, multibody.VehicleState(
            np.array([t1, t2]), qd))
        d11 = m1 * lc1**2 + m2 * (l1**2 + lc2**2 + 2 * l1 * lc2 * math.cos(t2))
        d12 = m2 * (lc2**2 + l1 * lc2 * math.cos(t2))
        dref = np.array([[d11, d12], [d12, m2 * lc2**2]])
        h = -m2 * l1 * lc2 * math.sin(t2)
        cref = np.array([[h * qd[1], h * (qd[0] + qd[1])], [-h * qd[0], 0.0]])
        gref = np.array([
            (m1 * lc1 + m2 * l1) * grav * math.sin(t1)
            + m2 * lc2 * grav * math.sin(t1 + t2),
            m2 * lc2 * grav * math.sin(t1 + t2)])
        for got, ref in ((out["D"], dref), (out["C"], cref), (out["G"], gref)):
            err = np.abs(got - ref).max() / max(1.0, np.abs(ref).max())
            worst_pend = max(worst_pend, float(err))

    ok = (worst_spd < 1e-12 and min_eig > 0.0 and worst_skew < 1e-9
          and worst_pend < 1e-10)
    report(8, "equation structure", ok,
           f"min D eigenvalue {min_eig:.2e}, asymmetry {worst_spd:.2e}, "
           f"max |qd'(Ddot-2C)qd| {worst_skew:.2e} at 100 states, "
           f"pendulum closed-form err {worst_pend:.2e}")


# -- 9: repeated runs are reproducible to the byte ---------------------------

def test_criterion_9_determinism(tmp_path, capsys):
    sim_args = ["simulate", "--model", "planar-flapper", "--duration", "0.02"]
    cfg = write_config(tmp_path / "t.yaml", {
        "model": "planar-flapper",
        "simulate": {"duration": 0.02, "stride": 20},
        "filter": {"hidden": [4, 4], "epochs": 2},
    })

    pairs = []
    for tag in ("a", "b"):
        sim_out = tmp_path / f"sim-{tag}"
        fit_out = tmp_path / f"fit-{tag}"
        assert cli.main(sim_args + ["--out", str(sim_out)]) == 0
        assert cli.main(["train", "--config", cfg, "--out", str(fit_out)]) == 0
        pairs.append((sim_out, fit_out))
    capsys.readouterr()

    (sim_a, fit_a), (sim_b, fit_b) = pairs
    same = True
    for name in ("trajectory.csv", "samples.csv"):
        same &= (sim_a / name).read_bytes() == (sim_b / name).read_bytes()
    for name in ("forces.csv", "mse_trace.csv"):
        same &= (fit_a / name).read_bytes() == (fit_b / name).read_bytes()
    ck_a = np.load(fit_a / "checkpoint.npz")
    ck_b = np.load(fit_b / "checkpoint.npz")
    same &= all(np.array_equal(ck_a[k], ck_b[k]) for k in ck_a.files)

    report(9, "determinism", same,
           "trajectory, samples, trace, forces and checkpoint arrays "
           "identical across reruns")
