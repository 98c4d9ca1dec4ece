"""Square-root cubature Kalman filter for online weight estimation.

State = the flat network weight vector, propagated by a random walk and
corrected against extracted force targets. The covariance is carried as a
square-root factor S (P = S S^T) so every step works from a factor and the
filter never loses positive semidefiniteness to round-off.

The third-degree spherical-radial rule evaluates a Gaussian expectation at
2n symmetric points: substituting x = mu + sqrt(2) S z into the integral and
placing the spherical-radial abscissas at sqrt(n/2) (+-e_j) with equal
weights 1/(2n) lands the composite points at mu +- sqrt(n) S e_j. Exact for
polynomial integrands up to degree 3, not beyond (see the fourth-moment
counterexample in the tests).
"""

from dataclasses import dataclass
from functools import partial

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .neuralnet import Standardizer, forward, forward_batch

__all__ = [
    "FilterDivergence", "cubature_points", "gaussian_expectation", "tria",
    "CkfState", "UpdateInfo", "predict", "update", "nmse",
    "TrainResult", "train_online",
]

EIG_FLOOR = 1e-12


class FilterDivergence(RuntimeError):
    pass


def cubature_points(n):
    """Unit-Gaussian abscissas (2n, n) and their equal weights (2n,).

    Rows 0..n-1 are +sqrt(n) e_j, rows n..2n-1 the mirrored -sqrt(n) e_j.
    """
    if n < 1:
        raise ValueError("dimension must be positive")
    eye = np.sqrt(float(n)) * np.eye(n)
    return np.vstack([eye, -eye]), np.full(2 * n, 1.0 / (2 * n))


def sigma_points(w, S):
    """Cubature points of N(w, S S^T), one per row: w +- sqrt(n) S e_j."""
    xi, _ = cubature_points(w.size)
    return w + xi @ S.T


def gaussian_expectation(f, mu, S):
    """E[f(x)] for x ~ N(mu, S S^T) under the 2n-point rule.

    ``f`` takes the (2n, n) point array and returns one value per row
    (any trailing shape). Non-finite values abort with the offending row.
    """
    mu = np.asarray(mu, dtype=float)
    pts = sigma_points(mu, np.asarray(S, dtype=float))
    vals = np.asarray(f(pts), dtype=float)
    if vals.shape[0] != pts.shape[0]:
        raise ValueError("f must return one value per cubature point")
    bad = ~np.isfinite(vals).reshape(vals.shape[0], -1).all(axis=1)
    if bad.any():
        raise FilterDivergence(
            f"integrand returned non-finite value at cubature point "
            f"{int(np.argmax(bad))}")
    return vals.mean(axis=0)


def tria(mat):
    """Lower-triangular S with S S^T = mat mat^T, via QR of the transpose.

    Diagonal is normalized nonnegative so the factor is deterministic.
    """
    mat = np.asarray(mat, dtype=float)
    n, k = mat.shape
    if k < n:
        mat = np.hstack([mat, np.zeros((n, n - k))])
    r = np.linalg.qr(mat.T, mode="r")
    s = r.T
    signs = np.sign(np.diag(s))
    signs[signs == 0.0] = 1.0
    return s * signs[None, :]


@dataclass(frozen=True)
class CkfState:
    """Weight estimate, covariance factor (P = S S^T), updates applied."""
    w: np.ndarray
    S: np.ndarray
    k: int = 0


@dataclass(frozen=True)
class UpdateInfo:
    predicted: np.ndarray
    innovation: np.ndarray


def _as_cov(r, dim, name):
    r = np.asarray(r, dtype=float)
    if r.ndim == 0:
        if r < 0.0:
            raise ValueError(f"{name} must be nonnegative")
        return float(r) * np.eye(dim)
    if r.ndim == 1:
        if r.shape != (dim,):
            raise ValueError(f"{name} diagonal has wrong length")
        return np.diag(r)
    if r.shape != (dim, dim):
        raise ValueError(f"{name} has shape {r.shape}, needs ({dim},{dim})")
    return r


def _refactor(p):
    """Cholesky of a nearly-symmetric covariance, with an eigenvalue floor
    fallback when round-off has pushed it indefinite."""
    p = (p + p.T) / 2.0
    try:
        return np.linalg.cholesky(p)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(p)
        return tria(vecs * np.sqrt(np.maximum(vals, EIG_FLOOR)))


def predict(state, q):
    """Random-walk time update: P <- P + Q, applied to the factor.

    The identity process model maps every cubature point to itself, so the
    full sigma-point propagation collapses to adding Q and refactoring;
    the literal propagation path is cross-checked in the tests. Q == 0
    returns the state object unchanged, bitwise.
    """
    n = state.w.size
    q = np.asarray(q, dtype=float)
    if q.ndim == 0:
        if q < 0.0:
            raise ValueError("process noise must be nonnegative")
        qmat = None if q == 0.0 else float(q) * np.eye(n)
    else:
        qmat = _as_cov(q, n, "process noise")
        if q.ndim == 1 and (q < 0.0).any():
            raise ValueError("process noise must be nonnegative")
        if not qmat.any():
            qmat = None
    if qmat is None:
        return state
    return CkfState(state.w, _refactor(state.S @ state.S.T + qmat), state.k)


def update(state, h, a, r, jitter=1e-12):
    """Measurement update against target ``a`` in moment form.

    ``h`` maps the (2n, n) cubature point array to (2n, d) predictions.
    Innovation and cross covariances come from the raw second moments:
        P_aa = (1/m) sum y y^T - a_hat a_hat^T + R
        P_wa = (1/m) sum w y^T - w_bar a_hat^T
    the gain solves against P_aa by Cholesky (one jitter retry), the mean
    moves by K (a - a_hat), and the posterior factor is the Cholesky of
    S S^T - K P_aa K^T.
    """
    w, S = state.w, state.S
    n = w.size
    m = 2 * n
    pts = sigma_points(w, S)
    y = np.asarray(h(pts), dtype=float)
    if y.ndim != 2 or y.shape[0] != m:
        raise ValueError(f"measurement batch has shape {y.shape}")
    bad = ~np.isfinite(y).all(axis=1)
    if bad.any():
        raise FilterDivergence(
            f"measurement function returned non-finite output at cubature "
            f"point {int(np.argmax(bad))}")
    d = y.shape[1]
    a = np.asarray(a, dtype=float)
    if a.shape != (d,):
        raise ValueError(f"target has shape {a.shape}, expected ({d},)")

    a_hat = y.mean(axis=0)
    p_aa = y.T @ y / m - np.outer(a_hat, a_hat) + _as_cov(r, d, "measurement noise")
    p_aa = (p_aa + p_aa.T) / 2.0
    p_wa = pts.T @ y / m - np.outer(w, a_hat)
    try:
        cf = cho_factor(p_aa)
    except np.linalg.LinAlgError:
        p_aa = p_aa + jitter * np.eye(d)
        try:
            cf = cho_factor(p_aa)
        except np.linalg.LinAlgError as exc:
            raise FilterDivergence(
                "innovation covariance is not positive definite") from exc
    gain = cho_solve(cf, p_wa.T).T

    innovation = a - a_hat
    w_new = w + gain @ innovation
    s_new = _refactor(S @ S.T - gain @ p_aa @ gain.T)
    if not (np.isfinite(w_new).all() and np.isfinite(s_new).all()):
        raise FilterDivergence("filter state became non-finite")
    return CkfState(w_new, s_new, state.k + 1), UpdateInfo(a_hat, innovation)


def nmse(predictions, targets):
    """Total squared error normalized by total target signal power."""
    predictions = np.asarray(predictions, dtype=float)
    targets = np.asarray(targets, dtype=float)
    denom = (targets ** 2).sum()
    if denom == 0.0:
        raise ValueError("targets are identically zero, NMSE undefined")
    return float(((predictions - targets) ** 2).sum() / denom)


@dataclass
class TrainResult:
    spec: object
    state: CkfState
    in_scaler: Standardizer
    tgt_scaler: Standardizer
    mse_trace: np.ndarray
    var_trace: np.ndarray
    predictions: np.ndarray
    nmse: float
    epochs_done: int


def train_online(spec, xs, targets, *, seed=0, sigma0=0.1, p0=0.1, q=1e-8,
                 r=1e-6, epochs=1, warmup=None, init=None, jitter=1e-12):
    """Stream (x, a) pairs through the filter; returns the fitted state.

    Standardization constants for inputs and targets are fitted on the
    first ``warmup`` rows (default: all) and then frozen. ``init`` resumes
    from a previous result's (state, in_scaler, tgt_scaler, epochs_done)
    with bitwise-identical continuation; each epoch replays the window in
    order.

    The default process noise is a hair above zero: the weight random
    walk exists to keep the factor well conditioned, not to model drift.
    Raising q makes repeated ordered sweeps chase a moving target instead
    of converging; set it well above 1e-8 only to track a drifting plant.
    """
    xs = np.asarray(xs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if xs.ndim != 2 or targets.ndim != 2 or len(xs) != len(targets):
        raise ValueError("need matching 2-D sample and target arrays")
    if xs.shape[1] != spec.layer_sizes[0] or targets.shape[1] != spec.layer_sizes[-1]:
        raise ValueError("sample width does not match network spec")

    if init is None:
        n_fit = len(xs) if warmup is None else min(len(xs), int(warmup))
        if n_fit < 1:
            raise ValueError("warmup window is empty")
        in_scaler = Standardizer.fit(xs[:n_fit])
        tgt_scaler = Standardizer.fit(targets[:n_fit])
        rng = np.random.default_rng(seed)
        w0 = sigma0 * rng.standard_normal(spec.n_weights)
        s0 = np.sqrt(p0) * np.eye(spec.n_weights)
        state = CkfState(w0, s0, 0)
        epochs_done = 0
    else:
        state, in_scaler, tgt_scaler, epochs_done = init

    zs = in_scaler.transform(xs)
    ts = tgt_scaler.transform(targets)
    mse_trace = []
    var_trace = []
    for _ in range(epochs_done, epochs):
        for z, t in zip(zs, ts):
            state = predict(state, q)
            try:
                state, info = update(
                    state, partial(forward_batch, spec, x=z), t, r,
                    jitter=jitter)
            except FilterDivergence as exc:
                raise FilterDivergence(
                    f"{exc} (training step {state.k + 1})") from exc
            mse_trace.append(float((info.innovation ** 2).mean()))
            var_trace.append(float((state.S ** 2).sum(axis=1).max()))

    preds = tgt_scaler.inverse(np.array([forward(spec, state.w, z) for z in zs]))
    return TrainResult(
        spec=spec, state=state, in_scaler=in_scaler, tgt_scaler=tgt_scaler,
        mse_trace=np.asarray(mse_trace), var_trace=np.asarray(var_trace),
        predictions=preds, nmse=nmse(preds, targets),
        epochs_done=max(epochs, epochs_done))
