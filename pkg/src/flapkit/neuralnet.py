"""Feed-forward softplus network evaluated from a single flat weight vector.

The filter treats all parameters as one state vector, so the canonical
representation here is flat: each layer is an augmented (fan_in+1, fan_out)
matrix - last row is the bias - flattened row-major, layers concatenated in
order. A no-bias mode drops the last row for literal pure-matrix-product
fidelity.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NetError", "MlpSpec", "softplus", "forward", "forward_batch",
    "flatten", "unflatten", "Standardizer", "save_checkpoint", "load_checkpoint",
]

CHECKPOINT_FORMAT = 1


class NetError(ValueError):
    pass


def softplus(s):
    """ln(1 + exp(s)), computed without overflow for any float.

    Equivalent to the branched form s + ln(1+exp(-s)) for large s: for
    s = 35 the result differs from s by under 1e-12 while staying exact.
    """
    return np.logaddexp(0.0, s)


@dataclass(frozen=True)
class MlpSpec:
    """Architecture: node counts per layer plus per-layer activation tags."""
    layer_sizes: tuple
    activations: tuple = None
    use_bias: bool = True

    def __post_init__(self):
        sizes = tuple(int(n) for n in self.layer_sizes)
        if len(sizes) < 2 or any(n < 1 for n in sizes):
            raise NetError("layer_sizes needs >= 2 positive entries")
        object.__setattr__(self, "layer_sizes", sizes)
        acts = self.activations
        if acts is None:
            acts = ("softplus",) * (len(sizes) - 2) + ("identity",)
        acts = tuple(acts)
        if len(acts) != len(sizes) - 1:
            raise NetError("need one activation tag per weight layer")
        if any(a not in ("softplus", "identity") for a in acts):
            raise NetError("activation tags must be 'softplus' or 'identity'")
        if acts[-1] != "identity":
            raise NetError("final activation must be identity")
        object.__setattr__(self, "activations", acts)

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    def layer_shapes(self):
        """Augmented per-layer matrix shapes, bias row included when enabled."""
        extra = 1 if self.use_bias else 0
        return [(self.layer_sizes[i] + extra, self.layer_sizes[i + 1])
                for i in range(self.n_layers)]

    @property
    def layer_offsets(self):
        """Cumulative flat offsets: [0, ..., n_weights], one step per layer."""
        offs = [0]
        for rows, cols in self.layer_shapes():
            offs.append(offs[-1] + rows * cols)
        return offs

    @property
    def n_weights(self):
        return self.layer_offsets[-1]


def flatten(spec, layers):
    """Concatenate per-layer augmented matrices into the flat vector."""
    shapes = spec.layer_shapes()
    if len(layers) != len(shapes):
        raise NetError(f"expected {len(shapes)} layers, got {len(layers)}")
    parts = []
    for mat, shape in zip(layers, shapes):
        mat = np.asarray(mat, dtype=float)
        if mat.shape != shape:
            raise NetError(f"layer shape {mat.shape} != expected {shape}")
        parts.append(mat.ravel())
    return np.concatenate(parts)


def unflatten(spec, w):
    """Split a flat vector back into per-layer augmented matrices."""
    w = np.asarray(w, dtype=float)
    if w.shape != (spec.n_weights,):
        raise NetError(f"weight vector has {w.shape}, spec needs ({spec.n_weights},)")
    offs = spec.layer_offsets
    return [w[offs[i]:offs[i + 1]].reshape(shape)
            for i, shape in enumerate(spec.layer_shapes())]


def forward(spec, w, x):
    """Evaluate the network at one input vector."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.layer_sizes[0],):
        raise NetError(f"input has shape {x.shape}, spec needs "
                       f"({spec.layer_sizes[0]},)")
    h = x
    for mat, act in zip(unflatten(spec, w), spec.activations):
        s = h @ mat[:-1] + mat[-1] if spec.use_bias else h @ mat
        h = softplus(s) if act == "softplus" else s
    return h


def forward_batch(spec, w_batch, x):
    """Evaluate many weight vectors at the same input: (m, n_w) -> (m, d_out).

    The filter's hot path: every sigma point is an independent network.
    Results match per-row forward() calls.
    """
    w_batch = np.asarray(w_batch, dtype=float)
    x = np.asarray(x, dtype=float)
    m = w_batch.shape[0]
    if w_batch.shape != (m, spec.n_weights):
        raise NetError(f"weight batch has shape {w_batch.shape}")
    offs = spec.layer_offsets
    h = np.broadcast_to(x, (m, x.size))
    for i, (shape, act) in enumerate(zip(spec.layer_shapes(), spec.activations)):
        mat = w_batch[:, offs[i]:offs[i + 1]].reshape((m,) + shape)
        if spec.use_bias:
            s = np.einsum("bi,bio->bo", h, mat[:, :-1, :]) + mat[:, -1, :]
        else:
            s = np.einsum("bi,bio->bo", h, mat)
        h = softplus(s) if act == "softplus" else s
    return h


class Standardizer:
    """Per-feature affine scaling fitted once on a warmup window.

    Scales are floored so constant features pass through unchanged
    (shifted only); fitted constants stay fixed afterwards.
    """

    def __init__(self, mean, scale):
        self.mean = np.asarray(mean, dtype=float)
        self.scale = np.asarray(scale, dtype=float)

    @classmethod
    def fit(cls, rows, floor=1e-8):
        rows = np.asarray(rows, dtype=float)
        std = rows.std(axis=0)
        return cls(rows.mean(axis=0), np.where(std < floor, 1.0, std))

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def inverse(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.mean


def save_checkpoint(path, spec, w, extras=None):
    """Versioned binary checkpoint: spec header + flat weights (+ extras).

    ``extras`` is a mapping of additional float arrays (filter factor,
    scaler constants, step counter...) stored alongside under an ``extra_``
    prefix and returned verbatim by load_checkpoint.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (spec.n_weights,):
        raise NetError(f"weights have shape {w.shape}, spec needs "
                       f"({spec.n_weights},)")
    payload = {
        "format": np.array(CHECKPOINT_FORMAT),
        "layer_sizes": np.array(spec.layer_sizes),
        "activations": np.array(spec.activations),
        "use_bias": np.array(spec.use_bias),
        "w": w,
    }
    for key, val in (extras or {}).items():
        payload[f"extra_{key}"] = np.asarray(val)
    np.savez(path, **payload)


def load_checkpoint(path):
    """Returns (spec, w, extras dict)."""
    with np.load(path, allow_pickle=False) as data:
        if "format" not in data or int(data["format"]) != CHECKPOINT_FORMAT:
            raise NetError(f"{path}: not a format-{CHECKPOINT_FORMAT} checkpoint")
        spec = MlpSpec(layer_sizes=tuple(int(n) for n in data["layer_sizes"]),
                       activations=tuple(str(a) for a in data["activations"]),
                       use_bias=bool(data["use_bias"]))
        w = np.array(data["w"], dtype=float)
        extras = {key[6:]: np.array(data[key])
                  for key in data.files if key.startswith("extra_")}
    if w.shape != (spec.n_weights,):
        raise NetError(f"{path}: weight vector does not match its spec header")
    return spec, w, extras
