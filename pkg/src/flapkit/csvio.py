"""CSV emission for trajectory logs, sample streams, and traces.

Floats are written with 17 significant digits, which round-trips every
double exactly: parsing an emitted file and re-emitting it is
byte-identical. All files end with a trailing newline; rows are plain
comma-separated values with a single header line.
"""

import numpy as np

__all__ = [
    "format_row", "write_csv", "read_csv",
    "write_trajectory", "write_samples",
]


def format_row(values):
    return ",".join(f"{float(v):.17g}" for v in values)


def write_csv(path, header, rows):
    """Write one header line plus a row of floats per entry of ``rows``."""
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(format_row(row) + "\n")


def read_csv(path):
    """Read a file written by write_csv: (header list, float array).

    The array has shape (n_rows, n_cols); zero rows give shape (0, n_cols).
    """
    with open(path, "r", newline="\n") as fh:
        header = fh.readline().rstrip("\n").split(",")
        data = [[float(tok) for tok in line.rstrip("\n").split(",")]
                for line in fh if line.strip()]
    arr = np.asarray(data, dtype=float)
    if arr.size == 0:
        arr = arr.reshape(0, len(header))
    return header, arr


def trajectory_header(n_q):
    return (["t"] + [f"q{i}" for i in range(n_q)]
            + [f"qdot{i}" for i in range(n_q)])


def samples_header(n_q):
    return (["t"] + [f"x{i}" for i in range(2 * n_q)]
            + [f"a{i}" for i in range(n_q)])


def write_trajectory(path, result):
    """Trajectory log: t,q0,...,qdot0,... one row per integration step."""
    rows = (np.concatenate([[t], s]) for t, s in zip(result.times, result.states))
    write_csv(path, trajectory_header(result.n_q), rows)


def write_samples(path, result):
    """Sample stream: t,x0,...,a0,... one row per training sample."""
    rows = (np.concatenate([[s.t], s.x, s.a]) for s in result.samples)
    write_csv(path, samples_header(result.n_q), rows)
