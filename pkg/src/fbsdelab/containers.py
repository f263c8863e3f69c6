"""Binary and CSV containers for solutions and path bundles.

Both binary formats start with an 8-byte magic, then a little-endian float64
header, then row-major little-endian float64 payloads.

GRIDSOL1 header: dim, dim_u, steps, dx, horizon, residual_norm, x_lo[dim], x_hi[dim].
Payload: u with shape (steps+1, *lattice, dim_u).  Derivatives are recomputed on read.

PATHBND1 header: seed as one little-endian uint64, then float64 values
n_paths, steps, dim_x, dim_y, start_index, has_y, has_z, has_weight.
Payload: t_nodes, x_paths, brownian_increments, escaped (0/1), then y_paths,
z_paths and girsanov_logweight when flagged.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .fbsde import PathBundle
from .solver import Grid, GridSolution

GRID_MAGIC = b"GRIDSOL1"
PATH_MAGIC = b"PATHBND1"
_F8 = np.dtype("<f8")


def _floats(values) -> bytes:
    return np.asarray(values, dtype=_F8).tobytes()


class _Reader:
    def __init__(self, data: bytes, magic: bytes):
        if data[:8] != magic:
            raise ValueError(f"not a {magic.decode()} container")
        self.data, self.pos = data, 8

    def floats(self, count: int) -> np.ndarray:
        end = self.pos + 8 * count
        if end > len(self.data):
            raise ValueError("truncated container")
        out = np.frombuffer(self.data[self.pos:end], dtype=_F8).astype(float)
        self.pos = end
        return out

    def array(self, shape) -> np.ndarray:
        return self.floats(int(np.prod(shape))).reshape(shape)

    def done(self):
        if self.pos != len(self.data):
            raise ValueError("trailing bytes in container")


def grid_solution_bytes(sol: GridSolution) -> bytes:
    g = sol.grid
    head = [g.dim, sol.dim_u, g.steps, g.dx, g.horizon, sol.residual_norm, *g.x_lo, *g.x_hi]
    return GRID_MAGIC + _floats(head) + _floats(np.ascontiguousarray(sol.u))


def grid_solution_from_bytes(data: bytes) -> GridSolution:
    r = _Reader(data, GRID_MAGIC)
    dim, dim_u, steps, dx, horizon, resid = r.floats(6)
    dim, dim_u, steps = int(dim), int(dim_u), int(steps)
    lo, hi = r.floats(dim), r.floats(dim)
    grid = Grid(tuple(float(v) for v in lo), tuple(float(v) for v in hi), float(dx), float(horizon), steps)
    u = r.array((steps + 1,) + grid.shape + (dim_u,))
    r.done()
    return GridSolution(grid, u, float(resid))


def write_grid_solution(sol: GridSolution, path) -> Path:
    path = Path(path)
    path.write_bytes(grid_solution_bytes(sol))
    return path


def read_grid_solution(path) -> GridSolution:
    return grid_solution_from_bytes(Path(path).read_bytes())


def grid_slice_csv(sol: GridSolution, time_index: int) -> str:
    """One time slice as CSV with columns t, x1..xd, component, u, du1..dud."""
    g = sol.grid
    d = g.dim
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"x{j + 1}" for j in range(d)] + ["component", "u"]
               + [f"du{j + 1}" for j in range(d)])
    t = g.t_nodes[time_index]
    x = g.nodes
    u = sol.u[time_index].reshape(-1, sol.dim_u)
    du = sol.du[time_index].reshape(-1, sol.dim_u, d)
    for m in range(len(x)):
        for i in range(sol.dim_u):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in x[m]] + [i, repr(float(u[m, i]))]
                       + [repr(float(v)) for v in du[m, i]])
    return buf.getvalue()


def path_bundle_bytes(b: PathBundle) -> bytes:
    x = np.asarray(b.x_paths)
    n, kp1, dx = x.shape
    dy = 0 if b.y_paths is None else np.asarray(b.y_paths).shape[-1]
    flags = [b.y_paths is not None, b.z_paths is not None, b.girsanov_logweight is not None]
    head = [b.n_paths, kp1 - 1, dx, dy, b.start_index, *map(float, flags)]
    parts = [PATH_MAGIC, np.array([b.seed], dtype="<u8").tobytes(), _floats(head),
             _floats(b.t_nodes), _floats(x), _floats(b.brownian_increments),
             _floats(np.asarray(b.escaped, dtype=float))]
    for arr in (b.y_paths, b.z_paths, b.girsanov_logweight):
        if arr is not None:
            parts.append(_floats(np.ascontiguousarray(arr)))
    return b"".join(parts)


def path_bundle_from_bytes(data: bytes) -> PathBundle:
    if data[:8] != PATH_MAGIC:
        raise ValueError("not a PATHBND1 container")
    seed = int(np.frombuffer(data[8:16], dtype="<u8")[0])
    r = _Reader(PATH_MAGIC + data[16:], PATH_MAGIC)
    n, steps, dx, dy, start, has_y, has_z, has_w = (int(v) for v in r.floats(8))
    t = r.floats(steps + 1)
    x = r.array((n, steps + 1, dx))
    inc = r.array((n, steps, dx))
    esc = r.floats(n).astype(bool)
    y = r.array((n, steps + 1, dy)) if has_y else None
    z = r.array((n, steps + 1, dy, dx)) if has_z else None
    lw = r.floats(n) if has_w else None
    r.done()
    return PathBundle(seed, n, t, start, x, inc, esc, y, z, lw)


def write_path_bundle(b: PathBundle, path) -> Path:
    path = Path(path)
    path.write_bytes(path_bundle_bytes(b))
    return path


def read_path_bundle(path) -> PathBundle:
    return path_bundle_from_bytes(Path(path).read_bytes())


def path_sample_csv(b: PathBundle, count: int = 10) -> str:
    """First ``count`` paths, one row per (path, time): path, t, x..., y..., escaped."""
    x = np.asarray(b.x_paths)
    d = x.shape[-1]
    dy = 0 if b.y_paths is None else np.asarray(b.y_paths).shape[-1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "t"] + [f"x{j + 1}" for j in range(d)] + [f"y{i + 1}" for i in range(dy)]
               + ["escaped"])
    for p in range(min(count, b.n_paths)):
        for k, t in enumerate(b.t_nodes):
            ys = [] if dy == 0 else [repr(float(v)) for v in b.y_paths[p, k]]
            w.writerow([b.start_index + p, repr(float(t))] + [repr(float(v)) for v in x[p, k]] + ys
                       + [int(bool(b.escaped[p]))])
    return buf.getvalue()
