"""Deterministic finite symbolic model over a state grid and a finite input list.

Each (grid state, input) pair is integrated along the noise-free dynamics for
one sampling period and the endpoint is snapped to the nearest grid point.
Endpoints whose snapped point leaves the domain go to ``SINK``.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import BoxUnion, Grid, GridAxis, SystemSpec, nearest_index

SINK = np.uint32(0xFFFFFFFF)
MAGIC = b"SSYM"
VERSION = 1
BLOCK = 16384


class IntegrationError(RuntimeError):
    pass


class FormatError(ValueError):
    """Malformed abstraction or controller file; ``code`` names the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


def _drift(sys: SystemSpec):
    # Linear drift is evaluated element by element so results never depend on
    # how a BLAS kernel blocks the batch.
    if sys.drift != "linear":
        return sys.f
    A, B = sys.A, sys.B

    def f(x, u):
        cols = []
        for i in range(sys.n):
            acc = A[i, 0] * x[..., 0]
            for j in range(1, sys.n):
                acc = acc + A[i, j] * x[..., j]
            for j in range(sys.m):
                acc = acc + B[i, j] * u[..., j]
            cols.append(acc)
        return np.stack(cols, axis=-1)

    return f


def integrate_nominal(sys: SystemSpec, x, u, tau: float, substeps: int) -> np.ndarray:
    """Classic RK4 with fixed step tau/substeps; x (..., n), u broadcastable to (..., m)."""
    with np.errstate(all="ignore"):
        x = _rk4(sys, x, u, tau, substeps)
    if not np.all(np.isfinite(x)):
        raise IntegrationError("integration diverged")
    return x


def _rk4(sys: SystemSpec, x, u, tau: float, substeps: int) -> np.ndarray:
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    f = _drift(sys)
    x = np.array(x, dtype=float)
    u = np.broadcast_to(np.asarray(u, dtype=float), x.shape[:-1] + (sys.m,))
    h = tau / substeps
    for _ in range(substeps):
        k1 = f(x, u)
        k2 = f(x + (0.5 * h) * k1, u)
        k3 = f(x + (0.5 * h) * k2, u)
        k4 = f(x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def default_substeps(L_x: float, tau: float, eta: float) -> int:
    """Smallest power of two with L_x*tau*(tau/s)^4 <= eta/10 and L_x*tau/s <= 1."""
    s = 1
    while L_x * tau * (tau / s) ** 4 > eta / 10 or L_x * tau / s > 1:
        s *= 2
    return s


@dataclass(frozen=True)
class Abstraction:
    tau: float
    eta: float
    eps: float
    q: int
    grid: Grid
    inputs: np.ndarray
    successors: np.ndarray

    @property
    def num_states(self) -> int:
        return self.grid.size

    @property
    def num_inputs(self) -> int:
        return len(self.inputs)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Abstraction):
            return NotImplemented
        return (self.tau == other.tau and self.eta == other.eta and self.eps == other.eps
                and self.q == other.q and self.grid == other.grid
                and np.array_equal(self.inputs, other.inputs)
                and np.array_equal(self.successors, other.successors))

    __hash__ = None  # type: ignore[assignment]


def successors_of(sys: SystemSpec, grid: Grid, inputs: np.ndarray, tau: float,
                  substeps: int, states: np.ndarray) -> np.ndarray:
    """Successor rows (len(states), len(inputs)) for the given flat state indices."""
    x = np.broadcast_to(grid.coords(states)[:, None, :], (len(states), len(inputs), sys.n))
    with np.errstate(all="ignore"):
        end = _rk4(sys, x, inputs[None, :, :], tau, substeps)
    bad = ~np.all(np.isfinite(end), axis=-1)
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise IntegrationError(f"integration diverged at state {int(states[i])} "
                               f"{grid.coords(states[i]).tolist()}, input {int(j)}")
    flat = grid.flat_index(nearest_index(end, grid.spacing))
    return np.where(flat < 0, SINK, flat).astype(np.uint32)


def calibrate(sys: SystemSpec, grid: Grid, inputs: np.ndarray, tau: float, substeps: int,
              samples: int = 1000, seed: int = 0, max_doublings: int = 4) -> int:
    """Smallest substeps (doubling from the given count) whose sampled successors
    do not change when doubled once more; aborts after ``max_doublings``."""
    rng = np.random.default_rng(seed)
    states = np.sort(rng.integers(0, grid.size, size=min(samples, grid.size)))
    prev = successors_of(sys, grid, inputs, tau, substeps, states)
    for _ in range(max_doublings + 1):
        nxt = successors_of(sys, grid, inputs, tau, 2 * substeps, states)
        if np.array_equal(prev, nxt):
            return substeps
        substeps, prev = 2 * substeps, nxt
    raise IntegrationError(f"insufficient substeps: sampled successors still change at {substeps}")


def build(sys: SystemSpec, domain: BoxUnion, inputs: np.ndarray, tau: float, eta: float,
          eps: float, q: int, substeps: int | None = None, workers: int = 1,
          check_substeps: bool = True) -> Abstraction:
    """Full successor table; the result does not depend on ``workers``.

    Without explicit ``substeps`` the count starts at ``default_substeps`` and
    is doubled by ``calibrate`` until snapping is stable.
    """
    grid = Grid.over_box(domain, eta)
    if grid.size >= int(SINK):
        raise ValueError("grid too large for 32-bit state indices")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float)).reshape(-1, sys.m)
    if substeps is None:
        substeps = default_substeps(sys.L_x, tau, eta)
    if check_substeps:
        substeps = calibrate(sys, grid, inputs, tau, substeps)
    table = np.empty((grid.size, len(inputs)), dtype=np.uint32)

    def work(start: int) -> None:
        states = np.arange(start, min(start + BLOCK, grid.size))
        table[states] = successors_of(sys, grid, inputs, tau, substeps, states)

    starts = range(0, grid.size, BLOCK)
    if workers <= 1:
        for s in starts:
            work(s)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, starts))
    return Abstraction(float(tau), float(eta), float(eps), int(q), grid, inputs, table)


def relation_check(sys: SystemSpec, a: Abstraction, samples: int, seed: int,
                   substeps: int) -> float:
    """Largest ||nominal endpoint - successor||_inf over sampled non-sink pairs."""
    rng = np.random.default_rng(seed)
    s = rng.integers(0, a.num_states, size=samples)
    j = rng.integers(0, a.num_inputs, size=samples)
    end = integrate_nominal(sys, a.grid.coords(s), a.inputs[j], a.tau, substeps)
    succ = a.successors[s, j]
    keep = succ != SINK
    if not np.any(keep):
        return 0.0
    return float(np.abs(end[keep] - a.grid.coords(succ[keep].astype(np.int64))).max())


# ------------------------------------------------------------------ file I/O

_HEAD = struct.Struct("<4sIIIddd")


def header_bytes(a: Abstraction) -> bytes:
    out = [_HEAD.pack(MAGIC, VERSION, a.grid.n, a.q, a.tau, a.eta, a.eps)]
    for ax in a.grid.axes:
        out.append(struct.pack("<ddI", ax.kmin * a.eta, ax.kmax * a.eta, ax.count))
    m = a.inputs.shape[1]
    out.append(struct.pack("<II", m, a.num_inputs))
    out.append(np.ascontiguousarray(a.inputs, dtype="<f8").tobytes())
    return b"".join(out)


def save(a: Abstraction, path) -> None:
    with open(path, "wb") as fh:
        fh.write(header_bytes(a))
        fh.write(np.ascontiguousarray(a.successors, dtype="<u4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError("truncated", "file ends inside the header")
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.data):
            raise FormatError("truncated", "file ends inside a table")
        arr = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.pos).copy()
        self.pos += size
        return arr


def load(path) -> Abstraction:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise FormatError("bad_magic", f"{path} is not an SSYM file")
    _, version, n, q, tau, eta, eps = r.take(_HEAD.format)
    if version != VERSION:
        raise FormatError("version", f"unsupported SSYM version {version}")
    axes = []
    for _ in range(n):
        lo, _hi, count = r.take("<ddI")
        axes.append(GridAxis(int(round(lo / eta)), int(count)))
    m, count = r.take("<II")
    inputs = r.array("<f8", m * count).reshape(count, m)
    grid = Grid(float(eta), tuple(axes))
    table = r.array("<u4", grid.size * count).reshape(grid.size, count)
    if r.pos != len(data):
        raise FormatError("trailing", "unexpected bytes after the successor table")
    return Abstraction(float(tau), float(eta), float(eps), int(q), grid, inputs, table)


def file_size(n: int, m: int, states: int, inputs: int) -> int:
    return _HEAD.size + n * struct.calcsize("<ddI") + 8 + 8 * m * inputs + 4 * states * inputs


def sink_fraction(a: Abstraction) -> float:
    return float(np.mean(a.successors == SINK))


def equilibrium_inputs(a: Abstraction) -> np.ndarray:
    """Boolean table marking pairs whose successor is the state itself."""
    return a.successors == np.arange(a.num_states, dtype=np.uint32)[:, None]


def throughput(states: int, seconds: float) -> float:
    return states / seconds if seconds > 0 else math.inf
