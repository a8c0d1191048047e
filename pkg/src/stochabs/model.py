"""Boxes, grids, parametric gain functions and system descriptions.

All norms are infinity norms unless a function says otherwise.  Grids follow
the ``k * spacing`` convention: a point belongs to ``[B]_eta`` when every
coordinate is an integer multiple of ``eta`` and the point lies in ``B``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

# Relative slack used when deciding whether k * spacing sits on a box face.
GRID_TOL = 1e-9


@dataclass(frozen=True)
class BoxUnion:
    """Finite union of closed axis-aligned boxes."""

    boxes: tuple[tuple[tuple[float, float], ...], ...]

    def __post_init__(self) -> None:
        boxes = tuple(tuple((float(lo), float(hi)) for lo, hi in box) for box in self.boxes)
        object.__setattr__(self, "boxes", boxes)
        if not boxes:
            return
        dim = len(boxes[0])
        for box in boxes:
            if len(box) != dim or dim == 0:
                raise ValueError("all boxes must share the same non-zero dimension")
            for lo, hi in box:
                if not lo < hi:
                    raise ValueError(f"box side [{lo}, {hi}] must satisfy lo < hi")

    @classmethod
    def of(cls, *boxes: Sequence[Sequence[float]]) -> BoxUnion:
        return cls(tuple(tuple((lo, hi) for lo, hi in box) for box in boxes))

    @property
    def dim(self) -> int:
        if not self.boxes:
            raise ValueError("empty box union")
        return len(self.boxes[0])

    def lo_hi(self) -> tuple[np.ndarray, np.ndarray]:
        """Arrays of shape (boxes, dim) with lower and upper faces."""
        arr = np.asarray(self.boxes, dtype=float)
        return arr[..., 0], arr[..., 1]

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.lo_hi()
        return lo.min(axis=0), hi.max(axis=0)

    def contains(self, x: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Closed membership test for points of shape (..., dim)."""
        return distance_to_set(x, self) <= tol

    def sup_norm(self) -> float:
        """sup over the union of the infinity norm."""
        lo, hi = self.lo_hi()
        return float(np.max(np.maximum(np.abs(lo), np.abs(hi))))

    def vertices(self) -> np.ndarray:
        pts = []
        for box in self.boxes:
            pts.extend(np.array(v) for v in _product(box))
        return np.array(pts)

    def to_json(self) -> list:
        return [[list(side) for side in box] for box in self.boxes]


def _product(box: Sequence[tuple[float, float]]) -> Iterable[tuple[float, ...]]:
    if not box:
        yield ()
        return
    for rest in _product(box[1:]):
        for v in box[0]:
            yield (v, *rest)


def span(bu: BoxUnion) -> float:
    """Smallest side length over all boxes of the union."""
    if not bu.boxes:
        raise ValueError("empty box union")
    lo, hi = bu.lo_hi()
    return float(np.min(hi - lo))


def axis_range(lo: float, hi: float, spacing: float) -> tuple[int, int]:
    """Integer range [kmin, kmax] of multiples of ``spacing`` inside [lo, hi]."""
    kmin = math.ceil(lo / spacing - GRID_TOL)
    kmax = math.floor(hi / spacing + GRID_TOL)
    return kmin, kmax


@dataclass(frozen=True)
class GridAxis:
    kmin: int
    count: int

    @property
    def kmax(self) -> int:
        return self.kmin + self.count - 1


@dataclass(frozen=True)
class Grid:
    """Rectangular lattice ``k * spacing`` with ``k`` in a product of integer ranges.

    Flat indices enumerate multi-indices lexicographically, last axis fastest.
    """

    spacing: float
    axes: tuple[GridAxis, ...]

    @classmethod
    def over_box(cls, bu: BoxUnion, spacing: float) -> Grid:
        if spacing <= 0:
            raise ValueError("spacing must be positive")
        if spacing > span(bu) * (1 + GRID_TOL):
            raise ValueError("spacing exceeds span")
        if len(bu.boxes) != 1:
            raise ValueError("a rectangular grid needs a single box")
        axes = []
        for lo, hi in bu.boxes[0]:
            kmin, kmax = axis_range(lo, hi, spacing)
            axes.append(GridAxis(kmin, kmax - kmin + 1))
        return cls(float(spacing), tuple(axes))

    @property
    def n(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.count for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def kmin(self) -> np.ndarray:
        return np.array([a.kmin for a in self.axes], dtype=np.int64)

    @property
    def kmax(self) -> np.ndarray:
        return np.array([a.kmax for a in self.axes], dtype=np.int64)

    def multi_index(self, flat: np.ndarray) -> np.ndarray:
        """Flat index -> integer multi-index k, shape (..., n)."""
        local = np.stack(np.unravel_index(np.asarray(flat, dtype=np.int64), self.shape), axis=-1)
        return local + self.kmin

    def flat_index(self, k: np.ndarray) -> np.ndarray:
        """Multi-index -> flat index; -1 where k falls outside the grid."""
        k = np.asarray(k, dtype=np.int64)
        local = k - self.kmin
        inside = np.all((local >= 0) & (local < np.array(self.shape)), axis=-1)
        clipped = np.clip(local, 0, np.array(self.shape) - 1)
        flat = np.ravel_multi_index(tuple(np.moveaxis(clipped, -1, 0)), self.shape)
        return np.where(inside, flat, -1)

    def coords(self, flat: np.ndarray) -> np.ndarray:
        return self.multi_index(flat) * self.spacing

    def all_coords(self) -> np.ndarray:
        return self.coords(np.arange(self.size))

    def locate(self, x: np.ndarray) -> np.ndarray:
        """Flat index of the nearest grid point of x, -1 if that point is off-grid."""
        return self.flat_index(nearest_index(x, self.spacing))


def grid_indices(bu: BoxUnion, spacing: float) -> np.ndarray:
    """Sorted, deduplicated integer multi-indices of ``[bu]_spacing``."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if spacing > span(bu) * (1 + GRID_TOL):
        raise ValueError("spacing exceeds span")
    parts = []
    for box in bu.boxes:
        ranges = [np.arange(*_inclusive(axis_range(lo, hi, spacing))) for lo, hi in box]
        mesh = np.meshgrid(*ranges, indexing="ij")
        parts.append(np.stack([m.ravel() for m in mesh], axis=-1))
    k = np.concatenate(parts, axis=0)
    return np.unique(k, axis=0)


def _inclusive(r: tuple[int, int]) -> tuple[int, int]:
    return r[0], r[1] + 1


def grid_points(bu: BoxUnion, spacing: float) -> np.ndarray:
    """Coordinates of ``[bu]_spacing`` in lexicographic multi-index order."""
    return grid_indices(bu, spacing) * float(spacing)


def nearest_index(x: np.ndarray, spacing: float) -> np.ndarray:
    """Per-coordinate round(x / spacing), half-way ties going toward -inf."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    return np.ceil(np.asarray(x, dtype=float) / spacing - 0.5).astype(np.int64)


def nearest_grid_point(x: np.ndarray, spacing: float) -> np.ndarray:
    return nearest_index(x, spacing) * float(spacing)


def distance_to_set(x: np.ndarray, bu: BoxUnion) -> np.ndarray:
    """Infinity-norm distance from points (..., dim) to the union."""
    x = np.asarray(x, dtype=float)
    lo, hi = bu.lo_hi()
    xe = x[..., None, :]
    gap = np.maximum(np.maximum(lo - xe, xe - hi), 0.0)
    return gap.max(axis=-1).min(axis=-1)


@dataclass(frozen=True)
class GainFn:
    """r -> c * r**p."""

    c: float
    p: float = 1.0

    def __post_init__(self) -> None:
        if self.c < 0 or self.p <= 0:
            raise ValueError("gain function needs c >= 0 and p > 0")

    def __call__(self, r):
        return self.c * np.power(r, self.p)

    def inverse(self, y):
        if self.c == 0:
            raise ValueError("zero gain has no inverse")
        return np.power(np.asarray(y, dtype=float) / self.c, 1.0 / self.p)

    @property
    def is_zero(self) -> bool:
        return self.c == 0


@dataclass(frozen=True)
class KLFn:
    """(r, s) -> c * r**p * exp(-kappa * s)."""

    c: float
    p: float
    kappa: float

    def __post_init__(self) -> None:
        if self.c < 0 or self.p <= 0 or self.kappa <= 0:
            raise ValueError("KL function needs c >= 0, p > 0, kappa > 0")

    def __call__(self, r, s):
        return self.c * np.power(r, self.p) * np.exp(-self.kappa * np.asarray(s, dtype=float))


def induced_inf_norm(M: np.ndarray) -> float:
    return float(np.max(np.sum(np.abs(np.atleast_2d(M)), axis=1)))


DRIFTS = ("linear", "pendulum")


@dataclass(frozen=True)
class SystemSpec:
    """Stochastic control system dx = f(x, u) dt + [s_1 x ... s_p x] dW."""

    n: int
    m: int
    p: int
    drift: str
    params: Mapping[str, Any]
    sigmas: np.ndarray
    L_x: float
    L_u: float
    Z: float
    input_set: BoxUnion
    domain: BoxUnion
    _A: np.ndarray | None = field(default=None, repr=False, compare=False)
    _B: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.drift not in DRIFTS:
            raise ValueError(f"unknown drift {self.drift!r}; catalog is {DRIFTS}")
        sig = np.asarray(self.sigmas, dtype=float).reshape(self.p, self.n, self.n)
        object.__setattr__(self, "sigmas", sig)
        if self.domain.dim != self.n or self.input_set.dim != self.m:
            raise ValueError("domain / input set dimension mismatch")
        if self.drift == "linear":
            A = np.asarray(self.params["A"], dtype=float)
            B = np.asarray(self.params["B"], dtype=float)
            if A.shape != (self.n, self.n) or B.shape != (self.n, self.m):
                raise ValueError("A must be n x n and B n x m")
            object.__setattr__(self, "_A", A)
            object.__setattr__(self, "_B", B)
        else:
            if self.n != 2 or self.m != 1:
                raise ValueError("pendulum drift needs n=2, m=1")
            for key in ("g", "l", "m_mass", "k"):
                if key not in self.params:
                    raise ValueError(f"pendulum drift needs parameter {key!r}")

    @property
    def A(self) -> np.ndarray:
        if self._A is None:
            raise ValueError("drift is not linear")
        return self._A

    @property
    def B(self) -> np.ndarray:
        if self._B is None:
            raise ValueError("drift is not linear")
        return self._B

    def f(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Drift for x of shape (..., n) and u broadcastable to (..., m)."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if self.drift == "linear":
            return x @ self._A.T + u @ self._B.T
        g, l, mass, k = (float(self.params[s]) for s in ("g", "l", "m_mass", "k"))
        x1, x2 = x[..., 0], x[..., 1]
        dx2 = -(g / l) * np.sin(x1) - (k / mass) * x2 + u[..., 0] / (mass * l * l)
        return np.stack([np.broadcast_to(x2, dx2.shape), dx2], axis=-1)

    def jacobian(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """df/dx, shape (..., n, n)."""
        x = np.asarray(x, dtype=float)
        if self.drift == "linear":
            return np.broadcast_to(self._A, x.shape[:-1] + (self.n, self.n)).copy()
        g, l, mass, k = (float(self.params[s]) for s in ("g", "l", "m_mass", "k"))
        J = np.zeros(x.shape[:-1] + (2, 2))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = -(g / l) * np.cos(x[..., 0])
        J[..., 1, 1] = -k / mass
        return J

    def sigma(self, x: np.ndarray) -> np.ndarray:
        """Diffusion matrix [s_1 x ... s_p x], shape (..., n, p)."""
        x = np.asarray(x, dtype=float)
        return np.einsum("pij,...j->...ip", self.sigmas, x)

    def jacobian_u(self) -> np.ndarray:
        if self.drift == "linear":
            return self._B
        l, mass = float(self.params["l"]), float(self.params["m_mass"])
        return np.array([[0.0], [1.0 / (mass * l * l)]])


def probe_lipschitz(sys: SystemSpec, samples: int, seed: int) -> dict[str, float]:
    """Largest sampled finite-difference ratios of f and sigma on domain x input set."""
    rng = np.random.default_rng(seed)
    x, xp = sample_boxes(sys.domain, 2 * samples, rng).reshape(2, samples, sys.n)
    u, up = sample_boxes(sys.input_set, 2 * samples, rng).reshape(2, samples, sys.m)
    dx = np.abs(x - xp).max(axis=-1)
    du = np.abs(u - up).max(axis=-1)
    fx = np.abs(sys.f(x, u) - sys.f(xp, u)).max(axis=-1) / dx
    fu = np.abs(sys.f(x, u) - sys.f(x, up)).max(axis=-1) / du
    sx = np.abs(sys.sigma(x) - sys.sigma(xp)).max(axis=(-2, -1)) / dx
    return {"L_x": float(fx.max()), "L_u": float(fu.max()), "Z": float(sx.max())}


def sample_boxes(bu: BoxUnion, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples from the union, boxes weighted by volume."""
    lo, hi = bu.lo_hi()
    vol = np.prod(hi - lo, axis=1)
    which = rng.choice(len(vol), size=count, p=vol / vol.sum())
    return lo[which] + rng.random((count, bu.dim)) * (hi[which] - lo[which])
