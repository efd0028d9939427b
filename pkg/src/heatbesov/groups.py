"""Concrete unimodular group models sampled on rectangular grids.

Shipped models: the real line and plane, flat tori, and the first
Heisenberg group, all in coordinates where Haar measure is Lebesgue
measure, so grid quadrature is a plain weighted sum.  Each model carries
a generating family of left-invariant vector fields satisfying the
Hormander condition, a distance estimator for the associated
Carnot-Caratheodory metric, and ball-volume tabulation.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra as _sparse_dijkstra

TWO_PI = 2.0 * math.pi

EUCLID_LINE = "euclid_line"
EUCLID_PLANE = "euclid_plane"
TORUS = "torus"
HEISENBERG = "heisenberg1"

#: Composing more centered-difference stencils than this drowns in
#: roundoff noise (error grows like h^(2-n) * eps).
MAX_FIELD_ORDER = 4


class DimensionMismatchError(ValueError):
    pass


class FieldOrderError(ValueError):
    pass


@dataclass(frozen=True)
class GroupModel:
    """A unimodular group in coordinates with unit Haar density.

    ``n_fields`` generators define the horizontal distribution; for the
    Heisenberg model these are X = d/dx - (y/2) d/dz and
    Y = d/dy + (x/2) d/dz, whose bracket spans the missing direction.
    """

    kind: str
    dim: int
    n_fields: int
    periodic: tuple[bool, ...]
    period: float = 0.0

    def identity(self) -> np.ndarray:
        return np.zeros(self.dim)


def euclid_line() -> GroupModel:
    return GroupModel(EUCLID_LINE, 1, 1, (False,))


def euclid_plane() -> GroupModel:
    return GroupModel(EUCLID_PLANE, 2, 2, (False, False))


def torus(dim: int = 1) -> GroupModel:
    if dim < 1:
        raise ValueError("torus dimension must be >= 1")
    return GroupModel(TORUS, dim, dim, (True,) * dim, period=TWO_PI)


def heisenberg() -> GroupModel:
    return GroupModel(HEISENBERG, 3, 2, (False, False, False))


def _check_coords(model: GroupModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.dim:
        raise DimensionMismatchError(
            f"expected coordinates of dimension {model.dim}, got shape {x.shape}"
        )
    return x


def group_mul(model: GroupModel, x, y) -> np.ndarray:
    """Group product, broadcasting over leading axes."""
    x = _check_coords(model, x)
    y = _check_coords(model, y)
    if model.kind in (EUCLID_LINE, EUCLID_PLANE):
        return x + y
    if model.kind == TORUS:
        return np.mod(x + y, model.period)
    if model.kind == HEISENBERG:
        out = x + y
        twist = 0.5 * (x[..., 0] * y[..., 1] - x[..., 1] * y[..., 0])
        out = np.array(out, dtype=float)
        out[..., 2] += twist
        return out
    raise ValueError(f"unknown group kind {model.kind!r}")


def group_inverse(model: GroupModel, x) -> np.ndarray:
    x = _check_coords(model, x)
    if model.kind == TORUS:
        return np.mod(-x, model.period)
    # Euclidean and Heisenberg: (x,y,z)^-1 = (-x,-y,-z).
    return -x


def cc_norm(model: GroupModel, y) -> np.ndarray | float:
    """Distance-to-identity estimator |y|.

    Exact for Euclidean models (Euclidean norm) and tori (per-axis arc
    distance).  For the Heisenberg model this is the homogeneous gauge
    ((x^2+y^2)^2 + 16 z^2)^(1/4), which is bi-Lipschitz to the true
    Carnot-Caratheodory distance; ``CarnotLattice`` quantifies the
    distortion by shortest horizontal lattice paths.
    """
    y = _check_coords(model, y)
    if model.kind in (EUCLID_LINE, EUCLID_PLANE):
        out = np.sqrt(np.sum(y * y, axis=-1))
    elif model.kind == TORUS:
        d = np.mod(y, model.period)
        d = np.minimum(d, model.period - d)
        out = np.sqrt(np.sum(d * d, axis=-1))
    elif model.kind == HEISENBERG:
        r2 = y[..., 0] ** 2 + y[..., 1] ** 2
        out = (r2**2 + 16.0 * y[..., 2] ** 2) ** 0.25
    else:
        raise ValueError(f"unknown group kind {model.kind!r}")
    if out.ndim == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# grids and grid functions


@dataclass(frozen=True)
class Grid:
    """Rectangular sampling grid with Haar cell weights.

    Periodic axes place nodes at a + i*h with h = (b-a)/N (endpoint
    identified with the start); non-periodic axes use cell centers
    a + (i+1/2)*h so the cell measure matches the node spacing.  A guard
    band (default 10% of the window per side) is excluded from norm
    quadrature on non-periodic axes to control truncation bias.
    """

    extents: tuple[tuple[float, float], ...]
    counts: tuple[int, ...]
    periodic: tuple[bool, ...]
    guard_fraction: float = 0.1

    def __post_init__(self):
        if not (len(self.extents) == len(self.counts) == len(self.periodic)):
            raise ValueError("extents, counts, periodic must have equal length")
        for (a, b), n in zip(self.extents, self.counts):
            if n < 4:
                raise ValueError("need at least 4 nodes per axis")
            if not b > a:
                raise ValueError("extent must be increasing")

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def steps(self) -> tuple[float, ...]:
        return tuple((b - a) / n for (a, b), n in zip(self.extents, self.counts))

    @property
    def cell_measure(self) -> float:
        return float(np.prod(self.steps))

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.counts))

    def axis_nodes(self, axis: int) -> np.ndarray:
        (a, b), n = self.extents[axis], self.counts[axis]
        h = (b - a) / n
        if self.periodic[axis]:
            return a + h * np.arange(n)
        return a + h * (np.arange(n) + 0.5)

    def axes(self) -> tuple[np.ndarray, ...]:
        return tuple(self.axis_nodes(i) for i in range(self.dim))

    def coords(self) -> list[np.ndarray]:
        """Full coordinate arrays of shape ``counts`` (ij indexing)."""
        return list(np.meshgrid(*self.axes(), indexing="ij"))

    def points(self) -> np.ndarray:
        """All nodes as an (n_nodes, dim) array."""
        return np.stack([c.ravel() for c in self.coords()], axis=-1)

    def guard_mask(self) -> np.ndarray:
        """True on nodes included in norm quadrature."""
        mask = np.ones(self.counts, dtype=bool)
        for ax in range(self.dim):
            if self.periodic[ax]:
                continue
            a, b = self.extents[ax]
            g = self.guard_fraction * (b - a)
            nodes = self.axis_nodes(ax)
            keep = (nodes >= a + g) & (nodes <= b - g)
            shape = [1] * self.dim
            shape[ax] = self.counts[ax]
            mask &= keep.reshape(shape)
        return mask

    def refined(self, factor: int = 2) -> "Grid":
        return Grid(
            self.extents,
            tuple(n * factor for n in self.counts),
            self.periodic,
            self.guard_fraction,
        )


def default_grid(model: GroupModel, scale: int = 1) -> Grid:
    """A serviceable grid per model; ``scale`` doubles resolution."""
    if model.kind == EUCLID_LINE:
        return Grid(((-8.0, 8.0),), (256 * scale,), model.periodic)
    if model.kind == EUCLID_PLANE:
        return Grid(((-4.0, 4.0),) * 2, (64 * scale,) * 2, model.periodic)
    if model.kind == TORUS:
        n = 256 * scale if model.dim == 1 else 48 * scale
        return Grid(((0.0, TWO_PI),) * model.dim, (n,) * model.dim, model.periodic)
    if model.kind == HEISENBERG:
        return Grid(((-2.4, 2.4),) * 3, (16 * scale + 1,) * 3, model.periodic)
    raise ValueError(model.kind)


@dataclass
class GridFunction:
    """A real function tabulated on a grid; the universal operand."""

    group: GroupModel
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.counts:
            raise ValueError(
                f"values shape {self.values.shape} != grid counts {self.grid.counts}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid function values must be finite")

    @classmethod
    def from_callable(cls, group: GroupModel, grid: Grid, fn) -> "GridFunction":
        return cls(group, grid, fn(*grid.coords()))

    def with_values(self, values: np.ndarray) -> "GridFunction":
        return GridFunction(self.group, self.grid, values)

    def integral(self) -> float:
        return float(self.grid.cell_measure * self.values.sum())

    def __add__(self, other):
        if isinstance(other, GridFunction):
            return self.with_values(self.values + other.values)
        return self.with_values(self.values + other)

    def __sub__(self, other):
        if isinstance(other, GridFunction):
            return self.with_values(self.values - other.values)
        return self.with_values(self.values - other)

    def __mul__(self, other):
        if isinstance(other, GridFunction):
            return self.with_values(self.values * other.values)
        return self.with_values(self.values * other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.with_values(-self.values)


# ---------------------------------------------------------------------------
# left-invariant vector fields by centered differences


def _axis_diff(values: np.ndarray, axis: int, h: float, periodic: bool) -> np.ndarray:
    if periodic:
        return (np.roll(values, -1, axis=axis) - np.roll(values, 1, axis=axis)) / (2.0 * h)
    return np.gradient(values, h, axis=axis, edge_order=2)


def apply_field(f: GridFunction, i: int) -> GridFunction:
    """Apply the i-th generator (1-based) by second-order differences."""
    model, grid = f.group, f.grid
    if not 1 <= i <= model.n_fields:
        raise ValueError(f"generator index {i} out of range 1..{model.n_fields}")
    h = grid.steps
    v = f.values
    if model.kind in (EUCLID_LINE, EUCLID_PLANE, TORUS):
        ax = i - 1
        out = _axis_diff(v, ax, h[ax], grid.periodic[ax])
    elif model.kind == HEISENBERG:
        x, y, _ = grid.coords()
        dz = _axis_diff(v, 2, h[2], grid.periodic[2])
        if i == 1:
            out = _axis_diff(v, 0, h[0], grid.periodic[0]) - 0.5 * y * dz
        else:
            out = _axis_diff(v, 1, h[1], grid.periodic[1]) + 0.5 * x * dz
    else:
        raise ValueError(model.kind)
    return f.with_values(out)


def apply_multi_field(f: GridFunction, index: tuple[int, ...]) -> GridFunction:
    """Compose generators X_{i1} ... X_{in} (rightmost acts first)."""
    index = tuple(index)
    if len(index) > MAX_FIELD_ORDER:
        raise FieldOrderError(
            f"multi-index of length {len(index)} exceeds the stencil budget {MAX_FIELD_ORDER}"
        )
    out = f
    for i in reversed(index):
        out = apply_field(out, i)
    return out


def multi_indices(n_fields: int, max_order: int):
    """All multi-indices over 1..n_fields with length <= max_order."""
    out = [()]
    for length in range(1, max_order + 1):
        out.extend(itertools.product(range(1, n_fields + 1), repeat=length))
    return out


def sublaplacian(f: GridFunction) -> GridFunction:
    """Minus the sum of squared generators, via two difference passes."""
    total = np.zeros_like(f.values)
    for i in range(1, f.group.n_fields + 1):
        total += apply_field(apply_field(f, i), i).values
    return f.with_values(-total)


# ---------------------------------------------------------------------------
# ball volumes and growth exponents


def grid_distances(model: GroupModel, grid: Grid) -> np.ndarray:
    """|node| for every grid node, flattened."""
    return np.asarray(cc_norm(model, grid.points()))


class VolumeTable:
    """Tabulated V(r) = Haar measure of the ball of radius r.

    Counting uses a one-cell linear ramp at the boundary sphere, which
    removes most of the staircase noise of hard cell counting.
    """

    def __init__(self, distances: np.ndarray, cell_measure: float, cell_width: float):
        self.distances = np.sort(np.asarray(distances, dtype=float))
        self.cell_measure = float(cell_measure)
        self.cell_width = float(cell_width)

    @property
    def max_radius(self) -> float:
        return float(self.distances[-1])

    def __call__(self, r) -> np.ndarray | float:
        r = np.asarray(r, dtype=float)
        half = 0.5 * self.cell_width
        lo = np.searchsorted(self.distances, r - half, side="left")
        hi = np.searchsorted(self.distances, r + half, side="right")
        inner = lo.astype(float)
        if self.cell_width > 0:
            # partial weight for cells straddling the sphere
            idx_lo = np.atleast_1d(lo)
            idx_hi = np.atleast_1d(hi)
            rr = np.atleast_1d(r)
            partial = np.zeros(rr.shape)
            for k in range(rr.size):
                d = self.distances[idx_lo.flat[k] : idx_hi.flat[k]]
                if d.size:
                    partial.flat[k] = np.clip(
                        (rr.flat[k] - d) / self.cell_width + 0.5, 0.0, 1.0
                    ).sum()
            inner = inner + partial.reshape(np.shape(lo))
        out = self.cell_measure * inner
        if out.ndim == 0:
            return float(out)
        return out


@dataclass
class BallVolumeReport:
    radii: np.ndarray
    volumes: np.ndarray
    d_fit: float
    log_residual: float
    doubling_max: float


def growth_fit(radii: np.ndarray, volumes: np.ndarray) -> tuple[float, float]:
    """Slope and RMS residual of log V against log r."""
    radii = np.asarray(radii, dtype=float)
    volumes = np.asarray(volumes, dtype=float)
    keep = (radii > 0) & (volumes > 0)
    lr, lv = np.log(radii[keep]), np.log(volumes[keep])
    slope, intercept = np.polyfit(lr, lv, 1)
    resid = lv - (slope * lr + intercept)
    return float(slope), float(np.sqrt(np.mean(resid**2)))


def ball_volume_fit(
    model: GroupModel,
    grid: Grid,
    radii,
    distances: np.ndarray | None = None,
    cell_measure: float | None = None,
    cell_width: float | None = None,
) -> BallVolumeReport:
    """Tabulate ball volumes by cell counting and fit the local growth
    exponent over radii <= 1.

    ``distances`` may come from any metric tabulation on the same node
    set (for instance shortest-path distances on a ``CarnotLattice``).
    """
    radii = np.asarray(radii, dtype=float)
    if distances is None:
        distances = grid_distances(model, grid)
    if cell_measure is None:
        cell_measure = grid.cell_measure
    if cell_width is None:
        cell_width = min(grid.steps)
    r_window = _max_radius(model, grid)
    if np.any(radii > r_window):
        raise ValueError(
            f"radius {radii.max():g} exceeds the grid window (max {r_window:g})"
        )
    if model.kind != TORUS and np.any(radii > 1.0):
        raise ValueError("radii above 1 are only meaningful on compact models")
    table = VolumeTable(distances, cell_measure, cell_width)
    volumes = np.asarray(table(radii))
    local = radii <= 1.0
    d_fit, resid = growth_fit(radii[local], volumes[local])
    halves = radii[(2.0 * radii <= radii.max()) & (radii > 0)]
    doubling = 0.0
    if halves.size:
        v1 = np.asarray(table(halves))
        v2 = np.asarray(table(2.0 * halves))
        good = v1 > 0
        if good.any():
            doubling = float(np.max(v2[good] / v1[good]))
    return BallVolumeReport(radii, volumes, d_fit, resid, doubling)


def _max_radius(model: GroupModel, grid: Grid) -> float:
    if model.kind == TORUS:
        return 0.5 * model.period * math.sqrt(model.dim)
    half = [0.5 * (b - a) for a, b in grid.extents]
    if model.kind == HEISENBERG:
        r2 = half[0] ** 2 + half[1] ** 2
        return float((r2**2 + 16.0 * half[2] ** 2) ** 0.25)
    return float(math.sqrt(sum(h * h for h in half)))


# ---------------------------------------------------------------------------
# shortest-path oracle for the Heisenberg metric


@dataclass
class CarnotLattice:
    """Dijkstra distances over horizontal flows on a Heisenberg lattice.

    Nodes live at (i*h, j*h, k*h^2/2); moving along the horizontal flow
    exp(s(a X + b Y)) from a node lands exactly on another node, so the
    graph has no snapping error.  Edge weight is the fiber Euclidean
    length h*sqrt(a^2+b^2); diagonal combinations of the generators are
    included to tighten the horizontal metric toward the Euclidean one.
    """

    h: float
    nx: int
    nz: int
    distances: np.ndarray  # shape (nx, nx, nz)

    @classmethod
    def build(cls, half_width: float = 1.5, n_side: int = 25, z_half: float = 0.75,
              diagonals: bool = True) -> "CarnotLattice":
        if n_side % 2 == 0:
            n_side += 1
        h = 2.0 * half_width / (n_side - 1)
        hz = 0.5 * h * h
        kz = int(round(z_half / hz))
        nz = 2 * kz + 1
        nx = n_side
        cx = (nx - 1) // 2
        cz = kz

        ix, iy, iz = np.meshgrid(
            np.arange(nx), np.arange(nx), np.arange(nz), indexing="ij"
        )
        ix, iy, iz = ix.ravel(), iy.ravel(), iz.ravel()

        def flat(a, b, c):
            return (a * nx + b) * nz + c

        moves = [(1, 0), (-1, 0), (0, 1), (0, -1)]
        if diagonals:
            moves += [(1, 1), (1, -1), (-1, 1), (-1, -1)]

        rows, cols, weights = [], [], []
        cy = cx
        for dx, dy in moves:
            tx = ix + dx
            ty = iy + dy
            # z-shift of the flow is exactly an integer number of z-cells
            diz = (ix - cx) * dy - (iy - cy) * dx
            tz = iz + diz
            ok = (tx >= 0) & (tx < nx) & (ty >= 0) & (ty < nx) & (tz >= 0) & (tz < nz)
            rows.append(flat(ix[ok], iy[ok], iz[ok]))
            cols.append(flat(tx[ok], ty[ok], tz[ok]))
            weights.append(np.full(ok.sum(), h * math.hypot(dx, dy)))
        n_total = nx * nx * nz
        graph = coo_matrix(
            (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n_total, n_total),
        ).tocsr()
        source = flat(np.array([cx]), np.array([cy]), np.array([cz]))[0]
        dist = _sparse_dijkstra(graph, directed=True, indices=source)
        return cls(h=h, nx=nx, nz=nz, distances=dist.reshape(nx, nx, nz))

    @property
    def hz(self) -> float:
        return 0.5 * self.h * self.h

    @property
    def cell_measure(self) -> float:
        return self.h * self.h * self.hz

    def node_points(self) -> np.ndarray:
        cx = (self.nx - 1) // 2
        cz = (self.nz - 1) // 2
        xs = (np.arange(self.nx) - cx) * self.h
        zs = (np.arange(self.nz) - cz) * self.hz
        gx, gy, gz = np.meshgrid(xs, xs, zs, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)

    def distance_at(self, point) -> float:
        """Distance of the nearest lattice node."""
        point = np.asarray(point, dtype=float)
        cx = (self.nx - 1) // 2
        cz = (self.nz - 1) // 2
        i = int(round(point[0] / self.h)) + cx
        j = int(round(point[1] / self.h)) + cx
        k = int(round(point[2] / self.hz)) + cz
        if not (0 <= i < self.nx and 0 <= j < self.nx and 0 <= k < self.nz):
            raise ValueError("point outside the lattice window")
        return float(self.distances[i, j, k])


def gauge_vs_lattice_distortion(
    lattice: CarnotLattice,
    n_sample: int = 100,
    r_range: tuple[float, float] = (0.3, 1.2),
    seed: int = 0,
) -> dict:
    """Compare the homogeneous gauge against lattice shortest paths.

    Both are candidate metrics up to a global constant, so the sampled
    ratios are first rescaled by their geometric mean; the reported
    distortion is the worst rescaled ratio in either direction.
    """
    model = heisenberg()
    pts = lattice.node_points()
    dist = lattice.distances.ravel()
    ok = np.isfinite(dist) & (dist >= r_range[0]) & (dist <= r_range[1])
    idx = np.flatnonzero(ok)
    rng = np.random.default_rng(seed)
    pick = rng.choice(idx, size=min(n_sample, idx.size), replace=False)
    gauge = np.asarray(cc_norm(model, pts[pick]))
    ratio = gauge / dist[pick]
    # minimax constant: geometric midpoint of the extreme ratios
    scale = float(math.sqrt(ratio.min() * ratio.max()))
    rescaled = ratio / scale
    distortion = float(max(rescaled.max(), (1.0 / rescaled).max()))
    return {
        "n": int(pick.size),
        "scale": scale,
        "distortion": distortion,
        "ratio_min": float(ratio.min()),
        "ratio_max": float(ratio.max()),
    }
