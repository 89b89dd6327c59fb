"""Shifted dyadic lattices on the torus, Haar system and martingale calculus.

Everything lives on a product of two torus factors [0,1)^d (one per
parameter).  Each factor carries a maximum level L, so level-j cubes have
side 2^-j and every function is piecewise constant on the 2^(L*d) level-L
cells.  Lattice shifts are dyadic (bits for levels 1..L only), hence every
shifted cube is an exact union of level-L cells and all integrals below are
exact finite sums.
"""

from __future__ import annotations

import io
import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "Axis",
    "TorusGrid",
    "AxisShift",
    "GridShift",
    "DyadicCube",
    "DyadicRectangle",
    "DiscreteFunction",
    "HaarFunction",
    "ResolutionError",
    "haar_evaluate",
    "axis_cube_indicator",
    "axis_haar_vector",
    "axis_average",
    "axis_project",
    "martingale_difference",
    "martingale_block",
    "truncated_projection",
    "classify_goodness",
    "goodness_fraction",
    "sample_shift",
    "enumerate_axis_shifts",
    "enumerate_shifts",
    "expectation_over_shifts",
    "AxisBasis",
    "haar_coefficients",
    "from_haar_coefficients",
]


class ResolutionError(ValueError):
    """Requested scale is finer than the grid resolution."""


# ---------------------------------------------------------------------------
# grid factors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Axis:
    """One torus factor [0,1)^dim, resolved down to level `levels`."""

    dim: int = 1
    levels: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("need at least one level")
        if self.dim < 1:
            raise ValueError("dimension must be positive")

    @property
    def n_side(self) -> int:
        return 1 << self.levels

    @property
    def n_cells(self) -> int:
        return self.n_side ** self.dim

    @property
    def cell_volume(self) -> float:
        return 2.0 ** (-self.levels * self.dim)

    def cube_count(self, level: int) -> int:
        return (1 << level) ** self.dim

    def cell_coords(self, flat: int) -> tuple[int, ...]:
        n = self.n_side
        out = []
        for _ in range(self.dim):
            out.append(flat % n)
            flat //= n
        return tuple(out)

    def flat_cell(self, coords: Sequence[int]) -> int:
        n = self.n_side
        flat = 0
        for t in reversed(range(self.dim)):
            flat = flat * n + (coords[t] % n)
        return flat


@dataclass(frozen=True)
class TorusGrid:
    """Bi-parameter grid: a pair of torus factors sharing the cell convention."""

    axes: tuple[Axis, Axis] = (Axis(), Axis())

    @staticmethod
    def make(levels: int | tuple[int, int] = 3, dims: tuple[int, int] = (1, 1)) -> "TorusGrid":
        if isinstance(levels, int):
            levels = (levels, levels)
        return TorusGrid((Axis(dims[0], levels[0]), Axis(dims[1], levels[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.axes[0].n_cells, self.axes[1].n_cells)

    @property
    def cell_volume(self) -> float:
        return self.axes[0].cell_volume * self.axes[1].cell_volume

    def zeros(self, dtype=float) -> "DiscreteFunction":
        return DiscreteFunction(self, np.zeros(self.shape, dtype=dtype))

    def constant(self, c: float | complex) -> "DiscreteFunction":
        dtype = complex if isinstance(c, complex) else float
        return DiscreteFunction(self, np.full(self.shape, c, dtype=dtype))

    def random(self, rng: np.random.Generator, scale: float = 1.0) -> "DiscreteFunction":
        return DiscreteFunction(self, scale * rng.standard_normal(self.shape))


# ---------------------------------------------------------------------------
# lattice shifts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AxisShift:
    """Per-level translation bits of one axis lattice.

    bits[i-1][t] is the level-i bit of coordinate t (i = 1..L), so a level-j
    cube of the base lattice is translated by sum_{i>j} 2^-i * bits[i-1].
    Bits exist only for i <= L, which keeps every shifted cube an exact union
    of level-L cells.
    """

    axis: Axis
    bits: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        if not self.bits:
            zero = tuple(tuple(0 for _ in range(self.axis.dim)) for _ in range(self.axis.levels))
            object.__setattr__(self, "bits", zero)
        if len(self.bits) != self.axis.levels or any(len(b) != self.axis.dim for b in self.bits):
            raise ValueError("need one bit vector per level 1..L")

    def offset_cells(self, level: int) -> tuple[int, ...]:
        """Translation of the level-`level` lattice, in level-L cell units."""
        L = self.axis.levels
        out = [0] * self.axis.dim
        for i in range(level + 1, L + 1):
            w = 1 << (L - i)
            for t in range(self.axis.dim):
                out[t] += w * self.bits[i - 1][t]
        return tuple(o % self.axis.n_side for o in out)

    @staticmethod
    def zero(axis: Axis) -> "AxisShift":
        return AxisShift(axis, tuple(tuple(0 for _ in range(axis.dim)) for _ in range(axis.levels)))


@dataclass(frozen=True)
class GridShift:
    """A shift per grid factor; identifies one realisation of the random lattice."""

    shift1: AxisShift
    shift2: AxisShift

    @staticmethod
    def zero(grid: TorusGrid) -> "GridShift":
        return GridShift(AxisShift.zero(grid.axes[0]), AxisShift.zero(grid.axes[1]))

    def __getitem__(self, k: int) -> AxisShift:
        return (self.shift1, self.shift2)[k]


def sample_axis_shift(axis: Axis, rng: np.random.Generator) -> AxisShift:
    bits = tuple(tuple(int(b) for b in rng.integers(0, 2, size=axis.dim)) for _ in range(axis.levels))
    return AxisShift(axis, bits)


def sample_shift(grid: TorusGrid, rng: np.random.Generator) -> GridShift:
    """Draw i.i.d. uniform translation bits for both factors."""
    return GridShift(sample_axis_shift(grid.axes[0], rng), sample_axis_shift(grid.axes[1], rng))


def enumerate_axis_shifts(axis: Axis) -> Iterator[AxisShift]:
    """All 2^(L*dim) shifts of one factor (desk scale only)."""
    per_level = list(itertools.product((0, 1), repeat=axis.dim))
    for combo in itertools.product(per_level, repeat=axis.levels):
        yield AxisShift(axis, tuple(combo))


def enumerate_shifts(grid: TorusGrid) -> Iterator[GridShift]:
    for s1 in enumerate_axis_shifts(grid.axes[0]):
        for s2 in enumerate_axis_shifts(grid.axes[1]):
            yield GridShift(s1, s2)


def expectation_over_shifts(
    grid: TorusGrid,
    estimator: Callable[[GridShift], float],
    sample_count: int,
    seed: int = 0,
) -> tuple[float, float]:
    """Monte-Carlo mean and standard error of an estimator over random shifts."""
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    vals = np.array([estimator(sample_shift(grid, rng)) for _ in range(sample_count)], dtype=float)
    mean = float(vals.mean())
    stderr = float(vals.std(ddof=1) / math.sqrt(sample_count)) if sample_count > 1 else 0.0
    return mean, stderr


# ---------------------------------------------------------------------------
# cubes and rectangles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DyadicCube:
    """A level-j cube of a shifted lattice on one factor.

    `pos` holds the per-coordinate lattice indices (each in [0, 2^j)).
    """

    axis: Axis
    level: int
    pos: tuple[int, ...]
    shift: AxisShift

    def __post_init__(self):
        if not 0 <= self.level <= self.axis.levels:
            raise ResolutionError(f"level {self.level} outside 0..{self.axis.levels}")
        n = 1 << self.level
        if len(self.pos) != self.axis.dim or any(not 0 <= p < n for p in self.pos):
            raise ValueError("bad cube position")

    @property
    def side(self) -> float:
        return 2.0 ** (-self.level)

    @property
    def measure(self) -> float:
        return self.side ** self.axis.dim

    @property
    def width_cells(self) -> int:
        return 1 << (self.axis.levels - self.level)

    def start_cells(self) -> tuple[int, ...]:
        """Per-coordinate first cell index (wrapped)."""
        off = self.shift.offset_cells(self.level)
        w = self.width_cells
        return tuple((p * w + o) % self.axis.n_side for p, o in zip(self.pos, off))

    def coord_cells(self) -> list[np.ndarray]:
        n = self.axis.n_side
        w = self.width_cells
        return [(s + np.arange(w)) % n for s in self.start_cells()]

    def cells(self) -> np.ndarray:
        """Flat level-L cell indices covered by the cube."""
        coords = self.coord_cells()
        n = self.axis.n_side
        flat = coords[0]
        mult = n
        for c in coords[1:]:
            flat = (flat[:, None] + mult * c[None, :]).ravel()
            mult *= n
        return flat

    def ancestor(self, k: int) -> "DyadicCube":
        """The unique cube k levels up containing this one (same lattice)."""
        if k < 0 or k > self.level:
            raise ValueError("ancestor depth out of range")
        if k == 0:
            return self
        lvl = self.level - k
        # positions must be recomputed through cell coordinates because the
        # coarser lattice carries a different translation
        start = self.start_cells()
        off = self.shift.offset_cells(lvl)
        w = 1 << (self.axis.levels - lvl)
        pos = tuple(((s - o) % self.axis.n_side) // w for s, o in zip(start, off))
        return DyadicCube(self.axis, lvl, pos, self.shift)

    def parent(self) -> "DyadicCube":
        return self.ancestor(1)

    def children(self) -> list["DyadicCube"]:
        if self.level >= self.axis.levels:
            raise ResolutionError("cube at finest level has no children")
        lvl = self.level + 1
        start = self.start_cells()
        off = self.shift.offset_cells(lvl)
        w = 1 << (self.axis.levels - lvl)
        n = self.axis.n_side
        kids = []
        for corner in itertools.product((0, 1), repeat=self.axis.dim):
            cs = tuple((s + b * w) % n for s, b in zip(start, corner))
            pos = tuple(((c - o) % n) // w for c, o in zip(cs, off))
            kids.append(DyadicCube(self.axis, lvl, pos, self.shift))
        return kids

    def contains(self, other: "DyadicCube") -> bool:
        if other.level < self.level:
            return False
        return other.ancestor(other.level - self.level) == self

    def distance(self, other: "DyadicCube") -> float:
        """Torus sup-metric distance between the two (closed) cubes."""
        d = 0.0
        a0, b0 = self.start_cells(), other.start_cells()
        wa, wb = self.width_cells, other.width_cells
        n = self.axis.n_side
        for t in range(self.axis.dim):
            if (b0[t] - a0[t]) % n < wa or (a0[t] - b0[t]) % n < wb:
                g = 0  # coordinate ranges overlap
            else:
                g = min((b0[t] - (a0[t] + wa)) % n, (a0[t] - (b0[t] + wb)) % n)
            d = max(d, g / n)
        return d


def axis_cubes(axis: Axis, level: int, shift: AxisShift) -> Iterator[DyadicCube]:
    for pos in itertools.product(range(1 << level), repeat=axis.dim):
        yield DyadicCube(axis, level, pos, shift)


def all_axis_cubes(axis: Axis, shift: AxisShift, max_level: int | None = None) -> Iterator[DyadicCube]:
    top = axis.levels if max_level is None else max_level
    for level in range(top + 1):
        yield from axis_cubes(axis, level, shift)


@dataclass(frozen=True)
class DyadicRectangle:
    """Product of one cube per factor."""

    cube1: DyadicCube
    cube2: DyadicCube

    @property
    def measure(self) -> float:
        return self.cube1.measure * self.cube2.measure

    def index(self) -> tuple[np.ndarray, np.ndarray]:
        return np.ix_(self.cube1.cells(), self.cube2.cells())

    def contains_cell(self, i: int, j: int) -> bool:
        return bool(np.isin(i, self.cube1.cells()) and np.isin(j, self.cube2.cells()))


def all_rectangles(grid: TorusGrid, shift: GridShift,
                   max_levels: tuple[int | None, int | None] = (None, None)) -> Iterator[DyadicRectangle]:
    for c1 in all_axis_cubes(grid.axes[0], shift.shift1, max_levels[0]):
        for c2 in all_axis_cubes(grid.axes[1], shift.shift2, max_levels[1]):
            yield DyadicRectangle(c1, c2)


# ---------------------------------------------------------------------------
# discrete functions
# ---------------------------------------------------------------------------

class DiscreteFunction:
    """Piecewise-constant scalar field on the level-L cells of the product grid.

    values[i, j] is the value on (axis-1 cell i, axis-2 cell j); integrals and
    averages are exact finite sums.
    """

    __slots__ = ("grid", "values")

    def __init__(self, grid: TorusGrid, values: np.ndarray):
        values = np.asarray(values)
        if values.shape != grid.shape:
            raise ValueError(f"values shape {values.shape} != grid shape {grid.shape}")
        self.grid = grid
        self.values = values

    # -- algebra ------------------------------------------------------------
    def copy(self) -> "DiscreteFunction":
        return DiscreteFunction(self.grid, self.values.copy())

    def __add__(self, other):
        return DiscreteFunction(self.grid, self.values + self._val(other))

    def __sub__(self, other):
        return DiscreteFunction(self.grid, self.values - self._val(other))

    def __mul__(self, other):
        return DiscreteFunction(self.grid, self.values * self._val(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return DiscreteFunction(self.grid, self.values / self._val(other))

    def __neg__(self):
        return DiscreteFunction(self.grid, -self.values)

    def _val(self, other):
        return other.values if isinstance(other, DiscreteFunction) else other

    def __abs__(self):
        return DiscreteFunction(self.grid, np.abs(self.values))

    # -- integration ----------------------------------------------------------
    def integral(self) -> float | complex:
        s = self.values.sum() * self.grid.cell_volume
        return complex(s) if np.iscomplexobj(self.values) else float(s)

    def pair(self, other: "DiscreteFunction") -> float | complex:
        s = (self.values * other.values).sum() * self.grid.cell_volume
        return complex(s) if (np.iscomplexobj(self.values) or np.iscomplexobj(other.values)) else float(s)

    def average(self, rect: DyadicRectangle) -> float | complex:
        block = self.values[rect.index()]
        m = block.mean()
        return complex(m) if np.iscomplexobj(block) else float(m)

    def pair_axis(self, vec: np.ndarray, axis: int) -> np.ndarray:
        """One-variable pairing against an axis function; returns the slice profile.

        axis=0 pairs in the first variable and returns an array over axis-2
        cells, and vice versa.
        """
        if axis == 0:
            return (vec @ self.values) * self.grid.axes[0].cell_volume
        return (self.values @ vec) * self.grid.axes[1].cell_volume

    def l2_norm(self) -> float:
        return float(np.sqrt((np.abs(self.values) ** 2).sum() * self.grid.cell_volume))

    # -- serialization --------------------------------------------------------
    def dump(self, fp: io.BufferedIOBase) -> None:
        header = {
            "format": "dyadlab-field-v1",
            "dims": [self.grid.axes[0].dim, self.grid.axes[1].dim],
            "levels": [self.grid.axes[0].levels, self.grid.axes[1].levels],
            "dtype": "complex128" if np.iscomplexobj(self.values) else "float64",
        }
        blob = json.dumps(header).encode()
        fp.write(len(blob).to_bytes(4, "little"))
        fp.write(blob)
        fp.write(np.ascontiguousarray(self.values, dtype=header["dtype"]).tobytes())

    @staticmethod
    def load(fp: io.BufferedIOBase) -> "DiscreteFunction":
        hlen = int.from_bytes(fp.read(4), "little")
        header = json.loads(fp.read(hlen).decode())
        if header.get("format") != "dyadlab-field-v1":
            raise ValueError("not a dyadlab field file")
        grid = TorusGrid.make(tuple(header["levels"]), tuple(header["dims"]))
        raw = np.frombuffer(fp.read(), dtype=header["dtype"]).reshape(grid.shape)
        return DiscreteFunction(grid, raw.copy())


def outer(grid: TorusGrid, vec1: np.ndarray, vec2: np.ndarray) -> DiscreteFunction:
    """Tensor product of two axis profiles as a grid function."""
    return DiscreteFunction(grid, np.outer(vec1, vec2))


# ---------------------------------------------------------------------------
# Haar system on one factor
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HaarFunction:
    """L2-normalised Haar function on a cube; signature 0 marks the
    non-cancellative normalised indicator."""

    cube: DyadicCube
    signature: tuple[int, ...]

    def __post_init__(self):
        if len(self.signature) != self.cube.axis.dim:
            raise ValueError("signature length must match the axis dimension")
        if any(s not in (0, 1) for s in self.signature):
            raise ValueError("signature entries are bits")

    @property
    def cancellative(self) -> bool:
        return any(self.signature)


def axis_cube_indicator(cube: DyadicCube) -> np.ndarray:
    v = np.zeros(cube.axis.n_cells)
    v[cube.cells()] = 1.0
    return v


def axis_haar_vector(h: HaarFunction) -> np.ndarray:
    """Evaluate a Haar function as an axis profile (values on level-L cells)."""
    cube = h.cube
    axis = cube.axis
    if h.cancellative and cube.level >= axis.levels:
        raise ResolutionError("cancellative Haar function needs children")
    scale = cube.measure ** -0.5
    coords = cube.coord_cells()
    n = axis.n_side
    w = cube.width_cells
    mask = np.zeros(axis.n_cells)
    sign_axes = []
    for t, (s, cc) in enumerate(zip(cube.start_cells(), coords)):
        if h.signature[t]:
            # +1 on the first half of the coordinate range, -1 on the second
            half = w // 2
            sgn = np.where(np.arange(w) < half, 1.0, -1.0)
        else:
            sgn = np.ones(w)
        sign_axes.append((cc, sgn))
    flat_vals = sign_axes[0][1]
    flat_idx = sign_axes[0][0]
    mult = n
    for cc, sgn in sign_axes[1:]:
        flat_vals = (flat_vals[:, None] * sgn[None, :]).ravel()
        flat_idx = (flat_idx[:, None] + mult * cc[None, :]).ravel()
        mult *= n
    mask[flat_idx] = scale * flat_vals
    return mask


def haar_evaluate(h: HaarFunction, grid: TorusGrid, axis: int) -> DiscreteFunction:
    """The Haar profile lifted to the product grid (constant in the other variable)."""
    vec = axis_haar_vector(h)
    if axis == 0:
        return DiscreteFunction(grid, np.repeat(vec[:, None], grid.shape[1], axis=1))
    return DiscreteFunction(grid, np.repeat(vec[None, :], grid.shape[0], axis=0))


def axis_average(f: DiscreteFunction, cube: DyadicCube, axis: int) -> np.ndarray:
    """Slice average <f>_{I, axis}: profile over the other factor's cells."""
    cells = cube.cells()
    if axis == 0:
        return f.values[cells, :].mean(axis=0)
    return f.values[:, cells].mean(axis=1)


def axis_project(f: DiscreteFunction, level: int, axis: int, shift: AxisShift) -> DiscreteFunction:
    """Conditional expectation onto the level-`level` lattice in one variable."""
    ax = f.grid.axes[axis]
    if level > ax.levels:
        raise ResolutionError("projection level exceeds resolution")
    out = np.empty_like(f.values, dtype=f.values.dtype)
    for cube in axis_cubes(ax, level, shift):
        cells = cube.cells()
        if axis == 0:
            out[cells, :] = f.values[cells, :].mean(axis=0)[None, :]
        else:
            out[:, cells] = f.values[:, cells].mean(axis=1)[:, None]
    return DiscreteFunction(f.grid, out)


# ---------------------------------------------------------------------------
# martingale differences and blocks
# ---------------------------------------------------------------------------

def martingale_difference(f: DiscreteFunction, cube: DyadicCube, axis: int) -> DiscreteFunction:
    """One-variable martingale difference: children averages minus the cube average."""
    ax = f.grid.axes[axis]
    if cube.level >= ax.levels:
        raise ResolutionError("martingale difference needs children inside the grid")
    out = np.zeros_like(f.values, dtype=f.values.dtype)
    parent_avg = axis_average(f, cube, axis)
    for child in cube.children():
        cells = child.cells()
        diff = axis_average(f, child, axis) - parent_avg
        if axis == 0:
            out[cells, :] = diff[None, :]
        else:
            out[:, cells] = diff[:, None]
    return DiscreteFunction(f.grid, out)


def martingale_block(f: DiscreteFunction, cube: DyadicCube, depth: int, axis: int) -> DiscreteFunction:
    """Sum of martingale differences over the depth-`depth` descendants of the cube."""
    ax = f.grid.axes[axis]
    if depth < 0 or cube.level + depth >= ax.levels:
        raise ResolutionError("block depth exceeds resolution")
    fine = axis_project(f, cube.level + depth + 1, axis, cube.shift)
    coarse = axis_project(f, cube.level + depth, axis, cube.shift)
    out = np.zeros_like(f.values, dtype=f.values.dtype)
    cells = cube.cells()
    if axis == 0:
        out[cells, :] = fine.values[cells, :] - coarse.values[cells, :]
    else:
        out[:, cells] = fine.values[:, cells] - coarse.values[:, cells]
    return DiscreteFunction(f.grid, out)


def martingale_difference_rect(f: DiscreteFunction, rect: DyadicRectangle) -> DiscreteFunction:
    return martingale_difference(martingale_difference(f, rect.cube1, 0), rect.cube2, 1)


def martingale_block_rect(f: DiscreteFunction, rect: DyadicRectangle, depths: tuple[int, int]) -> DiscreteFunction:
    return martingale_block(martingale_block(f, rect.cube1, depths[0], 0), rect.cube2, depths[1], 1)


def truncated_projection(f: DiscreteFunction, level_pair: tuple[int, int], shift: GridShift) -> DiscreteFunction:
    """Piecewise average at the requested per-axis scales of the shifted lattice."""
    g = axis_project(f, level_pair[0], 0, shift.shift1)
    return axis_project(g, level_pair[1], 1, shift.shift2)


# ---------------------------------------------------------------------------
# goodness
# ---------------------------------------------------------------------------

def _skeleton_distance_cells(cube: DyadicCube, coarse_level: int) -> int:
    """Distance (in cell units, sup metric) from the cube to the union of
    boundaries of the level-`coarse_level` lattice cubes."""
    axis = cube.axis
    n = axis.n_side
    spacing = 1 << (axis.levels - coarse_level)
    off = cube.shift.offset_cells(coarse_level)
    w = cube.width_cells
    best = None
    for t, s in enumerate(cube.start_cells()):
        r0 = (s - off[t]) % spacing
        if r0 + w >= spacing or r0 == 0:
            d = 0
        else:
            d = min(r0, spacing - r0 - w)
        best = d if best is None else min(best, d)
    return best


def classify_goodness(cube: DyadicCube, r: int = 2, gamma: float | None = None, alpha: float = 1.0) -> bool:
    """Whether the cube stays quantitatively away from the boundaries of all
    cubes at least 2^r times larger in its own lattice.

    gamma defaults to alpha / (2 * (2*dim + alpha)).  The level-0 cube is the
    whole torus, whose topological boundary is empty, so it never creates
    badness; coarse levels start at 1.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    axis = cube.axis
    if gamma is None:
        gamma = alpha / (2.0 * (2 * axis.dim + alpha))
    side = cube.side
    for coarse in range(1, cube.level - r + 1):
        coarse_side = 2.0 ** (-coarse)
        threshold = side ** gamma * coarse_side ** (1.0 - gamma)
        dist = _skeleton_distance_cells(cube, coarse) / axis.n_side
        if dist <= threshold:
            return False
    return True


def goodness_fraction(axis: Axis, level: int, pos: tuple[int, ...] | None = None,
                      r: int = 2, gamma: float | None = None, alpha: float = 1.0) -> float:
    """Exact probability that a shifted copy of the base cube is good,
    by enumeration over all axis shifts."""
    if pos is None:
        pos = tuple(0 for _ in range(axis.dim))
    total = 0
    good = 0
    for shift in enumerate_axis_shifts(axis):
        cube = DyadicCube(axis, level, pos, shift)
        total += 1
        good += classify_goodness(cube, r=r, gamma=gamma, alpha=alpha)
    return good / total


# ---------------------------------------------------------------------------
# Haar basis bookkeeping (per axis, per shift)
# ---------------------------------------------------------------------------

class AxisBasis:
    """Orthonormal Haar basis of one shifted factor.

    Basis entries are all cancellative Haar functions on cubes of levels
    0..L-1 plus the non-cancellative top function, which realises the
    top-level convention that the coarsest scale carries both the difference
    and the average.  matrix[k] is the k-th basis profile on cells.
    """

    def __init__(self, axis: Axis, shift: AxisShift):
        self.axis = axis
        self.shift = shift
        entries: list[HaarFunction] = []
        top = DyadicCube(axis, 0, tuple(0 for _ in range(axis.dim)), shift)
        entries.append(HaarFunction(top, tuple(0 for _ in range(axis.dim))))
        for level in range(axis.levels):
            for cube in axis_cubes(axis, level, shift):
                for sig in itertools.product((0, 1), repeat=axis.dim):
                    if any(sig):
                        entries.append(HaarFunction(cube, sig))
        self.entries = entries
        self.matrix = np.stack([axis_haar_vector(h) for h in entries])
        self._index = {(h.cube.level, h.cube.pos, h.signature): k for k, h in enumerate(entries)}

    @property
    def size(self) -> int:
        return len(self.entries)

    def index(self, h: HaarFunction) -> int:
        return self._index[(h.cube.level, h.cube.pos, h.signature)]

    def transform(self) -> np.ndarray:
        """Matrix taking cell values to Haar coefficients (rows pair with volume)."""
        return self.matrix * self.axis.cell_volume


def haar_coefficients(f: DiscreteFunction, shift: GridShift) -> np.ndarray:
    """Coefficients <f, h x h> over the full bi-parameter basis (B1 x B2)."""
    b1 = AxisBasis(f.grid.axes[0], shift.shift1)
    b2 = AxisBasis(f.grid.axes[1], shift.shift2)
    return b1.transform() @ f.values @ b2.transform().T


def from_haar_coefficients(grid: TorusGrid, coeffs: np.ndarray, shift: GridShift) -> DiscreteFunction:
    b1 = AxisBasis(grid.axes[0], shift.shift1)
    b2 = AxisBasis(grid.axes[1], shift.shift2)
    return DiscreteFunction(grid, b1.matrix.T @ coeffs @ b2.matrix)
