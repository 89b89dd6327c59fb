"""Weight characteristics, norms, BMO scales, maximal and square functions."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import (
    Axis,
    AxisBasis,
    AxisShift,
    DiscreteFunction,
    DyadicCube,
    DyadicRectangle,
    GridShift,
    TorusGrid,
    all_axis_cubes,
    all_rectangles,
    axis_cubes,
    axis_project,
    enumerate_axis_shifts,
    enumerate_shifts,
    martingale_block,
    martingale_difference,
    sample_shift,
)

__all__ = [
    "Weight",
    "NormReport",
    "ap_characteristic",
    "ainfty_characteristic",
    "lp_norm",
    "mixed_norm",
    "bmo_norm",
    "ProductBmoReport",
    "sequence_product_bmo",
    "maximal_function",
    "axis_profile_strong_max",
    "square_function",
    "phi_function",
    "lower_sf_check",
]


class Weight:
    """Strictly positive density on the grid; dual weights are exact cellwise."""

    __slots__ = ("fn",)

    def __init__(self, fn: DiscreteFunction):
        if np.iscomplexobj(fn.values):
            raise ValueError("weights are real")
        if fn.values.min() <= 0:
            raise ValueError("weight must be strictly positive")
        self.fn = fn

    @property
    def grid(self) -> TorusGrid:
        return self.fn.grid

    @property
    def values(self) -> np.ndarray:
        return self.fn.values

    def dual(self, p: float) -> "Weight":
        """w^(1-p') for the conjugate exponent p' of p."""
        pprime = p / (p - 1.0)
        return Weight(DiscreteFunction(self.grid, self.values ** (1.0 - pprime)))

    def power(self, a: float) -> "Weight":
        return Weight(DiscreteFunction(self.grid, self.values**a))

    @staticmethod
    def ones(grid: TorusGrid) -> "Weight":
        return Weight(grid.constant(1.0))


@dataclass(frozen=True)
class NormReport:
    kind: str
    exponents: tuple
    value: float
    grid_id: str = ""
    weight_id: str = ""
    seed: int | None = None
    quasi: bool = False

    def csv_row(self) -> str:
        exps = "/".join(f"{e:g}" for e in self.exponents)
        seed = "" if self.seed is None else str(self.seed)
        return f"{self.kind},{exps},{self.value!r},{self.grid_id},{self.weight_id},{seed}"

    @staticmethod
    def csv_header() -> str:
        return "kind,exponents,value,grid_id,weight_id,seed"


# ---------------------------------------------------------------------------
# weight characteristics
# ---------------------------------------------------------------------------

def _rect_averages(w: np.ndarray, rect: DyadicRectangle) -> float:
    return float(w[rect.index()].mean())


def ap_characteristic(
    w: Weight,
    p: float,
    scope: str = "biparameter",
    shift: GridShift | None = None,
    over_all_shifts: bool = False,
) -> float:
    """sup over rectangles of <w>_R <w^(1-p')>_R^(p-1).

    scope 'biparameter' runs over dyadic rectangles of the given (or zero)
    shift, or of every enumerable shift; 'axis1'/'axis2' take the worst
    one-parameter characteristic over slices of the other variable.
    """
    if p <= 1:
        raise ValueError("p must exceed 1")
    dual = w.dual(p).values
    wv = w.values
    grid = w.grid
    if scope in ("axis1", "axis2"):
        axis_idx = 0 if scope == "axis1" else 1
        return _slice_ap(wv, dual, grid, axis_idx, p, over_all_shifts)
    if scope != "biparameter":
        raise ValueError(f"unknown scope {scope!r}")
    shifts: Iterable[GridShift]
    if over_all_shifts:
        shifts = enumerate_shifts(grid)
    else:
        shifts = [shift if shift is not None else GridShift.zero(grid)]
    best = 0.0
    for om in shifts:
        for rect in all_rectangles(grid, om):
            idx = rect.index()
            val = float(wv[idx].mean()) * float(dual[idx].mean()) ** (p - 1.0)
            best = max(best, val)
    return best


def _slice_ap(wv, dual, grid, axis_idx, p, over_all_shifts):
    other = 1 - axis_idx
    axis = grid.axes[axis_idx]
    shifts = enumerate_axis_shifts(axis) if over_all_shifts else [AxisShift.zero(axis)]
    best = 0.0
    for shift in shifts:
        for cube in all_axis_cubes(axis, shift):
            cells = cube.cells()
            if axis_idx == 0:
                a = wv[cells, :].mean(axis=0)
                b = dual[cells, :].mean(axis=0)
            else:
                a = wv[:, cells].mean(axis=1)
                b = dual[:, cells].mean(axis=1)
            best = max(best, float((a * b ** (p - 1.0)).max()))
    return best


def ainfty_characteristic(
    w: Weight,
    scope: str = "biparameter",
    shift: GridShift | None = None,
    over_all_shifts: bool = False,
) -> float:
    """sup of <w>_Q exp(<log 1/w>_Q) over the requested cube/rectangle family."""
    wv = w.values
    logw = np.log(wv)
    grid = w.grid
    if scope in ("axis1", "axis2"):
        axis_idx = 0 if scope == "axis1" else 1
        axis = grid.axes[axis_idx]
        shifts = enumerate_axis_shifts(axis) if over_all_shifts else [AxisShift.zero(axis)]
        best = 0.0
        for s in shifts:
            for cube in all_axis_cubes(axis, s):
                cells = cube.cells()
                if axis_idx == 0:
                    a = wv[cells, :].mean(axis=0)
                    l = logw[cells, :].mean(axis=0)
                else:
                    a = wv[:, cells].mean(axis=1)
                    l = logw[:, cells].mean(axis=1)
                best = max(best, float((a * np.exp(-l)).max()))
        return best
    shifts = enumerate_shifts(grid) if over_all_shifts else [shift if shift is not None else GridShift.zero(grid)]
    best = 0.0
    for om in shifts:
        for rect in all_rectangles(grid, om):
            idx = rect.index()
            best = max(best, float(wv[idx].mean()) * math.exp(-float(logw[idx].mean())))
    return best


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def lp_norm(f: DiscreteFunction, p: float, w: Weight | None = None) -> float:
    """Exact L^p(w) (quasi-)norm; p = inf takes the cell max."""
    dens = 1.0 if w is None else w.values
    a = np.abs(f.values)
    if math.isinf(p):
        return float(a.max())
    if p <= 0:
        raise ValueError("p must be positive")
    return float(((a**p * dens).sum() * f.grid.cell_volume) ** (1.0 / p))


def mixed_norm(
    f: DiscreteFunction,
    exponents: tuple[float, float],
    weights: tuple[Weight | None, Weight | None] = (None, None),
) -> float:
    """Outer L^{p1}(axis 1) norm of the inner L^{p2}(axis 2) slice norms.

    Per-axis weights must be tensor factors: each weight is read off as an
    axis profile (constant in the other variable).
    """
    p1, p2 = exponents
    vol1 = f.grid.axes[0].cell_volume
    vol2 = f.grid.axes[1].cell_volume
    a = np.abs(f.values)
    w2 = 1.0 if weights[1] is None else weights[1].values[0, :]
    if math.isinf(p2):
        inner = a.max(axis=1)
    else:
        inner = ((a**p2 * w2).sum(axis=1) * vol2) ** (1.0 / p2)
    w1 = 1.0 if weights[0] is None else weights[0].values[:, 0]
    if math.isinf(p1):
        return float(inner.max())
    return float(((inner**p1 * w1).sum() * vol1) ** (1.0 / p1))


# ---------------------------------------------------------------------------
# BMO family
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProductBmoReport:
    """Certified lower bound for the rectangle-square-sum oscillation norm.

    family_value is the sup over the generated open-set family; it never
    exceeds the true supremum.  single_rectangle is the sup over single
    rectangles, kept separately because several inequalities only need it.
    """

    family_value: float
    single_rectangle: float
    n_sets: int

    @property
    def value(self) -> float:
        return self.family_value


def bmo_norm(
    b: DiscreteFunction,
    kind: str = "little",
    shift: GridShift | None = None,
    over_all_shifts: bool = False,
    omega_pool: int = 24,
    omega_union: int = 3,
    seed: int = 0,
):
    """Oscillation norms.

    kind 'axis1'/'axis2': worst one-parameter dyadic BMO norm over slices.
    kind 'little': sup over dyadic rectangles of <|b - <b>_R|>_R.
    kind 'product': lower-bound report for the square-sum norm over a
    structured family of open sets (single rectangles, bounded unions from a
    seeded pool, and upper-level sets of the coefficient Carleson density).
    """
    grid = b.grid
    om = shift if shift is not None else GridShift.zero(grid)
    if kind in ("axis1", "axis2"):
        axis_idx = 0 if kind == "axis1" else 1
        return _slice_bmo(b, axis_idx, over_all_shifts)
    if kind == "little":
        shifts = enumerate_shifts(grid) if over_all_shifts else [om]
        best = 0.0
        for s in shifts:
            for rect in all_rectangles(grid, s):
                blk = b.values[rect.index()]
                best = max(best, float(np.abs(blk - blk.mean()).mean()))
        return best
    if kind == "product":
        return _product_bmo(b, om, omega_pool, omega_union, seed)
    raise ValueError(f"unknown bmo kind {kind!r}")


def _slice_bmo(b: DiscreteFunction, axis_idx: int, over_all_shifts: bool) -> float:
    grid = b.grid
    axis = grid.axes[axis_idx]
    shifts = enumerate_axis_shifts(axis) if over_all_shifts else [AxisShift.zero(axis)]
    best = 0.0
    for s in shifts:
        for cube in all_axis_cubes(axis, s):
            cells = cube.cells()
            blk = b.values[cells, :] if axis_idx == 0 else b.values[:, cells]
            ax = 0 if axis_idx == 0 else 1
            osc = np.abs(blk - blk.mean(axis=ax, keepdims=True)).mean(axis=ax)
            best = max(best, float(osc.max()))
    return best


def _rect_coeff_table(b: DiscreteFunction, om: GridShift):
    """All cancellative-pair coefficients <b, h_I x h_J> with their rectangles."""
    grid = b.grid
    b1 = AxisBasis(grid.axes[0], om.shift1)
    b2 = AxisBasis(grid.axes[1], om.shift2)
    C = b1.transform() @ b.values @ b2.transform().T
    rows = []
    for i, h1 in enumerate(b1.entries):
        if not h1.cancellative:
            continue
        for j, h2 in enumerate(b2.entries):
            if not h2.cancellative:
                continue
            rows.append((DyadicRectangle(h1.cube, h2.cube), C[i, j]))
    return rows


def _product_bmo(b: DiscreteFunction, om: GridShift, pool: int, union: int, seed: int) -> ProductBmoReport:
    grid = b.grid
    table = _rect_coeff_table(b, om)
    masks = []
    sq = np.zeros(grid.shape)
    for rect, c in table:
        m = np.zeros(grid.shape, dtype=bool)
        m[rect.index()] = True
        masks.append((m, abs(c) ** 2, rect.measure))
        sq += (abs(c) ** 2 / rect.measure) * m

    def set_value(mask: np.ndarray) -> float:
        area = mask.sum() * grid.cell_volume
        if area == 0:
            return 0.0
        s = sum(c2 for m, c2, _ in masks if mask[m].all())
        return math.sqrt(s / area)

    best_single = 0.0
    for m, _, _ in masks:
        best_single = max(best_single, set_value(m))
    best = best_single
    n_sets = len(masks)
    rng = np.random.default_rng(seed)
    pool_idx = rng.choice(len(masks), size=min(pool, len(masks)), replace=False)
    for k in range(2, union + 1):
        for combo in itertools.combinations(pool_idx.tolist(), k):
            m = np.zeros(grid.shape, dtype=bool)
            for i in combo:
                m |= masks[i][0]
            best = max(best, set_value(m))
            n_sets += 1
    # upper-level sets of the coefficient square density
    for lam in np.unique(sq)[:-1]:
        m = sq > lam
        if m.any():
            best = max(best, set_value(m))
            n_sets += 1
    return ProductBmoReport(best, best_single, n_sets)


def sequence_product_bmo(
    grid: TorusGrid,
    coeffs: dict,
    om: GridShift,
    omega_union: int = 3,
    pool: int = 24,
    seed: int = 0,
) -> ProductBmoReport:
    """Lower-bound oscillation norm for a scalar family keyed by rectangles.

    coeffs maps DyadicRectangle -> scalar; the same open-set family as the
    function version is used on the given coefficients.
    """
    masks = []
    sq = np.zeros(grid.shape)
    for rect, c in coeffs.items():
        m = np.zeros(grid.shape, dtype=bool)
        m[rect.index()] = True
        masks.append((m, abs(c) ** 2))
        sq += (abs(c) ** 2 / rect.measure) * m

    def set_value(mask):
        area = mask.sum() * grid.cell_volume
        if area == 0:
            return 0.0
        s = sum(c2 for m, c2 in masks if mask[m].all())
        return math.sqrt(s / area)

    best_single = max((set_value(m) for m, _ in masks), default=0.0)
    best = best_single
    n = len(masks)
    rng = np.random.default_rng(seed)
    if masks:
        pool_idx = rng.choice(len(masks), size=min(pool, len(masks)), replace=False)
        for k in range(2, omega_union + 1):
            for combo in itertools.combinations(pool_idx.tolist(), k):
                m = np.zeros(grid.shape, dtype=bool)
                for i in combo:
                    m |= masks[i][0]
                best = max(best, set_value(m))
                n += 1
        for lam in np.unique(sq)[:-1]:
            m = sq > lam
            if m.any():
                best = max(best, set_value(m))
                n += 1
    return ProductBmoReport(best, best_single, n)


# ---------------------------------------------------------------------------
# maximal functions
# ---------------------------------------------------------------------------

def _window_means(a: np.ndarray, w: int, axis: int) -> np.ndarray:
    """Circular sliding means: out[s] = mean of a over the window [s, s+w)."""
    out = np.zeros_like(a, dtype=float)
    for k in range(w):
        out += np.roll(a, -k, axis=axis)
    return out / w


def _window_cover_max(means: np.ndarray, w: int, axis: int) -> np.ndarray:
    """out[x] = max over window starts s with x in [s, s+w) of means[s]."""
    out = means.copy()
    for k in range(1, w):
        np.maximum(out, np.roll(means, k, axis=axis), out=out)
    return out


def _coord_view(values: np.ndarray, grid: TorusGrid) -> tuple[np.ndarray, tuple[int, ...], tuple[int, ...]]:
    """Reshape so every torus coordinate is its own array axis."""
    a1, a2 = grid.axes
    shape = (a1.n_side,) * a1.dim + (a2.n_side,) * a2.dim
    view = values.reshape(shape)
    return view, tuple(range(a1.dim)), tuple(range(a1.dim, a1.dim + a2.dim))


def _cube_window_max(a: np.ndarray, width_by_axis: dict[int, int]) -> np.ndarray:
    """Sup of box means over wrapped windows of the given per-axis widths."""
    m = a
    for ax, w in width_by_axis.items():
        m = _window_means(m, w, ax)
    for ax, w in width_by_axis.items():
        m = _window_cover_max(m, w, ax)
    return m


def maximal_function(
    f: DiscreteFunction,
    kind: str = "dyadic",
    shift: GridShift | None = None,
    s: float = 1.0,
) -> DiscreteFunction:
    """Pointwise sup of rectangle averages of |f|.

    kind 'dyadic': rectangles of one shifted lattice.  kind 'strong': sup over
    the rectangles of every shifted lattice, which on the torus is exactly the
    sup over all wrapped boxes of dyadic side lengths (any start), so it is
    computed by sliding windows.  kind 'axis1'/'axis2': the one-parameter
    strong operator in a single variable.  s > 1 applies the power trick
    M_s f = (M |f|^s)^(1/s).
    """
    if s < 1:
        raise ValueError("s must be >= 1")
    grid = f.grid
    a = np.abs(f.values) ** s
    if kind == "dyadic":
        om = shift if shift is not None else GridShift.zero(grid)
        out = _dyadic_max(a, grid, om)
    elif kind == "strong":
        view, ax1, ax2 = _coord_view(a, grid)
        acc = np.zeros_like(view)
        for j1 in range(grid.axes[0].levels + 1):
            w1 = 1 << (grid.axes[0].levels - j1)
            for j2 in range(grid.axes[1].levels + 1):
                w2 = 1 << (grid.axes[1].levels - j2)
                widths = {t: w1 for t in ax1} | {t: w2 for t in ax2}
                np.maximum(acc, _cube_window_max(view, widths), out=acc)
        out = acc.reshape(grid.shape)
    elif kind in ("axis1", "axis2"):
        idx = 0 if kind == "axis1" else 1
        view, ax1, ax2 = _coord_view(a, grid)
        mine = ax1 if idx == 0 else ax2
        acc = np.zeros_like(view)
        for j in range(grid.axes[idx].levels + 1):
            w = 1 << (grid.axes[idx].levels - j)
            np.maximum(acc, _cube_window_max(view, {t: w for t in mine}), out=acc)
        out = acc.reshape(grid.shape)
    else:
        raise ValueError(f"unknown maximal kind {kind!r}")
    return DiscreteFunction(grid, out ** (1.0 / s))


def _dyadic_max(a: np.ndarray, grid: TorusGrid, om: GridShift) -> np.ndarray:
    out = np.zeros(grid.shape)
    for rect in all_rectangles(grid, om):
        idx = rect.index()
        out[idx] = np.maximum(out[idx], a[idx].mean())
    return out


def axis_profile_strong_max(vec: np.ndarray, axis: Axis) -> np.ndarray:
    """Strong maximal function of a single-factor profile."""
    a = np.abs(np.asarray(vec, dtype=float)).reshape((axis.n_side,) * axis.dim)
    out = np.zeros_like(a)
    for j in range(axis.levels + 1):
        w = 1 << (axis.levels - j)
        np.maximum(out, _cube_window_max(a, {t: w for t in range(axis.dim)}), out=out)
    return out.reshape(axis.n_cells)


# ---------------------------------------------------------------------------
# square functions
# ---------------------------------------------------------------------------

def square_function(
    f: DiscreteFunction,
    kind: str = "rect",
    shift: GridShift | None = None,
    depths: tuple[int, int] = (0, 0),
    shift_samples: int | None = None,
    seed: int = 0,
    family: Callable[[GridShift], Callable[[DiscreteFunction], DiscreteFunction]] | None = None,
) -> DiscreteFunction:
    """Square functions over the lattice decomposition of f.

    kinds: 'rect' (bi-parameter differences), 'axis1'/'axis2' (one-parameter
    differences in one variable), 'phi1'/'phi2' (maximal-smoothed versions),
    'block' (bi-parameter blocks at the given depths, averaged over shifts),
    'block1'/'block2' (one-parameter blocks at depths[0]).

    For the block kinds the expectation over shifts is exact when
    shift_samples is None (full enumeration) and Monte-Carlo otherwise; an
    optional per-shift operator family is applied to f inside the square.
    """
    grid = f.grid
    om = shift if shift is not None else GridShift.zero(grid)
    if kind == "rect":
        return _sf_rect(f, om)
    if kind in ("axis1", "axis2"):
        return _sf_axis(f, om, 0 if kind == "axis1" else 1)
    if kind in ("phi1", "phi2"):
        return _sf_phi(f, om, 0 if kind == "phi1" else 1)
    if kind in ("block", "block1", "block2"):
        return _sf_block(f, kind, depths, shift_samples, seed, family)
    raise ValueError(f"unknown square function kind {kind!r}")


def _axis_groups(f: DiscreteFunction, axis_idx: int, shift: AxisShift):
    """Orthogonal one-variable decomposition with the coarsest scale carrying
    difference plus average (so the pieces sum back to f exactly)."""
    grid = f.grid
    yield axis_project(f, 1, axis_idx, shift)  # top cube: Delta + E
    for level in range(1, grid.axes[axis_idx].levels):
        for cube in axis_cubes(grid.axes[axis_idx], level, shift):
            yield martingale_difference(f, cube, axis_idx)


def _sf_rect(f: DiscreteFunction, om: GridShift) -> DiscreteFunction:
    grid = f.grid
    acc = np.zeros(grid.shape)
    for g1 in _axis_groups(f, 0, om.shift1):
        for g2 in _axis_groups(g1, 1, om.shift2):
            acc += np.abs(g2.values) ** 2
    return DiscreteFunction(grid, np.sqrt(acc))


def _sf_axis(f: DiscreteFunction, om: GridShift, axis_idx: int) -> DiscreteFunction:
    grid = f.grid
    shift = om.shift1 if axis_idx == 0 else om.shift2
    acc = np.zeros(grid.shape)
    for g in _axis_groups(f, axis_idx, shift):
        acc += np.abs(g.values) ** 2
    return DiscreteFunction(grid, np.sqrt(acc))


def _sf_phi(f: DiscreteFunction, om: GridShift, axis_idx: int) -> DiscreteFunction:
    # smoothed version: Haar coefficient profiles run through the strong
    # one-dimensional maximal operator on the other axis
    grid = f.grid
    axis = grid.axes[axis_idx]
    other = grid.axes[1 - axis_idx]
    shift = om.shift1 if axis_idx == 0 else om.shift2
    basis = AxisBasis(axis, shift)
    acc = np.zeros(grid.shape)
    for i, h in enumerate(basis.entries):
        if not h.cancellative:
            continue
        coeff = f.pair_axis(basis.matrix[i], axis_idx)
        m = axis_profile_strong_max(coeff, other)
        prof = basis.matrix[i] ** 2
        if axis_idx == 0:
            acc += np.outer(prof, m**2)
        else:
            acc += np.outer(m**2, prof)
    return DiscreteFunction(grid, np.sqrt(acc))


def _sf_block(f, kind, depths, shift_samples, seed, family):
    # sum over base rectangles of the averaged squared maximal function of
    # the shifted martingale blocks at the given depth offsets
    grid = f.grid
    if shift_samples is None:
        shifts = list(enumerate_shifts(grid))
    else:
        rng = np.random.default_rng(seed)
        shifts = [sample_shift(grid, rng) for _ in range(shift_samples)]
    wt = 1.0 / len(shifts)
    acc = np.zeros(grid.shape)
    i, j = depths
    for om in shifts:
        g = family(om)(f) if family is not None else f
        if kind == "block":
            for l1 in range(grid.axes[0].levels - i):
                for c1 in axis_cubes(grid.axes[0], l1, om.shift1):
                    g1 = martingale_block(g, c1, i, 0)
                    for l2 in range(grid.axes[1].levels - j):
                        for c2 in axis_cubes(grid.axes[1], l2, om.shift2):
                            blk = martingale_block(g1, c2, j, 1)
                            acc += wt * maximal_function(blk, "strong").values ** 2
        else:
            axis_idx = 0 if kind == "block1" else 1
            sh = om.shift1 if axis_idx == 0 else om.shift2
            for l in range(grid.axes[axis_idx].levels - i):
                for c in axis_cubes(grid.axes[axis_idx], l, sh):
                    blk = martingale_block(g, c, i, axis_idx)
                    acc += wt * maximal_function(blk, "strong").values ** 2
    return DiscreteFunction(grid, np.sqrt(acc))


def phi_function(
    f: DiscreteFunction,
    axis_idx: int,
    shift: GridShift | None = None,
    profile_op: Callable[[np.ndarray], np.ndarray] | None = None,
) -> DiscreteFunction:
    """Maximal-smoothed Haar sum: sum_I h_I tensor M<f, h_I>_axis.

    profile_op replaces the strong maximal operator applied to the Haar
    coefficient profiles (the adapted-symbol variants pass their own)."""
    grid = f.grid
    om = shift if shift is not None else GridShift.zero(grid)
    axis = grid.axes[axis_idx]
    other = grid.axes[1 - axis_idx]
    sh = om.shift1 if axis_idx == 0 else om.shift2
    basis = AxisBasis(axis, sh)
    if profile_op is None:
        profile_op = lambda vec: axis_profile_strong_max(vec, other)
    out = np.zeros(grid.shape)
    for k, h in enumerate(basis.entries):
        if not h.cancellative:
            continue
        coeff = f.pair_axis(basis.matrix[k], axis_idx)
        m = profile_op(coeff)
        if axis_idx == 0:
            out += np.outer(basis.matrix[k], m)
        else:
            out += np.outer(m, basis.matrix[k])
    return DiscreteFunction(grid, out)


def lower_sf_check(f: DiscreteFunction, v: Weight, p: float, shift: GridShift | None = None) -> dict:
    """Ratios ||f||_{L^p(v)}^p / int (S f)^p v for the three square functions."""
    out = {}
    num = lp_norm(f, p, v) ** p
    for kind in ("axis1", "axis2", "rect"):
        sf = square_function(f, kind, shift)
        den = float(((sf.values**p) * v.values).sum() * f.grid.cell_volume)
        out[kind] = num / den if den > 0 else math.inf if num > 0 else 1.0
    return out
