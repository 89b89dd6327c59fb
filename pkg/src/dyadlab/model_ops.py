"""The three dyadic model operator families and one-parameter paraproducts.

Shifts, partial paraproducts and full paraproducts are stored as explicit
coefficient maps over common-ancestor keys, with the normalisations enforced
at build time: shift coefficients are capped by
(|I1||I2||I3|)^(1/2)/|K|^2 * (|J1||J2||J3|)^(1/2)/|V|^2, partial-paraproduct
symbols by the same one-axis cap in BMO, and full-paraproduct coefficient
families by their rectangle-square-sum oscillation report.

Coefficient keys are cube-indexed, which pins the factors to one dimension
per parameter (Haar signatures would otherwise enter the keys).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .core import (
    Axis,
    AxisShift,
    DiscreteFunction,
    DyadicCube,
    DyadicRectangle,
    GridShift,
    HaarFunction,
    TorusGrid,
    axis_haar_vector,
    enumerate_axis_shifts,
)
from .measures import sequence_product_bmo

__all__ = [
    "AxisOps",
    "axis_ops",
    "ShiftOperator",
    "PartialParaproduct",
    "FullParaproduct",
    "one_param_paraproduct",
    "one_param_paraproduct_form",
    "axis_profile_bmo",
    "sparse_dominate_paraproduct",
    "dmo_absolute_form_check",
    "paraproduct_freeness_probe",
    "random_shift_operator",
    "random_partial_paraproduct",
    "random_full_paraproduct",
    "NormalizationError",
]


class NormalizationError(ValueError):
    """A coefficient exceeds its structural cap."""


# ---------------------------------------------------------------------------
# cached per-axis lattice operators
# ---------------------------------------------------------------------------

class AxisOps:
    """Pairing matrices and index bookkeeping for one shifted axis lattice.

    Row conventions: `haar` rows are cancellative Haar profiles (levels
    0..L-1), `unit` rows are the normalised indicators |I|^(-1/2) 1_I
    (levels 0..L), `avg` rows are the plain averaging profiles 1_I/|I|.
    Restricted to one-dimensional factors.
    """

    def __init__(self, axis: Axis, shift: AxisShift):
        if axis.dim != 1:
            raise NotImplementedError("model operators are built on 1-d factors")
        self.axis = axis
        self.shift = shift
        L = axis.levels
        n = axis.n_side
        self.canc_offset = np.cumsum([0] + [1 << l for l in range(L)])
        self.cube_offset = np.cumsum([0] + [1 << l for l in range(L + 1)])
        haar_rows = []
        self.canc_cubes: list[DyadicCube] = []
        for level in range(L):
            for pos in range(1 << level):
                cube = DyadicCube(axis, level, (pos,), shift)
                self.canc_cubes.append(cube)
                haar_rows.append(axis_haar_vector(HaarFunction(cube, (1,))))
        unit_rows = []
        self.cubes: list[DyadicCube] = []
        for level in range(L + 1):
            for pos in range(1 << level):
                cube = DyadicCube(axis, level, (pos,), shift)
                self.cubes.append(cube)
                ind = np.zeros(n)
                ind[cube.cells()] = 1.0
                unit_rows.append(ind * cube.measure**-0.5)
        self.haar = np.stack(haar_rows)
        self.unit = np.stack(unit_rows)
        # avg rows are plain averaging profiles 1_I/|I| = |I|^(-1/2) unit rows
        scale = np.array([c.measure**-0.5 for c in self.cubes])
        self.avg = self.unit * scale[:, None]

    # -- index helpers -------------------------------------------------------
    def canc_index(self, level: int, pos: int) -> int:
        return int(self.canc_offset[level]) + pos

    def cube_index(self, level: int, pos: int) -> int:
        return int(self.cube_offset[level]) + pos

    def descendant_positions(self, level: int, pos: int, depth: int) -> np.ndarray:
        """Positions of the depth-`depth` descendants, in spatial order."""
        if depth == 0:
            return np.array([pos])
        cube = DyadicCube(self.axis, level, (pos,), self.shift)
        w_child = 1 << (self.axis.levels - level - depth)
        start = cube.start_cells()[0]
        off = self.shift.offset_cells(level + depth)[0]
        q0 = ((start - off) % self.axis.n_side) // w_child
        return (q0 + np.arange(1 << depth)) % (1 << (level + depth))

    def rows(self, kind: str) -> np.ndarray:
        return {"haar": self.haar, "unit": self.unit, "avg": self.avg}[kind]

    def pair(self, values: np.ndarray, kind: str, side: int) -> np.ndarray:
        """Pair a grid value table against every row on one side."""
        mat = self.rows(kind) * self.axis.cell_volume
        return mat @ values if side == 0 else values @ mat.T


@lru_cache(maxsize=256)
def axis_ops(axis: Axis, shift: AxisShift) -> AxisOps:
    return AxisOps(axis, shift)


def axis_profile_haar_coeffs(vec: np.ndarray, ops: AxisOps) -> np.ndarray:
    return (ops.haar * ops.axis.cell_volume) @ vec


def axis_profile_bmo(vec: np.ndarray, axis: Axis, over_all_shifts: bool = True) -> float:
    """One-parameter BMO norm of an axis profile; by default the sup runs over
    the lattices of every shift (the torus stand-in for all intervals)."""
    shifts = enumerate_axis_shifts(axis) if over_all_shifts else [AxisShift.zero(axis)]
    best = 0.0
    a = np.asarray(vec, dtype=float)
    for shift in shifts:
        for level in range(axis.levels + 1):
            for pos in range(1 << level):
                cells = DyadicCube(axis, level, (pos,), shift).cells()
                blk = a[cells]
                best = max(best, float(np.abs(blk - blk.mean()).mean()))
    return best


# ---------------------------------------------------------------------------
# bilinear bi-parameter shifts
# ---------------------------------------------------------------------------

@dataclass
class ShiftOperator:
    """Shift of complexity (k, v) with the non-cancellative slot per axis
    given by `pattern` (one of the nine types).

    coeffs maps ((K_level, K_pos), (V_level, V_pos)) to a dense block of
    shape (2^k1, 2^k2, 2^k3, 2^v1, 2^v2, 2^v3) indexed by descendant order.
    """

    grid: TorusGrid
    shift: GridShift
    k: tuple[int, int, int]
    v: tuple[int, int, int]
    pattern: tuple[int, int]
    coeffs: dict

    def __post_init__(self):
        if not (self.pattern[0] in (1, 2, 3) and self.pattern[1] in (1, 2, 3)):
            raise ValueError("pattern names the non-cancellative slot per axis")
        self.validate()

    # -- structural cap -------------------------------------------------------
    def cap(self, k_level: int, v_level: int) -> float:
        s1 = sum(self.k)
        s2 = sum(self.v)
        c1 = 2.0 ** (-(3 * k_level + s1) / 2.0) * 2.0 ** (2 * k_level)
        c2 = 2.0 ** (-(3 * v_level + s2) / 2.0) * 2.0 ** (2 * v_level)
        return c1 * c2

    def validate(self) -> None:
        L1, L2 = self.grid.axes[0].levels, self.grid.axes[1].levels
        for (kk, vv), block in self.coeffs.items():
            shape = tuple(1 << d for d in self.k) + tuple(1 << d for d in self.v)
            if block.shape != shape:
                raise ValueError("coefficient block has the wrong shape")
            for slot in (1, 2, 3):
                # cancellative slots need children; the averaged slot only
                # needs the cube itself
                room1 = L1 if self.pattern[0] == slot else L1 - 1
                room2 = L2 if self.pattern[1] == slot else L2 - 1
                if kk[0] + self.k[slot - 1] > room1 or vv[0] + self.v[slot - 1] > room2:
                    raise ValueError("slot cubes fall below the resolution")
            cap = self.cap(kk[0], vv[0])
            if np.abs(block).max() > cap * (1 + 1e-9):
                raise NormalizationError("shift coefficient exceeds the size cap")

    # -- evaluation -----------------------------------------------------------
    def _slot_kind(self, slot: int, axis: int) -> str:
        return "unit" if self.pattern[axis] == slot else "haar"

    def _slot_table(self, f: DiscreteFunction, slot: int) -> np.ndarray:
        o1 = axis_ops(self.grid.axes[0], self.shift.shift1)
        o2 = axis_ops(self.grid.axes[1], self.shift.shift2)
        m1 = o1.rows(self._slot_kind(slot, 0)) * o1.axis.cell_volume
        m2 = o2.rows(self._slot_kind(slot, 1)) * o2.axis.cell_volume
        return m1 @ f.values @ m2.T

    def _gather(self, ops: AxisOps, level: int, pos: int, depth: int, kind: str) -> np.ndarray:
        qs = ops.descendant_positions(level, pos, depth)
        if kind == "haar":
            return np.array([ops.canc_index(level + depth, int(q)) for q in qs])
        return np.array([ops.cube_index(level + depth, int(q)) for q in qs])

    def _slot_block(self, table: np.ndarray, slot: int, kk, vv) -> np.ndarray:
        o1 = axis_ops(self.grid.axes[0], self.shift.shift1)
        o2 = axis_ops(self.grid.axes[1], self.shift.shift2)
        i1 = self._gather(o1, kk[0], kk[1], self.k[slot - 1], self._slot_kind(slot, 0))
        i2 = self._gather(o2, vv[0], vv[1], self.v[slot - 1], self._slot_kind(slot, 1))
        return table[np.ix_(i1, i2)]

    def form(self, f1: DiscreteFunction, f2: DiscreteFunction, f3: DiscreteFunction) -> float:
        tables = [self._slot_table(f, s + 1) for s, f in enumerate((f1, f2, f3))]
        total = 0.0
        for (kk, vv), block in self.coeffs.items():
            us = [self._slot_block(tables[s], s + 1, kk, vv) for s in range(3)]
            total += float(np.einsum("abcdef,ad,be,cf->", block, *us))
        return total

    def absolute_form(self, f1, f2, f3) -> float:
        tables = [self._slot_table(f, s + 1) for s, f in enumerate((f1, f2, f3))]
        total = 0.0
        for (kk, vv), block in self.coeffs.items():
            us = [np.abs(self._slot_block(tables[s], s + 1, kk, vv)) for s in range(3)]
            total += float(np.einsum("abcdef,ad,be,cf->", np.abs(block), *us))
        return total

    def apply(self, f1: DiscreteFunction, f2: DiscreteFunction) -> DiscreteFunction:
        o1 = axis_ops(self.grid.axes[0], self.shift.shift1)
        o2 = axis_ops(self.grid.axes[1], self.shift.shift2)
        tables = [self._slot_table(f, s + 1) for s, f in enumerate((f1, f2))]
        out = np.zeros(self.grid.shape)
        r1 = o1.rows(self._slot_kind(3, 0))
        r2 = o2.rows(self._slot_kind(3, 1))
        for (kk, vv), block in self.coeffs.items():
            u1 = self._slot_block(tables[0], 1, kk, vv)
            u2 = self._slot_block(tables[1], 2, kk, vv)
            w3 = np.einsum("abcdef,ad,be->cf", block, u1, u2)
            i1 = self._gather(o1, kk[0], kk[1], self.k[2], self._slot_kind(3, 0))
            i2 = self._gather(o2, vv[0], vv[1], self.v[2], self._slot_kind(3, 1))
            out += r1[i1].T @ w3 @ r2[i2]
        return DiscreteFunction(self.grid, out)

    def kernel_density(self) -> np.ndarray:
        """Order-3 kernel K[x, y, z] over flattened product cells realising
        the trilinear form as an exact integral."""
        o1 = axis_ops(self.grid.axes[0], self.shift.shift1)
        o2 = axis_ops(self.grid.axes[1], self.shift.shift2)
        n1, n2 = self.grid.shape
        dens = np.zeros((n1, n2, n1, n2, n1, n2))
        for (kk, vv), block in self.coeffs.items():
            rows = []
            for slot in (1, 2, 3):
                i1 = self._gather(o1, kk[0], kk[1], self.k[slot - 1], self._slot_kind(slot, 0))
                i2 = self._gather(o2, vv[0], vv[1], self.v[slot - 1], self._slot_kind(slot, 1))
                rows.append((o1.rows(self._slot_kind(slot, 0))[i1],
                             o2.rows(self._slot_kind(slot, 1))[i2]))
            dens += np.einsum(
                "abcdef,cX,fP,aY,dQ,bZ,eR->XPYQZR",
                block, rows[2][0], rows[2][1], rows[0][0], rows[0][1], rows[1][0], rows[1][1],
                optimize=True,
            )
        C = n1 * n2
        return dens.reshape(C, C, C)

    # -- duals ------------------------------------------------------------------
    def dual(self, swap1: int | None = None, swap2: int | None = None) -> "ShiftOperator":
        """Transpose slot `swap` with slot 3, per axis independently.

        swap=1 realises the first-function adjoint on that axis, swap=2 the
        second; None leaves the axis alone.  Trilinear forms are preserved
        under permuting the corresponding inputs.
        """
        perm1 = _slot_permutation(swap1)
        perm2 = _slot_permutation(swap2)
        k = tuple(self.k[perm1[i]] for i in range(3))
        v = tuple(self.v[perm2[i]] for i in range(3))
        p1 = _permute_pattern(self.pattern[0], perm1)
        p2 = _permute_pattern(self.pattern[1], perm2)
        coeffs = {}
        for key, block in self.coeffs.items():
            axes = tuple(perm1[i] for i in range(3)) + tuple(3 + perm2[i] for i in range(3))
            coeffs[key] = np.transpose(block, axes)
        return ShiftOperator(self.grid, self.shift, k, v, (p1, p2), coeffs)

    # -- serialization ------------------------------------------------------------
    def to_payload(self) -> dict:
        return {
            "family": "shift",
            "pattern": list(self.pattern),
            "k": list(self.k),
            "v": list(self.v),
            "grid": _grid_payload(self.grid),
            "shift": _shift_payload(self.shift),
            "records": [
                {"key": [list(kk), list(vv)],
                 "block": [x.hex() for x in block.ravel().tolist()]}
                for (kk, vv), block in sorted(self.coeffs.items())
            ],
        }

    @staticmethod
    def from_payload(payload: dict) -> "ShiftOperator":
        grid = _grid_from_payload(payload["grid"])
        om = _shift_from_payload(payload["shift"], grid)
        k = tuple(payload["k"])
        v = tuple(payload["v"])
        shape = tuple(1 << d for d in k) + tuple(1 << d for d in v)
        coeffs = {}
        for rec in payload["records"]:
            kk, vv = rec["key"]
            block = np.array([float.fromhex(x) for x in rec["block"]]).reshape(shape)
            coeffs[(tuple(kk), tuple(vv))] = block
        return ShiftOperator(grid, om, k, v, tuple(payload["pattern"]), coeffs)


def _slot_permutation(swap: int | None) -> tuple[int, int, int]:
    if swap is None:
        return (0, 1, 2)
    if swap == 1:
        return (2, 1, 0)
    if swap == 2:
        return (0, 2, 1)
    raise ValueError("swap must be 1, 2 or None")


def _permute_pattern(o: int, perm: tuple[int, int, int]) -> int:
    # slot s of the dual reads slot perm[s-1]+1 of the original
    inv = perm.index(o - 1)
    return inv + 1


# ---------------------------------------------------------------------------
# one-parameter bilinear paraproducts
# ---------------------------------------------------------------------------

def one_param_paraproduct_form(
    b: np.ndarray,
    g1: np.ndarray,
    g2: np.ndarray,
    g3: np.ndarray,
    ops: AxisOps,
    ptype: int = 3,
    cube_mask: np.ndarray | None = None,
) -> float:
    """Trilinear form of the one-parameter bilinear paraproduct.

    ptype names the slot paired with the Haar function; the other two slots
    take plain averages.  cube_mask (over cancellative cubes) restricts the
    outer sum.
    """
    vol = ops.axis.cell_volume
    bb = (ops.haar * vol) @ np.asarray(b, dtype=float)
    n_canc = ops.haar.shape[0]
    avgs = [(ops.avg[:n_canc] * vol) @ np.asarray(g) for g in (g1, g2, g3)]
    haars = [(ops.haar * vol) @ np.asarray(g) for g in (g1, g2, g3)]
    xs = [haars[i] if ptype == i + 1 else avgs[i] for i in range(3)]
    total = bb * xs[0] * xs[1] * xs[2]
    if cube_mask is not None:
        total = total[cube_mask]
    return float(total.sum())


def one_param_paraproduct(
    b: np.ndarray,
    g1: np.ndarray,
    g2: np.ndarray,
    ops: AxisOps,
    ptype: int = 3,
) -> np.ndarray:
    """Apply the paraproduct; the third slot of the form is left free."""
    vol = ops.axis.cell_volume
    n_canc = ops.haar.shape[0]
    bb = (ops.haar * vol) @ np.asarray(b, dtype=float)
    avg = lambda g: (ops.avg[:n_canc] * vol) @ np.asarray(g)
    par = lambda g: (ops.haar * vol) @ np.asarray(g)
    if ptype == 3:
        w = bb * avg(g1) * avg(g2)
        return w @ ops.haar
    if ptype == 1:
        w = bb * par(g1) * avg(g2)
    else:
        w = bb * avg(g1) * par(g2)
    return w @ ops.avg[:n_canc]


# ---------------------------------------------------------------------------
# partial paraproducts
# ---------------------------------------------------------------------------

@dataclass
class PartialParaproduct:
    """Shift structure on one axis, paraproduct structure on the other.

    symbols maps ((K_level, K_pos), (i1, i2, i3)) to a profile over the
    paraproduct axis cells, where i1..i3 index descendants of K at depths
    k1..k3.  The non-cancellative slot of the shift axis is `h0_slot`; the
    paraproduct pairs slot `ptype` with the Haar function.
    """

    grid: TorusGrid
    shift: GridShift
    shift_axis: int
    k: tuple[int, int, int]
    h0_slot: int
    ptype: int
    symbols: dict

    def __post_init__(self):
        self.validate()

    @property
    def para_axis(self) -> int:
        return 1 - self.shift_axis

    def cap(self, k_level: int) -> float:
        return 2.0 ** (-(3 * k_level + sum(self.k)) / 2.0) * 2.0 ** (2 * k_level)

    def validate(self) -> None:
        axis = self.grid.axes[self.shift_axis]
        paxis = self.grid.axes[self.para_axis]
        for (kk, _), prof in self.symbols.items():
            for slot in (1, 2, 3):
                room = axis.levels if slot == self.h0_slot else axis.levels - 1
                if kk[0] + self.k[slot - 1] > room:
                    raise ValueError("slot cubes fall below the resolution")
            if len(prof) != paxis.n_cells:
                raise ValueError("symbol profile has the wrong length")
            if axis_profile_bmo(prof, paxis) > self.cap(kk[0]) * (1 + 1e-9):
                raise NormalizationError("partial paraproduct symbol exceeds the BMO cap")

    def _ops(self) -> tuple[AxisOps, AxisOps]:
        s = (self.shift.shift1, self.shift.shift2)
        return (
            axis_ops(self.grid.axes[self.shift_axis], s[self.shift_axis]),
            axis_ops(self.grid.axes[self.para_axis], s[self.para_axis]),
        )

    def _slot_profiles(self, f: DiscreteFunction, slot: int, sops: AxisOps) -> np.ndarray:
        kind = "unit" if slot == self.h0_slot else "haar"
        return sops.pair(f.values, kind, self.shift_axis)

    def _slot_index(self, sops: AxisOps, kk, slot: int) -> Callable[[int], int]:
        level, pos = kk
        depth = self.k[slot - 1]
        qs = sops.descendant_positions(level, pos, depth)
        if slot == self.h0_slot:
            return lambda i: sops.cube_index(level + depth, int(qs[i]))
        return lambda i: sops.canc_index(level + depth, int(qs[i]))

    def form(self, f1, f2, f3) -> float:
        sops, pops = self._ops()
        profs = [self._slot_profiles(f, s + 1, sops) for s, f in enumerate((f1, f2, f3))]
        total = 0.0
        for (kk, idx), b in self.symbols.items():
            g = []
            for slot in (1, 2, 3):
                row = self._slot_index(sops, kk, slot)(idx[slot - 1])
                prof = profs[slot - 1]
                g.append(prof[row] if self.shift_axis == 0 else prof[:, row])
            total += one_param_paraproduct_form(b, g[0], g[1], g[2], pops, self.ptype)
        return total

    def absolute_form(self, f1, f2, f3) -> float:
        sops, pops = self._ops()
        profs = [self._slot_profiles(f, s + 1, sops) for s, f in enumerate((f1, f2, f3))]
        vol = pops.axis.cell_volume
        n_canc = pops.haar.shape[0]
        total = 0.0
        for (kk, idx), b in self.symbols.items():
            g = []
            for slot in (1, 2, 3):
                row = self._slot_index(sops, kk, slot)(idx[slot - 1])
                prof = profs[slot - 1]
                g.append(prof[row] if self.shift_axis == 0 else prof[:, row])
            bb = np.abs((pops.haar * vol) @ b)
            xs = [
                np.abs((pops.haar * vol) @ g[i]) if self.ptype == i + 1
                else np.abs((pops.avg[:n_canc] * vol) @ g[i])
                for i in range(3)
            ]
            total += float((bb * xs[0] * xs[1] * xs[2]).sum())
        return total

    def apply(self, f1, f2) -> DiscreteFunction:
        sops, pops = self._ops()
        profs = [self._slot_profiles(f, s + 1, sops) for s, f in enumerate((f1, f2))]
        out = np.zeros(self.grid.shape)
        kind3 = "unit" if self.h0_slot == 3 else "haar"
        rows3 = sops.rows(kind3)
        for (kk, idx), b in self.symbols.items():
            g = []
            for slot in (1, 2):
                row = self._slot_index(sops, kk, slot)(idx[slot - 1])
                prof = profs[slot - 1]
                g.append(prof[row] if self.shift_axis == 0 else prof[:, row])
            pvec = _para_apply_third(b, g[0], g[1], pops, self.ptype)
            svec = rows3[self._slot_index(sops, kk, 3)(idx[2])]
            block = np.outer(svec, pvec) if self.shift_axis == 0 else np.outer(pvec, svec)
            out += block
        return DiscreteFunction(self.grid, out)

    def kernel_density(self) -> np.ndarray:
        sops, pops = self._ops()
        na = sops.axis.n_cells
        nb = pops.axis.n_cells
        vol = pops.axis.cell_volume
        n_canc = pops.haar.shape[0]
        dens = np.zeros((na, nb, na, nb, na, nb))
        kinds = ["unit" if s == self.h0_slot else "haar" for s in (1, 2, 3)]
        for (kk, idx), b in self.symbols.items():
            svecs = [sops.rows(kinds[s - 1])[self._slot_index(sops, kk, s)(idx[s - 1])]
                     for s in (1, 2, 3)]
            bb = (pops.haar * vol) @ b
            prows = [pops.haar if self.ptype == s else pops.avg[:n_canc] for s in (1, 2, 3)]
            # paraproduct-axis density: sum over outer cubes of the three rows
            pdens = np.einsum("v,vP,vQ,vR->PQR", bb, prows[2], prows[0], prows[1])
            dens += np.einsum("X,Y,Z,PQR->XPYQZR", svecs[2], svecs[0], svecs[1], pdens)
        if self.shift_axis == 1:
            dens = dens.transpose(1, 0, 3, 2, 5, 4)
        C = self.grid.shape[0] * self.grid.shape[1]
        return dens.reshape(C, C, C)

    def dual(self, swap: int) -> "PartialParaproduct":
        """Transpose slot `swap` with slot 3 on both structures at once (the
        trilinear form is preserved under permuting the matching inputs)."""
        perm = _slot_permutation(swap)
        k = tuple(self.k[perm[i]] for i in range(3))
        h0 = _permute_pattern(self.h0_slot, perm)
        pt = _permute_pattern(self.ptype, perm)
        symbols = {}
        for (kk, idx), prof in self.symbols.items():
            symbols[(kk, tuple(idx[perm[i]] for i in range(3)))] = prof
        return PartialParaproduct(self.grid, self.shift, self.shift_axis, k, h0, pt, symbols)

    def to_payload(self) -> dict:
        return {
            "family": "partial",
            "shift_axis": self.shift_axis,
            "k": list(self.k),
            "h0_slot": self.h0_slot,
            "ptype": self.ptype,
            "grid": _grid_payload(self.grid),
            "shift": _shift_payload(self.shift),
            "records": [
                {"key": [list(kk), list(idx)], "profile": [x.hex() for x in prof.tolist()]}
                for (kk, idx), prof in sorted(self.symbols.items())
            ],
        }

    @staticmethod
    def from_payload(payload: dict) -> "PartialParaproduct":
        grid = _grid_from_payload(payload["grid"])
        om = _shift_from_payload(payload["shift"], grid)
        symbols = {}
        for rec in payload["records"]:
            kk, idx = rec["key"]
            symbols[(tuple(kk), tuple(idx))] = np.array([float.fromhex(x) for x in rec["profile"]])
        return PartialParaproduct(
            grid, om, payload["shift_axis"], tuple(payload["k"]),
            payload["h0_slot"], payload["ptype"], symbols,
        )


def _para_apply_third(b, g1, g2, pops: AxisOps, ptype: int) -> np.ndarray:
    vol = pops.axis.cell_volume
    n_canc = pops.haar.shape[0]
    bb = (pops.haar * vol) @ np.asarray(b, dtype=float)
    avg = lambda g: (pops.avg[:n_canc] * vol) @ np.asarray(g)
    par = lambda g: (pops.haar * vol) @ np.asarray(g)
    if ptype == 3:
        w = bb * avg(g1) * avg(g2)
        return w @ pops.haar
    if ptype == 1:
        w = bb * par(g1) * avg(g2)
    else:
        w = bb * avg(g1) * par(g2)
    return w @ pops.avg[:n_canc]


# ---------------------------------------------------------------------------
# full paraproducts
# ---------------------------------------------------------------------------

@dataclass
class FullParaproduct:
    """Coefficients lam over rectangle keys with averages in all slots except
    the Haar-paired one per axis (`pattern`); the coefficients never move."""

    grid: TorusGrid
    shift: GridShift
    pattern: tuple[int, int]
    lam: np.ndarray  # (n_canc_axis1, n_canc_axis2)

    def __post_init__(self):
        o1 = axis_ops(self.grid.axes[0], self.shift.shift1)
        o2 = axis_ops(self.grid.axes[1], self.shift.shift2)
        if self.lam.shape != (o1.haar.shape[0], o2.haar.shape[0]):
            raise ValueError("coefficient table must cover all cancellative rectangles")

    @staticmethod
    def from_symbol(b: DiscreteFunction, shift: GridShift, pattern: tuple[int, int] = (3, 3)) -> "FullParaproduct":
        o1 = axis_ops(b.grid.axes[0], shift.shift1)
        o2 = axis_ops(b.grid.axes[1], shift.shift2)
        lam = (o1.haar * o1.axis.cell_volume) @ b.values @ (o2.haar * o2.axis.cell_volume).T
        return FullParaproduct(b.grid, shift, pattern, lam)

    def coefficient_report(self):
        o1 = axis_ops(self.grid.axes[0], self.shift.shift1)
        o2 = axis_ops(self.grid.axes[1], self.shift.shift2)
        coeffs = {}
        for i, c1 in enumerate(o1.canc_cubes):
            for j, c2 in enumerate(o2.canc_cubes):
                coeffs[DyadicRectangle(c1, c2)] = self.lam[i, j]
        return sequence_product_bmo(self.grid, coeffs, self.shift)

    def _tables(self, f: DiscreteFunction, slot: int):
        o1 = axis_ops(self.grid.axes[0], self.shift.shift1)
        o2 = axis_ops(self.grid.axes[1], self.shift.shift2)
        n1, n2 = o1.haar.shape[0], o2.haar.shape[0]
        m1 = o1.haar if self.pattern[0] == slot else o1.avg[:n1]
        m2 = o2.haar if self.pattern[1] == slot else o2.avg[:n2]
        return (m1 * o1.axis.cell_volume) @ f.values @ (m2 * o2.axis.cell_volume).T

    def form(self, f1, f2, f3) -> float:
        t = [self._tables(f, s + 1) for s, f in enumerate((f1, f2, f3))]
        return float((self.lam * t[0] * t[1] * t[2]).sum())

    def absolute_form(self, f1, f2, f3) -> float:
        t = [np.abs(self._tables(f, s + 1)) for s, f in enumerate((f1, f2, f3))]
        return float((np.abs(self.lam) * t[0] * t[1] * t[2]).sum())

    def apply(self, f1, f2) -> DiscreteFunction:
        o1 = axis_ops(self.grid.axes[0], self.shift.shift1)
        o2 = axis_ops(self.grid.axes[1], self.shift.shift2)
        n1, n2 = o1.haar.shape[0], o2.haar.shape[0]
        t = [self._tables(f, s + 1) for s, f in enumerate((f1, f2))]
        w = self.lam * t[0] * t[1]
        m1 = o1.haar if self.pattern[0] == 3 else o1.avg[:n1]
        m2 = o2.haar if self.pattern[1] == 3 else o2.avg[:n2]
        return DiscreteFunction(self.grid, m1.T @ w @ m2)

    def kernel_density(self) -> np.ndarray:
        o1 = axis_ops(self.grid.axes[0], self.shift.shift1)
        o2 = axis_ops(self.grid.axes[1], self.shift.shift2)
        n1, n2 = o1.haar.shape[0], o2.haar.shape[0]
        r1 = [o1.haar if self.pattern[0] == s else o1.avg[:n1] for s in (1, 2, 3)]
        r2 = [o2.haar if self.pattern[1] == s else o2.avg[:n2] for s in (1, 2, 3)]
        dens = np.einsum(
            "kv,kX,vP,kY,vQ,kZ,vR->XPYQZR",
            self.lam, r1[2], r2[2], r1[0], r2[0], r1[1], r2[1], optimize=True,
        )
        C = self.grid.shape[0] * self.grid.shape[1]
        return dens.reshape(C, C, C)

    def to_payload(self) -> dict:
        return {
            "family": "full",
            "pattern": list(self.pattern),
            "grid": _grid_payload(self.grid),
            "shift": _shift_payload(self.shift),
            "lam": [x.hex() for x in self.lam.ravel().tolist()],
            "lam_shape": list(self.lam.shape),
        }

    @staticmethod
    def from_payload(payload: dict) -> "FullParaproduct":
        grid = _grid_from_payload(payload["grid"])
        om = _shift_from_payload(payload["shift"], grid)
        lam = np.array([float.fromhex(x) for x in payload["lam"]]).reshape(payload["lam_shape"])
        return FullParaproduct(grid, om, tuple(payload["pattern"]), lam)


# ---------------------------------------------------------------------------
# serialization helpers
# ---------------------------------------------------------------------------

def _grid_payload(grid: TorusGrid) -> dict:
    return {"dims": [grid.axes[0].dim, grid.axes[1].dim],
            "levels": [grid.axes[0].levels, grid.axes[1].levels]}


def _grid_from_payload(p: dict) -> TorusGrid:
    return TorusGrid.make(tuple(p["levels"]), tuple(p["dims"]))


def _shift_payload(om: GridShift) -> dict:
    return {"bits1": [list(b) for b in om.shift1.bits], "bits2": [list(b) for b in om.shift2.bits]}


def _shift_from_payload(p: dict, grid: TorusGrid) -> GridShift:
    s1 = AxisShift(grid.axes[0], tuple(tuple(b) for b in p["bits1"]))
    s2 = AxisShift(grid.axes[1], tuple(tuple(b) for b in p["bits2"]))
    return GridShift(s1, s2)


def dmo_to_json(op) -> str:
    return json.dumps(op.to_payload(), sort_keys=True)


def dmo_from_json(text: str):
    payload = json.loads(text)
    family = payload["family"]
    cls = {"shift": ShiftOperator, "partial": PartialParaproduct, "full": FullParaproduct}[family]
    return cls.from_payload(payload)


# ---------------------------------------------------------------------------
# random generators (extremal coefficients)
# ---------------------------------------------------------------------------

def random_shift_operator(
    grid: TorusGrid,
    om: GridShift,
    k: tuple[int, int, int],
    v: tuple[int, int, int],
    pattern: tuple[int, int] = (3, 3),
    rng: np.random.Generator | None = None,
    fill: float = 1.0,
) -> ShiftOperator:
    """Coefficients drawn at the size cap times a random sign (fill scales down)."""
    rng = rng or np.random.default_rng()
    L1, L2 = grid.axes[0].levels, grid.axes[1].levels
    coeffs = {}
    shape = tuple(1 << d for d in k) + tuple(1 << d for d in v)
    dummy = ShiftOperator(grid, om, k, v, pattern, {})
    for lk in range(L1 - max(k)):
        for pk in range(1 << lk):
            for lv in range(L2 - max(v)):
                for pv in range(1 << lv):
                    cap = dummy.cap(lk, lv)
                    block = fill * cap * rng.choice([-1.0, 1.0], size=shape)
                    coeffs[((lk, pk), (lv, pv))] = block
    return ShiftOperator(grid, om, k, v, pattern, coeffs)


def random_partial_paraproduct(
    grid: TorusGrid,
    om: GridShift,
    k: tuple[int, int, int],
    shift_axis: int = 0,
    h0_slot: int = 3,
    ptype: int = 3,
    rng: np.random.Generator | None = None,
    fill: float = 1.0,
) -> PartialParaproduct:
    """Symbols drawn as random profiles scaled onto the BMO cap."""
    rng = rng or np.random.default_rng()
    axis = grid.axes[shift_axis]
    paxis = grid.axes[1 - shift_axis]
    dummy = PartialParaproduct(grid, om, shift_axis, k, h0_slot, ptype, {})
    symbols = {}
    for lk in range(axis.levels - max(k)):
        for pk in range(1 << lk):
            cap = dummy.cap(lk)
            for idx in itertools.product(*(range(1 << d) for d in k)):
                prof = rng.standard_normal(paxis.n_cells)
                prof -= prof.mean()
                norm = axis_profile_bmo(prof, paxis)
                if norm > 0:
                    prof *= fill * cap / norm
                symbols[((lk, pk), idx)] = prof
    return PartialParaproduct(grid, om, shift_axis, k, h0_slot, ptype, symbols)


def random_full_paraproduct(
    grid: TorusGrid,
    om: GridShift,
    pattern: tuple[int, int] = (3, 3),
    rng: np.random.Generator | None = None,
    fill: float = 1.0,
) -> FullParaproduct:
    """Coefficients normalised so the oscillation lower-bound report is `fill`."""
    rng = rng or np.random.default_rng()
    o1 = axis_ops(grid.axes[0], om.shift1)
    o2 = axis_ops(grid.axes[1], om.shift2)
    lam = rng.standard_normal((o1.haar.shape[0], o2.haar.shape[0]))
    op = FullParaproduct(grid, om, pattern, lam)
    rep = op.coefficient_report()
    if rep.family_value > 0:
        op = FullParaproduct(grid, om, pattern, lam * (fill / rep.family_value))
    return op


# ---------------------------------------------------------------------------
# sparse domination for one-parameter paraproducts
# ---------------------------------------------------------------------------

def sparse_dominate_paraproduct(
    b: np.ndarray,
    g1: np.ndarray,
    g2: np.ndarray,
    g3: np.ndarray,
    axis: Axis,
    shift: AxisShift | None = None,
    ptype: int = 3,
) -> dict:
    """Stopping-time sparse family dominating the paraproduct form.

    Children stop when the sum of the three averages more than doubles, which
    forces every selected cube to own at least half of its measure.  Returns
    the family, the form value, the sparse sum (scaled by the symbol's BMO
    norm) and their ratio.
    """
    shift = shift if shift is not None else AxisShift.zero(axis)
    ops = axis_ops(axis, shift)
    lhs = abs(one_param_paraproduct_form(b, g1, g2, g3, ops, ptype))
    a1, a2, a3 = (np.abs(np.asarray(g)) for g in (g1, g2, g3))

    def avg(vec, cube):
        return float(vec[cube.cells()].mean())

    def budget(cube):
        return avg(a1, cube) + avg(a2, cube) + avg(a3, cube)

    top = DyadicCube(axis, 0, (0,), shift)
    family = []
    stack = [top]
    while stack:
        q = stack.pop()
        family.append(q)
        base = budget(q)
        # maximal descendants whose budget more than doubles
        inner = list(q.children()) if q.level < axis.levels else []
        while inner:
            c = inner.pop()
            if base > 0 and budget(c) > 2.0 * base:
                stack.append(c)
            elif c.level < axis.levels:
                inner.extend(c.children())
    bnorm = axis_profile_bmo(b, axis)
    rhs = bnorm * sum(avg(a1, q) * avg(a2, q) * avg(a3, q) * q.measure for q in family)
    ratio = lhs / rhs if rhs > 0 else (math.inf if lhs > 0 else 0.0)
    return {"family": family, "lhs": lhs, "rhs": rhs, "ratio": ratio}


# ---------------------------------------------------------------------------
# absolute-form check and freeness probe
# ---------------------------------------------------------------------------

def dmo_absolute_form_check(op, f1, f2, f3, exponents: tuple[float, float, float]) -> float:
    """Absolutely-summed form divided by the product of the dual norms."""
    from .measures import lp_norm

    p, q, r = exponents
    if min(p, q) <= 1 or r <= 1 / 2:
        raise ValueError("exponents out of range")
    rprime = r / (r - 1.0) if r != 1.0 else math.inf
    den = lp_norm(f1, p) * lp_norm(f2, q) * lp_norm(f3, rprime)
    return op.absolute_form(f1, f2, f3) / den if den > 0 else 0.0


def paraproduct_freeness_probe(
    op_or_density,
    grid: TorusGrid | None = None,
    shift: GridShift | None = None,
    partial: bool = True,
    over_all_shifts: bool = False,
) -> dict:
    """Pairings of every dual of the form against constants and a Haar pair.

    full[(a, b)] is the sup over rectangles of the trilinear form with a Haar
    function in slot a on the first axis and slot b on the second, constants
    in the remaining slots (all nine duals).  With partial=True the one-axis
    residual is probed too: the Haar sits on one axis only, the constants on
    that axis, and the max-abs of the fully reduced kernel in the other three
    arguments is reported; the operator is free of partial paraproducts when
    these vanish.
    """
    if hasattr(op_or_density, "kernel_density"):
        dens = op_or_density.kernel_density()
        grid = op_or_density.grid
        shift = op_or_density.shift
    else:
        dens = np.asarray(op_or_density)
        if grid is None:
            raise ValueError("grid required for a raw kernel density")
        shift = shift if shift is not None else GridShift.zero(grid)
    n1, n2 = grid.shape
    vol1, vol2 = grid.axes[0].cell_volume, grid.axes[1].cell_volume
    R = dens.reshape(n1, n2, n1, n2, n1, n2)  # (x1,x2,y1,y2,z1,z2)
    slot_axes = {1: (2, 3), 2: (4, 5), 3: (0, 1)}
    if over_all_shifts:
        shifts1 = list(enumerate_axis_shifts(grid.axes[0]))
        shifts2 = list(enumerate_axis_shifts(grid.axes[1]))
    else:
        shifts1, shifts2 = [shift.shift1], [shift.shift2]
    haars1 = np.vstack([axis_ops(grid.axes[0], s).haar for s in shifts1])
    haars2 = np.vstack([axis_ops(grid.axes[1], s).haar for s in shifts2])
    full = {}
    worst_full = 0.0
    for a in (1, 2, 3):
        for b in (1, 2, 3):
            keep = (slot_axes[a][0], slot_axes[b][1])
            summed = R.sum(axis=tuple(sorted(set(range(6)) - set(keep)))) * vol1**2 * vol2**2
            if keep[0] > keep[1]:
                summed = summed.T
            table = (haars1 * vol1) @ summed @ (haars2 * vol2).T
            full[(a, b)] = float(np.abs(table).max())
            worst_full = max(worst_full, full[(a, b)])
    out = {"full": full, "max_full": worst_full}
    if partial:
        worst = 0.0
        for axis_idx in (0, 1):
            haars = haars1 if axis_idx == 0 else haars2
            vol = vol1 if axis_idx == 0 else vol2
            for a in (1, 2, 3):
                keep_axis = slot_axes[a][axis_idx]
                drop = [slot_axes[s][axis_idx] for s in (1, 2, 3) if s != a]
                summed = R.sum(axis=tuple(sorted(drop))) * vol**2
                kept_pos = keep_axis - sum(1 for d in drop if d < keep_axis)
                reduced = np.tensordot(haars * vol, summed, axes=([1], [kept_pos]))
                worst = max(worst, float(np.abs(reduced).max()))
        out["max_partial"] = worst
    return out
