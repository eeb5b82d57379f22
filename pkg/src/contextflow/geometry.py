"""Spatial neighborhoods and the transition plausibility prior.

A cell's microenvironment is the set of cells in the same slice within
radius ``r`` of it (itself included). Two cells from consecutive slices are
compared through their microenvironments: the squared distance between the
neighborhood-mean expression profiles (spatial smoothness) and between the
neighborhood-mean ligand-receptor activity profiles. The plausibility matrix
is a convex blend of the two; larger entries mean a less plausible transition.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from ._util import pairwise_sqdist

# Below this size an all-pairs scan beats building the grid.
_EXHAUSTIVE_MAX_N = 256


@dataclass(frozen=True, eq=False)
class SpatialSlice:
    """One observed time point."""

    time: float
    expr: np.ndarray
    coords: np.ndarray
    lr_features: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        expr = np.asarray(self.expr, dtype=float)
        coords = np.asarray(self.coords, dtype=float)
        if expr.ndim != 2:
            raise ValueError("expr must be an n x d matrix")
        n = expr.shape[0]
        if n < 1:
            raise ValueError("a slice needs at least one cell")
        if coords.shape != (n, 2):
            raise ValueError(f"coords must have shape ({n}, 2), got {coords.shape}")
        if not 0.0 <= float(self.time) <= 1.0:
            raise ValueError(f"time must lie in [0, 1], got {self.time}")
        _check_finite("expr", expr)
        _check_finite("coords", coords)
        object.__setattr__(self, "time", float(self.time))
        object.__setattr__(self, "expr", expr)
        object.__setattr__(self, "coords", coords)
        if self.lr_features is not None:
            lr = np.asarray(self.lr_features, dtype=float)
            if lr.ndim != 2 or lr.shape[0] != n:
                raise ValueError(f"lr_features must have {n} rows")
            _check_finite("lr_features", lr)
            object.__setattr__(self, "lr_features", lr)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=object)
            if labels.shape != (n,):
                raise ValueError(f"labels must be a length-{n} vector")
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.expr.shape[0]

    @property
    def d(self) -> int:
        return self.expr.shape[1]

    def subset(self, idx) -> "SpatialSlice":
        idx = np.asarray(idx, dtype=int)
        return SpatialSlice(
            time=self.time,
            expr=self.expr[idx],
            coords=self.coords[idx],
            lr_features=None if self.lr_features is None else self.lr_features[idx],
            labels=None if self.labels is None else self.labels[idx],
        )

    def __eq__(self, other):
        if not isinstance(other, SpatialSlice):
            return NotImplemented
        return (
            self.time == other.time
            and _arr_eq(self.expr, other.expr)
            and _arr_eq(self.coords, other.coords)
            and _arr_eq(self.lr_features, other.lr_features)
            and _arr_eq(self.labels, other.labels)
        )


def _arr_eq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and bool(np.all(a == b))


def _check_finite(name, arr):
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        row, col = bad[0]
        raise ValueError(f"{name} has a non-finite value at row {row}, column {col}")


@dataclass(frozen=True)
class NeighborIndex:
    radius: float
    neighbors: tuple

    @property
    def n(self) -> int:
        return len(self.neighbors)

    def averaging_operator(self) -> sparse.csr_matrix:
        """Row-stochastic sparse matrix mapping per-cell rows to neighborhood means."""
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        indptr[1:] = np.cumsum([len(nb) for nb in self.neighbors])
        indices = np.concatenate(self.neighbors) if self.n else np.zeros(0, dtype=np.int64)
        data = np.concatenate([np.full(len(nb), 1.0 / len(nb)) for nb in self.neighbors])
        return sparse.csr_matrix((data, indices, indptr), shape=(self.n, self.n))


@dataclass(frozen=True)
class PlausibilityMatrix:
    values: np.ndarray
    lam: float


def default_radius(coords) -> float:
    """5% of the bounding-box diagonal; 1.0 for a degenerate (single-point) layout."""
    coords = np.asarray(coords, dtype=float)
    diag = float(np.linalg.norm(coords.max(axis=0) - coords.min(axis=0)))
    return 0.05 * diag if diag > 0 else 1.0


def build_neighbor_index(slice_: SpatialSlice, r: float) -> NeighborIndex:
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    coords = slice_.coords
    n = coords.shape[0]
    if n == 0:
        raise ValueError("cannot index an empty slice")
    r2 = float(r) * float(r)
    if n < _EXHAUSTIVE_MAX_N:
        d2 = pairwise_sqdist(coords, coords)
        nbrs = tuple(np.flatnonzero(d2[k] <= r2) for k in range(n))
        return NeighborIndex(float(r), nbrs)

    keys = np.floor(coords / r).astype(np.int64)
    buckets: dict = {}
    for i, key in enumerate(map(tuple, keys)):
        buckets.setdefault(key, []).append(i)
    buckets = {k: np.asarray(v, dtype=np.int64) for k, v in buckets.items()}

    nbrs = [None] * n
    offsets = [(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)]
    for (bx, by), members in buckets.items():
        cand = [buckets[(bx + dx, by + dy)] for dx, dy in offsets if (bx + dx, by + dy) in buckets]
        cand = np.sort(np.concatenate(cand))
        d2 = pairwise_sqdist(coords[members], coords[cand])
        for row, k in enumerate(members):
            nbrs[k] = cand[d2[row] <= r2]
    return NeighborIndex(float(r), tuple(nbrs))


def _check_index(slice_: SpatialSlice, index: NeighborIndex):
    if index.n != slice_.n:
        raise ValueError(f"neighbor index covers {index.n} cells but the slice has {slice_.n}")


def neighborhood_mean_expression(slice_: SpatialSlice, index: NeighborIndex, k: int) -> np.ndarray:
    _check_index(slice_, index)
    if not 0 <= k < slice_.n:
        raise IndexError(f"cell index {k} out of range for {slice_.n} cells")
    return slice_.expr[index.neighbors[k]].mean(axis=0)


def neighborhood_means(values, index: NeighborIndex) -> np.ndarray:
    """Neighborhood mean of every row of ``values`` (n x f)."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != index.n:
        raise ValueError(f"neighbor index covers {index.n} cells but values have {values.shape[0]} rows")
    return np.asarray(index.averaging_operator() @ values)


def neighborhood_profiles(slice_: SpatialSlice, r: float):
    """(expression means, LR means or None) over radius-``r`` neighborhoods."""
    index = build_neighbor_index(slice_, r)
    op = index.averaging_operator()
    expr_means = np.asarray(op @ slice_.expr)
    lr_means = None if slice_.lr_features is None else np.asarray(op @ slice_.lr_features)
    return expr_means, lr_means


def spatial_smoothness(slice_a: SpatialSlice, slice_b: SpatialSlice, r: float) -> np.ndarray:
    if slice_a.d != slice_b.d:
        raise ValueError(f"feature dimension mismatch: {slice_a.d} vs {slice_b.d}")
    ma, _ = neighborhood_profiles(slice_a, r)
    mb, _ = neighborhood_profiles(slice_b, r)
    return pairwise_sqdist(ma, mb)


def lr_dissimilarity(slice_a: SpatialSlice, slice_b: SpatialSlice, r: float) -> np.ndarray:
    if slice_a.lr_features is None or slice_b.lr_features is None:
        raise ValueError("both slices need lr_features")
    if slice_a.lr_features.shape[1] != slice_b.lr_features.shape[1]:
        raise ValueError("ligand-receptor feature counts differ")
    _, la = neighborhood_profiles(slice_a, r)
    _, lb = neighborhood_profiles(slice_b, r)
    return pairwise_sqdist(la, lb)


def local_lr_score(
    slice_: SpatialSlice,
    ligand_cols: Sequence[int],
    receptor_cols: Sequence[int],
    r: float,
) -> np.ndarray:
    """Per-cell ligand-receptor co-expression within the cell's neighborhood.

    For pair ``m`` and cell ``k`` the score is the cosine similarity between
    the ligand gene's values and the receptor gene's values across the cells
    of ``N_r(k)``. A zero-norm vector scores 0.
    """
    lig = np.asarray(ligand_cols, dtype=int)
    rec = np.asarray(receptor_cols, dtype=int)
    if lig.size == 0 or lig.shape != rec.shape:
        raise ValueError("need a nonempty list of ligand/receptor column pairs of equal length")
    for cols in (lig, rec):
        if cols.min() < 0 or cols.max() >= slice_.d:
            raise IndexError(f"column index out of range for {slice_.d} features")
    index = build_neighbor_index(slice_, r)
    out = np.zeros((slice_.n, lig.size))
    for k, nb in enumerate(index.neighbors):
        L = slice_.expr[np.ix_(nb, lig)]
        R = slice_.expr[np.ix_(nb, rec)]
        denom = np.linalg.norm(L, axis=0) * np.linalg.norm(R, axis=0)
        dots = np.einsum("ij,ij->j", L, R)
        ok = denom > 0
        out[k, ok] = dots[ok] / denom[ok]
    return out


def build_tpm(ss, lr, lam: float) -> PlausibilityMatrix:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    ss = np.asarray(ss, dtype=float)
    if lr is None:
        if lam != 1.0:
            raise ValueError("ligand-receptor dissimilarity is required when lambda < 1")
        values = ss.copy()
    else:
        lr = np.asarray(lr, dtype=float)
        if lr.shape != ss.shape:
            raise ValueError(f"shape mismatch: SS {ss.shape} vs LR {lr.shape}")
        if lam == 1.0:
            values = ss.copy()
        elif lam == 0.0:
            values = lr.copy()
        else:
            values = lam * ss + (1.0 - lam) * lr
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise ValueError("plausibility matrix must be finite and nonnegative")
    return PlausibilityMatrix(values, float(lam))
