"""Spline and indicator bases with quadratic penalties.

Building blocks for the model design matrix: B-spline bases over time,
difference penalties, one-hot group indicators, and the row-wise tensor
product that combines a group indicator with a spline basis into a
group-specific smooth curve term scaled by a covariate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import BSpline

__all__ = [
    "KnotVector",
    "PenaltyMatrix",
    "TermBasis",
    "bspline_basis",
    "difference_penalty",
    "indicator_basis",
    "tensor_product_rows",
    "smooth_term",
    "fre_term",
]


@dataclass(frozen=True)
class KnotVector:
    """Interior knots plus boundary knots for a B-spline basis of given degree.

    The full knot sequence repeats each boundary knot degree+1 times, so the
    basis has dimension ``len(interior) + degree + 1`` and forms a partition
    of unity on [a, b].
    """

    degree: int
    interior: tuple[float, ...]
    boundary: tuple[float, float]

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        a, b = self.boundary
        if not a < b:
            raise ValueError(f"boundary knots must satisfy a < b, got {self.boundary}")
        inner = np.asarray(self.interior, dtype=float)
        if inner.size:
            if not np.all(np.diff(inner) > 0):
                raise ValueError("interior knots must be strictly increasing")
            if inner[0] <= a or inner[-1] >= b:
                raise ValueError("interior knots must lie strictly inside the boundary")
        object.__setattr__(self, "interior", tuple(float(v) for v in inner))
        object.__setattr__(self, "boundary", (float(a), float(b)))

    @property
    def dim(self) -> int:
        return len(self.interior) + self.degree + 1

    def full(self) -> np.ndarray:
        a, b = self.boundary
        return np.r_[[a] * (self.degree + 1), self.interior, [b] * (self.degree + 1)]

    @staticmethod
    def make(
        x: Sequence[float],
        n_interior: int,
        degree: int = 3,
        placement: str = "quantile",
        boundary: tuple[float, float] | None = None,
    ) -> "KnotVector":
        """Place interior knots from observed values.

        placement "quantile" uses equally spaced quantiles of the unique
        observed values; "equidistant" spaces knots evenly over the boundary
        interval.
        """
        x = np.asarray(x, dtype=float)
        if boundary is None:
            boundary = (float(x.min()), float(x.max()))
        a, b = boundary
        if n_interior < 0:
            raise ValueError("n_interior must be >= 0")
        if n_interior == 0:
            return KnotVector(degree, (), (a, b))
        if placement == "equidistant":
            inner = np.linspace(a, b, n_interior + 2)[1:-1]
        elif placement == "quantile":
            probs = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
            inner = np.quantile(np.unique(x), probs)
        else:
            raise ValueError(f"unknown knot placement {placement!r}")
        if np.any(np.diff(inner) <= 0) or inner[0] <= a or inner[-1] >= b:
            raise ValueError(
                "knot collision: too many interior knots for the observed values; "
                "reduce n_interior or use equidistant placement"
            )
        return KnotVector(degree, tuple(inner), (a, b))


@dataclass(frozen=True)
class PenaltyMatrix:
    """Symmetric positive semidefinite penalty with known rank and null space.

    ``root`` satisfies root.T @ root == matrix and is used for stacked
    identifiability checks.
    """

    matrix: np.ndarray
    rank: int
    null_dim: int
    root: np.ndarray

    def __post_init__(self):
        S = np.asarray(self.matrix, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise ValueError("penalty must be square")
        scale = np.abs(S).max()
        if scale > 0 and np.abs(S - S.T).max() > 1e-12 * scale:
            raise ValueError("penalty must be symmetric")
        if self.rank + self.null_dim != S.shape[0]:
            raise ValueError("rank + null_dim must equal the dimension")
        eigs = np.linalg.eigvalsh(S)
        top = eigs[-1] if eigs.size else 0.0
        if eigs.size and eigs[0] < -1e-10 * max(top, 1.0):
            raise ValueError("penalty has a negative eigenvalue")
        n_pos = int(np.sum(eigs > 1e-10 * max(top, 1.0)))
        if n_pos != self.rank:
            raise ValueError(f"numerical rank {n_pos} does not match declared rank {self.rank}")
        R = np.asarray(self.root, dtype=float)
        if R.shape[1] != S.shape[0]:
            raise ValueError("root has wrong number of columns")
        if np.abs(R.T @ R - S).max() > 1e-10 * max(scale, 1.0):
            raise ValueError("root.T @ root does not reproduce the penalty")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class TermBasis:
    """An evaluated design block with its quadratic penalties.

    kind is one of "linear", "factor", "smooth", "fre" (plus the ridge-type
    random-effect kinds assembled in the model layer).  center_means is set
    for centered smooths and must be reapplied when evaluating new data.
    """

    design: np.ndarray
    penalties: tuple[tuple[str, PenaltyMatrix], ...]
    kind: str
    col_labels: tuple[str, ...]
    center_means: tuple[float, ...] | None = None


def bspline_basis(x: Sequence[float], knots: KnotVector) -> np.ndarray:
    """Evaluate all B-splines of the knot vector at x (rows sum to one).

    x must lie within the closed boundary interval; the last basis function
    takes the value 1 at the right boundary.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a, b = knots.boundary
    if x.size and (x.min() < a or x.max() > b):
        raise ValueError(f"evaluation points outside [{a}, {b}]")
    M = BSpline.design_matrix(x, knots.full(), knots.degree, extrapolate=False).toarray()
    return M


def difference_penalty(dim: int, order: int) -> PenaltyMatrix:
    """D'D for the order-th difference matrix D acting on dim coefficients."""
    if not 1 <= order < dim:
        raise ValueError(f"difference order must be in [1, {dim - 1}], got {order}")
    D = np.diff(np.eye(dim), n=order, axis=0)
    return PenaltyMatrix(matrix=D.T @ D, rank=dim - order, null_dim=order, root=D)


def indicator_basis(groups: Sequence[str], levels: Sequence[str]) -> np.ndarray:
    """One-hot design over the given level order; unseen values are an error."""
    index = {lev: i for i, lev in enumerate(levels)}
    if len(index) != len(levels):
        raise ValueError("duplicate levels")
    out = np.zeros((len(groups), len(levels)))
    for r, g in enumerate(groups):
        try:
            out[r, index[g]] = 1.0
        except KeyError:
            raise ValueError(f"unknown group level {g!r}") from None
    return out


def tensor_product_rows(b1: np.ndarray, b2: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product: row r is kron(b1[r], b2[r]).

    Columns are ordered with the first basis index major and the second
    minor, matching kron ordering of the penalties.
    """
    b1 = np.asarray(b1, dtype=float)
    b2 = np.asarray(b2, dtype=float)
    if b1.shape[0] != b2.shape[0]:
        raise ValueError("bases must have the same number of rows")
    n, d1 = b1.shape
    d2 = b2.shape[1]
    return (b1[:, :, None] * b2[:, None, :]).reshape(n, d1 * d2)


def smooth_term(
    t: Sequence[float],
    knots: KnotVector,
    diff_order: int = 1,
    centered: bool = True,
) -> TermBasis:
    """Penalized spline basis over t, optionally centered.

    Centering subtracts column means and drops the first column.  The mean
    subtraction makes the block orthogonal to the intercept in the column-sum
    sense, but by partition of unity it also puts the constant coefficient
    vector in the null space of the block, so one redundant column is removed
    and the penalty is restricted to the remaining coefficients.  This lowers
    the penalty null-space dimension by one.
    """
    B = bspline_basis(t, knots)
    dim = knots.dim
    pen = difference_penalty(dim, diff_order)
    if not centered:
        labels = tuple(f"b{d}" for d in range(dim))
        return TermBasis(design=B, penalties=(("diff", pen),), kind="smooth", col_labels=labels)

    means = B.mean(axis=0)
    Bc = (B - means)[:, 1:]
    root = np.diff(np.eye(dim), n=diff_order, axis=0)[:, 1:]
    reduced = PenaltyMatrix(
        matrix=pen.matrix[1:, 1:],
        rank=dim - diff_order,
        null_dim=diff_order - 1,
        root=root,
    )
    labels = tuple(f"b{d}" for d in range(1, dim))
    return TermBasis(
        design=Bc,
        penalties=(("diff", reduced),),
        kind="smooth",
        col_labels=labels,
        center_means=tuple(means),
    )


def fre_term(
    groups: Sequence[str],
    levels: Sequence[str],
    t: Sequence[float],
    x: Sequence[float],
    knots: KnotVector,
    diff_order: int = 1,
) -> TermBasis:
    """Group-specific smooth curves in t, scaled per row by the covariate x.

    The design is the row-wise tensor product of the group indicator basis
    with the spline basis, multiplied by x.  Two penalties act on the
    G * dim coefficients: a smoothness penalty I_G (x) D'D applied to each
    group's curve, and a ridge penalty shrinking all coefficients toward
    zero.  The ridge makes the combined penalty strictly positive definite,
    which is what identifies the term next to an intercept and a baseline
    smooth; the block is therefore not centered.
    """
    ind = indicator_basis(groups, levels)
    B = bspline_basis(t, knots)
    x = np.asarray(x, dtype=float)
    if x.shape[0] != ind.shape[0]:
        raise ValueError("x has wrong length")
    design = tensor_product_rows(ind, B) * x[:, None]

    G = len(levels)
    dim = knots.dim
    diff = difference_penalty(dim, diff_order)
    smooth = PenaltyMatrix(
        matrix=np.kron(np.eye(G), diff.matrix),
        rank=G * diff.rank,
        null_dim=G * diff.null_dim,
        root=np.kron(np.eye(G), np.diff(np.eye(dim), n=diff_order, axis=0)),
    )
    shrink = PenaltyMatrix(
        matrix=np.eye(G * dim),
        rank=G * dim,
        null_dim=0,
        root=np.eye(G * dim),
    )
    labels = tuple(f"{lev}:b{d}" for lev in levels for d in range(dim))
    return TermBasis(
        design=design,
        penalties=(("smooth", smooth), ("shrink", shrink)),
        kind="fre",
        col_labels=labels,
    )
