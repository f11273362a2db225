"""Structure matrices for the latent Gaussian blocks, scaling, and PC priors.

Every block prior has the form x ~ N(0, (tau * tau0 * R)^-1) with R a fixed
sparse structure matrix, tau0 the generalized-variance scaling constant of R,
and tau the single free precision hyperparameter.  Intrinsic structures
(Besag, random walks) are rank deficient; their null space is handled either
by an explicit sum-to-zero constraint or by the generalized determinant.
Structures are stored unscaled with explicit constraints; diagonal jitter is
applied only inside factorizations that need definiteness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from gridcox.domain import SlopeUnitGraph

SCALING_DENSE_CAP = 5000

# relative eigenvalue cutoff separating the null space from the bulk
_EIG_RTOL = 1e-9


class StructureError(ValueError):
    """Raised for invalid structure requests (too large, disconnected, ...)."""


@dataclass
class SparsePrecision:
    """Symmetric PSD sparse structure matrix with linear equality constraints.

    ``constraints`` holds rows a with a.x = 0; builders attach the all-ones
    sum-to-zero row where the model demands one.  ``rank_deficiency`` is the
    null-space dimension of ``matrix`` alone, independent of constraints.
    """

    matrix: sp.csc_matrix
    rank_deficiency: int = 0
    constraints: list = field(default_factory=list)

    def __post_init__(self):
        m = self.matrix
        if m.shape[0] != m.shape[1]:
            raise StructureError("structure matrix must be square")
        if (abs(m - m.T) > 1e-12 * max(1.0, abs(m).max())).nnz:
            raise StructureError("structure matrix must be symmetric")
        for a in self.constraints:
            if not np.any(np.asarray(a) != 0):
                raise StructureError("zero constraint row")

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)


def besag_structure(graph: SlopeUnitGraph) -> SparsePrecision:
    """Intrinsic CAR structure R = D - A on the SU adjacency graph.

    Conditional law per row: mean = neighbor average, precision = degree
    times the overall precision.  Rank deficiency 1 on a connected graph;
    ships with a sum-to-zero constraint.
    """
    if not graph.is_connected():
        raise StructureError("Besag structure requires a connected graph")
    n = graph.n_su
    rows = list(range(n))
    cols = list(range(n))
    vals = [float(d) for d in graph.degrees]
    for a, b in graph.edges:
        rows += [a - 1, b - 1]
        cols += [b - 1, a - 1]
        vals += [-1.0, -1.0]
    R = sp.csc_matrix((vals, (rows, cols)), shape=(n, n))
    return SparsePrecision(R, rank_deficiency=1, constraints=[np.ones(n)])


def rw1_structure(n: int, cyclic: bool = False) -> SparsePrecision:
    """First-order random walk structure over n ordered classes.

    Non-cyclic: tridiagonal, diagonal (1, 2, ..., 2, 1).  Cyclic: circulant,
    diagonal 2 with circular -1 neighbors.  Both have rank deficiency 1
    (constants) and carry a sum-to-zero constraint.
    """
    if n < 3:
        raise StructureError("random walk needs at least 3 classes")
    main = np.full(n, 2.0)
    off = np.full(n - 1, -1.0)
    if cyclic:
        R = sp.diags([off, main, off], [-1, 0, 1], format="lil")
        R[0, n - 1] = -1.0
        R[n - 1, 0] = -1.0
        R = R.tocsc()
    else:
        main[0] = main[-1] = 1.0
        R = sp.diags([off, main, off], [-1, 0, 1], format="csc")
    return SparsePrecision(R, rank_deficiency=1, constraints=[np.ones(n)])


def iid_structure(n: int, sum_to_zero: bool = False) -> SparsePrecision:
    """Identity structure, full rank; optional sum-to-zero constraint."""
    if n < 1:
        raise StructureError("iid block needs at least 1 element")
    cons = [np.ones(n)] if sum_to_zero else []
    return SparsePrecision(sp.identity(n, format="csc"), 0, cons)


def _as_matrix(structure) -> sp.csc_matrix:
    return structure.matrix if isinstance(structure, SparsePrecision) else sp.csc_matrix(structure)


def _positive_eigs(R: sp.csc_matrix) -> np.ndarray:
    """Eigenvalues of dense R above the null-space cutoff, ascending."""
    n = R.shape[0]
    if n > SCALING_DENSE_CAP:
        raise StructureError(
            f"structure has {n} nodes, dense eigendecomposition capped at "
            f"{SCALING_DENSE_CAP}")
    w = np.linalg.eigvalsh(R.toarray())
    cutoff = max(w[-1], 1.0) * _EIG_RTOL
    return w[w > cutoff]


def generalized_logdet(structure) -> float:
    """Sum of log eigenvalues over the non-null part of the structure.

    Equals log det(U^T R U) for U an orthonormal basis of the orthogonal
    complement of the null space; plain log det for full-rank R.
    """
    return float(np.sum(np.log(_positive_eigs(_as_matrix(structure)))))


def scaling_constant(structure) -> float:
    """Generalized-variance scaling constant tau0 of a structure matrix.

    Geometric mean of the diagonal of the constrained generalized inverse
    U (U^T R U)^-1 U^T, with U spanning the orthogonal complement of the
    null space.  Scaling R by tau0 gives generalized marginal variance
    1/tau under precision tau*tau0*R, making PC priors comparable across
    structures.  Identity structure: tau0 = 1 exactly.
    """
    R = _as_matrix(structure)
    n = R.shape[0]
    if n > SCALING_DENSE_CAP:
        raise StructureError(
            f"structure has {n} nodes, dense eigendecomposition capped at "
            f"{SCALING_DENSE_CAP}")
    w, v = np.linalg.eigh(R.toarray())
    cutoff = max(w[-1], 1.0) * _EIG_RTOL
    keep = w > cutoff
    if isinstance(structure, SparsePrecision):
        declared = structure.rank_deficiency
        if int((~keep).sum()) > max(declared, 0):
            raise StructureError("structure singular beyond declared rank deficiency")
    if not np.any(keep):
        raise StructureError("structure matrix is numerically zero")
    diag = np.einsum("ij,j,ij->i", v[:, keep], 1.0 / w[keep], v[:, keep])
    if np.any(diag <= 0):
        raise StructureError("non-positive marginal variance in scaling")
    return float(np.exp(np.mean(np.log(diag))))


@dataclass(frozen=True)
class PCPrior:
    """Penalized-complexity prior on a precision tau via sigma = tau^(-1/2).

    sigma is exponential with rate chosen so that P(sigma > u) = alpha.
    """

    u: float
    alpha: float

    def __post_init__(self):
        if self.u <= 0 or not (0.0 < self.alpha < 1.0):
            raise ValueError("PC prior needs u > 0 and alpha in (0,1)")

    @property
    def rate(self) -> float:
        return -math.log(self.alpha) / self.u


def pc_prior_log_density(tau, prior: PCPrior):
    """Log density of the precision tau under the PC prior.

    Change of variables from the exponential law on sigma gives
    pi(tau) = (rate/2) tau^(-3/2) exp(-rate/sqrt(tau)).
    """
    lam = prior.rate
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise ValueError("precision must be positive")
    out = math.log(lam / 2.0) - 1.5 * np.log(tau) - lam / np.sqrt(tau)
    return float(out) if out.ndim == 0 else out


def write_structure_coo(structure, fh) -> None:
    """Dump a structure in coordinate format `row,col,value`, sorted."""
    coo = sp.coo_matrix(_as_matrix(structure))
    order = np.lexsort((coo.col, coo.row))
    fh.write("row,col,value\n")
    for k in order:
        fh.write(f"{coo.row[k]},{coo.col[k]},{coo.data[k]:.17g}\n")
