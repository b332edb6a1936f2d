"""Weighted Hilbert space primitives.

States are plain numpy vectors; the geometry of each space lives entirely in
its Gram matrix. Every inner product, norm, adjoint and singular value in the
package is taken with respect to the Gram weights, never the raw Euclidean
ones, so discrete plants inherit the energy products of their continuous
models.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

__all__ = [
    "SpaceSpec",
    "LinMap",
    "NormEstimate",
    "inner",
    "adjoint",
    "operator_norm",
    "smallest_singular_value",
    "weighted_singular_values",
]

_SYM_TOL = 1e-12


class SpaceSpec:
    """Finite section of a real Hilbert space.

    Parameters
    ----------
    dim : int
        Number of coordinates.
    gram : (dim, dim) array
        Symmetric positive definite Gram matrix; ``(x, y) = x @ gram @ y``.
    label : str
        Conventional role tag ("H" state, "U" input, "Z" output), free form.
    """

    def __init__(self, dim: int, gram: np.ndarray, label: str = ""):
        gram = np.asarray(gram, dtype=float)
        if gram.shape != (int(dim), int(dim)):
            raise ValueError(f"gram must be ({dim}, {dim}), got {gram.shape}")
        scale = max(np.abs(gram).max(), 1.0)
        if np.abs(gram - gram.T).max() > _SYM_TOL * scale:
            raise ValueError("gram matrix must be symmetric")
        gram = 0.5 * (gram + gram.T)
        try:
            chol_lower = np.linalg.cholesky(gram)
        except np.linalg.LinAlgError:
            raise ValueError("gram matrix must be positive definite") from None
        self.dim = int(dim)
        self.gram = gram
        self.label = label
        self._chol_lower = chol_lower
        self._cho = sla.cho_factor(gram, lower=True)

    def inner(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.asarray(x) @ self.gram @ np.asarray(y))

    def norm(self, x: np.ndarray) -> float:
        return float(np.sqrt(max(self.inner(x, x), 0.0)))

    def apply_gram(self, x: np.ndarray) -> np.ndarray:
        return self.gram @ x

    def solve_gram(self, x: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self._cho, x)

    @property
    def chol_lower(self) -> np.ndarray:
        """Lower Cholesky factor L with gram = L @ L.T."""
        return self._chol_lower

    def sample_sphere(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform direction on the unit sphere of this space."""
        g = rng.standard_normal(self.dim)
        # map Euclidean directions through L^{-T} so the weighted norm is isotropic
        v = sla.solve_triangular(self._chol_lower, g, lower=True, trans=1)
        return v / self.norm(v)

    def sample_ball(self, rng: np.random.Generator, radius: float) -> np.ndarray:
        r = radius * rng.uniform() ** (1.0 / self.dim)
        return r * self.sample_sphere(rng)

    def __repr__(self) -> str:
        return f"SpaceSpec(dim={self.dim}, label={self.label!r})"


class LinMap:
    """Linear map between two spaces.

    Either a dense ``matrix`` or a ``matvec`` callable must be given. For
    matrix-free maps, ``rmatvec`` (plain transpose application) is required
    before adjoints can be formed. Adjoints are always Gram-weighted:
    ``L* = G_dom^{-1} L^T G_cod``.
    """

    def __init__(
        self,
        domain: SpaceSpec,
        codomain: SpaceSpec,
        matrix: Optional[np.ndarray] = None,
        matvec: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        rmatvec: Optional[Callable[[np.ndarray], np.ndarray]] = None,
        label: str = "",
    ):
        if matrix is None and matvec is None:
            raise ValueError("LinMap needs a matrix or a matvec")
        if matrix is not None:
            matrix = np.asarray(matrix, dtype=float)
            if matrix.shape != (codomain.dim, domain.dim):
                raise ValueError(
                    f"matrix shape {matrix.shape} does not match "
                    f"({codomain.dim}, {domain.dim})"
                )
        self.domain = domain
        self.codomain = codomain
        self.label = label
        self._matrix = matrix
        self._matvec = matvec
        self._rmatvec = rmatvec

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self._matrix is not None:
            return self._matrix @ x
        return self._matvec(x)

    def rmatvec(self, y: np.ndarray) -> np.ndarray:
        """Plain transpose application (no Gram weights)."""
        if self._matrix is not None:
            return self._matrix.T @ y
        if self._rmatvec is None:
            raise ValueError("matrix-free LinMap has no rmatvec; cannot transpose")
        return self._rmatvec(y)

    def adjoint_apply(self, y: np.ndarray) -> np.ndarray:
        """Apply the Gram-weighted adjoint L* to a codomain vector."""
        return self.domain.solve_gram(self.rmatvec(self.codomain.apply_gram(y)))

    def as_matrix(self) -> np.ndarray:
        if self._matrix is None:
            cols = [self._matvec(col) for col in np.eye(self.domain.dim)]
            self._matrix = np.column_stack(cols)
        return self._matrix

    @property
    def shape(self):
        return (self.codomain.dim, self.domain.dim)

    def __repr__(self) -> str:
        return f"LinMap({self.domain.dim} -> {self.codomain.dim}, label={self.label!r})"


def inner(space: SpaceSpec, x: np.ndarray, y: np.ndarray) -> float:
    """Gram-weighted inner product on ``space``."""
    return space.inner(x, y)


def adjoint(m: LinMap) -> LinMap:
    """Gram-weighted adjoint as a LinMap from codomain to domain."""
    if m._matrix is not None:
        mat = m.domain.solve_gram(m.as_matrix().T @ m.codomain.gram)
        return LinMap(m.codomain, m.domain, matrix=mat, label=m.label + "*")
    return LinMap(
        m.codomain,
        m.domain,
        matvec=m.adjoint_apply,
        rmatvec=lambda x: m.codomain.apply_gram(m(m.domain.solve_gram(x))),
        label=m.label + "*",
    )


@dataclass
class NormEstimate:
    """Power-iteration estimate of an operator norm.

    ``residual`` is the final Rayleigh-quotient residual
    ``||L*L x - value^2 x||_dom`` for the unit iterate x; small residuals mean
    the iteration has locked onto the top singular pair.
    """

    value: float
    residual: float
    iterations: int

    def __float__(self) -> float:
        return self.value


def operator_norm(m: LinMap, iters: int = 100, seed: int = 0) -> NormEstimate:
    """Gram-weighted operator norm of ``m`` by power iteration on L*L.

    Deterministic: the starting vector comes from a fixed-seed generator.
    """
    rng = np.random.default_rng(seed)
    x = m.domain.sample_sphere(rng)
    rq = 0.0
    it = 0
    for it in range(1, iters + 1):
        y = m(x)
        z = m.adjoint_apply(y)  # L*L x
        rq = m.codomain.inner(y, y)  # ||Lx||^2 for unit x
        nz = m.domain.norm(z)
        if nz == 0.0:
            return NormEstimate(0.0, 0.0, it)
        x = z / nz
    y = m(x)
    z = m.adjoint_apply(y)
    rq = m.codomain.inner(y, y)
    res = m.domain.norm(z - rq * x)
    return NormEstimate(float(np.sqrt(rq)), float(res), it)


def weighted_singular_values(m: LinMap) -> np.ndarray:
    """All Gram-weighted singular values, descending (dense computation).

    Computed from the weighted representation ``L_cod^T M L_dom^{-T}`` whose
    Euclidean singular values are the weighted ones.
    """
    mat = m.as_matrix()
    # mat @ L_dom^{-T} = (L_dom^{-1} mat^T)^T
    right = sla.solve_triangular(m.domain.chol_lower, mat.T, lower=True)
    w = m.codomain.chol_lower.T @ right.T
    return np.linalg.svd(w, compute_uv=False)


def smallest_singular_value(m: LinMap) -> float:
    """Smallest Gram-weighted singular value (dense computation)."""
    svals = weighted_singular_values(m)
    return float(svals[-1]) if svals.size else 0.0
