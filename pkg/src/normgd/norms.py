"""Norm geometries: primal norm, dual norm, dual vector, LMO, and sphere projection.

Six geometries share one interface:

* ``euclidean``      -- l2 on the flat vector (self-dual).
* ``preconditioned`` -- Mahalanobis norm sqrt(v' P v) for SPD P (dense or diagonal).
* ``linf``           -- max |v_i|; dual is l1; dual vector is sign(g).
* ``block_l12``      -- sum over layout blocks of block l2 norms; dual is the max
                        block norm, attained by concentrating mass on one block.
* ``spectral_max``   -- max over matrix blocks of spectral norms; dual is the sum
                        of nuclear norms, attained blockwise at polar factors.
* ``spectral_sum``   -- l2 combination sqrt(sum_l ||V_l||_2^2) of block spectral
                        norms; dual is the l2 combination of nuclear norms.

``dual_vector(g)`` returns the unit-norm maximizer of <g, y>; ``lmo(g)`` its
negation (the minimizer over the unit ball).  Tie rules are fixed so runs are
reproducible: linf puts 0 on zero coordinates, block_l12 concentrates on the
lowest-index tied block.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular

from .matrixfns import PolarMethod, nuclear_norm, polar_factor
from .params import BlockLayout, LayoutError, ParamVector, ZeroVectorError

TIE_RTOL = 1e-12


class NormSpec:
    """Base class; subclasses implement one geometry each."""

    variant = "abstract"

    def __init__(self, layout: BlockLayout):
        self.layout = layout

    def _check(self, v: ParamVector):
        if v.layout is not self.layout and v.layout != self.layout:
            raise LayoutError(f"vector layout does not match {self.variant} norm layout")

    def norm_value(self, v: ParamVector) -> float:
        raise NotImplementedError

    def dual_norm(self, g: ParamVector) -> float:
        raise NotImplementedError

    def dual_vector(self, g: ParamVector) -> ParamVector:
        raise NotImplementedError

    def lmo(self, g: ParamVector) -> ParamVector:
        """Minimizer of <g, .> over the unit ball: -dual_vector, or 0 at g=0."""
        self._check(g)
        if not g.data.any():
            return ParamVector.zeros(g.layout)
        d = self.dual_vector(g)
        return ParamVector(g.layout, -d.data)

    def project_sphere(self, v: ParamVector) -> ParamVector:
        raise NotImplementedError

    def _radial(self, v: ParamVector) -> ParamVector:
        n = self.norm_value(v)
        if n == 0.0:
            raise ZeroVectorError("cannot project the zero vector onto the unit sphere")
        return ParamVector(v.layout, v.data / n)

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.layout.total_dim})"


class EuclideanNorm(NormSpec):
    variant = "euclidean"

    def norm_value(self, v):
        self._check(v)
        return float(np.linalg.norm(v.data))

    def dual_norm(self, g):
        self._check(g)
        return float(np.linalg.norm(g.data))

    def dual_vector(self, g):
        self._check(g)
        n = float(np.linalg.norm(g.data))
        if n == 0.0:
            raise ZeroVectorError("dual vector undefined at zero gradient")
        return ParamVector(g.layout, g.data / n)

    def project_sphere(self, v):
        self._check(v)
        return self._radial(v)


class PreconditionedNorm(NormSpec):
    """sqrt(v' P v) for SPD P.  Dense P is Cholesky-factored once; diagonal P
    (the RMSprop-style case) uses elementwise arithmetic."""

    variant = "preconditioned"

    def __init__(self, layout, diag=None, dense=None):
        super().__init__(layout)
        if (diag is None) == (dense is None):
            raise ValueError("provide exactly one of diag= or dense=")
        if diag is not None:
            d = np.asarray(diag, dtype=np.float64).reshape(-1)
            if d.shape[0] != layout.total_dim:
                raise LayoutError("diagonal preconditioner length mismatch")
            if not np.all(d > 0):
                raise ValueError("diagonal preconditioner must be strictly positive")
            self.diag = d
            self.dense = None
            self._chol = None
        else:
            P = np.asarray(dense, dtype=np.float64)
            if P.shape != (layout.total_dim, layout.total_dim):
                raise LayoutError("dense preconditioner shape mismatch")
            asym = float(np.abs(P - P.T).max())
            if asym > 1e-12:
                raise ValueError(f"preconditioner not symmetric (max asymmetry {asym:.2e})")
            P = 0.5 * (P + P.T)
            if float(np.linalg.eigvalsh(P).min()) <= 0:
                raise ValueError("preconditioner must be positive definite")
            self.diag = None
            self.dense = P
            self._L = np.linalg.cholesky(P)  # P = L L'

    def apply_inverse(self, x: np.ndarray) -> np.ndarray:
        if self.diag is not None:
            return x / self.diag
        z = solve_triangular(self._L, x, lower=True)
        return solve_triangular(self._L, z, lower=True, trans="T")

    def norm_value(self, v):
        self._check(v)
        if self.diag is not None:
            return float(np.sqrt(np.dot(v.data * self.diag, v.data)))
        # v'Pv = ||L' v||^2
        return float(np.linalg.norm(self._L.T @ v.data))

    def dual_norm(self, g):
        self._check(g)
        return float(np.sqrt(np.dot(g.data, self.apply_inverse(g.data))))

    def dual_vector(self, g):
        self._check(g)
        n = self.dual_norm(g)
        if n == 0.0:
            raise ZeroVectorError("dual vector undefined at zero gradient")
        return ParamVector(g.layout, self.apply_inverse(g.data) / n)

    def project_sphere(self, v):
        self._check(v)
        return self._radial(v)


class LinfNorm(NormSpec):
    variant = "linf"

    def norm_value(self, v):
        self._check(v)
        return float(np.abs(v.data).max())

    def dual_norm(self, g):
        self._check(g)
        return float(np.abs(g.data).sum())

    def dual_vector(self, g):
        self._check(g)
        if not g.data.any():
            raise ZeroVectorError("dual vector undefined at zero gradient")
        return ParamVector(g.layout, np.sign(g.data))

    def project_sphere(self, v):
        self._check(v)
        if not v.data.any():
            raise ZeroVectorError("cannot project the zero vector onto the unit sphere")
        return ParamVector(v.layout, np.sign(v.data))


class BlockL12Norm(NormSpec):
    """Sum over layout blocks of block l2 norms.  The partition is the layout."""

    variant = "block_l12"

    @property
    def partition(self) -> BlockLayout:
        return self.layout

    def _block_norms(self, v) -> np.ndarray:
        return np.array([float(np.linalg.norm(v.block_flat(i)))
                         for i in range(len(self.layout.blocks))])

    def norm_value(self, v):
        self._check(v)
        return float(self._block_norms(v).sum())

    def dual_norm(self, g):
        self._check(g)
        return float(self._block_norms(g).max())

    def tied_blocks(self, g) -> list[int]:
        """Indices of blocks within relative tolerance of the max block norm."""
        norms = self._block_norms(g)
        top = norms.max()
        return [i for i, n in enumerate(norms) if n >= top * (1.0 - TIE_RTOL)]

    def dual_vector(self, g):
        self._check(g)
        norms = self._block_norms(g)
        if norms.max() == 0.0:
            raise ZeroVectorError("dual vector undefined at zero gradient")
        j = self.tied_blocks(g)[0]  # lowest-index tie rule
        data = np.zeros(g.layout.total_dim)
        sl = self.layout.slice_of(j)
        data[sl] = g.data[sl] / norms[j]
        return ParamVector(g.layout, data)

    def project_sphere(self, v):
        self._check(v)
        return self._radial(v)


def _matrix_shapes(layout: BlockLayout) -> list[tuple[int, int]]:
    """Blocks as matrices: 2-D blocks stay; vectors become n x 1 columns."""
    shapes = []
    for name, shape in layout.blocks:
        if len(shape) == 1:
            shapes.append((shape[0], 1))
        elif len(shape) == 2:
            shapes.append((shape[0], shape[1]))
        else:
            raise LayoutError(f"spectral norms need matrix or vector blocks; {name!r} has shape {shape}")
    return shapes


class _SpectralBase(NormSpec):
    def __init__(self, layout, polar_method: PolarMethod | None = None):
        super().__init__(layout)
        self.shapes = _matrix_shapes(layout)
        self.polar_method = polar_method or PolarMethod.exact()

    def _block_mats(self, v):
        for i, (r, c) in enumerate(self.shapes):
            yield i, v.block_flat(i).reshape(r, c)

    def _sigma(self, v) -> list[np.ndarray]:
        return [np.linalg.svd(M, compute_uv=False) for _, M in self._block_mats(v)]


class SpectralMaxNorm(_SpectralBase):
    """Max over blocks of spectral norms; dual vector stacks blockwise polar factors."""

    variant = "spectral_max"

    def norm_value(self, v):
        self._check(v)
        return float(max(s.max(initial=0.0) for s in self._sigma(v)))

    def dual_norm(self, g):
        self._check(g)
        return float(sum(s.sum() for s in self._sigma(g)))

    def dual_vector(self, g):
        self._check(g)
        if not g.data.any():
            raise ZeroVectorError("dual vector undefined at zero gradient")
        data = np.zeros(g.layout.total_dim)
        for i, M in self._block_mats(g):
            if np.linalg.norm(M) == 0.0:
                continue  # zero blocks stay zero (minimal-support rule)
            data[self.layout.slice_of(i)] = polar_factor(M, self.polar_method).reshape(-1)
        return ParamVector(g.layout, data)

    def project_sphere(self, v):
        self._check(v)
        if not v.data.any():
            raise ZeroVectorError("cannot project the zero vector onto the unit sphere")
        # blockwise polar factor: the matrix analogue of sign(.)
        data = np.zeros(v.layout.total_dim)
        for i, M in self._block_mats(v):
            if np.linalg.norm(M) == 0.0:
                continue
            data[self.layout.slice_of(i)] = polar_factor(M, self.polar_method).reshape(-1)
        return ParamVector(v.layout, data)


class SpectralSumNorm(_SpectralBase):
    """l2 combination of block spectral norms, sqrt(sum_l ||V_l||_2^2)."""

    variant = "spectral_sum"

    def norm_value(self, v):
        self._check(v)
        return float(np.sqrt(sum(s.max(initial=0.0) ** 2 for s in self._sigma(v))))

    def dual_norm(self, g):
        self._check(g)
        return float(np.sqrt(sum(s.sum() ** 2 for s in self._sigma(g))))

    def dual_vector(self, g):
        self._check(g)
        total = self.dual_norm(g)
        if total == 0.0:
            raise ZeroVectorError("dual vector undefined at zero gradient")
        data = np.zeros(g.layout.total_dim)
        for i, M in self._block_mats(g):
            nuc = nuclear_norm(M) if np.linalg.norm(M) != 0.0 else 0.0
            if nuc == 0.0:
                continue
            data[self.layout.slice_of(i)] = (nuc / total) * polar_factor(M, self.polar_method).reshape(-1)
        return ParamVector(g.layout, data)

    def project_sphere(self, v):
        self._check(v)
        return self._radial(v)


VARIANTS = {
    "euclidean": EuclideanNorm,
    "preconditioned": PreconditionedNorm,
    "linf": LinfNorm,
    "block_l12": BlockL12Norm,
    "spectral_max": SpectralMaxNorm,
    "spectral_sum": SpectralSumNorm,
}


def make_norm(variant: str, layout: BlockLayout, **kwargs) -> NormSpec:
    """Construct a norm geometry by name (used by the experiment config)."""
    try:
        cls = VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown norm variant {variant!r}; choose from {sorted(VARIANTS)}") from None
    return cls(layout, **kwargs)
