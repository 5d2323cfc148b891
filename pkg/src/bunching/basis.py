"""Polynomial bases, Gram matrices, and the extrapolation norm.

The estimation region of a bunching design is a union of intervals
``S = [lo, k0] ∪ (kbar1, hi]`` — the support with the affected window cut
out.  Density and moment fits use the monomial basis anchored at the lower
window edge,

    z(y) = (1, y - k0, (y - k0)^2, ..., (y - k0)^{k-1}),

because the estimand consumes the coefficient on a specific monomial.  Its
Gram matrix over an interval is a Hilbert-type matrix with exactly known
entries (and, on [0,1] with anchor 0, exactly the Hilbert matrix, whose
inverse diagonal has a classical closed form).

The *extrapolation norm* 1/chi_k quantifies how much a degree-(k-1)
polynomial pinned down on S can still wander inside the excluded window:

    chi_k = lambda_min( H^{-1/2} Q H^{-1/2} ),
    H = ∫_support z z' dy,   Q = ∫_S z z' dy.

chi_k is invariant to invertible linear changes of the basis, so it is
computed here in an orthonormal (shifted-Legendre) basis where H is the
identity and the eigenproblem is perfectly conditioned even at k = 12,
instead of whitening the raw monomial Gram.  All integrals of polynomial
products use Gauss-Legendre rules of sufficient order, which are exact for
polynomials (no approximate quadrature anywhere in this module).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy.linalg import eigh, hankel

from .errors import DomainError, NumericalError

__all__ = [
    "BasisSpec",
    "monomial_basis",
    "gram_matrices",
    "hilbert_inverse_diag",
    "whiten_gram",
    "extrapolation_norm",
]


@dataclass(frozen=True)
class BasisSpec:
    """Basis dimension, expansion anchor, support, and estimation region.

    ``segments`` lists the disjoint closed intervals making up S, sorted
    left to right.  Zero-length pieces are dropped at construction.
    """

    k: int
    anchor: float
    lo: float
    hi: float
    segments: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if self.k < 1:
            raise DomainError(f"basis dimension must be >= 1, got {self.k}")
        if not self.lo < self.hi:
            raise DomainError(f"empty support [{self.lo}, {self.hi}]")
        if not self.lo <= self.anchor <= self.hi:
            raise DomainError(f"anchor {self.anchor} outside support [{self.lo}, {self.hi}]")
        cleaned = []
        prev_end = -math.inf
        for a, b in self.segments:
            if b < a:
                raise DomainError(f"segment ({a}, {b}) reversed")
            if b == a:
                continue
            if a < self.lo - 1e-12 or b > self.hi + 1e-12:
                raise DomainError(f"segment ({a}, {b}) outside support [{self.lo}, {self.hi}]")
            if a < prev_end:
                raise DomainError("estimation segments must be disjoint and sorted")
            cleaned.append((float(a), float(b)))
            prev_end = b
        if not cleaned:
            raise DomainError("estimation region has zero total length")
        object.__setattr__(self, "segments", tuple(cleaned))

    @classmethod
    def from_window(cls, k: int, lo: float, k0: float, kbar1: float, hi: float,
                    anchor: float | None = None) -> "BasisSpec":
        """Two-piece region [lo, k0] ∪ (kbar1, hi]; kbar1 = k0 means no exclusion."""
        if not lo < k0 <= kbar1 < hi:
            raise DomainError(
                f"require lo < k0 <= kbar1 < hi, got ({lo}, {k0}, {kbar1}, {hi})"
            )
        segs = ((lo, k0), (kbar1, hi)) if kbar1 > k0 else ((lo, hi),)
        return cls(k=k, anchor=k0 if anchor is None else anchor, lo=lo, hi=hi,
                   segments=segs)

    @classmethod
    def full(cls, k: int, lo: float, hi: float, anchor: float | None = None) -> "BasisSpec":
        return cls(k=k, anchor=(lo if anchor is None else anchor), lo=lo, hi=hi,
                   segments=((lo, hi),))

    @property
    def total_length(self) -> float:
        return sum(b - a for a, b in self.segments)

    def covers_support(self) -> bool:
        """True when S is the whole support (no excluded window)."""
        return len(self.segments) == 1 and self.segments[0] == (self.lo, self.hi)


def monomial_basis(y, spec: BasisSpec) -> np.ndarray:
    """Evaluate z(y); rows are points, columns the k monomials (y-anchor)^j."""
    y = np.asarray(y, dtype=float)
    return np.power((y - spec.anchor)[..., np.newaxis], np.arange(spec.k))


def _interval_gram(a: float, b: float, anchor: float, k: int) -> np.ndarray:
    """∫_a^b z z' dy by exact monomial antiderivatives (Hankel structure)."""
    powers = np.arange(1, 2 * k)
    moments = ((b - anchor) ** powers - (a - anchor) ** powers) / powers
    return hankel(moments[:k], moments[k - 1:])


def gram_matrices(spec: BasisSpec) -> tuple[np.ndarray, np.ndarray]:
    """(H, Q): monomial Gram over the full support and over S, exact entries."""
    H = _interval_gram(spec.lo, spec.hi, spec.anchor, spec.k)
    Q = np.zeros_like(H)
    for a, b in spec.segments:
        Q += _interval_gram(a, b, spec.anchor, spec.k)
    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(Q))):
        raise NumericalError(
            "Gram entries overflow for this support width and basis dimension; "
            "rescale the support (e.g. to [0,1]) before building the basis"
        )
    return H, Q


def hilbert_inverse_diag(k: int, j: int) -> float:
    """Diagonal entry j (0-based) of the inverse k-by-k Hilbert matrix.

    Closed form: (2j+1) * C(k+j, k-j-1)^2 * C(2j, j)^2.
    """
    if not 0 <= j <= k - 1:
        raise DomainError(f"need 0 <= j <= k-1, got j={j}, k={k}")
    return float((2 * j + 1) * math.comb(k + j, k - j - 1) ** 2 * math.comb(2 * j, j) ** 2)


def whiten_gram(H: np.ndarray, *, rel_tol: float = 1e-14) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric square root of a Gram matrix and its inverse.

    Returns (H^{1/2}, H^{-1/2}) via eigendecomposition.  Raises when the
    matrix is numerically rank deficient, which in practice means the basis
    dimension is too large for the region; the fix is to lower k.
    """
    H = np.asarray(H, dtype=float)
    vals, vecs = eigh((H + H.T) / 2.0)
    if vals[0] <= rel_tol * vals[-1]:
        raise NumericalError(
            f"Gram matrix numerically singular (eigenvalue ratio {vals[0] / vals[-1]:.2e}); "
            "lower the basis dimension k"
        )
    root = vecs @ (np.sqrt(vals)[:, None] * vecs.T)
    inv_root = vecs @ ((1.0 / np.sqrt(vals))[:, None] * vecs.T)
    return root, inv_root


def _orthonormal_vandermonde(y: np.ndarray, spec: BasisSpec) -> np.ndarray:
    """Shifted-Legendre basis on [lo,hi], normalized so ∫ P_i P_j dy = δ_ij."""
    length = spec.hi - spec.lo
    u = 2.0 * (y - spec.lo) / length - 1.0
    V = npleg.legvander(u, spec.k - 1)
    scale = np.sqrt((2.0 * np.arange(spec.k) + 1.0) / length)
    return V * scale


def _region_gram_orthonormal(spec: BasisSpec) -> np.ndarray:
    """Q in the orthonormal basis, via Gauss-Legendre rules exact to degree 2k-2."""
    nodes, weights = npleg.leggauss(spec.k)
    Q = np.zeros((spec.k, spec.k))
    for a, b in spec.segments:
        y = 0.5 * (a + b) + 0.5 * (b - a) * nodes
        w = 0.5 * (b - a) * weights
        V = _orthonormal_vandermonde(y, spec)
        Q += V.T @ (w[:, None] * V)
    return (Q + Q.T) / 2.0


def extrapolation_norm(spec: BasisSpec, *, indefinite_tol: float = 1e-10) -> float:
    """chi_k = lambda_min of the whitened region Gram, in (0, 1].

    Exactly 1 when S is the full support (the whitened Gram is the
    identity); otherwise computed as the smallest eigenvalue of Q expressed
    in an orthonormal polynomial basis for the support.
    """
    if spec.covers_support():
        return 1.0
    vals = np.linalg.eigvalsh(_region_gram_orthonormal(spec))
    smallest = float(vals[0])
    if smallest < -indefinite_tol:
        raise NumericalError(
            f"whitened region Gram indefinite (lambda_min = {smallest:.2e}); "
            "lower the basis dimension k"
        )
    return min(max(smallest, 0.0), 1.0)


def extrapolation_profile(k_max: int, lo: float, k0: float, kbar1: float, hi: float,
                          *, flag_threshold: float = 20.0) -> list[dict]:
    """chi_k and 1/chi_k for k = 1..k_max, flagging 1/chi_k above the threshold."""
    rows = []
    for k in range(1, k_max + 1):
        spec = BasisSpec.from_window(k, lo, k0, kbar1, hi)
        chi = extrapolation_norm(spec)
        inv = math.inf if chi == 0.0 else 1.0 / chi
        rows.append({"k": k, "chi": chi, "chi_inv": inv,
                     "flagged": bool(inv > flag_threshold)})
    return rows
