"""Binned polynomial counterfactual estimator with proportional adjustment.

The classic recipe: bin the running variable, regress bin shares on a
polynomial in the bin centers plus window-bin fixed effects, and rescale
the mass right of the window so the fitted counterfactual still integrates
to one.  The iterative rescaling ("multiply right-of-window shares by
1 + B/P_R and refit") has an affine update B -> phi0 + phi1 * B, so its
limit is available in one shot as the exactly identified IV solve

    coef = (Z'X)^{-1} Z' f,

where Z stacks the polynomial columns with pure window indicators and X
replaces each indicator by 1{j=l} - (f_j / P_R) 1{j in R}.  Both paths are
implemented and agree at the fixed point; the iteration reports its affine
slope and errors out when it fails to contract.

The excess mass B = sum of window fixed effects combines with the fitted
counterfactual height at the cutoff bin into the small-kink elasticity
B/f / (k log((1-tau0)/(1-tau1))).  Standard errors treat bin shares as
approximately independent multinomial proportions and propagate through
the IV solve by exact implicit differentiation (the design matrix itself
depends on the shares through the rescaling column).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import DataError, DomainError, NumericalError
from .model import PolicySpec
from .sample import Sample

__all__ = ["Histogram", "PeEstimate", "bin_histogram", "pe_iv_estimate",
           "pe_iterative", "small_kink_theta"]


@dataclass(frozen=True, eq=False)
class Histogram:
    """Equispaced bin shares with the window marked by bin indices (j0, j1].

    Bins j with j0 < j <= j1 (0-based) form the excluded window; bins
    j <= j0 sit left of it and bins j > j1 right of it.  ``n_obs`` (the
    underlying sample size) is optional and only needed for standard
    errors.
    """

    centers: np.ndarray
    shares: np.ndarray
    mesh: float
    j0: int
    j1: int
    n_obs: Optional[float] = None

    def __post_init__(self) -> None:
        centers = np.asarray(self.centers, dtype=float)
        shares = np.asarray(self.shares, dtype=float)
        if centers.ndim != 1 or centers.shape != shares.shape or centers.size < 2:
            raise DataError("centers and shares must be matching 1-d arrays (>= 2 bins)")
        if self.mesh <= 0:
            raise DataError(f"mesh must be positive, got {self.mesh}")
        gaps = np.diff(centers)
        if np.any(np.abs(gaps - self.mesh) > 1e-9 * self.mesh):
            raise DataError("bin centers must be equispaced at the stated mesh")
        if np.any(shares < 0):
            raise DataError("shares must be nonnegative")
        if abs(shares.sum() - 1.0) > 1e-6:
            raise DataError(f"shares must sum to 1, got {shares.sum():.8f}")
        J = centers.size
        if not -1 <= self.j0 < self.j1 <= J - 1:
            raise DataError(
                f"window indices must satisfy -1 <= j0 < j1 <= {J - 1}, "
                f"got ({self.j0}, {self.j1})")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "shares", shares)

    @property
    def n_bins(self) -> int:
        return self.centers.size

    @property
    def window_bins(self) -> np.ndarray:
        return np.arange(self.j0 + 1, self.j1 + 1)

    @property
    def right_bins(self) -> np.ndarray:
        return np.arange(self.j1 + 1, self.n_bins)


def bin_histogram(data: Sample, mesh: float, support: tuple[float, float],
                  window: tuple[float, float]) -> Histogram:
    """Count (frequency-weighted) observations into equispaced bins.

    The mesh must partition the support and hit both window edges exactly
    (within 1e-9); observations at the support ceiling fall in the last
    bin.
    """
    lo, hi = support
    k0, k1 = window
    if mesh <= 0:
        raise DataError(f"mesh must be positive, got {mesh}")
    n_bins_f = (hi - lo) / mesh
    n_bins = int(round(n_bins_f))
    if n_bins < 2 or abs(n_bins_f - n_bins) > 1e-9:
        raise DataError(f"mesh {mesh} does not partition support [{lo}, {hi}]")
    for name, edge in (("k0", k0), ("k1", k1)):
        steps = (edge - lo) / mesh
        if abs(steps - round(steps)) > 1e-9:
            raise DataError(
                f"window edge {name}={edge} is not aligned to the bin grid "
                f"(offset {abs(steps - round(steps)):.2e} bins)")
    if np.any(data.y < lo) or np.any(data.y > hi):
        n_out = int(np.sum((data.y < lo) | (data.y > hi)))
        raise DataError(f"{n_out} observations fall outside the support {support}")

    idx = np.minimum(np.floor((data.y - lo) / mesh).astype(int), n_bins - 1)
    counts = np.bincount(idx, weights=data.c, minlength=n_bins)
    shares = counts / counts.sum()
    centers = lo + (np.arange(n_bins) + 0.5) * mesh
    m0 = int(round((k0 - lo) / mesh))
    m1 = int(round((k1 - lo) / mesh))
    return Histogram(centers=centers, shares=shares, mesh=mesh,
                     j0=m0 - 1, j1=m1 - 1, n_obs=data.n)


@dataclass(frozen=True, eq=False)
class PeEstimate:
    """Output of the binned polynomial estimator (either solution path)."""

    gamma_hat: np.ndarray
    beta_hat: np.ndarray
    B_hat: float
    f_hat: float
    theta_hat: float
    se_theta: float
    degree: int
    cutoff_bin: int
    residuals: np.ndarray
    iterations: Optional[int] = None
    affine_slope: Optional[float] = None
    affine_limit: Optional[float] = None

    def counterfactual_share(self, y) -> np.ndarray:
        """Fitted counterfactual bin share at location(s) y."""
        return np.polynomial.polynomial.polyval(np.asarray(y, dtype=float),
                                                self.gamma_hat)


def _design(hist: Histogram, degree: int):
    """Instrument matrix Z, share-dependent design X, and index bookkeeping."""
    J = hist.n_bins
    win = hist.window_bins
    right = hist.right_bins
    if right.size == 0:
        raise DataError("no bins right of the window")
    P_R = float(hist.shares[right].sum())
    if P_R <= 0:
        raise DataError("zero mass right of the window")
    if win.size == 0:
        raise DataError("window contains no bins")
    Zpoly = np.power(hist.centers[:, None], np.arange(degree + 1))
    ind = np.zeros((J, win.size))
    ind[win, np.arange(win.size)] = 1.0
    Z = np.hstack([Zpoly, ind])
    X = Z.copy()
    adjust = np.zeros(J)
    adjust[right] = hist.shares[right] / P_R
    X[:, degree + 1:] = ind - adjust[:, None]
    return Z, X, win, right, P_R


def _cutoff_bin(hist: Histogram, policy: Optional[PolicySpec]) -> int:
    if policy is None:
        return hist.j0 + 1
    lo_edge = hist.centers[0] - hist.mesh / 2.0
    j_star = int(min(np.floor((policy.k - lo_edge) / hist.mesh), hist.n_bins - 1))
    return j_star


def _assemble(hist: Histogram, degree: int, coef: np.ndarray, resid: np.ndarray,
              policy: Optional[PolicySpec], window_average: bool,
              iterations: Optional[int] = None, affine_slope: Optional[float] = None,
              affine_limit: Optional[float] = None) -> PeEstimate:
    gamma = coef[:degree + 1]
    beta = coef[degree + 1:]
    B_hat = float(beta.sum())
    j_star = _cutoff_bin(hist, policy)
    if window_average:
        win = hist.window_bins
        f_hat = float(np.mean(np.power(hist.centers[win, None],
                                       np.arange(degree + 1)) @ gamma)) / hist.mesh
    else:
        f_hat = float(np.power(hist.centers[j_star], np.arange(degree + 1)) @ gamma) \
            / hist.mesh
    if policy is not None and f_hat > 0:
        theta_hat = small_kink_theta(B_hat, f_hat, policy.k, policy.tau0, policy.tau1)
        se_theta = _delta_method_se(hist, degree, coef, policy, window_average)
    else:
        theta_hat = float("nan")
        se_theta = float("nan")
    return PeEstimate(gamma_hat=gamma, beta_hat=beta, B_hat=B_hat, f_hat=f_hat,
                      theta_hat=theta_hat, se_theta=se_theta, degree=degree,
                      cutoff_bin=j_star, residuals=resid, iterations=iterations,
                      affine_slope=affine_slope, affine_limit=affine_limit)


def pe_iv_estimate(hist: Histogram, degree: int, policy: Optional[PolicySpec] = None,
                   *, window_average: bool = False) -> PeEstimate:
    """One-shot exactly identified IV solve of the adjusted bin regression."""
    Z, X, win, right, P_R = _design(hist, degree)
    ZX = Z.T @ X
    try:
        coef = scipy.linalg.solve(ZX, Z.T @ hist.shares)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(
            f"IV design Z'X is singular (degree {degree}, {hist.n_bins} bins); "
            "lower the degree or widen the support") from exc
    resid = hist.shares - X @ coef
    return _assemble(hist, degree, coef, resid, policy, window_average)


def pe_iterative(hist: Histogram, degree: int, policy: Optional[PolicySpec] = None,
                 max_iter: int = 1000, tol: float = 1e-12, *,
                 window_average: bool = False) -> PeEstimate:
    """Proportional-adjustment fixed point, seeded at zero excess mass.

    Each pass rescales right-of-window shares by 1 + B/P_R and refits by
    least squares on the instrument columns; the induced map B -> phi0 +
    phi1 B is affine, so the slope is monitored and a non-contraction
    (|phi1| >= 1) raises immediately instead of looping.
    """
    Z, X, win, right, P_R = _design(hist, degree)
    M = Z.T @ Z
    try:
        cho = scipy.linalg.cho_factor(M)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(
            f"bin regression design is rank deficient (degree {degree})") from exc
    beta_slice = slice(degree + 1, degree + 1 + win.size)

    u0 = Z.T @ hist.shares
    bump = np.zeros(hist.n_bins)
    bump[right] = hist.shares[right] / P_R
    u1 = Z.T @ bump
    phi0 = float(scipy.linalg.cho_solve(cho, u0)[beta_slice].sum())
    phi1 = float(scipy.linalg.cho_solve(cho, u1)[beta_slice].sum())
    if abs(phi1) >= 1.0:
        raise NumericalError(
            f"proportional adjustment does not contract: affine slope "
            f"phi1 = {phi1:.6f} has modulus >= 1")

    B = 0.0
    iterations = 0
    for iterations in range(1, max_iter + 1):
        B_next = phi0 + phi1 * B
        if abs(B_next - B) < tol:
            B = B_next
            break
        B = B_next
    else:
        raise NumericalError(
            f"proportional adjustment did not converge in {max_iter} passes "
            f"(last update {abs(phi1):.3e})")

    target = hist.shares + B * bump   # shares * (1 + B/P_R) on right-of-window bins
    coef = scipy.linalg.cho_solve(cho, Z.T @ target)
    resid = hist.shares - X @ coef
    return _assemble(hist, degree, coef, resid, policy, window_average,
                     iterations=iterations, affine_slope=phi1,
                     affine_limit=phi0 / (1.0 - phi1))


def small_kink_theta(B_hat: float, f_hat: float, k: float,
                     tau0: float, tau1: float) -> float:
    """Elasticity from normalized excess mass: (B/f) / (k log((1-tau0)/(1-tau1)))."""
    if f_hat <= 0:
        raise DomainError(f"counterfactual height must be positive, got {f_hat}")
    if k <= 0:
        raise DomainError(f"cutoff must be positive, got {k}")
    if not 0.0 <= tau0 < tau1 < 1.0:
        raise DomainError(f"need 0 <= tau0 < tau1 < 1, got ({tau0}, {tau1})")
    return (B_hat / f_hat) / (k * math.log((1.0 - tau0) / (1.0 - tau1)))


def _delta_method_se(hist: Histogram, degree: int, coef: np.ndarray,
                     policy: PolicySpec, window_average: bool) -> float:
    """Propagate independent-approximation multinomial share noise to theta.

    The design depends on the shares through the right-of-window rescaling
    column, so the Jacobian of the coefficients uses the exact implicit
    derivative dc = (Z'X)^{-1} Z' (I - D) df rather than treating X as
    fixed.
    """
    if hist.n_obs is None or hist.n_obs <= 0:
        return float("nan")
    Z, X, win, right, P_R = _design(hist, degree)
    J = hist.n_bins
    B_hat = float(coef[degree + 1:].sum())

    # D_{jj'} = -(B/P_R) * (delta_{jj'} - f_j / P_R) on right-of-window rows/cols
    D = np.zeros((J, J))
    f_right = hist.shares[right]
    D[np.ix_(right, right)] = -(B_hat / P_R) * (
        np.eye(right.size) - np.outer(f_right, np.ones(right.size)) / P_R)
    Jc = scipy.linalg.solve(Z.T @ X, Z.T @ (np.eye(J) - D))

    gamma_rows = Jc[:degree + 1, :]
    beta_rows = Jc[degree + 1:, :]
    dB = beta_rows.sum(axis=0)
    if window_average:
        zstar = np.power(hist.centers[win, None], np.arange(degree + 1)).mean(axis=0)
    else:
        j_star = _cutoff_bin(hist, policy)
        zstar = np.power(hist.centers[j_star], np.arange(degree + 1))
    f_hat_level = float(zstar @ coef[:degree + 1]) / hist.mesh
    df_hat = (zstar @ gamma_rows) / hist.mesh

    log_ratio = policy.log_ratio
    grad = (dB / f_hat_level - (B_hat / f_hat_level ** 2) * df_hat) / (policy.k * log_ratio)
    var_f = hist.shares * (1.0 - hist.shares) / hist.n_obs
    return float(math.sqrt(np.sum(grad ** 2 * var_f)))
