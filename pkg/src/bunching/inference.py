"""Bias-aware tests and confidence sets for the structural elasticity.

The point test at a hypothesized theta compares the observed window share
with the mass the corrected counterfactual density assigns to the window,
series-expanded to order ell:

    mu_hat = B_hat - sum_{j=1..ell} gamma_hat[j, slot j] / j,

where gamma_hat[j, slot j] is the coefficient of (y-k0)^{j-1} in the
order-j weighted-density sieve fit.  Its per-unit influence decomposition

    s_i = t_i                                   (window units)
        = - sum_j nu_{j,i}[slot j] / j          (retained region units)
        = 0                                     (units dropped by truncation)

averages exactly to mu_hat, and sigma_hat^2 = (1/n) sum s_i^2 feeds the
studentized statistic T = |sqrt(n) mu_hat / sigma_hat|.  The critical value
cv_alpha(b) is the (1-alpha) quantile of |N(b,1)| evaluated at the
standardized worst-case approximation bias b = sqrt(n) * bias_bound /
sigma_hat; the default bias bound is zero, and an opt-in calibration
estimates it from analytic-continuation smoothness constants of fitted
polynomial curves.

Confidence sets invert the test over a theta grid and report maximal
contiguous accepted intervals without convexifying across gaps.  The joint
Wald test stacks the moment for several weight functions t(x) and compares
n * mu' V^{-1} mu with a chi-square critical value.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.optimize import bisect
from scipy.special import ndtr
from scipy.stats import chi2

from .basis import extrapolation_norm
from .errors import BunchingError, DataError, DomainError, NumericalError
from .model import StructuralModel
from .sample import EstimationSample, Sample, WeightFn, construct_estimation_sample
from .sieve import (MomentFit, QuantileFit, SieveFit, fit_conditional_quantile,
                    fit_density_moment, influence_vectors)

_SIGMA_SQ_FLOOR = 1e-12
DEFAULT_TAU_GRID = tuple(np.round(np.arange(0.05, 0.951, 0.05), 2))


@dataclass(frozen=True)
class TestConfig:
    """Tuning for the point test: sieve order, series order, size, bias bound."""

    kappa: int
    ell: int
    alpha: float = 0.05
    bias_bound: float = 0.0
    c3: float = 10.0
    chi_flag_threshold: float = 20.0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must be in (0,1), got {self.alpha}")
        if not 1 <= self.ell <= self.kappa:
            raise DomainError(f"need 1 <= ell <= kappa, got ell={self.ell}, kappa={self.kappa}")
        if self.bias_bound < 0:
            raise DomainError(f"bias bound must be nonnegative, got {self.bias_bound}")


@dataclass(frozen=True, eq=False)
class TestResult:
    """Outcome of the point test at one theta."""

    theta: tuple[float, ...]
    mu_hat: float
    sigma_hat: float
    stat: float
    cv: float
    reject: bool
    B_hat: float
    n: float
    alpha: float
    bias_bound: float
    chi_inv: float
    series_terms: tuple[float, ...]  # gamma_hat[j, slot j]/j for j = 1..ell
    components: Optional[tuple] = None  # per-weight results for joint tests


def bias_aware_cv(alpha: float, b: float) -> float:
    """(1-alpha) quantile of |N(b,1)|: the c >= 0 with Phi(c-b) - Phi(-c-b) = 1-alpha."""
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must be in (0,1), got {alpha}")
    if b < 0 or not np.isfinite(b):
        raise DomainError(f"bias parameter must be finite and nonnegative, got {b}")
    target = 1.0 - alpha

    def gap(c: float) -> float:
        return float(ndtr(c - b) - ndtr(-c - b) - target)

    hi = b + 6.0
    while gap(hi) < 0.0:
        hi += 2.0
        if hi > b + 60.0:  # pragma: no cover - alpha astronomically small
            raise NumericalError("failed to bracket the bias-aware critical value")
    return float(bisect(gap, 0.0, hi, xtol=1e-10))


def _region_influence(sample: EstimationSample, fits: Sequence[SieveFit]) -> np.ndarray:
    """-sum_j nu_j[slot j]/j per retained unit (the region part of s_i)."""
    s = np.zeros(sample.y0.shape)
    for fit in fits:
        nu = influence_vectors(sample, fit)
        s -= nu.component(fit.j) / fit.j
    return s


def point_test_statistic(data: Sample, model: StructuralModel, theta,
                         config: TestConfig,
                         weight_fn: Optional[WeightFn] = None) -> TestResult:
    """Run the full correction-fit-studentize pipeline at one theta."""
    sample = construct_estimation_sample(data, model, theta, weight_fn)
    fits = [fit_density_moment(sample, j, config.kappa, config.c3)
            for j in range(1, config.ell + 1)]
    terms = tuple(float(fit.gamma[fit.j - 1]) / fit.j for fit in fits)
    mu_hat = sample.B_hat - sum(terms)

    s_region = _region_influence(sample, fits)
    sigma_sq = (np.sum(sample.window_c * sample.window_t ** 2)
                + np.sum(sample.c * s_region ** 2)) / sample.n
    if sigma_sq < _SIGMA_SQ_FLOOR:
        raise NumericalError(
            f"influence variance {sigma_sq:.3e} below floor {_SIGMA_SQ_FLOOR:.0e}")
    sigma_hat = math.sqrt(sigma_sq)

    root_n = math.sqrt(sample.n)
    stat = abs(root_n * mu_hat / sigma_hat)
    cv = bias_aware_cv(config.alpha, root_n * config.bias_bound / sigma_hat)
    chi = extrapolation_norm(sample.basis_spec(config.kappa))
    return TestResult(
        theta=sample.theta, mu_hat=float(mu_hat), sigma_hat=float(sigma_hat),
        stat=float(stat), cv=float(cv), reject=bool(stat >= cv),
        B_hat=sample.B_hat, n=sample.n, alpha=config.alpha,
        bias_bound=config.bias_bound,
        chi_inv=(math.inf if chi == 0 else 1.0 / chi),
        series_terms=terms,
    )


@dataclass(frozen=True, eq=False)
class ConfidenceSet:
    """Test inversion over a theta grid.

    ``intervals`` lists the maximal contiguous accepted runs as (lo, hi)
    grid endpoints; disjoint pieces are preserved.  Grid points where
    estimation failed are marked NA (stat = nan) and never accepted.
    """

    alpha: float
    grid: np.ndarray
    stat: np.ndarray
    cv: np.ndarray
    accepted: np.ndarray
    na: np.ndarray
    chi_inv: np.ndarray
    flagged: np.ndarray
    intervals: tuple[tuple[float, float], ...]
    results: tuple[Optional[TestResult], ...]

    def contains(self, theta: float) -> bool:
        return any(lo <= theta <= hi for lo, hi in self.intervals)


def _contiguous_intervals(grid: np.ndarray, accepted: np.ndarray) -> tuple:
    out = []
    start = None
    for i, ok in enumerate(accepted):
        if ok and start is None:
            start = i
        elif not ok and start is not None:
            out.append((float(grid[start]), float(grid[i - 1])))
            start = None
    if start is not None:
        out.append((float(grid[start]), float(grid[-1])))
    return tuple(out)


def confidence_set(data: Sample, model: StructuralModel, theta_grid,
                   config: TestConfig,
                   weight_fn: Optional[WeightFn] = None) -> ConfidenceSet:
    """Collect all grid thetas the point test does not reject."""
    grid = np.atleast_1d(np.asarray(theta_grid, dtype=float))
    if grid.size == 0:
        raise DataError("theta grid is empty")
    stats = np.full(grid.shape, np.nan)
    cvs = np.full(grid.shape, np.nan)
    chi_inv = np.full(grid.shape, np.nan)
    accepted = np.zeros(grid.shape, dtype=bool)
    na = np.zeros(grid.shape, dtype=bool)
    results: list[Optional[TestResult]] = []
    for i, theta in enumerate(grid):
        try:
            res = point_test_statistic(data, model, float(theta), config, weight_fn)
        except BunchingError:
            na[i] = True
            results.append(None)
            continue
        stats[i] = res.stat
        cvs[i] = res.cv
        chi_inv[i] = res.chi_inv
        accepted[i] = not res.reject
        results.append(res)
    flagged = np.where(np.isnan(chi_inv), False,
                       chi_inv > config.chi_flag_threshold)
    return ConfidenceSet(
        alpha=config.alpha, grid=grid, stat=stats, cv=cvs, accepted=accepted,
        na=na, chi_inv=chi_inv, flagged=flagged,
        intervals=_contiguous_intervals(grid, accepted), results=tuple(results),
    )


def wald_joint_test(data: Sample, model: StructuralModel, theta,
                    weight_fns: Sequence[WeightFn], config: TestConfig,
                    ) -> tuple[float, int, bool, TestResult]:
    """Joint test of theta (possibly vector) from several weighted moments.

    Each weight function gets its own full correction-and-fit pass; the
    stacked per-unit influence vectors (aligned on the original row order)
    give V-hat, and W = n mu' V^{-1} mu is compared with the chi-square
    critical value at df = number of moments.
    """
    q = len(weight_fns)
    if q == 0:
        raise DataError("need at least one weight function")
    theta_arr = np.atleast_1d(np.asarray(theta, dtype=float))
    if q < theta_arr.size:
        raise DataError(
            f"need at least as many weight functions ({q}) as parameters "
            f"({theta_arr.size})")

    n_rows = data.y.shape[0]
    mu = np.zeros(q)
    S = np.zeros((n_rows, q))
    sub_results = []
    n_eff = data.n
    for r, wf in enumerate(weight_fns):
        sample = construct_estimation_sample(data, model, theta, wf)
        fits = [fit_density_moment(sample, j, config.kappa, config.c3)
                for j in range(1, config.ell + 1)]
        terms = tuple(float(fit.gamma[fit.j - 1]) / fit.j for fit in fits)
        mu[r] = sample.B_hat - sum(terms)
        s_full = np.zeros(n_rows)
        s_full[sample.in_window] = sample.window_t
        s_full[sample.keep_mask] = _region_influence(sample, fits)
        S[:, r] = s_full
        sigma_r = math.sqrt(max(np.sum(sample.c_all * s_full ** 2) / n_eff,
                                _SIGMA_SQ_FLOOR))
        sub_results.append((mu[r], sigma_r))

    V = (S.T * data.c) @ S / n_eff
    try:
        sol = scipy.linalg.solve((V + V.T) / 2.0, mu, assume_a="pos")
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError("stacked influence covariance is singular") from exc
    W = float(n_eff * mu @ sol)
    df = q
    cv = float(chi2.ppf(1.0 - config.alpha, df))
    reject = W > cv
    summary = TestResult(
        theta=tuple(theta_arr.tolist()), mu_hat=float(np.linalg.norm(mu)),
        sigma_hat=float("nan"), stat=W, cv=cv, reject=reject,
        B_hat=float("nan"), n=n_eff, alpha=config.alpha,
        bias_bound=config.bias_bound, chi_inv=float("nan"),
        series_terms=(), components=tuple(sub_results),
    )
    return W, df, reject, summary


# ---------------------------------------------------------------------------
# smoothness calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SmoothnessEstimate:
    """Analytic-continuation constants over a radius grid and the implied bound.

    For each rho: beta is the worst ratio of the circle-averaged density
    modulus to the on-axis density over the window grid; delta is the worst
    normalized excursion of the fitted quantile curves on the same circles,
    restricted to curves locally above the diagonal.  Radii with delta >= 1
    (or with no admissible curve point) cannot certify a convergent series
    tail and are discarded.  b_bar = min over valid rho of beta * delta^ell
    * B_hat, or 0 with ``failed`` set when no radius is valid.
    """

    rho: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    valid: np.ndarray
    ell: int
    b_bar: float
    failed: bool


def _circle_points(n_points: int) -> np.ndarray:
    x = np.arange(n_points + 1) / n_points  # closed trapezoid grid on [0,1]
    return np.exp(2j * np.pi * x)


def calibrate_smoothness(density_fit: SieveFit | MomentFit,
                         quantile_fits: Sequence[QuantileFit],
                         rho_grid, ell: int, B_hat: float, *,
                         y_points: int = 101, x_points: int = 256,
                         ) -> SmoothnessEstimate:
    """Estimate the series-tail bound b_bar = min_rho beta_rho delta_rho^ell B_hat.

    The fitted polynomials are continued exactly to complex arguments
    y + rho e^{2 pi i x}; circle averages use the trapezoid rule in x.
    """
    if ell < 1:
        raise DomainError(f"ell must be >= 1, got {ell}")
    rho_grid = np.atleast_1d(np.asarray(rho_grid, dtype=float))
    if np.any(rho_grid < 0):
        raise DomainError("radii must be nonnegative")
    spec = density_fit.spec
    kbar1 = spec.segments[-1][0] if len(spec.segments) > 1 else spec.hi
    y_grid = np.linspace(spec.anchor, kbar1, y_points)
    circle = _circle_points(x_points)

    f_on_axis = np.abs(np.asarray(density_fit.value(y_grid), dtype=float))
    betas = np.empty(rho_grid.shape)
    deltas = np.empty(rho_grid.shape)
    valid = np.zeros(rho_grid.shape, dtype=bool)

    for r, rho in enumerate(rho_grid):
        if rho == 0.0:
            betas[r] = 1.0
            deltas[r] = math.inf  # zero-radius circle certifies nothing
            continue
        zpts = y_grid[:, None] + rho * circle[None, :]
        fvals = np.abs(np.polynomial.polynomial.polyval(
            zpts - spec.anchor, density_fit.gamma))
        avg = np.trapezoid(fvals, dx=1.0 / x_points, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(f_on_axis > 0, avg / f_on_axis, np.inf)
        betas[r] = float(np.max(ratios))

        worst = -math.inf
        any_admissible = False
        for qf in quantile_fits:
            on_axis = np.asarray(qf.value(y_grid), dtype=float)
            admissible = on_axis >= y_grid
            if not np.any(admissible):
                continue
            any_admissible = True
            sub = y_grid[admissible]
            gz = np.polynomial.polynomial.polyval(
                (sub[:, None] + rho * circle[None, :]) - spec.anchor, qf.gamma)
            exc = np.max(np.abs(gz - sub[:, None]), axis=1) / rho
            worst = max(worst, float(np.max(exc)))
        if not any_admissible:
            deltas[r] = math.inf
            continue
        deltas[r] = worst
        valid[r] = worst < 1.0 and np.isfinite(betas[r])

    if not np.any(valid):
        warnings.warn(
            "smoothness calibration failed: no radius certifies a convergent "
            "tail; defaulting the bias bound to 0", stacklevel=2)
        return SmoothnessEstimate(rho=rho_grid, beta=betas, delta=deltas,
                                  valid=valid, ell=ell, b_bar=0.0, failed=True)
    candidates = betas[valid] * deltas[valid] ** ell * B_hat
    return SmoothnessEstimate(rho=rho_grid, beta=betas, delta=deltas,
                              valid=valid, ell=ell,
                              b_bar=float(np.min(candidates)), failed=False)


def calibrate_from_sample(sample: EstimationSample, ell: int, *,
                          kappa_density: int = 5, kappa_quantile: int = 3,
                          rho_grid=None,
                          tau_grid: Sequence[float] = DEFAULT_TAU_GRID,
                          ) -> SmoothnessEstimate:
    """Convenience driver: fit the pieces, then calibrate the bias bound.

    The density input is the order-0 (plain weighted density) sieve fit;
    the quantile curves regress the reverted window edge on the basis over
    a dense tau grid.  The default radius grid scales with the excluded
    width so the circles actually cover the extrapolation region.
    """
    density = fit_density_moment(sample, 0, kappa_density)
    quantiles = [fit_conditional_quantile(sample, tau, kappa_quantile)
                 for tau in tau_grid]
    if rho_grid is None:
        width = max(sample.kbar1 - sample.window_lower, 1e-12)
        rho_grid = width * np.geomspace(0.75, 12.0, 16)
    return calibrate_smoothness(density, quantiles, rho_grid, ell, sample.B_hat)
