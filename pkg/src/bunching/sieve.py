"""Convex sieve estimation of weighted counterfactual densities.

For moment order j, the target is f_j(y) = E[T w^j | Y(0) = y] f_{Y(0)}(y)
restricted to the censored region S.  Its polynomial sieve estimate
maximizes the concave sample objective

    (1/n) sum_{i in N} t_i w_i^j log( z(y0_i)' gamma )  -  ( ∫_S z dy )' gamma,

whose first-order condition premultiplied by gamma-hat yields the integral
identity (∫_S z dy)' gamma-hat = (1/n) sum t_i w_i^j — the fitted function
integrates over S to exactly the sample moment it targets.

Numerics.  The support is affinely rescaled to [0,1] and the optimization
runs in an orthonormalized basis (symmetric square root of the full-support
Gram), which keeps the Newton systems well conditioned at high order; the
monomial coefficients in (y - k0) powers are recovered exactly through the
retained change of basis.  Positivity of the fitted polynomial is enforced
between sample points by a fraction-to-boundary line search over a dense
grid on S.  Region integrals use exact antiderivatives throughout — there
is no quadrature in this module.

Also here: the per-unit influence vectors of the density coefficients, the
t-weighted least-squares conditional-moment fits (with derivative
extraction at the window edge), and check-loss conditional-quantile fits
used for smoothness calibration.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy.optimize import linprog

from .basis import BasisSpec, gram_matrices, whiten_gram
from .errors import DataError, NumericalError
from .sample import EstimationSample

_GRID_POINTS = 512
_BOUNDARY_FRACTION = 0.995
_GRAD_TOL_HARD = 1e-13
_GRAD_TOL_CONVERGED = 1e-10
_MAX_ITER = 200
DEFAULT_LOG_BOUND_SCALE = 10.0


def region_monomial_integrals(spec: BasisSpec) -> np.ndarray:
    """∫_S (y - anchor)^{m-1} dy for m = 1..k, by exact antiderivatives."""
    powers = np.arange(1, spec.k + 1)
    out = np.zeros(spec.k)
    for a, b in spec.segments:
        out += ((b - spec.anchor) ** powers - (a - spec.anchor) ** powers) / powers
    return out


def _region_grid(segments, total: int) -> np.ndarray:
    """Dense check grid over a union of intervals, proportional to length."""
    lengths = np.array([b - a for a, b in segments])
    counts = np.maximum(2, np.round(total * lengths / lengths.sum()).astype(int))
    pieces = [np.linspace(a, b, m) for (a, b), m in zip(segments, counts)]
    return np.concatenate(pieces)


@dataclass(frozen=True, eq=False)
class _InternalBasis:
    """Rescaled-[0,1] coordinates and the orthonormal change of basis."""

    spec: BasisSpec            # original coordinates
    length: float              # hi - lo
    u_anchor: float
    segments_u: tuple[tuple[float, float], ...]
    root: np.ndarray           # H~^{1/2}
    inv_root: np.ndarray       # H~^{-1/2}
    monomial_scale: np.ndarray  # diag entries L^0..L^{k-1}

    def to_u(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.spec.lo) / self.length

    def ortho_rows(self, y: np.ndarray) -> np.ndarray:
        u = self.to_u(y)
        z_tilde = np.power((u - self.u_anchor)[..., None], np.arange(self.spec.k))
        return z_tilde @ self.inv_root

    def ortho_to_monomial(self, vec: np.ndarray) -> np.ndarray:
        """Map orthonormal-coordinate vectors (or stacked rows) to monomial coords."""
        return (np.asarray(vec) @ self.inv_root) / self.monomial_scale


def _internal_basis(spec: BasisSpec) -> _InternalBasis:
    length = spec.hi - spec.lo
    u_anchor = (spec.anchor - spec.lo) / length
    segs_u = tuple(((a - spec.lo) / length, (b - spec.lo) / length) for a, b in spec.segments)
    spec_u = BasisSpec(k=spec.k, anchor=u_anchor, lo=0.0, hi=1.0, segments=segs_u)
    H_u, _ = gram_matrices(spec_u)
    root, inv_root = whiten_gram(H_u)
    scale = length ** np.arange(spec.k)
    return _InternalBasis(spec=spec, length=length, u_anchor=u_anchor,
                          segments_u=segs_u, root=root, inv_root=inv_root,
                          monomial_scale=scale)


@dataclass(frozen=True, eq=False)
class SieveFit:
    """A fitted weighted-density polynomial on the censored region.

    ``gamma`` holds monomial coefficients: slot m multiplies (y-k0)^{m-1}.
    ``fitted`` are the (strictly positive) fitted values at the retained
    sample points; ``foc_residual`` is the sup-norm of the first-order
    condition in original coordinates.
    """

    j: int
    kappa: int
    gamma: np.ndarray
    log_bound: float
    fitted: np.ndarray
    converged: bool
    foc_residual: float
    spec: BasisSpec
    mass: float                  # (1/n) sum t w^j over the retained sample
    region_integral: np.ndarray  # ∫_S z dy, original coordinates
    n_iter: int
    log_sup: float               # sup |log fit| on the check grid

    def value(self, y) -> np.ndarray:
        """Evaluate the fitted polynomial at y (original coordinates)."""
        return np.polynomial.polynomial.polyval(
            np.asarray(y, dtype=float) - self.spec.anchor, self.gamma)

    @property
    def integral_identity_gap(self) -> float:
        return float(abs(self.region_integral @ self.gamma - self.mass))


def _check_points(internal: _InternalBasis, y0: np.ndarray) -> np.ndarray:
    """Line-search/positivity check set: dense grid over S plus sample points."""
    grid_u = _region_grid(internal.segments_u, _GRID_POINTS)
    ends = np.array([e for seg in internal.segments_u for e in seg])
    return np.concatenate([grid_u, ends, internal.to_u(y0)])


def fit_density_moment(sample: EstimationSample, j: int, kappa: int,
                       c3: float = DEFAULT_LOG_BOUND_SCALE, *,
                       raise_on_fail: bool = True) -> SieveFit:
    """Damped-Newton maximization of the order-j sieve objective.

    The solver works in the orthonormalized rescaled basis, keeps every
    iterate strictly positive on the check set via a fraction-to-boundary
    rule, and only accepts ascent steps.  The interiority bound
    sup |log fit| <= c3 * max(j, 1) is verified after the fact and reported
    as a warning when violated (it is a diagnostic, not a constraint).
    """
    if j < 0 or kappa < 1:
        raise DataError(f"need j >= 0 and kappa >= 1, got j={j}, kappa={kappa}")
    if sample.y0.size == 0:
        raise DataError("estimation sample is empty")
    spec = sample.basis_spec(kappa)
    internal = _internal_basis(spec)

    a = sample.c * sample.t * sample.w ** j        # per-unit objective weights
    mass = float(a.sum() / sample.n)
    if not mass > 0:
        raise DataError(f"sum of t*w^{j} over the sample must be positive")

    O = internal.ortho_rows(sample.y0)             # n_kept x kappa
    b_orig = region_monomial_integrals(spec)
    # linear term in orthonormal coordinates: b'gamma_z == q'delta
    q = internal.inv_root @ (b_orig / internal.monomial_scale)

    u_check = _check_points(internal, sample.y0)
    z_check = np.power((u_check - internal.u_anchor)[:, None], np.arange(kappa))
    G = z_check @ internal.inv_root

    n = sample.n
    active = a > 0

    def objective(phi_active: np.ndarray, delta: np.ndarray) -> float:
        return float(a[active] @ np.log(phi_active) / n - q @ delta)

    # start at the flat density matching the order-j mass
    delta = internal.root @ np.concatenate([[mass / spec.total_length],
                                            np.zeros(kappa - 1)])
    phi = O @ delta
    phi_check = G @ delta
    if np.any(phi_check <= 0):  # cannot happen for a positive constant start
        raise NumericalError("infeasible initialization in sieve solver")

    obj = objective(phi[active], delta)
    g_norm = math.inf
    prev_norm = math.inf
    it = 0
    for it in range(1, _MAX_ITER + 1):
        ratio = np.where(active, a / np.where(phi > 0, phi, 1.0), 0.0)
        g = O.T @ ratio / n - q
        g_norm = float(np.max(np.abs(g)))
        if g_norm <= _GRAD_TOL_HARD:
            break
        if g_norm <= _GRAD_TOL_CONVERGED and g_norm >= 0.5 * prev_norm:
            break  # definite stall inside the convergence band
        prev_norm = g_norm

        curv = np.where(active, ratio / np.where(phi > 0, phi, 1.0), 0.0)
        A = (O.T * curv) @ O / n
        try:
            cho = scipy.linalg.cho_factor((A + A.T) / 2.0)
            step = scipy.linalg.cho_solve(cho, g)
        except scipy.linalg.LinAlgError as exc:
            raise NumericalError(
                f"singular Newton system in sieve fit (j={j}, kappa={kappa}); "
                f"condition number ~ {np.linalg.cond(A):.2e}; lower kappa"
            ) from exc
        if float(g @ step) <= 0:
            break  # rounding has destroyed ascent; accept current iterate

        dphi = O @ step
        dphi_check = G @ step
        neg = dphi_check < 0
        alpha = 1.0
        if np.any(neg):
            alpha = min(1.0, _BOUNDARY_FRACTION *
                        float(np.min(phi_check[neg] / -dphi_check[neg])))
        accepted = False
        while alpha > 1e-14:
            cand_phi = phi + alpha * dphi
            if np.all(cand_phi[active] > 0):
                cand_obj = objective(cand_phi[active], delta + alpha * step)
                if cand_obj >= obj - 1e-12 * (1.0 + abs(obj)):
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            break
        delta = delta + alpha * step
        phi = phi + alpha * dphi
        phi_check = phi_check + alpha * dphi_check
        obj = objective(phi[active], delta)

    ratio = np.where(active, a / np.where(phi > 0, phi, 1.0), 0.0)
    g = O.T @ ratio / n - q
    g_norm = float(np.max(np.abs(g)))
    converged = g_norm <= _GRAD_TOL_CONVERGED

    gamma = internal.ortho_to_monomial(delta)
    gamma = np.atleast_1d(gamma)
    if np.any(phi <= 0) or np.any(phi_check <= 0):
        raise NumericalError(
            f"sieve fit lost positivity at the solution (j={j}, kappa={kappa})")
    if not converged and raise_on_fail:
        raise NumericalError(
            f"sieve fit did not converge in {_MAX_ITER} iterations "
            f"(j={j}, kappa={kappa}, grad sup-norm {g_norm:.2e})")

    # report the first-order condition in original coordinates
    z_rows = np.power((sample.y0 - spec.anchor)[:, None], np.arange(kappa))
    foc_orig = z_rows.T @ ratio / n - b_orig
    foc_residual = float(np.max(np.abs(foc_orig)))

    log_sup = float(np.max(np.abs(np.log(phi_check))))
    bound = c3 * max(j, 1)
    if log_sup > bound:
        warnings.warn(
            f"sieve solution exits the interiority box: sup|log f| = {log_sup:.3f} "
            f"> {bound:.3f} (j={j}, kappa={kappa})", stacklevel=2)

    return SieveFit(j=j, kappa=kappa, gamma=gamma, log_bound=c3 * j,
                    fitted=phi, converged=converged, foc_residual=foc_residual,
                    spec=spec, mass=mass, region_integral=b_orig, n_iter=it,
                    log_sup=log_sup)


@dataclass(frozen=True, eq=False)
class InfluenceSet:
    """Per-unit influence vectors of the density coefficients.

    Row i is nu_i in monomial coordinates; its slot-j entry (coefficient of
    (y-k0)^{j-1}) drives the influence of the order-j moment coefficient.
    The c-weighted sample mean of the rows reproduces gamma-hat at the
    first-order condition.
    """

    j: int
    kappa: int
    nu: np.ndarray  # n_kept x kappa

    def component(self, slot: int) -> np.ndarray:
        """Monomial slot m (1-based): coefficient direction of (y-k0)^{m-1}."""
        if not 1 <= slot <= self.kappa:
            raise DataError(f"slot must be in 1..{self.kappa}, got {slot}")
        return self.nu[:, slot - 1]


def influence_vectors(sample: EstimationSample, fit: SieveFit) -> InfluenceSet:
    """nu_i = [ (1/n) Σ t w^j z z' / f^2 ]^{-1} t_i w_i^j z_i / f_i.

    Computed in the orthonormal internal basis and mapped back, so the
    weighting matrix stays invertible at orders where the raw monomial
    version would be numerically singular.
    """
    if not fit.converged:
        raise NumericalError("influence vectors require a converged fit")
    internal = _internal_basis(fit.spec)
    O = internal.ortho_rows(sample.y0)
    a = sample.c * sample.t * sample.w ** fit.j
    phi = fit.fitted
    A = (O.T * (a / phi ** 2)) @ O / sample.n
    try:
        cho = scipy.linalg.cho_factor((A + A.T) / 2.0)
    except scipy.linalg.LinAlgError as exc:
        raise NumericalError(
            f"singular influence weighting matrix (j={fit.j}, kappa={fit.kappa}); "
            f"condition number ~ {np.linalg.cond(A):.2e}"
        ) from exc
    # per-unit solve; the c weight belongs to sums over units, not to nu itself
    raw = scipy.linalg.cho_solve(cho, ((sample.t * sample.w ** fit.j / phi)[:, None] * O).T).T
    nu = (raw @ internal.inv_root) / internal.monomial_scale
    return InfluenceSet(j=fit.j, kappa=fit.kappa, nu=nu)


@dataclass(frozen=True, eq=False)
class MomentFit:
    """t-weighted least-squares fit of w^j on the polynomial basis in (y-k0).

    ``gamma`` are monomial coefficients of the fitted conditional moment
    m_j(y); derivatives at the window edge come straight from the expansion:
    D^r m_j(k0) = r! * gamma[r].
    """

    j: int
    kappa: int
    gamma: np.ndarray
    residuals: np.ndarray
    spec: BasisSpec

    def value(self, y) -> np.ndarray:
        return np.polynomial.polynomial.polyval(
            np.asarray(y, dtype=float) - self.spec.anchor, self.gamma)

    def derivative_at_anchor(self, r: int) -> float:
        if not 0 <= r <= self.kappa - 1:
            raise DataError(f"derivative order must be in 0..{self.kappa - 1}, got {r}")
        return float(math.factorial(r) * self.gamma[r])


def fit_conditional_moment(sample: EstimationSample, j: int, kappa: int) -> MomentFit:
    """Minimize (1/n) Σ t_i (w_i^j - z(y0_i)'γ)² over polynomial coefficients."""
    if kappa < 1:
        raise DataError(f"kappa must be >= 1, got {kappa}")
    spec = sample.basis_spec(kappa)
    internal = _internal_basis(spec)
    O = internal.ortho_rows(sample.y0)
    wt = sample.c * sample.t
    if not np.any(wt > 0):
        raise DataError("all regression weights vanish")
    target = sample.w ** j
    M = (O.T * wt) @ O / sample.n
    rhs = O.T @ (wt * target) / sample.n
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalError(
            f"weighted design is rank deficient (cond ~ {cond:.2e}); lower kappa")
    gamma_o = scipy.linalg.solve(M, rhs, assume_a="pos")
    gamma = np.atleast_1d(internal.ortho_to_monomial(gamma_o))
    resid = target - O @ gamma_o
    return MomentFit(j=j, kappa=kappa, gamma=gamma, residuals=resid, spec=spec)


def moment_fit_influence(sample: EstimationSample, fit: MomentFit) -> np.ndarray:
    """Per-unit influence of the moment-fit coefficients (monomial coords).

    psi_i = M^{-1} t_i z_i e_i with e_i the fit residual; the c-weighted
    sample mean is exactly zero by the normal equations.
    """
    internal = _internal_basis(fit.spec)
    O = internal.ortho_rows(sample.y0)
    wt = sample.c * sample.t
    M = (O.T * wt) @ O / sample.n
    raw = scipy.linalg.solve(M, ((sample.t * fit.residuals)[:, None] * O).T,
                             assume_a="pos").T
    return (raw @ internal.inv_root) / internal.monomial_scale


@dataclass(frozen=True, eq=False)
class QuantileFit:
    """Check-loss polynomial fit of the reverted window edge on (y-k0) powers."""

    tau: float
    kappa: int
    gamma: np.ndarray
    spec: BasisSpec

    def value(self, y) -> np.ndarray:
        return np.polynomial.polynomial.polyval(
            np.asarray(y, dtype=float) - self.spec.anchor, self.gamma)


def fit_conditional_quantile(sample: EstimationSample, tau: float,
                             kappa: int) -> QuantileFit:
    """tau-th conditional-quantile curve of R = w + k0 given y0, via linear programming.

    Minimizes Σ c_i t_i ρ_tau(R_i - z'γ) with the standard split of the
    residual into nonnegative parts; solved by HiGHS on the sparse
    formulation.  Fitting uses the orthonormal basis; coefficients are
    reported in monomial coordinates.
    """
    if not 0.0 < tau < 1.0:
        raise DataError(f"tau must be in (0,1), got {tau}")
    spec = sample.basis_spec(kappa)
    internal = _internal_basis(spec)
    O = internal.ortho_rows(sample.y0)
    n = O.shape[0]
    wt = sample.c * sample.t
    target = sample.w + spec.anchor
    cost = np.concatenate([np.zeros(kappa), tau * wt, (1.0 - tau) * wt])
    A_eq = scipy.sparse.hstack([
        scipy.sparse.csr_matrix(O),
        scipy.sparse.identity(n, format="csr"),
        -scipy.sparse.identity(n, format="csr"),
    ], format="csr")
    bounds = [(None, None)] * kappa + [(0.0, None)] * (2 * n)
    res = linprog(cost, A_eq=A_eq, b_eq=target, bounds=bounds, method="highs")
    if not res.success:
        raise NumericalError(f"quantile LP failed (tau={tau}): {res.message}")
    gamma = np.atleast_1d(internal.ortho_to_monomial(res.x[:kappa]))
    return QuantileFit(tau=tau, kappa=kappa, gamma=gamma, spec=spec)
