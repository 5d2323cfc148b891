"""Envelope-based partial identification and the moment-inequality test.

When the counterfactual density is only bounded — piecewise-polynomial
lower/upper envelopes f_lo <= f <= f_up on the window with knots
t_0 < ... < t_{S-1} — the window mass is bracketed by truncated series over
knots and moment orders:

    B_side = sum_{s} sum_{j=1..ell} (1/j!) D^{j-1}[ M_j^{(s)}(y) df_s(y) ] at y = t_s,

where df_s is the jump of the envelope at knot s (the piece starting at
t_s minus the piece before it, with the zero function before t_0) and
M_j^{(s)}(y) expands the j-th moment of the shifted width (R - t_s) either
exactly (constant width w = v: ((v + t_0 - t_s)_+)^j) or binomially in the
fitted conditional moments m_r(y) of w^r.  All derivative evaluation is
exact polynomial calculus on coefficient arrays — no finite differences.

Two classical special cases ship in closed form: constant envelopes
proportional to the edge densities (net-of-tax power-map bounds on the kink
response) and the Lipschitz-density trichotomy on the log scale, which
returns an empty set, an interval, or a half-line for the elasticity
depending on how the bunching mass compares with two density thresholds.

The sampling counterparts of the bracketing inequalities feed a
quasi-likelihood-ratio statistic: minimize the (pseudo-inverse weighted)
quadratic form over the bias-relaxed constraint cone by enumerating the
four active sets of the 2-D KKT system; degrees of freedom equal the rank
of the binding rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import scipy.linalg
from numpy.polynomial import polynomial as P
from scipy.stats import chi2

from .errors import DataError, DomainError
from .model import PolicySpec, StructuralModel
from .sample import Sample, WeightFn, construct_estimation_sample
from .sieve import MomentFit, fit_conditional_moment, moment_fit_influence

__all__ = [
    "PiecewisePolynomial", "EnvelopePair", "envelope_bounds",
    "envelope_bound_functionals", "blomquist_bounds",
    "BertanhaResult", "bertanha_interval",
    "QlrInput", "QlrResult", "qlr_test", "estimate_qlr_input",
]


@dataclass(frozen=True, eq=False)
class PiecewisePolynomial:
    """One envelope side: sorted knots and per-piece coefficient arrays.

    ``coeffs[s]`` holds the polynomial active on [knots[s], knots[s+1])
    (the last piece extends to the domain's right end), as coefficients of
    powers of (y - anchor).  Left of the first knot the function is zero.
    """

    anchor: float
    knots: np.ndarray
    coeffs: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        knots = np.atleast_1d(np.asarray(self.knots, dtype=float))
        if knots.size == 0:
            raise DataError("envelope needs at least one knot")
        if np.any(np.diff(knots) <= 0):
            raise DataError("envelope knots must be strictly increasing")
        if len(self.coeffs) != knots.size:
            raise DataError(
                f"{knots.size} knots require {knots.size} pieces, got {len(self.coeffs)}")
        object.__setattr__(self, "knots", knots)
        object.__setattr__(
            self, "coeffs",
            tuple(np.atleast_1d(np.asarray(c, dtype=float)) for c in self.coeffs))

    def value(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = np.zeros(y.shape)
        for s, ts in enumerate(self.knots):
            hi = self.knots[s + 1] if s + 1 < self.knots.size else math.inf
            mask = (y >= ts) & (y < hi)
            if np.any(mask):
                out[mask] = P.polyval(y[mask] - self.anchor, self.coeffs[s])
        return out


@dataclass(frozen=True, eq=False)
class EnvelopePair:
    """Lower/upper density envelopes on the window [k0, kbar1]."""

    lower: PiecewisePolynomial
    upper: PiecewisePolynomial
    domain: tuple[float, float]

    def __post_init__(self) -> None:
        lo, hi = self.domain
        if not lo < hi:
            raise DataError(f"empty envelope domain {self.domain}")
        for side in (self.lower, self.upper):
            if side.knots[0] < lo - 1e-12 or side.knots[-1] > hi + 1e-12:
                raise DataError("envelope knots must lie inside the domain")
        grid = np.linspace(lo, hi, 801)
        gap = self.upper.value(grid) - self.lower.value(grid)
        if np.min(gap) < -1e-10:
            raise DataError(
                f"upper envelope dips below lower by {-np.min(gap):.3e} on the domain")

    @classmethod
    def constant(cls, low: float, high: float, domain: tuple[float, float],
                 anchor: Optional[float] = None) -> "EnvelopePair":
        a = domain[0] if anchor is None else anchor
        mk = lambda c: PiecewisePolynomial(anchor=a, knots=[domain[0]],
                                           coeffs=(np.array([c]),))
        return cls(lower=mk(low), upper=mk(high), domain=(float(domain[0]),
                                                          float(domain[1])))


MomentInput = Union[float, Sequence[MomentFit]]


def _knot_sum(side: PiecewisePolynomial, moments, ell: int) -> float:
    """The truncated bound series for one envelope side.

    ``moments`` is a constant width v (float) or the list of coefficient
    arrays [gamma_1, ..., gamma_ell] of the fitted conditional moments in
    powers of (y - anchor); the zeroth moment is the constant 1 built in.
    """
    t0 = float(side.knots[0])
    total = 0.0
    prev = np.array([0.0])
    constant_w = not isinstance(moments, (list, tuple))
    for s, ts in enumerate(side.knots):
        delta = P.polysub(side.coeffs[s], prev)
        prev = side.coeffs[s]
        shift = t0 - float(ts)
        at = float(ts) - side.anchor
        for j in range(1, ell + 1):
            if constant_w:
                mjs = max(float(moments) + shift, 0.0) ** j
                dcoef = P.polyder(delta, j - 1) if j > 1 else delta
                total += mjs * float(P.polyval(at, dcoef)) / math.factorial(j)
            else:
                mj = np.array([0.0])
                for r in range(0, j + 1):
                    coef = math.comb(j, r) * shift ** (j - r)
                    if coef != 0.0:
                        gamma_r = np.array([1.0]) if r == 0 else moments[r - 1]
                        mj = P.polyadd(mj, coef * gamma_r)
                prod = P.polymul(mj, delta)
                dcoef = P.polyder(prod, j - 1) if j > 1 else prod
                total += float(P.polyval(at, dcoef)) / math.factorial(j)
    return total


def _moment_coefficients(side: PiecewisePolynomial, fits: Sequence[MomentFit],
                         ell: int) -> list[np.ndarray]:
    out = []
    for r in range(1, ell + 1):
        fit = fits[r - 1]
        if fit.j != r:
            raise DataError(
                f"conditional-moment fits must be ordered by moment; "
                f"slot {r} has j={fit.j}")
        if abs(fit.spec.anchor - side.anchor) > 1e-9:
            raise DataError("moment fits and envelope use different expansion anchors")
        out.append(fit.gamma)
    return out


def envelope_bounds(envelope: EnvelopePair, cond_moments: MomentInput,
                    ell: int) -> tuple[float, float]:
    """(B_lower, B_upper): truncated bound series for both envelope sides.

    ``cond_moments`` is either a constant window width v (exact positive-
    part powers) or the list of fitted conditional moments [m_1, ..., m_L]
    with L >= ell.
    """
    if ell < 1:
        raise DomainError(f"ell must be >= 1, got {ell}")
    if isinstance(cond_moments, (list, tuple)):
        if len(cond_moments) < ell:
            raise DataError(
                f"need conditional moments up to order {ell}, got {len(cond_moments)}")
        return (_knot_sum(envelope.lower,
                          _moment_coefficients(envelope.lower, cond_moments, ell), ell),
                _knot_sum(envelope.upper,
                          _moment_coefficients(envelope.upper, cond_moments, ell), ell))
    return (_knot_sum(envelope.lower, cond_moments, ell),
            _knot_sum(envelope.upper, cond_moments, ell))


def envelope_bound_functionals(side: PiecewisePolynomial, ell: int, kappa: int,
                               ) -> tuple[float, list[np.ndarray]]:
    """Write the bound as const + sum_r a_r' gamma_r (linear in each moment fit).

    Exact by linearity of the knot sum in the moment coefficient arrays;
    extracted by unit-vector perturbation.  ``kappa`` is the coefficient
    length of the moment fits the functionals will be paired with.
    """
    def eval_with(gammas: list[np.ndarray]) -> float:
        return _knot_sum(side, gammas, ell)

    zero = [np.zeros(kappa) for _ in range(ell)]
    const = eval_with(zero)
    functionals = []
    for r in range(ell):
        a = np.zeros(kappa)
        for m in range(kappa):
            g = [np.zeros(kappa) for _ in range(ell)]
            g[r][m] = 1.0
            a[m] = eval_with(g) - const
        functionals.append(a)
    return const, functionals


def blomquist_bounds(fy_k0: float, fy_k1: float, policy: PolicySpec, theta: float,
                     sigma_lo: float = 1.0, sigma_hi: float = 1.0,
                     ) -> tuple[float, float]:
    """Closed-form bunching-mass bounds from edge densities and a level band.

    D_minus = f(k0) * (ratio^theta k1 - k0), D_plus = f(k1) * (k1 -
    ratio^{-theta} k0); the band [sigma_lo, sigma_hi] (around 1) scales the
    min/max into (lower, upper).
    """
    if fy_k0 <= 0 or fy_k1 <= 0:
        raise DomainError("edge density values must be positive")
    if not sigma_lo <= 1.0 <= sigma_hi:
        raise DomainError(
            f"need sigma_lo <= 1 <= sigma_hi, got ({sigma_lo}, {sigma_hi})")
    ratio = policy.net_of_tax_ratio
    d_minus = fy_k0 * (ratio ** theta * policy.k1 - policy.k0)
    d_plus = fy_k1 * (policy.k1 - ratio ** (-theta) * policy.k0)
    return (sigma_lo * min(d_minus, d_plus), sigma_hi * max(d_minus, d_plus))


@dataclass(frozen=True)
class BertanhaResult:
    """Identified set for theta in the Lipschitz-density notch/kink bound.

    case is "Empty", "Interval", or "HalfLine"; endpoints are None when not
    applicable.  No nonnegativity clamp is applied to the endpoints.
    """

    case: str
    theta_lower: Optional[float] = None
    theta_upper: Optional[float] = None


def bertanha_interval(fy_k0: float, fy_k1: float, k0: float, k1: float,
                      M: float, B: float, log_ratio: float) -> BertanhaResult:
    """Trichotomy for the elasticity under a slope bound M on the log-scale density.

    All inputs are on the log-income scale.  With f0, f1 the edge densities:
    B below |f0^2 - f1^2|/(2M) is infeasible (Empty); up to
    (f0^2 + f1^2)/(2M) both quadratic roots are real (Interval); beyond it
    the upper root disappears (HalfLine).
    """
    if M <= 0:
        raise DomainError(f"slope bound M must be positive, got {M}")
    if log_ratio <= 0:
        raise DomainError(f"log net-of-tax ratio must be positive, got {log_ratio}")
    if fy_k0 < 0 or fy_k1 < 0:
        raise DomainError("density values must be nonnegative")
    if B < 0:
        raise DomainError(f"bunching mass must be nonnegative, got {B}")
    f0, f1 = float(fy_k0), float(fy_k1)
    t_empty = abs(f0 * f0 - f1 * f1) / (2.0 * M)
    t_half = (f0 * f0 + f1 * f1) / (2.0 * M)

    def to_theta(v: float) -> float:
        return (v - (k1 - k0)) / log_ratio

    if B < t_empty:
        return BertanhaResult(case="Empty")
    mean_f = 0.5 * (f0 + f1)
    half_sq = 0.5 * (f0 * f0 + f1 * f1)
    v_lower = (-mean_f + math.sqrt(half_sq + M * B)) / (M / 2.0)
    if B < t_half:
        v_upper = (mean_f - math.sqrt(half_sq - M * B)) / (M / 2.0)
        return BertanhaResult(case="Interval",
                              theta_lower=to_theta(v_lower),
                              theta_upper=to_theta(v_upper))
    return BertanhaResult(case="HalfLine", theta_lower=to_theta(v_lower))


# ---------------------------------------------------------------------------
# moment-inequality QLR test
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QlrInput:
    """Estimated pieces of the two bracketing inequalities.

    mu1_hat = B_lower_hat - B_T_hat (should be <= bias[0] under the model),
    mu2_hat = B_upper_hat - B_T_hat (should be >= -bias[1]); V_hat is the
    2x2 covariance of the stacked influences; n the effective sample size.
    """

    mu1_hat: float
    mu2_hat: float
    V_hat: np.ndarray
    bias: tuple[float, float] = (0.0, 0.0)
    alpha: float = 0.05
    n: float = 1.0

    def __post_init__(self) -> None:
        V = np.asarray(self.V_hat, dtype=float)
        if V.shape != (2, 2):
            raise DataError(f"V_hat must be 2x2, got {V.shape}")
        if abs(V[0, 1] - V[1, 0]) > 1e-8 * (1.0 + np.abs(V).max()):
            raise DataError("V_hat must be symmetric")
        if np.linalg.eigvalsh((V + V.T) / 2.0)[0] < -1e-8 * (1.0 + np.abs(V).max()):
            raise DataError("V_hat must be positive semidefinite")
        if not 0.0 < self.alpha < 1.0:
            raise DomainError(f"alpha must be in (0,1), got {self.alpha}")
        if self.bias[0] < 0 or self.bias[1] < 0:
            raise DomainError("bias relaxations must be nonnegative")
        object.__setattr__(self, "V_hat", (V + V.T) / 2.0)


@dataclass(frozen=True, eq=False)
class QlrResult:
    stat: float
    df: int
    reject: bool
    cv: float
    nu_star: np.ndarray      # minimizer in the transformed (<= bias) coordinates
    binding: tuple[int, ...]


def qlr_test(inp: QlrInput) -> QlrResult:
    """Minimize n (m - nu)' G (m - nu) over {nu <= bias}, G the sign-adjusted
    pseudo-inverse of V_hat, by enumerating the four 2-D active sets."""
    A = np.diag([1.0, -1.0])
    m = np.array([inp.mu1_hat, -inp.mu2_hat])
    b = np.asarray(inp.bias, dtype=float)
    Vpinv = scipy.linalg.pinvh(inp.V_hat)
    G = A @ Vpinv @ A

    def form(nu: np.ndarray) -> float:
        d = m - nu
        return float(inp.n * d @ G @ d)

    candidates: list[np.ndarray] = []
    if np.all(m <= b + 1e-12):
        candidates.append(m.copy())
    # one constraint active, the other coordinate free (1-D quadratic minimum)
    for j, free in ((0, 1), (1, 0)):
        nu = np.empty(2)
        nu[j] = b[j]
        dj = m[j] - b[j]
        if G[free, free] > 0:
            d_free = -G[j, free] * dj / G[free, free]
        else:
            d_free = 0.0
        nu[free] = m[free] - d_free
        if nu[free] <= b[free] + 1e-12:
            candidates.append(nu)
    candidates.append(b.copy())

    values = [form(nu) for nu in candidates]
    best = int(np.argmin(values))
    nu_star = candidates[best]
    stat = max(values[best], 0.0)

    scale = 1.0 + np.abs(b) + np.abs(m)
    binding = tuple(j for j in range(2)
                    if abs(nu_star[j] - b[j]) <= 1e-9 * scale[j])
    if binding:
        rows = (A @ Vpinv)[list(binding), :]
        df = int(np.linalg.matrix_rank(rows))
    else:
        df = 0
    cv = float(chi2.ppf(1.0 - inp.alpha, df)) if df > 0 else 0.0
    reject = stat > cv
    return QlrResult(stat=stat, df=df, reject=reject, cv=cv,
                     nu_star=nu_star, binding=binding)


def estimate_qlr_input(data: Sample, model: StructuralModel, theta,
                       envelope: EnvelopePair, ell: int, kappa: int,
                       alpha: float = 0.05, bias: tuple[float, float] = (0.0, 0.0),
                       weight_fn: Optional[WeightFn] = None) -> QlrInput:
    """Assemble (mu1_hat, mu2_hat, V_hat) from the corrected sample.

    The envelope bounds are evaluated at fitted conditional moments and the
    weight-normalized window share B_T = E[t 1win]/E[t]; V_hat stacks the
    moment-fit influences (projected through the exact linear functionals
    of the bound series) against the share's influence.
    """
    sample = construct_estimation_sample(data, model, theta, weight_fn)
    fits = [fit_conditional_moment(sample, j, kappa) for j in range(1, ell + 1)]
    B_lo, B_up = envelope_bounds(envelope, fits, ell)

    t_bar = float(np.sum(sample.c_all * sample.t_all) / sample.n)
    if t_bar <= 0:
        raise DataError("mean weight is zero; normalized share undefined")
    B_T = sample.B_hat / t_bar
    mu1 = B_lo - B_T
    mu2 = B_up - B_T

    share_infl = (sample.t_all * sample.in_window - B_T * sample.t_all) / t_bar

    n_rows = data.y.shape[0]
    proj = {}
    for side_name, side in (("lo", envelope.lower), ("up", envelope.upper)):
        _, funcs = envelope_bound_functionals(side, ell, kappa)
        acc = np.zeros(sample.y0.shape)
        for r, fit in enumerate(fits):
            psi = moment_fit_influence(sample, fit)
            acc += psi @ funcs[r]
        full = np.zeros(n_rows)
        full[sample.keep_mask] = acc
        proj[side_name] = full

    s1 = proj["lo"] - share_infl
    s2 = proj["up"] - share_infl
    S = np.column_stack([s1, s2])
    V = (S.T * sample.c_all) @ S / sample.n
    return QlrInput(mu1_hat=float(mu1), mu2_hat=float(mu2), V_hat=V,
                    bias=bias, alpha=alpha, n=sample.n)
