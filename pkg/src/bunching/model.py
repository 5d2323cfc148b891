"""Structural choice models for kink and notch designs.

A policy introduces a two-bracket schedule: marginal rate ``tau0`` below the
cutoff ``k`` and ``tau1 > tau0`` above it.  Each unit carries a positive
unobserved preference scale ``eta`` and (optionally) a scalar covariate ``x``.
The isoelastic family solves the unit's choice problem in closed form:

    Y*(d) = (1 - tau_d)**theta * eta

where ``d`` indexes the bracket whose schedule is applied everywhere.  The
observed choice follows the usual three-event partition: units whose
unconstrained low-bracket choice stays below ``k`` keep it, units whose
high-bracket choice exceeds ``k`` take that, and everyone in between bunches
at the cutoff.

The *reversion* maps a high-bracket counterfactual choice back to the
low-bracket choice of the same unit; it is the workhorse of the
counterfactual sample correction.  For the isoelastic family it is the
closed-form power map ``y -> ((1-tau0)/(1-tau1))**theta(x) * y``.

Notch variants add a discrete liability ``notch`` for crossing the cutoff.
The upper edge of the affected region is no longer a known constant: it is
``K(theta) + eps_bar`` where ``K`` is the choice of the marginal unit
indifferent between staying at the cutoff and jumping past it.  That
indifference point is found by bracketed root finding on ``eta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.optimize import bisect

from .errors import DataError, DomainError, NumericalError

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True)
class PolicySpec:
    """Tax/kink policy parameters and the support of the pre-kink choice.

    ``k0 <= k <= k1`` is the excluded window inside which optimization
    frictions may relocate intended bunchers; ``[support_lo, support_hi]``
    bounds the support of the low-bracket counterfactual choice.
    """

    tau0: float
    tau1: float
    k: float
    k0: float
    k1: float
    support_lo: float
    support_hi: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.tau0 < 1.0 or not 0.0 <= self.tau1 < 1.0:
            raise DomainError(f"tax rates must lie in [0,1): got {self.tau0}, {self.tau1}")
        if self.tau1 <= self.tau0:
            raise DomainError(f"tau1 must exceed tau0: got tau0={self.tau0}, tau1={self.tau1}")
        if not (self.support_lo < self.k0 <= self.k <= self.k1 < self.support_hi):
            raise DomainError(
                "require support_lo < k0 <= k <= k1 < support_hi: got "
                f"({self.support_lo}, {self.k0}, {self.k}, {self.k1}, {self.support_hi})"
            )

    @property
    def net_of_tax_ratio(self) -> float:
        """(1 - tau0) / (1 - tau1), the ratio driving the reversion."""
        return (1.0 - self.tau0) / (1.0 - self.tau1)

    @property
    def log_ratio(self) -> float:
        return math.log(self.net_of_tax_ratio)


@dataclass(frozen=True)
class Heterogeneity:
    """A single unit's unobservables: positive preference scale and covariate."""

    eta: float
    x: float = 0.0

    def __post_init__(self) -> None:
        if not self.eta > 0:
            raise DomainError(f"eta must be positive, got {self.eta}")


def _require_positive_eta(eta: ArrayLike) -> np.ndarray:
    eta = np.asarray(eta, dtype=float)
    if np.any(eta <= 0) or not np.all(np.isfinite(eta)):
        raise DomainError("eta must be positive and finite")
    return eta


class StructuralModel:
    """Common plumbing for the isoelastic family.

    Subclasses define :meth:`exponent`, the covariate-dependent elasticity
    theta(x), and inherit counterfactual/actual choices and the reversion.
    Any object with the same methods can be passed to the estimation code;
    the three shipped models are the ones analysed in closed form.
    """

    kind: str = "base"
    theta_dim: int = 1

    def __init__(self, policy: PolicySpec):
        self.policy = policy

    # -- parameter admissibility -------------------------------------------------
    def validate_theta(self, theta) -> None:
        th = float(np.asarray(theta).reshape(-1)[0]) if np.ndim(theta) else float(theta)
        if not np.isfinite(th) or th < 0:
            raise DomainError(f"theta must be finite and nonnegative, got {theta!r}")

    def exponent(self, x: ArrayLike, theta) -> np.ndarray:
        """theta(x): the elasticity exponent applied to a unit with covariate x."""
        raise NotImplementedError

    # -- choices -----------------------------------------------------------------
    def counterfactual_choice(self, d: int, x: ArrayLike, eta: ArrayLike, theta) -> np.ndarray:
        """Y*(d) = (1 - tau_d)**theta(x) * eta."""
        if d not in (0, 1):
            raise DomainError(f"d must be 0 or 1, got {d}")
        eta = _require_positive_eta(eta)
        tau = self.policy.tau0 if d == 0 else self.policy.tau1
        return (1.0 - tau) ** self.exponent(x, theta) * eta

    def actual_choice(self, x: ArrayLike, eta: ArrayLike, theta) -> np.ndarray:
        """Observed frictionless choice: Y*(0), Y*(1), or the cutoff k."""
        y0 = self.counterfactual_choice(0, x, eta, theta)
        y1 = self.counterfactual_choice(1, x, eta, theta)
        k = self.policy.k
        return np.where(y0 < k, y0, np.where(y1 > k, y1, k))

    # -- reversion ---------------------------------------------------------------
    def reversion(self, y: ArrayLike, x: ArrayLike, theta) -> np.ndarray:
        """Map a high-bracket counterfactual choice to its low-bracket twin."""
        y = np.asarray(y, dtype=float)
        return self.policy.net_of_tax_ratio ** self.exponent(x, theta) * y

    def inverse_reversion(self, y0: ArrayLike, x: ArrayLike, theta) -> np.ndarray:
        y0 = np.asarray(y0, dtype=float)
        return self.policy.net_of_tax_ratio ** (-self.exponent(x, theta)) * y0

    def notch_window_upper(self, x: ArrayLike, theta) -> np.ndarray:
        """Upper edge of the affected window; constant k1 for kink designs."""
        self.validate_theta(theta)
        return np.broadcast_to(np.asarray(self.policy.k1, dtype=float), np.shape(x)).copy() \
            if np.ndim(x) else np.float64(self.policy.k1)


class Isoelastic(StructuralModel):
    """Kink design, homogeneous elasticity; ``theta`` is a nonnegative scalar."""

    kind = "Isoelastic"
    theta_dim = 1

    def exponent(self, x: ArrayLike, theta) -> np.ndarray:
        self.validate_theta(theta)
        return np.asarray(float(theta))


class AugmentedIsoelastic(StructuralModel):
    """Kink design with covariate-shifted elasticity theta(x) = theta0 + omega*x.

    ``theta`` is the pair (theta0, omega) restricted to theta0 > 0 and
    |omega| < theta0, which keeps the exponent positive for x in [-1, 1].
    """

    kind = "AugmentedIsoelastic"
    theta_dim = 2

    def validate_theta(self, theta) -> None:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size != 2:
            raise DomainError(f"augmented model needs theta=(theta0, omega), got {theta!r}")
        theta0, omega = theta
        if not np.isfinite(theta0) or theta0 <= 0:
            raise DomainError(f"theta0 must be positive, got {theta0}")
        if not np.isfinite(omega) or abs(omega) >= theta0:
            raise DomainError(f"|omega| < theta0 required, got theta0={theta0}, omega={omega}")

    def exponent(self, x: ArrayLike, theta) -> np.ndarray:
        self.validate_theta(theta)
        theta0, omega = np.asarray(theta, dtype=float).reshape(-1)
        return theta0 + omega * np.asarray(x, dtype=float)


class NotchIsoelastic(StructuralModel):
    """Notch design: crossing the cutoff costs a discrete liability ``notch``.

    The quasi-linear payoff at choice y for a unit (eta, theta) under
    bracket d is

        U_d(y) = (1 - tau_d)(y - k) - notch*1{d=1} - eta/(1+1/theta) * (y/eta)**(1+1/theta)

    whose unconstrained maximizer is the usual isoelastic Y*(d).  The actual
    choice keeps Y*(0) below the cutoff, jumps to Y*(1) only when the
    bracket-1 value strictly exceeds the bracket-0 value (ties break to the
    lower choice), and bunches at k otherwise.
    """

    kind = "NotchIsoelastic"
    theta_dim = 1

    def __init__(self, policy: PolicySpec, notch: float, eps_bar: float = 0.0):
        super().__init__(policy)
        if not notch > 0:
            raise DomainError(f"notch size must be positive, got {notch}")
        if eps_bar < 0:
            raise DomainError(f"eps_bar must be nonnegative, got {eps_bar}")
        self.notch = float(notch)
        self.eps_bar = float(eps_bar)

    def exponent(self, x: ArrayLike, theta) -> np.ndarray:
        self.validate_theta(theta)
        return np.asarray(float(theta))

    def validate_theta(self, theta) -> None:
        th = float(theta)
        if not np.isfinite(th) or th <= 0:
            raise DomainError(f"notch model needs theta > 0, got {theta!r}")

    def _utility(self, d: int, y: ArrayLike, eta: ArrayLike, theta: float) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        tau = self.policy.tau0 if d == 0 else self.policy.tau1
        power = 1.0 + 1.0 / float(theta)
        u = (1.0 - tau) * (y - self.policy.k) - eta / power * (y / eta) ** power
        if d == 1:
            u = u - self.notch
        return u

    def _value(self, d: int, eta: ArrayLike, theta: float) -> np.ndarray:
        """Value of committing to bracket d's side of the cutoff."""
        ystar = self.counterfactual_choice(d, 0.0, eta, theta)
        k = self.policy.k
        constrained = np.maximum(ystar, k) if d == 1 else np.minimum(ystar, k)
        return self._utility(d, constrained, eta, theta)

    def actual_choice(self, x: ArrayLike, eta: ArrayLike, theta) -> np.ndarray:
        y0 = self.counterfactual_choice(0, x, eta, theta)
        y1 = self.counterfactual_choice(1, x, eta, theta)
        jump = self._value(1, eta, theta) > self._value(0, eta, theta)
        return np.where(y0 < self.policy.k, y0, np.where(jump, y1, self.policy.k))

    def marginal_buncher_eta(self, theta) -> float:
        """eta of the unit indifferent between bunching and jumping the notch.

        Bracketed bisection on eta: at eta with Y*(1) = k the bracket-1 value
        trails by exactly the notch liability; the bracket grows to the
        support-implied ceiling (Y*(1) = support_hi).  The difference
        v(1) - v(0) is strictly increasing on the bracket (single crossing).
        """
        self.validate_theta(theta)
        theta = float(theta)
        lo = self.policy.k * (1.0 - self.policy.tau1) ** (-theta)
        hi = self.policy.support_hi * (1.0 - self.policy.tau1) ** (-theta)

        def gap(eta: float) -> float:
            return float(self._value(1, eta, theta) - self._value(0, eta, theta))

        g_lo, g_hi = gap(lo), gap(hi)
        if g_lo >= 0:
            # cannot happen for notch > 0; guards degenerate configurations
            return lo
        if g_hi < 0:
            raise NumericalError(
                "no indifference point below the support ceiling: "
                f"gap({lo:.6g})={g_lo:.3e}, gap({hi:.6g})={g_hi:.3e}; "
                "notch too large for this support"
            )
        return float(bisect(gap, lo, hi, xtol=1e-10))

    def notch_window_upper(self, x: ArrayLike, theta) -> np.ndarray:
        """K(theta) + eps_bar, with K the marginal buncher's bracket-1 choice."""
        eta_star = self.marginal_buncher_eta(theta)
        K = float(self.counterfactual_choice(1, 0.0, eta_star, theta))
        edge = max(K, self.policy.k) + self.eps_bar
        if np.ndim(x):
            return np.full(np.shape(x), edge)
        return np.float64(edge)


def make_model(kind: str, policy: PolicySpec, *, notch: float | None = None,
               eps_bar: float = 0.0) -> StructuralModel:
    """Construct a shipped model by name (CLI/config entry point)."""
    kind_norm = kind.replace("_", "").replace("-", "").lower()
    if kind_norm == "isoelastic":
        return Isoelastic(policy)
    if kind_norm == "augmentedisoelastic":
        return AugmentedIsoelastic(policy)
    if kind_norm == "notchisoelastic":
        if notch is None:
            raise DataError("NotchIsoelastic requires a notch size")
        return NotchIsoelastic(policy, notch=notch, eps_bar=eps_bar)
    raise DataError(f"unknown model kind: {kind!r}")
