"""Counterfactual correction: rebuild the pre-kink sample under a hypothesized theta.

Observations left of the window are already pre-kink choices and are kept
as-is.  Observations inside the window ``[k0, upper]`` are intended
bunchers whose pre-kink choice is not point-identified; they are dropped
from the density sample but their weighted share is recorded as the
bunching statistic B-hat.  Observations right of the window are post-kink
choices; their pre-kink twin is imputed through the model's reversion map
and kept only when it clears

    kbar1(theta) = max over observed bunchers (with positive weight) of
                   R(upper, x_i, theta),

the point beyond which no buncher's pre-kink choice can fall.  The
resulting estimation region is S(theta) = [lo, k0] ∪ (kbar1, hi].  Every
retained unit carries the window-width variable w_i = R(upper, x_i, theta)
- k0 >= 0 that scales the bunching-moment series.

The window's upper edge is the policy's k1 for kink designs and the
theta-dependent notch edge for notch designs; both come from the model's
``notch_window_upper`` so a single code path serves both.

Frequency weights (column ``c``) make a collapsed histogram behave exactly
like the expanded microdata: every per-unit sum is c-weighted and the
divisor is the total count.  Under a misspecified theta the imputed
pre-kink values can land beyond the nominal support ceiling; they are
retained (the region integral is unaffected) and only the retention rule
at kbar1 filters units.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .basis import BasisSpec
from .errors import DataError
from .model import StructuralModel

WeightFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class Sample:
    """Columnar microdata: running variable y, covariate x, weight t, count c.

    ``t`` is the bounded nonnegative observation weight T_i = t(X_i);
    ``c`` is a positive frequency weight (1 for genuine microdata, bin
    counts for grouped data; non-integer values are allowed so subsampled
    histograms can be rescaled).
    """

    y: np.ndarray
    x: np.ndarray
    t: np.ndarray
    c: np.ndarray

    @classmethod
    def from_arrays(cls, y, x=None, t=None, c=None) -> "Sample":
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if y.ndim != 1 or y.size == 0:
            raise DataError("y must be a nonempty 1-d array")
        if not np.all(np.isfinite(y)):
            bad = np.flatnonzero(~np.isfinite(y))
            raise DataError(f"y contains non-finite values at rows {bad[:10].tolist()}")

        def _col(v, name, default):
            if v is None:
                return np.full(y.shape, default)
            v = np.asarray(v, dtype=float)
            if v.shape != y.shape:
                raise DataError(f"{name} must match y's shape {y.shape}, got {v.shape}")
            if not np.all(np.isfinite(v)):
                raise DataError(f"{name} contains non-finite values")
            return v

        x = _col(x, "x", 0.0)
        t = _col(t, "t", 1.0)
        c = _col(c, "c", 1.0)
        if np.any(t < 0):
            raise DataError("weights t must be nonnegative")
        if np.any(c <= 0):
            raise DataError("frequency weights c must be positive")
        return cls(y=y, x=x, t=t, c=c)

    @property
    def n(self) -> float:
        """Effective sample size (sum of frequency weights)."""
        return float(self.c.sum())


def _resolve_weights(data: Sample, weight_fn: Optional[WeightFn]) -> np.ndarray:
    if weight_fn is None:
        return data.t
    t = np.asarray(weight_fn(data.x), dtype=float)
    t = np.broadcast_to(t, data.y.shape).astype(float)
    if np.any(t < 0) or not np.all(np.isfinite(t)):
        raise DataError("weight_fn must return finite nonnegative weights")
    return t


def bunching_share(data: Sample, window: tuple[float, float],
                   weight_fn: Optional[WeightFn] = None) -> float:
    """Weighted share of observations in the closed window [k0, k1]."""
    if data.y.size == 0:
        raise DataError("empty data")
    k0, k1 = window
    t = _resolve_weights(data, weight_fn)
    inside = (data.y >= k0) & (data.y <= k1)
    return float(np.sum(data.c * t * inside) / data.n)


@dataclass(frozen=True, eq=False)
class EstimationSample:
    """Corrected pre-kink sample at a hypothesized theta, plus window bookkeeping.

    Retained units (region S) live in ``y0, x, t, w, c``.  Full-length
    views ``t_all, c_all, in_window, keep_mask`` preserve the original
    order so per-unit influence vectors can be scattered back when a
    statistic mixes window and region contributions.
    """

    y0: np.ndarray
    x: np.ndarray
    t: np.ndarray
    w: np.ndarray
    c: np.ndarray
    kbar1: float
    window_lower: float
    window_upper: float
    support: tuple[float, float]
    B_hat: float
    n: float
    window_t: np.ndarray
    window_c: np.ndarray
    t_all: np.ndarray
    c_all: np.ndarray
    in_window: np.ndarray
    keep_mask: np.ndarray
    n_window: float
    n_dropped: float
    theta: tuple[float, ...]

    def basis_spec(self, k: int) -> BasisSpec:
        lo, hi = self.support
        return BasisSpec.from_window(k, lo, self.window_lower, self.kbar1, hi)

    @property
    def segments(self) -> tuple[tuple[float, float], ...]:
        lo, hi = self.support
        return ((lo, self.window_lower), (self.kbar1, hi))


def construct_estimation_sample(data: Sample, model: StructuralModel, theta,
                                weight_fn: Optional[WeightFn] = None,
                                kbar1_override: Optional[float] = None) -> EstimationSample:
    """Apply the correction at ``theta``; see the module docstring for the rules.

    Raises when the window is empty and no ``kbar1_override`` is given
    (the truncation point is then undefined), and when kbar1 reaches the
    support ceiling (the right-hand estimation segment would be empty).
    """
    policy = model.policy
    y, x, c = data.y, data.x, data.c
    t = _resolve_weights(data, weight_fn)
    n = data.n

    upper = np.broadcast_to(np.asarray(model.notch_window_upper(x, theta), dtype=float),
                            y.shape)
    in_window = (y >= policy.k0) & (y <= upper)
    left = y < policy.k0
    right = y > upper

    if kbar1_override is not None:
        kbar1 = float(kbar1_override)
    else:
        if not np.any(in_window):
            raise DataError(
                "no observations in the bunching window: kbar1(theta) is undefined; "
                "pass kbar1_override to proceed"
            )
        positive = in_window & (t > 0)
        if np.any(positive):
            pool = positive
        else:
            warnings.warn(
                "all window observations have zero weight; kbar1 falls back to the "
                "unweighted window maximum", stacklevel=2)
            pool = in_window
        kbar1 = float(np.max(model.reversion(upper[pool], x[pool], theta)))
    if kbar1 >= policy.support_hi:
        raise DataError(
            f"kbar1(theta) = {kbar1:.6g} reaches the support ceiling "
            f"{policy.support_hi:.6g}: right estimation segment is empty"
        )

    y0 = np.where(left, y, model.reversion(y, x, theta))
    keep = left | (right & (y0 > kbar1))
    w_all = model.reversion(upper, x, theta) - policy.k0

    B_hat = float(np.sum(c * t * in_window) / n)
    dropped = right & ~keep

    theta_tuple = tuple(np.atleast_1d(np.asarray(theta, dtype=float)).tolist())
    return EstimationSample(
        y0=y0[keep], x=x[keep], t=t[keep], w=w_all[keep], c=c[keep],
        kbar1=kbar1,
        window_lower=float(policy.k0),
        window_upper=float(np.max(upper)),
        support=(float(policy.support_lo), float(policy.support_hi)),
        B_hat=B_hat,
        n=n,
        window_t=t[in_window], window_c=c[in_window],
        t_all=t, c_all=c, in_window=in_window, keep_mask=keep,
        n_window=float(np.sum(c[in_window])),
        n_dropped=float(np.sum(c[dropped])),
        theta=theta_tuple,
    )
