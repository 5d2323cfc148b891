"""Simulation designs and the Monte Carlo harness.

Two preference-scale distributions ship: a degree-7 polynomial density on
the interval where it stays nonnegative, and a Gaussian mixture (a
10-component illustrative default; arbitrary mixtures accepted from
config, with component variances floored at 0.1).  Both are trimmed at
configurable percentiles (1% / 95% default), renormalized, tabulated on a
10^4-point cumulative grid, and sampled by inverse-CDF with a seeded
generator — so draws are deterministic per (seed, replication) pair.

Observed outcomes follow the kinked choice model: units whose frictionless
choice lands inside the window are relocated by a symmetric triangular
friction draw on [k0, k1] with mode at the cutoff; everyone else passes
through exactly.

The harness evaluates rejection frequencies of a chosen estimator over a
hypothesis grid, parallelized across replications with per-replication
child seeds; failures inside a replication are logged and excluded, never
silently swallowed.  A skewed generalized error density evaluator is
included for users refitting their own mixture targets.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from numpy.polynomial import polynomial as P
from scipy.optimize import brentq
from scipy.special import gamma as gamma_fn
from scipy.special import ndtr
from scipy.stats import norm

from .errors import BunchingError, DataError, DomainError
from .inference import TestConfig, point_test_statistic, wald_joint_test
from .model import AugmentedIsoelastic, Isoelastic, PolicySpec, StructuralModel
from .pe_baseline import bin_histogram, pe_iv_estimate
from .sample import Sample

POLY7_COEFFS = 1e-3 * np.array([4.986, 25.223, 3.839, 14.006, -5.542,
                                0.612, -0.009, -0.001])
DEFAULT_POLICY_PARAMS = (0.0, 0.2, 2.0, 1.7, 2.3)
_TABLE_POINTS = 10_000
_VAR_FLOOR = 0.1


def weight_unit(x: np.ndarray) -> np.ndarray:
    """Unweighted moment: t(x) = 1."""
    return np.ones(np.shape(x))


def weight_exp(x: np.ndarray) -> np.ndarray:
    """Tilted moment t(x) = e^x, upweighting units with larger covariate."""
    return np.exp(np.asarray(x, dtype=float))


WEIGHT_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "unit": weight_unit,
    "exp_x": weight_exp,
}


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    """Gaussian mixture components; variances are floored at 0.1."""

    means: tuple[float, ...]
    sds: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        m, s, w = (np.asarray(v, dtype=float) for v in
                   (self.means, self.sds, self.weights))
        if not m.size or m.shape != s.shape or m.shape != w.shape:
            raise DataError("mixture means/sds/weights must be equal-length and nonempty")
        if np.any(s ** 2 < _VAR_FLOOR - 1e-12):
            raise DomainError(
                f"mixture component variances must be >= {_VAR_FLOOR}; "
                f"smallest is {np.min(s ** 2):.4f}")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise DataError(f"mixture weights must be positive and sum to 1, "
                            f"got sum {w.sum():.10f}")
        object.__setattr__(self, "means", tuple(m.tolist()))
        object.__setattr__(self, "sds", tuple(s.tolist()))
        object.__setattr__(self, "weights", tuple(w.tolist()))


DEFAULT_MIXTURE = MixtureSpec(
    means=tuple(1.2 + 0.2 * k for k in range(10)),
    sds=(0.34, 0.45, 0.34, 0.45, 0.34, 0.45, 0.34, 0.45, 0.34, 0.45),
    weights=tuple(w / 30.0 for w in (1, 2, 3, 4, 5, 5, 4, 3, 2, 1)),
)


@dataclass(frozen=True, eq=False)
class DgpConfig:
    """Full description of one simulation design."""

    kind: str = "Poly7"
    n: int = 20_000
    theta0: float = 0.5
    omega0: float = 0.0
    policy: Optional[PolicySpec] = None   # default: standard params on the trimmed support
    trim: tuple[float, float] = (0.01, 0.95)
    seed: int = 0
    mixture: Optional[MixtureSpec] = None

    def __post_init__(self) -> None:
        if self.kind not in ("Poly7", "GaussianMixture"):
            raise DataError(f"unknown dgp kind {self.kind!r}")
        if self.n < 1:
            raise DomainError(f"n must be >= 1, got {self.n}")
        lo, hi = self.trim
        if not 0.0 <= lo < hi <= 1.0:
            raise DomainError(f"trim percentiles must satisfy 0 <= lo < hi <= 1, got {self.trim}")
        if self.theta0 < 0:
            raise DomainError(f"theta0 must be nonnegative, got {self.theta0}")
        if self.omega0 != 0.0 and abs(self.omega0) >= self.theta0:
            raise DomainError(
                f"|omega0| must be below theta0, got ({self.theta0}, {self.omega0})")


@dataclass(frozen=True, eq=False)
class TrimmedDensity:
    """A percentile-trimmed, renormalized density with an inverse-CDF table."""

    q_lo: float
    q_hi: float
    mass: float
    grid: np.ndarray
    cdf_table: np.ndarray
    pdf_raw: Callable[[np.ndarray], np.ndarray]
    cdf_raw: Callable[[np.ndarray], np.ndarray]

    def pdf(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        inside = (y >= self.q_lo) & (y <= self.q_hi)
        return np.where(inside, self.pdf_raw(y) / self.mass, 0.0)

    def cdf(self, y) -> np.ndarray:
        y = np.clip(np.asarray(y, dtype=float), self.q_lo, self.q_hi)
        return (self.cdf_raw(y) - self.cdf_raw(np.asarray(self.q_lo))) / self.mass

    def ppf(self, u) -> np.ndarray:
        return np.interp(np.asarray(u, dtype=float), self.cdf_table, self.grid)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.ppf(rng.random(n))


def _build_trimmed(pdf_raw, cdf_raw, lo: float, hi: float,
                   trim: tuple[float, float]) -> TrimmedDensity:
    total_lo, total_hi = float(cdf_raw(np.asarray(lo))), float(cdf_raw(np.asarray(hi)))
    total = total_hi - total_lo
    if total <= 0:
        raise DomainError("density has no mass on the stated bracket")

    def quantile(p: float) -> float:
        if p <= 0.0:
            return lo
        if p >= 1.0:
            return hi
        target = total_lo + p * total
        return float(brentq(lambda y: float(cdf_raw(np.asarray(y))) - target,
                            lo, hi, xtol=1e-12))

    q_lo, q_hi = quantile(trim[0]), quantile(trim[1])
    mass = float(cdf_raw(np.asarray(q_hi)) - cdf_raw(np.asarray(q_lo)))
    grid = np.linspace(q_lo, q_hi, _TABLE_POINTS + 1)
    table = (cdf_raw(grid) - cdf_raw(np.asarray(q_lo))) / mass
    table = np.maximum.accumulate(np.clip(table, 0.0, 1.0))
    table[0], table[-1] = 0.0, 1.0
    return TrimmedDensity(q_lo=q_lo, q_hi=q_hi, mass=mass, grid=grid,
                          cdf_table=table, pdf_raw=pdf_raw, cdf_raw=cdf_raw)


def poly7_density(trim: tuple[float, float] = (0.01, 0.95)) -> TrimmedDensity:
    """The degree-7 polynomial design on [0, first positive root], trimmed.

    Raises at construction when the polynomial dips negative on the
    support (it does not, for the shipped coefficients).
    """
    roots = P.polyroots(POLY7_COEFFS)
    real_pos = sorted(r.real for r in roots
                      if abs(r.imag) < 1e-8 * (1.0 + abs(r.real)) and r.real > 1e-10)
    if not real_pos:
        raise DomainError("polynomial density has no positive root bounding its support")
    y_max = float(real_pos[0])
    check = P.polyval(np.linspace(0.0, y_max, 10_000), POLY7_COEFFS)
    if np.min(check) < -1e-12:
        raise DomainError(
            f"polynomial density is negative on its support (min {np.min(check):.3e})")
    anti = P.polyint(POLY7_COEFFS)
    return _build_trimmed(lambda y: P.polyval(y, POLY7_COEFFS),
                          lambda y: P.polyval(y, anti),
                          0.0, y_max, trim)


def mixture_density(mix: MixtureSpec,
                    trim: tuple[float, float] = (0.01, 0.95)) -> TrimmedDensity:
    """Trimmed Gaussian-mixture preference density (must stay positive)."""
    m = np.asarray(mix.means)
    s = np.asarray(mix.sds)
    w = np.asarray(mix.weights)

    def pdf_raw(y):
        y = np.asarray(y, dtype=float)
        z = (y[..., None] - m) / s
        return (w / s * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)).sum(axis=-1)

    def cdf_raw(y):
        y = np.asarray(y, dtype=float)
        return (w * ndtr((y[..., None] - m) / s)).sum(axis=-1)

    lo = float(np.min(m - 10 * s))
    hi = float(np.max(m + 10 * s))
    dens = _build_trimmed(pdf_raw, cdf_raw, lo, hi, trim)
    if dens.q_lo <= 0:
        raise DomainError(
            f"mixture places its trimmed support at nonpositive preference scales "
            f"(lower quantile {dens.q_lo:.4f}); shift the means or trim harder")
    return dens


def build_density(config: DgpConfig) -> TrimmedDensity:
    if config.kind == "Poly7":
        return poly7_density(config.trim)
    return mixture_density(config.mixture or DEFAULT_MIXTURE, config.trim)


def resolve_policy(config: DgpConfig,
                   density: Optional[TrimmedDensity] = None) -> PolicySpec:
    """The configured policy, or the standard parameters on the trimmed support."""
    if config.policy is not None:
        return config.policy
    density = density or build_density(config)
    tau0, tau1, k, k0, k1 = DEFAULT_POLICY_PARAMS
    return PolicySpec(tau0=tau0, tau1=tau1, k=k, k0=k0, k1=k1,
                      support_lo=density.q_lo, support_hi=density.q_hi)


# ---------------------------------------------------------------------------
# skewed generalized error density (target evaluator for mixture refits)
# ---------------------------------------------------------------------------

def sged_constants(k: float, lam: float) -> tuple[float, float, float]:
    """(theta, delta, C) normalizing the skewed GED to mean mu, variance sigma^2.

    Derived from the first two moments of the two-piece exponential-power
    kernel; at (k=2, lam=0) they collapse to the standard normal constants.
    """
    if k <= 0:
        raise DomainError(f"shape k must be positive, got {k}")
    if not -1.0 < lam < 1.0:
        raise DomainError(f"skewness lambda must be in (-1,1), got {lam}")
    g1 = gamma_fn(1.0 / k)
    g2 = gamma_fn(2.0 / k)
    g3 = gamma_fn(3.0 / k)
    S = (1.0 + 3.0 * lam * lam) * g3 / g1 - 4.0 * lam * lam * (g2 / g1) ** 2
    theta = 1.0 / math.sqrt(S)
    delta = -2.0 * lam * theta * g2 / g1
    C = k / (2.0 * theta * g1)
    return theta, delta, C


def sged_density(y, mu: float = 0.0, sigma: float = 1.0, k: float = 2.0,
                 lam: float = 0.0) -> np.ndarray:
    """Skewed generalized error density with mean mu and sd sigma."""
    if sigma <= 0:
        raise DomainError(f"sigma must be positive, got {sigma}")
    theta, delta, C = sged_constants(k, lam)
    y = np.asarray(y, dtype=float)
    u = y - mu + delta * sigma
    scale = (1.0 - lam * np.sign(u)) * theta * sigma
    return C / sigma * np.exp(-np.abs(u / scale) ** k)


# ---------------------------------------------------------------------------
# outcome generation
# ---------------------------------------------------------------------------

def _choice_model(policy: PolicySpec, theta0: float, omega0: float,
                  ) -> tuple[StructuralModel, object]:
    if omega0 == 0.0:
        return Isoelastic(policy), theta0
    return AugmentedIsoelastic(policy), (theta0, omega0)


def apply_kink_and_frictions(eta: np.ndarray, x: np.ndarray, theta0: float,
                             omega0: float, policy: PolicySpec, seed,
                             frictions: bool = True) -> np.ndarray:
    """Frictionless kinked choices, with window units scattered triangularly.

    Units whose choice lands in [k0, k1] are redrawn from the symmetric
    triangular density on the window with mode at the cutoff; everyone
    else passes through unchanged.  ``seed`` may be an integer or a
    Generator.
    """
    rng = np.random.default_rng(seed)
    model, theta = _choice_model(policy, theta0, omega0)
    y = np.array(model.actual_choice(x, eta, theta), dtype=float)
    if frictions:
        inside = (y >= policy.k0) & (y <= policy.k1)
        count = int(np.sum(inside))
        if count:
            y[inside] = rng.triangular(policy.k0, policy.k, policy.k1, size=count)
    return y


def sample_dgp1(n: int, config: DgpConfig, seed) -> np.ndarray:
    """Preference-scale draws from the trimmed polynomial design."""
    rng = np.random.default_rng(seed)
    return poly7_density(config.trim).sample(n, rng)


def simulate_dataset(config: DgpConfig, rep: Optional[int] = None,
                     frictions: bool = True) -> Sample:
    """One complete simulated dataset; child seed [seed, rep] when rep given."""
    rng = np.random.default_rng(config.seed if rep is None
                                else [config.seed, rep])
    density = build_density(config)
    policy = resolve_policy(config, density)
    eta = density.sample(config.n, rng)
    x = rng.uniform(-1.0, 1.0, config.n)
    y = apply_kink_and_frictions(eta, x, config.theta0, config.omega0, policy,
                                 rng, frictions=frictions)
    return Sample.from_arrays(y=y, x=x)


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class McResult:
    """Per-hypothesis rejection rates with failure accounting."""

    estimator: str
    theta: list
    reps: int
    reject_rate: np.ndarray
    mean_stat: np.ndarray
    fail_count: np.ndarray
    mean_chi_inv: np.ndarray
    runtime_seconds: float
    truth: tuple

    def to_frame(self) -> pd.DataFrame:
        theta_col = [t if np.isscalar(t) else str(tuple(np.atleast_1d(t)))
                     for t in self.theta]
        return pd.DataFrame({
            "theta": theta_col,
            "reps": self.reps,
            "reject_rate": self.reject_rate,
            "mean_stat": self.mean_stat,
            "fail_count": self.fail_count.astype(int),
        })

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False)

    def min_rate_at(self) -> Optional[float]:
        """Grid point with the smallest rejection rate (scalar grids only)."""
        if not all(np.isscalar(t) for t in self.theta):
            return None
        return float(self.theta[int(np.argmin(self.reject_rate))])

    def u_shape_ok(self, truth: Optional[float] = None) -> Optional[bool]:
        """Whether the rate dips at (a neighbor of) the true theta."""
        at = self.min_rate_at()
        if at is None:
            return None
        t0 = self.truth[0] if truth is None else truth
        grid = np.asarray([t for t in self.theta], dtype=float)
        step = np.min(np.diff(np.sort(grid))) if grid.size > 1 else 0.0
        return bool(abs(at - t0) <= step + 1e-12)


def _mc_replication(args) -> list[tuple]:
    """Evaluate every grid hypothesis on one simulated replication."""
    (config, estimator, grid, rep, test_config, pe_degree, pe_mesh,
     weight_names) = args
    data = simulate_dataset(config, rep=rep)
    policy = resolve_policy(config)
    out = []
    hist = None
    if estimator == "pe":
        lo, hi = _aligned_binning_support(policy, pe_mesh)
        hist = bin_histogram(data, pe_mesh, (lo, hi), (policy.k0, policy.k1))
    for th in grid:
        try:
            if estimator == "gps":
                model = (Isoelastic(policy) if np.isscalar(th)
                         else AugmentedIsoelastic(policy))
                res = point_test_statistic(data, model, th, test_config)
                out.append((True, res.reject, res.stat, res.chi_inv))
            elif estimator == "pe":
                est = pe_iv_estimate(hist, pe_degree, policy)
                if not np.isfinite(est.se_theta) or est.se_theta <= 0:
                    raise DataError("PE standard error unavailable")
                z = abs(est.theta_hat - th) / est.se_theta
                crit = norm.ppf(1.0 - test_config.alpha / 2.0)
                out.append((True, z > crit, z, float("nan")))
            elif estimator == "wald":
                model = (Isoelastic(policy) if np.isscalar(th)
                         else AugmentedIsoelastic(policy))
                fns = [WEIGHT_FUNCTIONS[nm] for nm in weight_names]
                W, df, rej, _ = wald_joint_test(data, model, th, fns, test_config)
                out.append((True, rej, W, float("nan")))
            else:
                raise DataError(f"unknown estimator {estimator!r}")
        except BunchingError as exc:
            out.append((False, False, float("nan"), float("nan")))
    return out


def _aligned_binning_support(policy: PolicySpec, mesh: float) -> tuple[float, float]:
    """Mesh-aligned cover of the support anchored at the window edges."""
    lo = policy.k0 - mesh * math.ceil((policy.k0 - policy.support_lo) / mesh - 1e-9)
    hi = policy.k1 + mesh * math.ceil((policy.support_hi - policy.k1) / mesh - 1e-9)
    return lo, hi


def run_power_curve(config: DgpConfig, estimator: str, theta_grid: Sequence,
                    reps: int, test_config: TestConfig, *,
                    pe_degree: int = 7, pe_mesh: float = 0.05,
                    weight_names: Sequence[str] = ("unit", "exp_x"),
                    workers: Optional[int] = None) -> McResult:
    """Rejection frequency of H0: theta = t for every t on the grid.

    Replications are farmed out to a process pool (size from the
    BUNCHING_WORKERS env var unless given); each replication evaluates all
    grid points on its own dataset, and failed evaluations are excluded
    from the rate with a per-theta count.
    """
    if reps < 1:
        raise DomainError(f"reps must be >= 1, got {reps}")
    if estimator not in ("gps", "pe", "wald"):
        raise DataError(f"estimator must be one of gps|pe|wald, got {estimator!r}")
    grid = list(theta_grid)
    if not grid:
        raise DataError("theta grid is empty")
    if workers is None:
        workers = int(os.environ.get("BUNCHING_WORKERS", os.cpu_count() or 1))
    args = [(config, estimator, grid, rep, test_config, pe_degree, pe_mesh,
             tuple(weight_names)) for rep in range(reps)]

    start = time.perf_counter()
    if workers > 1 and reps > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_mc_replication, args))
    else:
        rows = [_mc_replication(a) for a in args]
    elapsed = time.perf_counter() - start

    G = len(grid)
    ok = np.zeros(G)
    rej = np.zeros(G)
    stat_sum = np.zeros(G)
    chi_sum = np.zeros(G)
    chi_n = np.zeros(G)
    for row in rows:
        for g, (success, reject, stat, chi_inv) in enumerate(row):
            if not success:
                continue
            ok[g] += 1
            rej[g] += bool(reject)
            stat_sum[g] += stat
            if np.isfinite(chi_inv):
                chi_sum[g] += chi_inv
                chi_n[g] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        rate = np.where(ok > 0, rej / np.maximum(ok, 1), np.nan)
        mean_stat = np.where(ok > 0, stat_sum / np.maximum(ok, 1), np.nan)
        mean_chi = np.where(chi_n > 0, chi_sum / np.maximum(chi_n, 1), np.nan)
    truth = (config.theta0, config.omega0) if config.omega0 else (config.theta0,)
    return McResult(estimator=estimator, theta=grid, reps=reps,
                    reject_rate=rate, mean_stat=mean_stat,
                    fail_count=(reps - ok), mean_chi_inv=mean_chi,
                    runtime_seconds=elapsed, truth=truth)
