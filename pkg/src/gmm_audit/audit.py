"""Researcher-degrees-of-freedom audit over weighting-matrix choice.

Given an over-identified fit, the J-statistic scales how far a weighting
choice can move the estimate at a bounded standard-error cost: estimates
with variance within (1 + tau^2) of the efficient one form an interval of
radius tau * sqrt(J) * se_eff around the efficient estimate.  This module
samples the eigenvalue-bounded weight class (plus constructed extremal
weights) to trace that set empirically, searches for adversarial
t-statistics, and computes the smallest critical value at which all
weighting choices' confidence sets still intersect.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import limitlab
from .estimation import FitStrategy, NonConvergenceError, fit, minimize_criterion
from .inference import conventional_cov, j_statistic, robust_cov
from .moments import Dataset, MomentModel, WeightMatrix

__all__ = [
    "Interval",
    "AuditReport",
    "WeightPoint",
    "attainable_interval",
    "sample_attainable",
    "adversarial_t",
    "min_max_t",
    "cs_intersection",
    "hausdorff",
    "run_audit",
]


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"interval endpoints out of order: [{self.lo}, {self.hi}]")

    @property
    def width(self):
        return self.hi - self.lo

    def contains(self, x, slack=0.0):
        return self.lo - slack <= x <= self.hi + slack

    def inflate(self, factor):
        mid = 0.5 * (self.lo + self.hi)
        half = 0.5 * self.width * factor
        return Interval(mid - half, mid + half)


@dataclass(frozen=True)
class WeightPoint:
    """One sampled weighting: its estimate, SE, and acceptance status."""

    theta_hat: float
    se_hat: float
    kappa_used: float
    accepted: bool
    source: str  # "random" | "extremal" | "efficient"


@dataclass(frozen=True)
class AuditReport:
    j_stat: float
    df: int
    theta_eff: float
    se_eff: float
    tau: float
    interval: Interval
    sampled_points: tuple
    n_failed_draws: int
    minmax_t: float
    minmax_theta0: float
    cs_critical: float
    cs_point: float

    def __post_init__(self):
        expected = attainable_interval(self.theta_eff, self.se_eff, self.j_stat, self.tau)
        if abs(expected.lo - self.interval.lo) > 1e-9 * max(1.0, abs(expected.lo)) or abs(
            expected.hi - self.interval.hi
        ) > 1e-9 * max(1.0, abs(expected.hi)):
            raise ValueError("interval inconsistent with (theta_eff, se_eff, J, tau)")


def attainable_interval(theta_eff, se_eff, J, tau) -> Interval:
    """[theta_eff +/- tau sqrt(J) se_eff], the attainable-estimate interval."""
    theta_eff, se_eff, J, tau = map(float, (theta_eff, se_eff, J, tau))
    if se_eff < 0 or J < 0 or tau < 0:
        raise ValueError("se_eff, J, tau must all be nonnegative")
    radius = tau * np.sqrt(J) * se_eff
    return Interval(theta_eff - radius, theta_eff + radius)


def hausdorff(A: Interval, B: Interval) -> float:
    """Hausdorff distance between two nonempty closed intervals."""
    return max(abs(A.lo - B.lo), abs(A.hi - B.hi))


def cs_intersection(points: Sequence[Tuple[float, float]], tol=1e-12):
    """Smallest critical value c at which all intervals [theta_i +/- c s_i] meet.

    Monotone bisection on c; returns (c_star, intersection_point) where the
    point is the (unique at c = c_star) common value.
    """
    pts = [(float(t), float(s)) for t, s in points]
    if not pts:
        raise ValueError("need at least one (theta, se) point")
    for _, s in pts:
        if s <= 0:
            raise ValueError("all se values must be positive")
    theta = np.array([t for t, _ in pts])
    se = np.array([s for _, s in pts])

    def gap(c):
        return float(np.max(theta - c * se) - np.min(theta + c * se))

    if gap(0.0) <= 0.0:
        # all degenerate intervals already meet
        return 0.0, float(np.max(theta))
    lo, hi = 0.0, 1.0
    while gap(hi) > 0.0:
        hi *= 2.0
        if hi > 1e18:
            raise RuntimeError("confidence sets never intersect")
    scale = max(1.0, float(np.max(np.abs(theta))), float(np.max(se)))
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if gap(mid) <= 0.0:
            hi = mid
        else:
            lo = mid
    c_star = hi
    point = 0.5 * (np.max(theta - c_star * se) + np.min(theta + c_star * se))
    return float(c_star), float(point)


def _sup_abs_t(theta0, points):
    theta = np.array([t for t, _ in points])
    se = np.array([s for _, s in points])
    tvals = np.abs(theta - theta0) / se
    ix = int(np.argmax(tvals))
    return float(tvals[ix]), ix


def _golden_min(f, lo, hi, tol=1e-12, max_iter=300):
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def _min_max_over_points(points, grid_size=201):
    """Grid scan plus golden-section refinement of theta0 -> sup |t|."""
    theta = np.array([t for t, _ in points])
    lo, hi = float(theta.min()), float(theta.max())
    span = max(hi - lo, 1e-8 * max(1.0, abs(lo)))
    lo -= 0.1 * span
    hi += 0.1 * span
    grid = np.linspace(lo, hi, grid_size)
    vals = [_sup_abs_t(t0, points)[0] for t0 in grid]
    ix = int(np.argmin(vals))
    a = grid[max(0, ix - 1)]
    b = grid[min(grid_size - 1, ix + 1)]
    theta0, value = _golden_min(lambda t0: _sup_abs_t(t0, points)[0], a, b)
    return float(value), float(theta0)


# --- sample-level weight search ---------------------------------------------


class _WeightCache:
    """Evaluated (theta, se, weight) triples shared across the theta0 search."""

    def __init__(self):
        self.points: List[WeightPoint] = []
        self.weights: List[Optional[WeightMatrix]] = []
        self.n_failed = 0

    def add(self, point, weight):
        self.points.append(point)
        self.weights.append(weight)

    def pairs(self):
        return [(p.theta_hat, p.se_hat) for p in self.points]


def _efficient_baseline(model, data, strategy, se_flavor):
    J, psi_j, sigma = j_statistic(model, data, strategy)
    eff = fit(model, data, strategy)
    cov = robust_cov(eff) if se_flavor == "robust" else conventional_cov(eff)
    return J, eff, cov


def _extremal_weights(model, data, eff, tau, taus_extra=(1.0, 4.0)):
    """Constructed endpoint weights from the plug-in limit problem.

    Maps (Gamma_hat, Sigma_hat, h_hat) through the limit experiment's
    constructive weights for directions +/- Sigma*_Z^{-1} Z, which attain
    the interval endpoints in the limit problem.
    """
    st = eff.stats
    h = eff.model.theta_grad(eff.psi_hat)
    try:
        problem = limitlab.LimitProblem(st.gamma_hat, st.sigma_hat, h)
    except (ValueError, np.linalg.LinAlgError):
        return []
    if problem.k == problem.p:
        return []
    can = limitlab.canonical_form(problem)
    Y = np.sqrt(eff.n) * st.g_bar
    Z = can.M @ Y
    J_plug = float(Z @ np.linalg.solve(can.Sigma_star_Z, Z))
    if J_plug <= 0:
        return []
    base_v = np.linalg.solve(can.Sigma_star_Z, Z)
    sigma_eff = np.sqrt(max(float(h @ np.linalg.inv(
        st.gamma_hat.T @ np.linalg.solve(st.sigma_hat, st.gamma_hat)) @ h), 0.0))
    out = []
    for t in sorted(set((tau,) + tuple(taus_extra))):
        if t <= 0:
            continue
        c = t * sigma_eff / np.sqrt(J_plug)
        for sign in (-1.0, 1.0):
            try:
                W = limitlab.weight_for_v(problem, can, sign * c * base_v)
            except (ValueError, np.linalg.LinAlgError):
                continue
            # normalize scale: criterion argmin and SEs are scale-invariant
            W = WeightMatrix(W.values / np.sqrt(W.eig_min * W.eig_max))
            out.append(W)
    return out


def _evaluate_weight(model, data, W, eff, var_cap, se_flavor, kappa):
    strat = FitStrategy(kind="fixed_weight", weight=W, multistart=1, seed=0)
    res = fit(model, data, strat, init=eff.psi_hat)
    if not res.converged:
        raise NonConvergenceError("weight-draw fit did not converge")
    cov = robust_cov(res) if se_flavor == "robust" else conventional_cov(res)
    accepted = cov.se_theta**2 <= var_cap
    return WeightPoint(
        theta_hat=res.theta_hat,
        se_hat=cov.se_theta,
        kappa_used=float(kappa),
        accepted=bool(accepted),
        source="",
    ), res


def build_weight_cache(
    model: MomentModel,
    data: Dataset,
    kappa,
    tau,
    n_draws,
    seed,
    se_flavor="conventional",
    strategy: Optional[FitStrategy] = None,
):
    """Fit the model under extremal plus random weights from the kappa class.

    Returns (cache, J, eff_fit, eff_cov).  Failed draws are counted and
    excluded rather than raised.
    """
    kappa = float(kappa)
    if kappa < 1.0:
        raise ValueError("kappa must be >= 1")
    model = model.bind(data)
    strategy = strategy or FitStrategy(kind="two_step")
    J, eff, eff_cov = _efficient_baseline(model, data, strategy, se_flavor)
    var_cap = (1.0 + float(tau) ** 2) * eff_cov.se_theta**2
    cache = _WeightCache()
    cache.add(
        WeightPoint(eff.theta_hat, eff_cov.se_theta, kappa, True, "efficient"),
        eff.weight,
    )
    # extremal constructions live outside W_1, which contains only I
    extremals = [] if kappa == 1.0 else _extremal_weights(model, data, eff, tau)
    for W in extremals:
        try:
            point, _ = _evaluate_weight(model, data, W, eff, var_cap, se_flavor, kappa)
        except (NonConvergenceError, np.linalg.LinAlgError, ValueError):
            cache.n_failed += 1
            continue
        cache.add(
            WeightPoint(point.theta_hat, point.se_hat, kappa, point.accepted, "extremal"),
            W,
        )
    if kappa == 1.0:
        draws = [WeightMatrix.identity(model.k)] if n_draws >= 1 else []
    else:
        rng = np.random.default_rng(seed)
        draws = [limitlab.random_weight(model.k, kappa, rng) for _ in range(n_draws)]
    for W in draws:
        try:
            point, _ = _evaluate_weight(model, data, W, eff, var_cap, se_flavor, kappa)
        except (NonConvergenceError, np.linalg.LinAlgError, ValueError):
            cache.n_failed += 1
            continue
        cache.add(
            WeightPoint(point.theta_hat, point.se_hat, kappa, point.accepted, "random"),
            W,
        )
    return cache, J, eff, eff_cov


def sample_attainable(
    model, data, kappa, tau, n_draws, seed, se_flavor="conventional",
):
    """Sample the attainable set: list of (theta_hat, se_hat, accepted).

    A draw is accepted when its delta-method variance is at most
    (1 + tau^2) times the efficient estimator's.
    """
    cache, _, _, _ = build_weight_cache(
        model, data, kappa, tau, n_draws, seed, se_flavor=se_flavor
    )
    return [(p.theta_hat, p.se_hat, p.accepted) for p in cache.points]


def adversarial_t(model, data, theta0, kappa, budget, seed, cache=None):
    """Best |t_W(theta0)| found over the cached weight set (a sup lower bound)."""
    if cache is None:
        cache, _, _, _ = build_weight_cache(
            model, data, kappa, tau=1.0, n_draws=budget, seed=seed
        )
    value, ix = _sup_abs_t(float(theta0), cache.pairs())
    return value, cache.weights[ix]


def min_max_t(model, data, kappa, budget, seed, cache=None):
    """inf over theta0 of the cached sup |t_W(theta0)|; approximately sqrt(J)."""
    if cache is None:
        cache, _, _, _ = build_weight_cache(
            model, data, kappa, tau=1.0, n_draws=budget, seed=seed
        )
    return _min_max_over_points(cache.pairs())


def run_audit(
    model: MomentModel,
    data: Dataset,
    kappa,
    tau,
    n_draws=200,
    seed=0,
    se_flavor="conventional",
    strategy: Optional[FitStrategy] = None,
) -> AuditReport:
    """Full audit at one (kappa, tau): interval, samples, min-max t, CS overlap."""
    cache, J, eff, eff_cov = build_weight_cache(
        model, data, kappa, tau, n_draws, seed,
        se_flavor=se_flavor, strategy=strategy,
    )
    interval = attainable_interval(eff.theta_hat, eff_cov.se_theta, J, tau)
    minmax_value, minmax_theta0 = _min_max_over_points(cache.pairs())
    c_star, point = cs_intersection(cache.pairs())
    return AuditReport(
        j_stat=J,
        df=eff.k - eff.p,
        theta_eff=eff.theta_hat,
        se_eff=eff_cov.se_theta,
        tau=float(tau),
        interval=interval,
        sampled_points=tuple(cache.points),
        n_failed_draws=cache.n_failed,
        minmax_t=minmax_value,
        minmax_theta0=minmax_theta0,
        cs_critical=c_star,
        cs_point=point,
    )
