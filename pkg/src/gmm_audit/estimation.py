"""GMM criterion minimization and weighting strategies.

The criterion n * g_bar(psi)' W g_bar(psi) is a nonlinear least-squares form
in the residual sqrt(n) * chol(W)' g_bar(psi), so the workhorse optimizer is
damped Gauss-Newton with backtracking, falling back to a gradient step when
the normal equations are ill-conditioned.  Multistart over Latin-hypercube
draws guards against bad local minima; everything is deterministic per seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .moments import (
    Dataset,
    MomentModel,
    MomentStats,
    WeightMatrix,
    moment_stats,
)

__all__ = [
    "FitStrategy",
    "GmmFit",
    "NonConvergenceError",
    "minimize_criterion",
    "fit",
    "closed_form_linear",
]

DEFAULT_BOX = 10.0  # multistart box [-10, 10]^p when the model is unbounded


class NonConvergenceError(RuntimeError):
    """All optimizer starts failed to converge; carries the best iterate."""

    def __init__(self, message, best_psi=None, best_criterion=None):
        super().__init__(message)
        self.best_psi = best_psi
        self.best_criterion = best_criterion


@dataclass(frozen=True)
class FitStrategy:
    """How to choose the weighting matrix, plus optimizer settings.

    kind is one of ``fixed_weight``, ``two_step``, ``iterated``,
    ``diag_inverse``, ``identity_scaled``.
    """

    kind: str = "two_step"
    weight: Optional[WeightMatrix] = None       # fixed_weight
    scale: Optional[np.ndarray] = None          # identity_scaled
    max_rounds: int = 50                        # iterated
    round_tol: float = 1e-10                    # iterated
    first_step_weight: Optional[WeightMatrix] = None  # two_step / iterated
    multistart: int = 8
    max_iter: int = 200
    grad_tol: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        kinds = {"fixed_weight", "two_step", "iterated", "diag_inverse", "identity_scaled"}
        if self.kind not in kinds:
            raise ValueError(f"unknown strategy kind {self.kind!r}; valid: {sorted(kinds)}")
        if self.kind == "fixed_weight" and self.weight is None:
            raise ValueError("fixed_weight strategy requires a weight matrix")
        if self.kind == "identity_scaled":
            if self.scale is None:
                raise ValueError("identity_scaled strategy requires a scale vector")
            s = np.asarray(self.scale, dtype=float)
            if np.any(s <= 0):
                raise ValueError("scale vector must be strictly positive")
            object.__setattr__(self, "scale", s)
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


@dataclass(frozen=True)
class GmmFit:
    """A fitted GMM model: estimates, final weighting, and moment statistics."""

    psi_hat: np.ndarray
    theta_hat: float
    weight: WeightMatrix
    stats: MomentStats
    criterion: float
    converged: bool
    grad_norm: float
    rounds: int
    n: int
    weight_repaired: bool = False
    model: MomentModel = None
    data: Dataset = None

    @property
    def k(self):
        return self.stats.g_bar.shape[0]

    @property
    def p(self):
        return self.psi_hat.shape[0]


def _criterion_and_grad(model, data, W, psi):
    st = moment_stats(model, data, psi)
    f = float(data.n * st.g_bar @ W @ st.g_bar)
    grad = 2.0 * data.n * st.gamma_hat.T @ W @ st.g_bar
    return f, grad, st


def _gauss_newton(model, data, W, psi0, max_iter, grad_tol):
    """Damped Gauss-Newton on sqrt(n)*chol(W)'g_bar from a single start."""
    n = data.n
    psi = np.asarray(psi0, dtype=float).copy()
    f, grad, st = _criterion_and_grad(model, data, W, psi)
    converged = False
    for _ in range(max_iter):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= grad_tol * max(1.0, f):
            converged = True
            break
        # Normal equations Gamma'W Gamma step = Gamma'W g_bar; damp with a
        # ridge and fall back to steepest descent if that is still unusable.
        A = st.gamma_hat.T @ W @ st.gamma_hat
        b = st.gamma_hat.T @ W @ st.g_bar
        step = None
        damp = 0.0
        for _try in range(8):
            try:
                step = -np.linalg.solve(A + damp * np.eye(model.p), b)
            except np.linalg.LinAlgError:
                step = None
            if step is not None and np.all(np.isfinite(step)):
                break
            damp = 1e-10 * max(1.0, float(np.trace(A))) if damp == 0.0 else damp * 100.0
        if step is None or not np.all(np.isfinite(step)):
            step = -grad / max(1.0, float(np.linalg.norm(grad)))
        # Backtracking line search on the criterion.
        alpha, improved = 1.0, False
        for _ls in range(40):
            cand = _clip_to_bounds(model, psi + alpha * step)
            try:
                f_new, grad_new, st_new = _criterion_and_grad(model, data, W, cand)
            except Exception:
                f_new = np.inf
            if f_new <= f + 1e-4 * alpha * float(grad @ step):
                psi, f, grad, st = cand, f_new, grad_new, st_new
                improved = True
                break
            alpha *= 0.5
        if not improved:
            if float(np.linalg.norm(step)) * alpha <= 1e-12 * max(1.0, float(np.linalg.norm(psi))):
                converged = gnorm <= 1e-6 * max(1.0, f)
            break
        if float(np.linalg.norm(alpha * step)) <= 1e-12 * max(1.0, float(np.linalg.norm(psi))):
            converged = True
            break
    gnorm = float(np.linalg.norm(grad))
    if not converged and gnorm <= 1e-8 * max(1.0, f):
        converged = True
    return psi, f, gnorm, converged, st


def _clip_to_bounds(model, psi):
    if model.param_bounds is None:
        return psi
    return np.clip(psi, model.param_bounds[:, 0], model.param_bounds[:, 1])


def _latin_hypercube(rng, m, lo, hi):
    p = lo.shape[0]
    u = (rng.permuted(np.tile(np.arange(m), (p, 1)), axis=1).T + rng.random((m, p))) / m
    return lo + u * (hi - lo)


def _starting_points(model, init, multistart, seed):
    if model.param_bounds is not None:
        lo, hi = model.param_bounds[:, 0].copy(), model.param_bounds[:, 1].copy()
        lo[~np.isfinite(lo)] = -DEFAULT_BOX
        hi[~np.isfinite(hi)] = DEFAULT_BOX
    else:
        lo = np.full(model.p, -DEFAULT_BOX)
        hi = np.full(model.p, DEFAULT_BOX)
    starts = []
    if init is not None:
        starts.append(np.asarray(init, dtype=float).reshape(model.p))
    n_extra = max(0, multistart - len(starts))
    if n_extra:
        rng = np.random.default_rng(seed)
        starts.extend(_latin_hypercube(rng, n_extra, lo, hi))
    if not starts:
        starts.append(0.5 * (lo + hi))
    return starts


def minimize_criterion(
    model: MomentModel,
    data: Dataset,
    W: WeightMatrix,
    init=None,
    multistart=8,
    max_iter=200,
    grad_tol=1e-10,
    seed=0,
):
    """Minimize n * g_bar(psi)' W g_bar(psi).

    Runs damped Gauss-Newton from the user init plus Latin-hypercube draws
    and returns the best converged iterate as (psi_hat, criterion,
    diagnostics).  Deterministic given the seed.
    """
    model = model.bind(data)
    if init is not None and not model.in_bounds(init):
        raise ValueError("init outside param_bounds")
    Wm = W.values if isinstance(W, WeightMatrix) else np.asarray(W, dtype=float)
    if Wm.shape != (model.k, model.k):
        raise ValueError(f"weight matrix must be {model.k}x{model.k}")
    best = None
    results = []
    for s_ix, start in enumerate(_starting_points(model, init, multistart, seed)):
        try:
            psi, f, gnorm, conv, st = _gauss_newton(
                model, data, Wm, start, max_iter, grad_tol
            )
        except Exception:
            continue
        results.append((f, s_ix, psi, gnorm, conv, st))
    if not results:
        raise NonConvergenceError("criterion evaluation failed at every start")
    results.sort(key=lambda r: (r[0], r[1]))
    f, s_ix, psi, gnorm, conv, st = results[0]
    converged_any = any(r[4] for r in results)
    if not converged_any:
        raise NonConvergenceError(
            f"no start converged after {max_iter} iterations "
            f"(best criterion {f:.6g})",
            best_psi=psi,
            best_criterion=f,
        )
    if not conv:
        # best criterion came from a non-converged start; prefer the best
        # converged one only if it is not meaningfully worse
        for r in results:
            if r[4] and r[0] <= f * (1 + 1e-8) + 1e-12:
                f, s_ix, psi, gnorm, conv, st = r
                break
    diagnostics = {
        "grad_norm": gnorm,
        "converged": bool(conv),
        "start_index": int(s_ix),
        "n_starts": len(results),
        "stats": st,
    }
    return psi, f, diagnostics


def _inverse_weight(sigma, repair_cond=1e12):
    """Invert a covariance for use as a weight; ridge-repair if near singular."""
    k = sigma.shape[0]
    sym = 0.5 * (sigma + sigma.T)
    eigs = np.linalg.eigvalsh(sym)
    repaired = False
    if eigs[0] <= 0.0 or eigs[-1] / max(eigs[0], 1e-300) > repair_cond:
        lam = 1e-10 * float(np.trace(sym)) / k
        lam = max(lam, 1e-300)
        sym = sym + lam * np.eye(k)
        repaired = True
    W = np.linalg.inv(sym)
    return WeightMatrix(0.5 * (W + W.T)), repaired


def fit(model: MomentModel, data: Dataset, strategy: FitStrategy, init=None) -> GmmFit:
    """Fit the model under a weighting strategy.

    two_step: identity first round (or ``first_step_weight``), then
    W = inverse of the centered moment covariance at the first-round
    estimate.  iterated: repeat weight updates until the parameter change
    is below ``round_tol`` or ``max_rounds``.  diag_inverse: inverse of the
    diagonal of the identity-fit covariance.  identity_scaled:
    W = diag(scale)^2.
    """
    model = model.bind(data)
    opt = dict(
        multistart=strategy.multistart,
        max_iter=strategy.max_iter,
        grad_tol=strategy.grad_tol,
        seed=strategy.seed,
    )
    repaired = False
    rounds = 1

    if strategy.kind == "fixed_weight":
        W = strategy.weight
        psi, f, diag = minimize_criterion(model, data, W, init=init, **opt)
    elif strategy.kind == "identity_scaled":
        W = WeightMatrix(np.diag(np.asarray(strategy.scale, dtype=float) ** 2))
        psi, f, diag = minimize_criterion(model, data, W, init=init, **opt)
    elif strategy.kind == "diag_inverse":
        W0 = WeightMatrix.identity(model.k)
        psi0, _, d0 = minimize_criterion(model, data, W0, init=init, **opt)
        sigma = d0["stats"].sigma_hat
        dvals = np.diag(sigma).copy()
        if np.any(dvals <= 0) or dvals.max() / max(dvals.min(), 1e-300) > 1e12:
            dvals = dvals + 1e-10 * dvals.sum() / model.k
            repaired = True
        W = WeightMatrix(np.diag(1.0 / dvals))
        psi, f, diag = minimize_criterion(model, data, W, init=psi0, **opt)
        rounds = 2
    elif strategy.kind in ("two_step", "iterated"):
        W = strategy.first_step_weight or WeightMatrix.identity(model.k)
        psi, f, diag = minimize_criterion(model, data, W, init=init, **opt)
        max_rounds = 1 if strategy.kind == "two_step" else strategy.max_rounds
        for _ in range(max_rounds):
            sigma = diag["stats"].sigma_hat
            W, rep = _inverse_weight(sigma)
            repaired = repaired or rep
            psi_prev = psi
            psi, f, diag = minimize_criterion(model, data, W, init=psi, **opt)
            rounds += 1
            if strategy.kind == "iterated" and float(
                np.linalg.norm(psi - psi_prev)
            ) <= strategy.round_tol:
                break
    else:  # pragma: no cover - guarded in FitStrategy
        raise ValueError(strategy.kind)

    st = diag["stats"]
    return GmmFit(
        psi_hat=psi,
        theta_hat=model.theta(psi),
        weight=W,
        stats=st,
        criterion=f,
        converged=diag["converged"],
        grad_norm=diag["grad_norm"],
        rounds=rounds,
        n=data.n,
        weight_repaired=repaired,
        model=model,
        data=data,
    )


def closed_form_linear(A, B, W):
    """Exact minimizer for moments linear in psi, g_bar(psi) = A - B psi.

    Returns (B'WB)^{-1} B'W A; used as an oracle for the iterative path.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if B.ndim == 1:
        B = B[:, None]
    Wm = W.values if isinstance(W, WeightMatrix) else np.asarray(W, dtype=float)
    M = B.T @ Wm @ B
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e14:
        raise np.linalg.LinAlgError(
            f"B'WB is singular or near-singular (condition number {cond:.3e})"
        )
    return np.linalg.solve(M, B.T @ Wm @ A)
