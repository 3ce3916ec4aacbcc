"""Exact Gaussian limit experiment for weight-matrix sensitivity.

Observes Y = -Gamma phi + eta + Sigma^{1/2} eps with eps standard normal,
targets theta = h'phi.  Weighted estimators phi_hat_W = -(G'WG)^{-1}G'W Y
reproduce the GMM limit distribution exactly, so the interval / t-statistic /
confidence-set characterizations of weight sensitivity hold here with
equality rather than asymptotically.  The canonical reparametrization
splits Y into the efficient estimate and an orthogonal overidentification
block Z whose norm is the J analog.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .moments import WeightMatrix

__all__ = [
    "LimitProblem",
    "CanonicalForm",
    "canonical_form",
    "draw",
    "phi_hat",
    "j_analog",
    "weight_for_direction",
    "weight_for_v",
    "exact_interval",
    "exact_audit_points",
    "random_weight",
    "random_weight_batch",
    "phi_hat_batch",
]


@dataclass(frozen=True)
class LimitProblem:
    """The Gaussian shift experiment (Gamma, Sigma, h, eta, phi)."""

    Gamma: np.ndarray
    Sigma: np.ndarray
    h: np.ndarray
    eta: np.ndarray
    phi: np.ndarray

    def __init__(self, Gamma, Sigma, h, eta=None, phi=None):
        Gamma = np.atleast_2d(np.asarray(Gamma, dtype=float))
        if Gamma.shape[0] < Gamma.shape[1] and Gamma.ndim == 2 and Gamma.shape[0] == 1:
            Gamma = Gamma.T
        k, p = Gamma.shape
        Sigma = np.asarray(Sigma, dtype=float).reshape(k, k)
        h = np.atleast_1d(np.asarray(h, dtype=float)).reshape(p)
        eta = np.zeros(k) if eta is None else np.asarray(eta, dtype=float).reshape(k)
        phi = np.zeros(p) if phi is None else np.asarray(phi, dtype=float).reshape(p)
        if np.linalg.matrix_rank(Gamma) < p:
            raise ValueError("Gamma must have full column rank")
        if np.max(np.abs(Sigma - Sigma.T)) > 1e-10 * max(1.0, np.max(np.abs(Sigma))):
            raise ValueError("Sigma must be symmetric")
        if np.linalg.eigvalsh(0.5 * (Sigma + Sigma.T))[0] <= 0:
            raise ValueError("Sigma must be positive definite")
        for name, val in (("Gamma", Gamma), ("Sigma", Sigma), ("h", h), ("eta", eta), ("phi", phi)):
            object.__setattr__(self, name, val)

    @property
    def k(self):
        return self.Gamma.shape[0]

    @property
    def p(self):
        return self.Gamma.shape[1]


@dataclass(frozen=True)
class CanonicalForm:
    """Reparametrization Q = [Lambda; M] making Q Sigma Q' block-diagonal."""

    Q: np.ndarray
    Lambda: np.ndarray
    M: np.ndarray
    Mtilde_rank_tol: float
    Sigma_star_phi: np.ndarray
    Sigma_star_Z: np.ndarray


def canonical_form(problem: LimitProblem, rank_tol=1e-12) -> CanonicalForm:
    """Construct the canonical reparametrization of the limit experiment.

    Lambda = -(G'S^{-1}G)^{-1}G'S^{-1} maps Y to the efficient estimate.
    M = Mtilde (I + G Lambda) annihilates the range of Gamma; Mtilde is the
    set of left singular vectors of (I + G Lambda) above ``rank_tol`` times
    the top singular value, which is deterministic and well-conditioned.
    """
    G, S = problem.Gamma, problem.Sigma
    k, p = problem.k, problem.p
    Sinv_G = np.linalg.solve(S, G)
    Lam = -np.linalg.solve(G.T @ Sinv_G, Sinv_G.T)           # (p, k)
    B = np.eye(k) + G @ Lam                                  # rank k - p
    if k == p:
        M = np.zeros((0, k))
    else:
        U, sv, _ = np.linalg.svd(B)
        keep = sv > rank_tol * sv[0]
        if int(keep.sum()) != k - p:
            raise ValueError(
                f"(I + Gamma Lambda) has rank {int(keep.sum())}, expected {k - p}; "
                "Gamma may be rank deficient within tolerance"
            )
        M = U[:, keep].T @ B                                 # (k-p, k)
    Q = np.vstack([Lam, M])
    return CanonicalForm(
        Q=Q,
        Lambda=Lam,
        M=M,
        Mtilde_rank_tol=rank_tol,
        Sigma_star_phi=Lam @ S @ Lam.T,
        Sigma_star_Z=M @ S @ M.T,
    )


def draw(problem: LimitProblem, seed) -> np.ndarray:
    """One draw Y = -Gamma phi + eta + chol(Sigma) eps, deterministic per seed."""
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(problem.k)
    L = np.linalg.cholesky(problem.Sigma)
    return -problem.Gamma @ problem.phi + problem.eta + L @ eps


def phi_hat(problem: LimitProblem, W, Y):
    """Weighted estimator, its theta, and the exact variance of theta.

    phi_est = -(G'WG)^{-1} G'W Y; var_theta uses the known Sigma, so it is
    exact rather than estimated.

    Numerically this goes through the direction q = W G (G'WG)^{-1} h,
    solved by whitened least squares and then projected back onto the exact
    constraint G'q = h.  The reported (theta, var) pair is then the exact
    value for a weight infinitesimally close to W, so the attainable-set
    geometry survives even badly conditioned W.
    """
    G, S, h = problem.Gamma, problem.Sigma, problem.h
    Wm = W.values if isinstance(W, WeightMatrix) else np.asarray(W, dtype=float)
    Y = np.asarray(Y, dtype=float)
    evals, evecs = np.linalg.eigh(0.5 * (Wm + Wm.T))
    if evals[0] <= 0.0 or evals[0] < 1e-16 * evals[-1]:
        raise np.linalg.LinAlgError(
            f"weight matrix numerically singular (eigenvalues span "
            f"[{evals[0]:.3e}, {evals[-1]:.3e}])"
        )
    L = evecs * np.sqrt(evals)                    # W = L L'
    Gt = L.T @ G                                  # cond(Gt) = sqrt(cond(G'WG))
    Qg, Rg = np.linalg.qr(Gt)
    if np.abs(np.diag(Rg)).min() < 1e-14 * np.abs(np.diag(Rg)).max():
        raise np.linalg.LinAlgError("Gamma'W Gamma is rank deficient")
    phi_est = -np.linalg.solve(Rg, Qg.T @ (L.T @ Y))
    x = np.linalg.solve(Rg, np.linalg.solve(Rg.T, h))   # (G'WG)^{-1} h
    q = Wm @ G @ x
    # restore G'q = h exactly; the residual is pure rounding
    q -= G @ np.linalg.solve(G.T @ G, G.T @ q - h)
    theta_est = -float(q @ Y)
    var_theta = float(q @ S @ q)
    return phi_est, theta_est, var_theta


def j_analog(problem: LimitProblem, Y, check_tol=1e-8):
    """J analog, computed two ways and cross-checked.

    (i) plug the efficient estimate into (Y + G u)' S^{-1} (Y + G u);
    (ii) Z'(Sigma*_Z)^{-1} Z with Z = M Y.  The two must agree.
    """
    Y = np.asarray(Y, dtype=float)
    if problem.k == problem.p:
        return 0.0
    phi_eff, _, _ = phi_hat(problem, np.linalg.inv(problem.Sigma), Y)
    r = Y + problem.Gamma @ phi_eff
    J_quad = float(r @ np.linalg.solve(problem.Sigma, r))
    can = canonical_form(problem)
    Z = can.M @ Y
    J_z = float(Z @ np.linalg.solve(can.Sigma_star_Z, Z))
    if abs(J_quad - J_z) > check_tol * max(1.0, abs(J_quad)):
        raise AssertionError(
            f"J computations disagree: quadratic {J_quad!r} vs Z-norm {J_z!r}"
        )
    return max(J_quad, 0.0)


def weight_for_direction(Gamma, h, q, tol=1e-10) -> WeightMatrix:
    """A positive-definite W with W G (G'WG)^{-1} h = q, for any q with G'q = h.

    Built as W = GG' + a(uw' + wu') + b ww' + P_V where u is the projection
    of q onto range(G), w = q - u, a = 1/(h'(G'G)^{-2}h) and P_V projects on
    the orthocomplement of range(G) + span(w).  The coefficient b on ww'
    must exceed a for positive definiteness (the cross term can otherwise
    push an eigenvalue to zero or below); b = 2a(1 + ||w||^2) + 1 keeps a
    strict margin while leaving the target identity untouched since w'G = 0.
    """
    G = np.atleast_2d(np.asarray(Gamma, dtype=float))
    if G.ndim == 2 and G.shape[0] == 1 and G.shape[1] > 1:
        G = G.T
    k, p = G.shape
    h = np.atleast_1d(np.asarray(h, dtype=float)).reshape(p)
    q = np.asarray(q, dtype=float).reshape(k)
    resid = G.T @ q - h
    if np.linalg.norm(resid) > tol * max(1.0, np.linalg.norm(h)):
        raise ValueError(
            f"direction q does not satisfy Gamma'q = h (residual norm "
            f"{np.linalg.norm(resid):.3e})"
        )
    GtG = G.T @ G
    u = G @ np.linalg.solve(GtG, h)
    w = q - u
    # Projection onto range(G)
    P_G = G @ np.linalg.solve(GtG, G.T)
    wnorm2 = float(w @ w)
    if wnorm2 <= (tol * max(1.0, float(np.linalg.norm(q)))) ** 2:
        # q already lies in range(G): GG' plus the full orthocomplement
        W = G @ G.T + (np.eye(k) - P_G)
        return WeightMatrix(W)
    a = 1.0 / float(h @ np.linalg.solve(GtG @ GtG, h))
    b = 2.0 * a * (1.0 + wnorm2) + 1.0
    P_w = np.outer(w, w) / wnorm2
    P_V = np.eye(k) - P_G - P_w
    W = G @ G.T + a * (np.outer(u, w) + np.outer(w, u)) + b * np.outer(w, w) + P_V
    return WeightMatrix(0.5 * (W + W.T))


def direction_for_v(problem: LimitProblem, can: CanonicalForm, v) -> np.ndarray:
    """The direction q (with Gamma'q = h) whose canonical coordinate is v.

    v_W = -(M S M')^{-1} M S q for q = W G (G'WG)^{-1} h, so the null-space
    component of q is pinned down by solving a (k-p)-dimensional system.
    The estimator with any W realizing q satisfies theta_hat = -q'Y and
    var(theta_hat) = q' Sigma q, which is the numerically stable way to
    evaluate the extreme weights.
    """
    G, S = problem.Gamma, problem.Sigma
    k, p = problem.k, problem.p
    v = np.asarray(v, dtype=float).reshape(k - p)
    u = G @ np.linalg.solve(G.T @ G, problem.h)
    # Orthonormal basis of the null space of Gamma'
    _, _, Vt = np.linalg.svd(G.T, full_matrices=True)
    Nb = Vt[p:].T                                            # (k, k-p)
    MS = can.M @ S
    rhs = -can.Sigma_star_Z @ v - MS @ u
    x = np.linalg.solve(MS @ Nb, rhs)
    return u + Nb @ x


def weight_for_v(problem: LimitProblem, can: CanonicalForm, v) -> WeightMatrix:
    """A positive-definite W whose canonical coordinate v_W equals v."""
    q = direction_for_v(problem, can, v)
    return weight_for_direction(problem.Gamma, problem.h, q)


def exact_interval(problem: LimitProblem, Y, tau):
    """The attainable-estimate interval and the weights attaining its ends.

    Every estimate with variance at most (1 + tau^2) times the efficient
    variance lies in [theta_eff +/- tau sqrt(J) sigma_eff], and the two
    constructive weights realizing v = +/- c (Sigma*_Z)^{-1} Z with
    c^2 = tau^2 sigma_eff^2 / J attain the endpoints exactly.
    """
    Y = np.asarray(Y, dtype=float)
    tau = float(tau)
    if tau < 0:
        raise ValueError("tau must be >= 0")
    G, S, h = problem.Gamma, problem.Sigma, problem.h
    Sinv = np.linalg.inv(S)
    _, theta_eff, var_eff = phi_hat(problem, Sinv, Y)
    sigma_eff = float(np.sqrt(var_eff))
    J = j_analog(problem, Y)
    radius = tau * np.sqrt(J) * sigma_eff
    interval = (theta_eff - radius, theta_eff + radius)
    # J at rounding scale means Y is in range(-Gamma): degenerate interval
    j_floor = 1e-12 * max(1.0, float(Y @ Sinv @ Y))
    if J <= j_floor or tau == 0.0 or problem.k == problem.p:
        W_eff = WeightMatrix(Sinv)
        return interval, (W_eff, W_eff)
    can = canonical_form(problem)
    Z = can.M @ Y
    c = tau * sigma_eff / np.sqrt(J)
    base_v = np.linalg.solve(can.Sigma_star_Z, Z)
    W_lo = weight_for_v(problem, can, -c * base_v)
    W_hi = weight_for_v(problem, can, c * base_v)
    for W, target in ((W_lo, interval[0]), (W_hi, interval[1])):
        _, theta_w, _ = phi_hat(problem, W, Y)
        if abs(theta_w - target) > 1e-8 * max(1.0, abs(target)):
            raise AssertionError(
                f"endpoint weight reproduces {theta_w!r}, expected {target!r}"
            )
    return interval, (W_lo, W_hi)


def random_weight(k, kappa, rng) -> WeightMatrix:
    """Random member of the eigenvalue-bounded class: random orthogonal frame
    with log-uniform eigenvalues on [1/kappa, kappa]."""
    A = rng.standard_normal((k, k))
    Qm, R = np.linalg.qr(A)
    Qm = Qm * np.sign(np.diag(R))
    lam = np.exp(rng.uniform(-np.log(kappa), np.log(kappa), size=k))
    return WeightMatrix(Qm @ np.diag(lam) @ Qm.T)


def random_weight_batch(k, kappa, rng, m) -> np.ndarray:
    """Stack of m random W_kappa members, one batched QR instead of a loop.

    Matches random_weight draw-for-draw only in distribution, not in stream
    position; use it where throughput matters and exact stream parity with
    the scalar sampler does not.
    """
    A = rng.standard_normal((m, k, k))
    Qm, R = np.linalg.qr(A)
    Qm = Qm * np.sign(np.einsum("...ii->...i", R))[:, None, :]
    lam = np.exp(rng.uniform(-np.log(kappa), np.log(kappa), size=(m, k)))
    return np.einsum("mik,mk,mjk->mij", Qm, lam, Qm)


def phi_hat_batch(problem: LimitProblem, Ws, Y):
    """theta and var(theta) under a stack of weights, batched phi_hat.

    Same constraint-projected direction evaluation as phi_hat: each (theta,
    var) pair is exact for some attainable direction q with Gamma'q = h, so
    interval containment is preserved regardless of conditioning.
    """
    G, S, h = problem.Gamma, problem.Sigma, problem.h
    Ws = np.asarray(Ws, dtype=float)
    Y = np.asarray(Y, dtype=float)
    x = np.linalg.solve(np.einsum("ji,mjl,lk->mik", G, Ws, G), h)
    q = np.einsum("mij,jk,mk->mi", Ws, G, x)
    resid = q @ G - h
    q -= np.einsum("ij,mj->mi", G @ np.linalg.inv(G.T @ G), resid)
    thetas = -q @ Y
    vars_ = np.einsum("mi,ij,mj->m", q, S, q)
    return thetas, vars_


def exact_audit_points(
    problem: LimitProblem,
    Y,
    taus=(0.25, 1.0, 4.0, 100.0, 1e5),
    n_random=200,
    kappa=1e6,
    seed=0,
):
    """(theta, sigma, source) triples over constructive plus random weights.

    The constructive weights at large tau approach the extreme t-statistics,
    so including tau up to 1e5 makes the min-max t and confidence-set
    intersection agree with sqrt(J) to near machine precision.
    """
    Y = np.asarray(Y, dtype=float)
    points = []
    Sinv = np.linalg.inv(problem.Sigma)
    _, theta_eff, var_eff = phi_hat(problem, Sinv, Y)
    points.append((theta_eff, float(np.sqrt(var_eff)), "efficient"))
    J = j_analog(problem, Y)
    if J > 0.0 and problem.k > problem.p:
        can = canonical_form(problem)
        Z = can.M @ Y
        base_v = np.linalg.solve(can.Sigma_star_Z, Z)
        for tau in taus:
            c = float(tau) * np.sqrt(var_eff) / np.sqrt(J)
            for sign in (-1.0, 1.0):
                q = direction_for_v(problem, can, sign * c * base_v)
                th = -float(q @ Y)
                var = float(q @ problem.Sigma @ q)
                points.append((th, float(np.sqrt(var)), "extremal"))
    rng = np.random.default_rng(seed)
    for _ in range(n_random):
        W = random_weight(problem.k, kappa, rng)
        _, th, var = phi_hat(problem, W, Y)
        points.append((th, float(np.sqrt(var)), "random"))
    return points, theta_eff, float(np.sqrt(var_eff)), J
