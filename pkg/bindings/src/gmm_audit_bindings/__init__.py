"""Session-handle front end to gmm-audit for notebook use.

A SessionHandle pairs a bound model with a dataset and a seed; py_fit,
py_audit and py_j_statistic run the underlying toolkit on it and return
plain mappings with the exact numbers the toolkit produced.  No numeric
logic lives here: everything is delegated, so results are bit-identical to
the library and to the CLI reports for matching inputs and seeds.
"""

from __future__ import annotations

import numpy as np

import gmm_audit as ga

__all__ = [
    "SessionHandle",
    "HandleClosedError",
    "open_session",
    "py_fit",
    "py_audit",
    "py_j_statistic",
    "limit_lab",
    "fit",
    "audit",
    "j_statistic",
]

__version__ = "1.0.0"


class HandleClosedError(RuntimeError):
    """Raised when an operation is attempted on a closed session handle."""


class SessionHandle:
    """A loaded model + dataset pair with a seed; valid until close().

    Not shareable across threads; open one handle per thread of use.
    """

    def __init__(self, model, data, seed):
        self._model = model
        self._data = data
        self.seed = int(seed)
        self._closed = False

    @property
    def closed(self):
        return self._closed

    def close(self):
        self._closed = True
        self._model = None
        self._data = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    def _parts(self):
        if self._closed:
            raise HandleClosedError("session handle is closed")
        return self._model, self._data


def open_session(rows, column_names=None, model="mean_square_match",
                 params=None, seed=0) -> SessionHandle:
    """Bind a builtin model to in-memory rows and return a live handle."""
    data = ga.Dataset(np.asarray(rows, dtype=float), column_names)
    bound = ga.builtin_model(model, params or {}).bind(data)
    return SessionHandle(bound, data, seed)


def _strategy_from_spec(spec) -> ga.FitStrategy:
    if isinstance(spec, ga.FitStrategy):
        return spec
    if not isinstance(spec, dict):
        raise ValueError("strategy spec must be a mapping or FitStrategy")
    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind is None:
        raise ValueError("strategy spec needs a 'kind' field")
    weight = spec.pop("weight", None)
    if weight is not None and not isinstance(weight, ga.WeightMatrix):
        weight = ga.WeightMatrix(np.asarray(weight, dtype=float))
    return ga.FitStrategy(kind=kind, weight=weight, **spec)


def py_fit(handle: SessionHandle, strategy) -> dict:
    """Fit under a strategy spec; returns the GmmFit fields as a mapping."""
    model, data = handle._parts()
    res = ga.fit(model, data, _strategy_from_spec(strategy))
    return {
        "psi_hat": np.asarray(res.psi_hat),
        "theta_hat": float(res.theta_hat),
        "criterion": float(res.criterion),
        "converged": bool(res.converged),
        "grad_norm": float(res.grad_norm),
        "rounds": int(res.rounds),
        "n": int(res.n),
        "weight_repaired": bool(res.weight_repaired),
        "weight": np.asarray(res.weight.values),
        "se": {
            "conventional": float(ga.conventional_cov(res).se_theta),
            "robust": float(ga.robust_cov(res).se_theta),
        },
    }


def py_j_statistic(handle: SessionHandle) -> dict:
    """J statistic of the two-step fit and its degrees of freedom."""
    model, data = handle._parts()
    J, psi, sigma = ga.j_statistic(model, data)
    return {
        "J": float(J),
        "df": int(model.k - model.p),
        "psi_hat": np.asarray(psi),
    }


def py_audit(handle: SessionHandle, kappa, tau, n_draws=200) -> dict:
    """Weight audit at one (kappa, tau); same fields as the CLI audit block."""
    model, data = handle._parts()
    rep = ga.run_audit(
        model, data, kappa=kappa, tau=float(tau), n_draws=int(n_draws),
        seed=handle.seed,
    )
    return {
        "tau": rep.tau,
        "j_stat": rep.j_stat,
        "df": rep.df,
        "theta_eff": rep.theta_eff,
        "se_eff": rep.se_eff,
        "interval": [rep.interval.lo, rep.interval.hi],
        "sampled_points": [
            [p.theta_hat, p.se_hat, p.kappa_used, int(p.accepted), p.source]
            for p in rep.sampled_points
        ],
        "n_failed_draws": rep.n_failed_draws,
        "minmax_t": rep.minmax_t,
        "minmax_theta0": rep.minmax_theta0,
        "cs_critical": rep.cs_critical,
        "cs_point": rep.cs_point,
    }


def limit_lab(Gamma, Sigma, h, eta=None, phi=None, tau=(1.0,), n_random=200,
              kappa=1e6, seed=0) -> dict:
    """Exact limit-experiment run; same fields as the CLI limit_lab block."""
    problem = ga.LimitProblem(Gamma=Gamma, Sigma=Sigma, h=h, eta=eta, phi=phi)
    can = ga.canonical_form(problem)
    Y = ga.draw(problem, seed=seed)
    J = ga.j_analog(problem, Y)
    taus = [tau] if np.isscalar(tau) else list(tau)
    intervals = {}
    for t in taus:
        (lo, hi), _ = ga.exact_interval(problem, Y, float(t))
        intervals[f"{float(t):g}"] = [float(lo), float(hi)]
    points, theta_eff, sigma_eff, _ = ga.exact_audit_points(
        problem, Y, n_random=int(n_random), kappa=float(kappa), seed=seed
    )
    return {
        "k": problem.k,
        "p": problem.p,
        "Y": Y.tolist(),
        "J": float(J),
        "theta_eff": float(theta_eff),
        "sigma_eff": float(sigma_eff),
        "exact_intervals": intervals,
        "Sigma_star_Z": can.Sigma_star_Z.tolist(),
        "n_points": len(points),
        "points": points,
    }


fit = py_fit
audit = py_audit
j_statistic = py_j_statistic
