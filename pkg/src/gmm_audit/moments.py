"""Moment-condition models, datasets, and sample moment statistics.

The core objects here are deliberately small: a :class:`MomentModel` wraps a
moment function g(x, psi) together with its dimensions and the target map
theta = vartheta(psi); a :class:`Dataset` is a validated numeric matrix; and
:func:`moment_stats` computes the sample quantities (g_bar, Gamma_hat,
Sigma_hat) that everything downstream consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Dataset",
    "MomentModel",
    "MomentStats",
    "WeightMatrix",
    "WeightCheckReport",
    "MomentEvaluationError",
    "ModelConfigError",
    "moment_stats",
    "check_weight",
    "builtin_model",
    "builtin_model_names",
    "fd_step",
]

# Central-difference step for first derivatives: cbrt(eps) * max(1, |x|).
_FD_BASE = float(np.finfo(float).eps) ** (1.0 / 3.0)


def fd_step(x):
    """Per-coordinate central-difference step cbrt(eps)*max(1, |x|)."""
    return _FD_BASE * np.maximum(1.0, np.abs(x))


class MomentEvaluationError(ValueError):
    """Raised when the moment function produces non-finite values."""


class ModelConfigError(ValueError):
    """Raised for invalid model registry requests or column bindings."""


@dataclass(frozen=True)
class Dataset:
    """A fixed-width numeric sample.

    Parameters
    ----------
    rows : (n, d) array
        One observation per row.  All entries must be finite.
    column_names : sequence of str
        Labels for the d columns.
    """

    rows: np.ndarray
    column_names: tuple

    def __init__(self, rows, column_names=None):
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.ndim != 2 or rows.shape[0] < 1:
            raise ValueError("dataset must contain at least one row")
        if not np.all(np.isfinite(rows)):
            bad = np.argwhere(~np.isfinite(rows))[0]
            raise ValueError(
                f"non-finite value at row {bad[0]}, column {bad[1]}"
            )
        if column_names is None:
            column_names = tuple(f"x{j}" for j in range(rows.shape[1]))
        column_names = tuple(str(c) for c in column_names)
        if len(column_names) != rows.shape[1]:
            raise ValueError("column_names length must match row width")
        rows = rows.copy()
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "column_names", column_names)

    @property
    def n(self):
        return self.rows.shape[0]

    @property
    def d(self):
        return self.rows.shape[1]

    def column_index(self, name):
        try:
            return self.column_names.index(name)
        except ValueError:
            raise ModelConfigError(
                f"column {name!r} not in dataset columns {self.column_names}"
            ) from None


@dataclass(frozen=True)
class MomentModel:
    """A moment-condition model E[g(X, psi)] = 0 with target theta = vartheta(psi).

    Parameters
    ----------
    k, p : int
        Moment and parameter dimensions, k >= p >= 1.
    g : callable
        ``g(row, psi) -> (k,)`` moment value at one observation.
    jacobian : callable, optional
        ``jacobian(row, psi) -> (k, p)`` analytic derivative of g in psi.
        Central finite differences are used when absent.
    vartheta : callable, optional
        ``vartheta(psi) -> float`` target map; defaults to the first
        coordinate of psi.
    h_grad : callable, optional
        ``h_grad(psi) -> (p,)`` gradient of vartheta; finite differences
        when absent.
    param_bounds : (p, 2) array, optional
        Box constraints per coordinate.
    g_batch, jacobian_batch : callable, optional
        Vectorized fast paths, ``g_batch(rows, psi) -> (n, k)`` and
        ``jacobian_batch(rows, psi) -> (n, k, p)``.  Must agree with the
        row-wise versions; used when present.
    column_roles : dict, optional
        Dataset column names the model needs, resolved by :meth:`bind`.
    """

    k: int
    p: int
    g: Callable
    jacobian: Optional[Callable] = None
    vartheta: Optional[Callable] = None
    h_grad: Optional[Callable] = None
    param_bounds: Optional[np.ndarray] = None
    g_batch: Optional[Callable] = None
    jacobian_batch: Optional[Callable] = None
    column_roles: Optional[dict] = None
    name: str = "custom"

    def __post_init__(self):
        if not (self.k >= self.p >= 1):
            raise ValueError(f"need k >= p >= 1, got k={self.k}, p={self.p}")
        if self.param_bounds is not None:
            b = np.asarray(self.param_bounds, dtype=float).reshape(self.p, 2)
            object.__setattr__(self, "param_bounds", b)

    def bind(self, data: Dataset) -> "MomentModel":
        """Resolve any named column roles against a dataset; no-op otherwise."""
        return self

    def theta(self, psi):
        psi = np.asarray(psi, dtype=float)
        if self.vartheta is None:
            return float(psi[0])
        return float(self.vartheta(psi))

    def theta_grad(self, psi):
        psi = np.asarray(psi, dtype=float)
        if self.h_grad is not None:
            return np.asarray(self.h_grad(psi), dtype=float).reshape(self.p)
        if self.vartheta is None:
            h = np.zeros(self.p)
            h[0] = 1.0
            return h
        h = np.empty(self.p)
        step = fd_step(psi)
        for j in range(self.p):
            up, dn = psi.copy(), psi.copy()
            up[j] += step[j]
            dn[j] -= step[j]
            h[j] = (self.vartheta(up) - self.vartheta(dn)) / (2.0 * step[j])
        return h

    def in_bounds(self, psi):
        if self.param_bounds is None:
            return True
        psi = np.asarray(psi, dtype=float)
        return bool(
            np.all(psi >= self.param_bounds[:, 0])
            and np.all(psi <= self.param_bounds[:, 1])
        )

    def moments(self, data: Dataset, psi) -> np.ndarray:
        """Evaluate g at every observation, returning an (n, k) matrix."""
        psi = np.asarray(psi, dtype=float).reshape(self.p)
        if self.g_batch is not None:
            G = np.asarray(self.g_batch(data.rows, psi), dtype=float)
            G = G.reshape(data.n, self.k)
        else:
            G = np.empty((data.n, self.k))
            for i in range(data.n):
                G[i] = np.asarray(self.g(data.rows[i], psi), dtype=float)
        if not np.all(np.isfinite(G)):
            bad_row = int(np.argwhere(~np.isfinite(G))[0][0])
            raise MomentEvaluationError(
                f"non-finite moment value at observation {bad_row}"
            )
        return G

    def moment_jacobians(self, data: Dataset, psi) -> np.ndarray:
        """Per-observation Jacobians as an (n, k, p) array (analytic or FD)."""
        psi = np.asarray(psi, dtype=float).reshape(self.p)
        if self.jacobian_batch is not None:
            D = np.asarray(self.jacobian_batch(data.rows, psi), dtype=float)
            return D.reshape(data.n, self.k, self.p)
        if self.jacobian is not None:
            D = np.empty((data.n, self.k, self.p))
            for i in range(data.n):
                D[i] = np.asarray(self.jacobian(data.rows[i], psi), dtype=float)
            return D
        D = np.empty((data.n, self.k, self.p))
        step = fd_step(psi)
        for j in range(self.p):
            up, dn = psi.copy(), psi.copy()
            up[j] += step[j]
            dn[j] -= step[j]
            D[:, :, j] = (self.moments(data, up) - self.moments(data, dn)) / (
                2.0 * step[j]
            )
        if not np.all(np.isfinite(D)):
            bad_row = int(np.argwhere(~np.isfinite(D))[0][0])
            raise MomentEvaluationError(
                f"non-finite moment Jacobian at observation {bad_row}"
            )
        return D


@dataclass(frozen=True)
class MomentStats:
    """Sample moment statistics at a parameter value.

    g_bar is the sample mean of g, gamma_hat the sample mean Jacobian and
    sigma_hat the centered covariance (1/n) sum (g_i - g_bar)(g_i - g_bar)'.
    """

    g_bar: np.ndarray
    gamma_hat: np.ndarray
    sigma_hat: np.ndarray

    def __post_init__(self):
        k = self.g_bar.shape[0]
        if self.sigma_hat.shape != (k, k):
            raise ValueError("sigma_hat dimensions inconsistent with g_bar")
        if self.gamma_hat.shape[0] != k:
            raise ValueError("gamma_hat dimensions inconsistent with g_bar")


@dataclass(frozen=True)
class WeightMatrix:
    """A symmetric positive-definite weighting matrix with cached eigen-range."""

    values: np.ndarray
    eig_min: float
    eig_max: float

    def __init__(self, values):
        values = np.asarray(values, dtype=float)
        _require_symmetric(values)
        values = 0.5 * (values + values.T)
        eigs = np.linalg.eigvalsh(values)
        if eigs[0] <= 0.0:
            raise ValueError(
                f"weight matrix not positive definite (min eigenvalue {eigs[0]:.3e})"
            )
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "eig_min", float(eigs[0]))
        object.__setattr__(self, "eig_max", float(eigs[-1]))

    @property
    def k(self):
        return self.values.shape[0]

    @classmethod
    def identity(cls, k):
        return cls(np.eye(k))


@dataclass(frozen=True)
class WeightCheckReport:
    """Outcome of an eigenvalue-bound check that failed."""

    kappa: float
    eig_min: float
    eig_max: float
    lower_violated: bool
    upper_violated: bool

    def __str__(self):
        parts = []
        if self.lower_violated:
            parts.append(
                f"min eigenvalue {self.eig_min:.6g} below 1/kappa = {1.0 / self.kappa:.6g}"
            )
        if self.upper_violated:
            parts.append(
                f"max eigenvalue {self.eig_max:.6g} above kappa = {self.kappa:.6g}"
            )
        return "; ".join(parts) if parts else "no violation"


def _require_symmetric(W, rel_tol=1e-12):
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError("weight matrix must be square")
    scale = max(1.0, float(np.max(np.abs(W))))
    asym = float(np.max(np.abs(W - W.T)))
    if asym > rel_tol * scale:
        raise ValueError(
            f"matrix is not symmetric (relative asymmetry {asym / scale:.3e})"
        )
    return W


def moment_stats(model: MomentModel, data: Dataset, psi) -> MomentStats:
    """Sample moment mean, Jacobian, and centered covariance at psi.

    gamma_hat uses the analytic Jacobian when the model supplies one and
    central finite differences otherwise.  sigma_hat divides by n, matching
    the asymptotic objects the downstream covariance formulas target.
    """
    model = model.bind(data)
    psi = np.asarray(psi, dtype=float).reshape(model.p)
    if not model.in_bounds(psi):
        raise ValueError("psi outside param_bounds")
    G = model.moments(data, psi)
    g_bar = G.mean(axis=0)
    centered = G - g_bar
    sigma_hat = centered.T @ centered / data.n
    if model.jacobian is not None or model.jacobian_batch is not None:
        gamma_hat = model.moment_jacobians(data, psi).mean(axis=0)
    else:
        gamma_hat = np.empty((model.k, model.p))
        step = fd_step(psi)
        for j in range(model.p):
            up, dn = psi.copy(), psi.copy()
            up[j] += step[j]
            dn[j] -= step[j]
            g_up = model.moments(data, up).mean(axis=0)
            g_dn = model.moments(data, dn).mean(axis=0)
            gamma_hat[:, j] = (g_up - g_dn) / (2.0 * step[j])
    return MomentStats(g_bar=g_bar, gamma_hat=gamma_hat, sigma_hat=sigma_hat)


def check_weight(W, kappa):
    """Check W against the eigenvalue-bounded class with parameter kappa.

    Returns a :class:`WeightMatrix` when W is symmetric with eigenvalues in
    [1/kappa - tol, kappa + tol] (tol = 1e-10 * kappa), otherwise a
    :class:`WeightCheckReport` naming the violated bound.  Asymmetric input
    raises.
    """
    kappa = float(kappa)
    if kappa < 1.0:
        raise ValueError("kappa must be >= 1")
    W = _require_symmetric(W)
    eigs = np.linalg.eigvalsh(0.5 * (W + W.T))
    tol = 1e-10 * kappa
    lo, hi = float(eigs[0]), float(eigs[-1])
    lower_bad = lo < 1.0 / kappa - tol
    upper_bad = hi > kappa + tol
    if lower_bad or upper_bad:
        return WeightCheckReport(
            kappa=kappa,
            eig_min=lo,
            eig_max=hi,
            lower_violated=lower_bad,
            upper_violated=upper_bad,
        )
    return WeightMatrix(W)


# --- built-in demo models ---------------------------------------------------


def _mean_square_match(params):
    col = params.get("x")

    def resolve(data):
        return 0 if col is None else data.column_index(col)

    def make(ix):
        def g(row, psi):
            x = row[ix]
            return np.array([x - psi[0], x * x - psi[0] ** 2])

        def jac(row, psi):
            return np.array([[-1.0], [-2.0 * psi[0]]])

        def g_batch(rows, psi):
            x = rows[:, ix]
            out = np.empty((rows.shape[0], 2))
            out[:, 0] = x - psi[0]
            out[:, 1] = x * x - psi[0] ** 2
            return out

        def jacobian_batch(rows, psi):
            out = np.empty((rows.shape[0], 2, 1))
            out[:, 0, 0] = -1.0
            out[:, 1, 0] = -2.0 * psi[0]
            return out

        return g, jac, g_batch, jacobian_batch

    class _MeanSquareModel(MomentModel):
        def bind(self, data):
            ix = resolve(data)
            g, jac, gb, jb = make(ix)
            return MomentModel(
                k=2, p=1, g=g, jacobian=jac, g_batch=gb,
                jacobian_batch=jb, name="mean_square_match",
            )

    g, jac, gb, jb = make(0)
    return _MeanSquareModel(
        k=2, p=1, g=g, jacobian=jac, g_batch=gb, jacobian_batch=jb,
        column_roles={"x": col}, name="mean_square_match",
    )


def _linear_iv(params):
    try:
        y_col = params["y"]
        w_cols = list(params["w"])
        z_cols = list(params["z"])
    except KeyError as exc:
        raise ModelConfigError(
            f"linear_iv requires column roles y, w, z (missing {exc})"
        ) from None
    k, p = len(z_cols), len(w_cols)
    if k < p:
        raise ModelConfigError("linear_iv needs at least as many instruments as regressors")

    def make(iy, iw, iz):
        iw = np.asarray(iw)
        iz = np.asarray(iz)

        def g(row, psi):
            resid = row[iy] - row[iw] @ psi
            return row[iz] * resid

        def jac(row, psi):
            return -np.outer(row[iz], row[iw])

        def g_batch(rows, psi):
            resid = rows[:, iy] - rows[:, iw] @ psi
            return rows[:, iz] * resid[:, None]

        def jacobian_batch(rows, psi):
            return -rows[:, iz][:, :, None] * rows[:, iw][:, None, :]

        return g, jac, g_batch, jacobian_batch

    class _LinearIvModel(MomentModel):
        def bind(self, data):
            iy = data.column_index(y_col)
            iw = [data.column_index(c) for c in w_cols]
            iz = [data.column_index(c) for c in z_cols]
            g, jac, gb, jb = make(iy, iw, iz)
            return MomentModel(
                k=k, p=p, g=g, jacobian=jac, g_batch=gb,
                jacobian_batch=jb, name="linear_iv",
            )

    # Default binding assumes columns appear in (y, w..., z...) order so the
    # model is usable before it sees a dataset; bind() replaces it.
    g, jac, gb, jb = make(0, list(range(1, 1 + p)), list(range(1 + p, 1 + p + k)))
    return _LinearIvModel(
        k=k, p=p, g=g, jacobian=jac, g_batch=gb, jacobian_batch=jb,
        column_roles={"y": y_col, "w": w_cols, "z": z_cols}, name="linear_iv",
    )


_REGISTRY = {
    "mean_square_match": _mean_square_match,
    "linear_iv": _linear_iv,
}


def builtin_model_names():
    return sorted(_REGISTRY)


def builtin_model(name, params=None) -> MomentModel:
    """Look up a built-in demo model by name.

    ``mean_square_match`` matches the first two moments of a scalar column
    with a single parameter, g = (x - psi, x^2 - psi^2).  ``linear_iv`` is
    instrumental-variables moments g = z * (y - w'psi) with column roles
    given in ``params`` as {"y": name, "w": [names], "z": [names]}.
    """
    params = dict(params or {})
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ModelConfigError(
            f"unknown model {name!r}; valid names: {builtin_model_names()}"
        ) from None
    return factory(params)
