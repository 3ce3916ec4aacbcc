import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gmm_audit.moments import (
    Dataset,
    ModelConfigError,
    MomentEvaluationError,
    MomentModel,
    WeightCheckReport,
    WeightMatrix,
    builtin_model,
    check_weight,
    moment_stats,
)


def msq_on(values):
    data = Dataset(np.asarray(values, dtype=float)[:, None], ["x"])
    return builtin_model("mean_square_match", {}).bind(data), data


class TestDataset:
    def test_basic(self):
        d = Dataset(np.arange(6.0).reshape(3, 2), ["a", "b"])
        assert d.n == 3 and d.d == 2
        assert d.column_index("b") == 1

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            Dataset(np.array([[1.0], [np.nan]]), ["x"])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            Dataset(np.empty((0, 2)), ["a", "b"])

    def test_unknown_column(self):
        d = Dataset(np.ones((2, 1)), ["x"])
        with pytest.raises(ModelConfigError):
            d.column_index("y")


class TestMomentStats:
    def test_mean_square_hand_values(self):
        # data {1,2,3} at psi=2: g_bar=(0, 2/3), gamma=(-1,-4)
        model, data = msq_on([1.0, 2.0, 3.0])
        st_ = moment_stats(model, data, np.array([2.0]))
        assert np.allclose(st_.g_bar, [0.0, 2.0 / 3.0], atol=1e-14)
        assert np.allclose(st_.gamma_hat.ravel(), [-1.0, -4.0], atol=1e-14)

    def test_mean_square_sigma_hand_values(self):
        model, data = msq_on([1.0, 2.0, 3.0])
        st_ = moment_stats(model, data, np.array([2.0]))
        expect = np.array([[2.0 / 3.0, 8.0 / 3.0], [8.0 / 3.0, 98.0 / 9.0]])
        assert np.allclose(st_.sigma_hat, expect, atol=1e-12)

    def test_brute_force_oracle(self):
        # independent averaging oracle over explicit per-row evaluations
        rng = np.random.default_rng(0)
        x = rng.standard_normal(40)
        model, data = msq_on(x)
        psi = 0.7
        st_ = moment_stats(model, data, np.array([psi]))
        rows = np.stack([[xi - psi, xi * xi - psi * psi] for xi in x])
        assert np.allclose(st_.g_bar, rows.mean(axis=0), atol=1e-13)
        c = rows - rows.mean(axis=0)
        assert np.allclose(st_.sigma_hat, c.T @ c / len(x), atol=1e-13)

    def test_repeated_rows_zero_sigma(self):
        model, data = msq_on([2.0] * 7)
        st_ = moment_stats(model, data, np.array([1.5]))
        assert np.allclose(st_.sigma_hat, 0.0, atol=1e-15)

    def test_nonfinite_moment_names_row(self):
        data = Dataset(np.array([[1.0], [2.0], [3.0]]), ["x"])
        model = MomentModel(
            k=1, p=1,
            g=lambda row, psi: np.array([np.inf if row[0] == 2.0 else row[0]]),
        )
        with pytest.raises(MomentEvaluationError, match="observation 1"):
            moment_stats(model, data, np.array([0.0]))

    def test_row_order_invariance(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(25)
        psi = np.array([0.4])
        m1, d1 = msq_on(x)
        m2, d2 = msq_on(x[::-1])
        s1 = moment_stats(m1, d1, psi)
        s2 = moment_stats(m2, d2, psi)
        assert np.allclose(s1.sigma_hat, s2.sigma_hat, atol=1e-13)
        assert np.allclose(s1.g_bar, s2.g_bar, atol=1e-14)

    @given(st.floats(min_value=0.1, max_value=10.0))
    @settings(max_examples=25, deadline=None)
    def test_gbar_linear_in_g(self, c):
        data = Dataset(np.array([[1.0], [2.0], [4.0]]), ["x"])
        base = builtin_model("mean_square_match", {}).bind(data)
        scaled = MomentModel(
            k=2, p=1, g=lambda row, psi, b=base: c * b.g(row, psi)
        )
        psi = np.array([0.3])
        s0 = moment_stats(base, data, psi)
        s1 = moment_stats(scaled, data, psi)
        assert np.allclose(s1.g_bar, c * s0.g_bar, rtol=1e-12)


class TestJacobians:
    def test_fd_matches_analytic_linear_iv(self):
        rng = np.random.default_rng(11)
        cols = ["y", "w1", "z1", "z2", "z3"]
        model = builtin_model(
            "linear_iv", {"y": "y", "w": ["w1"], "z": ["z1", "z2", "z3"]}
        )
        for _ in range(100):
            data = Dataset(rng.standard_normal((8, 5)), cols)
            bound = model.bind(data)
            psi = rng.standard_normal(1)
            analytic = moment_stats(bound, data, psi).gamma_hat
            nofd = MomentModel(k=3, p=1, g=bound.g)
            fd = moment_stats(nofd, data, psi).gamma_hat
            assert np.allclose(fd, analytic, rtol=1e-6, atol=1e-8)

    def test_gamma_constant_in_psi_linear_iv(self):
        rng = np.random.default_rng(4)
        data = Dataset(rng.standard_normal((20, 4)), ["y", "w1", "z1", "z2"])
        model = builtin_model(
            "linear_iv", {"y": "y", "w": ["w1"], "z": ["z1", "z2"]}
        ).bind(data)
        g0 = moment_stats(model, data, np.array([0.0])).gamma_hat
        g1 = moment_stats(model, data, np.array([5.0])).gamma_hat
        assert np.allclose(g0, g1, atol=1e-12)


class TestWeightMatrix:
    def test_identity(self):
        W = WeightMatrix.identity(3)
        assert W.eig_min == pytest.approx(1.0)
        assert W.eig_max == pytest.approx(1.0)

    def test_not_pd_rejected(self):
        with pytest.raises(ValueError):
            WeightMatrix(np.diag([1.0, 0.0]))

    def test_cached_eigs_consistent(self):
        rng = np.random.default_rng(8)
        A = rng.standard_normal((4, 4))
        W = WeightMatrix(A @ A.T + 4 * np.eye(4))
        eigs = np.linalg.eigvalsh(W.values)
        assert abs(W.eig_min - eigs[0]) <= 1e-10 * max(1.0, eigs[-1])
        assert abs(W.eig_max - eigs[-1]) <= 1e-10 * max(1.0, eigs[-1])


class TestCheckWeight:
    def test_identity_kappa_one(self):
        out = check_weight(np.eye(2), 1.0)
        assert isinstance(out, WeightMatrix)

    def test_both_bounds_violated(self):
        out = check_weight(np.diag([3.0, 1.0 / 3.0]), 2.0)
        assert isinstance(out, WeightCheckReport)
        assert out.lower_violated and out.upper_violated

    def test_accepted_offdiagonal(self):
        out = check_weight(np.array([[1.0, 0.5], [0.5, 1.0]]), 2.0)
        assert isinstance(out, WeightMatrix)
        assert out.eig_min == pytest.approx(0.5)
        assert out.eig_max == pytest.approx(1.5)

    def test_asymmetric_raises(self):
        with pytest.raises(ValueError):
            check_weight(np.array([[1.0, 0.2], [0.0, 1.0]]), 10.0)

    def test_bad_kappa(self):
        with pytest.raises(ValueError):
            check_weight(np.eye(2), 0.5)


class TestBuiltinModels:
    def test_mean_square_dims(self):
        m = builtin_model("mean_square_match", {})
        assert m.k == 2 and m.p == 1

    def test_linear_iv_dims(self):
        m = builtin_model("linear_iv", {"y": "y", "w": ["w1"], "z": ["z1", "z2", "z3"]})
        assert m.k == 3 and m.p == 1

    def test_unknown_name(self):
        with pytest.raises(ModelConfigError, match="linear_iv"):
            builtin_model("nonexistent", {})

    def test_missing_roles(self):
        with pytest.raises(ModelConfigError):
            builtin_model("linear_iv", {"y": "y"})

    def test_linear_iv_values(self):
        data = Dataset(np.array([[2.0, 1.0, 3.0, 4.0]]), ["y", "w1", "z1", "z2"])
        m = builtin_model("linear_iv", {"y": "y", "w": ["w1"], "z": ["z1", "z2"]}).bind(data)
        g = m.g(data.rows[0], np.array([0.5]))
        # z * (y - w psi) = (3,4) * 1.5
        assert np.allclose(g, [4.5, 6.0])
