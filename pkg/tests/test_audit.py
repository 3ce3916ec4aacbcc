import numpy as np
import pytest

from gmm_audit.audit import (
    Interval,
    adversarial_t,
    attainable_interval,
    build_weight_cache,
    cs_intersection,
    hausdorff,
    min_max_t,
    run_audit,
    sample_attainable,
)
from gmm_audit.estimation import FitStrategy
from gmm_audit.limitlab import exact_audit_points
from gmm_audit.moments import Dataset, WeightMatrix, builtin_model
from test_limitlab import random_problem
from gmm_audit.limitlab import draw


def msq_sample(n, seed, mu=1.0, sd=1.0):
    rng = np.random.default_rng(seed)
    data = Dataset((mu + sd * rng.standard_normal(n))[:, None], ["x"])
    return builtin_model("mean_square_match", {}).bind(data), data


def iv_sample(n, seed, k=2, theta=1.0):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, k))
    v = rng.standard_normal(n)
    u = 0.5 * v + np.sqrt(0.75) * rng.standard_normal(n)
    w = z.sum(axis=1) + v
    y = theta * w + u
    cols = ["y", "w1"] + [f"z{j+1}" for j in range(k)]
    data = Dataset(np.column_stack([y, w, z]), cols)
    model = builtin_model(
        "linear_iv", {"y": "y", "w": ["w1"], "z": [f"z{j+1}" for j in range(k)]}
    )
    return model.bind(data), data


class TestAttainableInterval:
    def test_hand_example(self):
        iv = attainable_interval(0.0, 1.0 / np.sqrt(2.0), 2.0, 1.0)
        assert iv.lo == pytest.approx(-1.0)
        assert iv.hi == pytest.approx(1.0)

    def test_tau_zero(self):
        iv = attainable_interval(3.0, 0.5, 4.0, 0.0)
        assert iv.lo == iv.hi == 3.0

    def test_j_zero(self):
        iv = attainable_interval(3.0, 0.5, 0.0, 2.0)
        assert iv.lo == iv.hi == 3.0

    def test_radius_scaling(self):
        for tau in (0.5, 1.0, 2.0, 4.0):
            for J in (0.25, 1.0, 9.0):
                iv = attainable_interval(0.0, 1.0, J, tau)
                assert iv.hi == pytest.approx(tau * np.sqrt(J))


class TestHausdorff:
    def test_equal(self):
        assert hausdorff(Interval(0.0, 1.0), Interval(0.0, 1.0)) == 0.0

    def test_endpoint_arithmetic(self):
        assert hausdorff(Interval(0.0, 1.0), Interval(0.5, 2.0)) == 1.0

    def test_point_inside(self):
        assert hausdorff(Interval(-1.0, 1.0), Interval(0.0, 0.0)) == 1.0


class TestCsIntersection:
    def test_single_point(self):
        c, point = cs_intersection([(2.0, 1.0)])
        assert c == 0.0 and point == 2.0

    def test_symmetric_pair(self):
        c, point = cs_intersection([(-1.0, 1.0), (1.0, 1.0)])
        assert c == pytest.approx(1.0, abs=1e-10)
        assert point == pytest.approx(0.0, abs=1e-10)

    def test_limit_lab_exact(self):
        rng = np.random.default_rng(6)
        prob = random_problem(rng, k=5, p=2)
        Y = draw(prob, seed=9)
        pts, theta_eff, sigma_eff, J = exact_audit_points(prob, Y, n_random=100,
                                                          seed=1)
        c, point = cs_intersection([(t, s) for t, s, _ in pts])
        assert c == pytest.approx(np.sqrt(J), abs=1e-8)
        assert point == pytest.approx(theta_eff, abs=1e-8)

    def test_homogeneity(self):
        rng = np.random.default_rng(12)
        pts = [(rng.normal(), abs(rng.normal()) + 0.1) for _ in range(20)]
        c1, p1 = cs_intersection(pts)
        scale = 3.7
        c2, p2 = cs_intersection([(t, s * scale) for t, s in pts])
        assert c2 == pytest.approx(c1 / scale, rel=1e-9)
        assert p2 == pytest.approx(p1, abs=1e-8)


class TestSampleAttainable:
    def test_kappa_one_single_point(self):
        model, data = msq_sample(200, seed=3)
        pts = sample_attainable(model, data, kappa=1.0, tau=0.5, n_draws=25,
                                seed=0)
        random_pts = pts[1:]  # first entry is the efficient baseline
        thetas = {round(t, 12) for t, _, _ in random_pts}
        assert len(thetas) <= 2  # identity draw collapses to one point

    def test_just_identified_all_identical(self):
        model, data = iv_sample(150, seed=4, k=1)
        pts = sample_attainable(model, data, kappa=50.0, tau=1.0, n_draws=30,
                                seed=2)
        thetas = [t for t, _, _ in pts]
        assert max(thetas) - min(thetas) < 1e-8

    def test_accepted_points_near_interval(self):
        # heavy-tailed sample keeps the overidentification moderate, so the
        # local interval governs the attainable set
        rng = np.random.default_rng(11)
        x = 1.0 + 0.5 * rng.standard_t(3.0, 500)
        data = Dataset(x[:, None], ["x"])
        model = builtin_model("mean_square_match", {}).bind(data)
        cache, J, eff, eff_cov = build_weight_cache(
            model, data, kappa=100.0, tau=0.5, n_draws=400, seed=9
        )
        iv = attainable_interval(eff.theta_hat, eff_cov.se_theta, J, 0.5)
        inflated = iv.inflate(1.1)
        for p in cache.points:
            if p.accepted:
                assert inflated.contains(p.theta_hat, slack=1e-12)

    def test_acceptance_filter_idempotent(self):
        model, data = msq_sample(300, seed=7, sd=1.2)
        tau = 0.8
        cache, J, eff, eff_cov = build_weight_cache(
            model, data, kappa=50.0, tau=tau, n_draws=40, seed=5
        )
        cap = (1.0 + tau**2) * eff_cov.se_theta**2
        for p in cache.points:
            assert p.accepted == (p.se_hat**2 <= cap)


class TestAdversarialT:
    def test_far_null_rejected(self):
        model, data = msq_sample(250, seed=21)
        cache, J, eff, eff_cov = build_weight_cache(
            model, data, kappa=100.0, tau=1.0, n_draws=50, seed=3
        )
        theta0 = eff.theta_hat + 100.0 * eff_cov.se_theta
        val, W = adversarial_t(model, data, theta0, kappa=100.0, budget=50,
                               seed=3, cache=cache)
        assert val > 1.96

    def test_lower_bounds_sqrt_j_at_eff(self):
        model, data = msq_sample(400, seed=33, sd=1.2)
        cache, J, eff, _ = build_weight_cache(
            model, data, kappa=1e4, tau=1.0, n_draws=100, seed=4
        )
        val, _ = adversarial_t(model, data, eff.theta_hat, kappa=1e4,
                               budget=100, seed=4, cache=cache)
        assert val >= np.sqrt(J) * 0.95

    def test_just_identified_zero_at_estimate(self):
        model, data = iv_sample(120, seed=9, k=1)
        cache, J, eff, _ = build_weight_cache(
            model, data, kappa=20.0, tau=1.0, n_draws=20, seed=1
        )
        val, _ = adversarial_t(model, data, eff.theta_hat, kappa=20.0,
                               budget=20, seed=1, cache=cache)
        assert val == pytest.approx(0.0, abs=1e-7)


class TestMinMaxT:
    def test_just_identified_zero(self):
        model, data = iv_sample(120, seed=2, k=1)
        (val, theta0) = min_max_t(model, data, kappa=20.0, budget=20, seed=1)
        assert val == pytest.approx(0.0, abs=1e-7)

    def test_never_exceeds_adversarial_at_fixed_theta0(self):
        model, data = msq_sample(300, seed=44, sd=1.1)
        cache, J, eff, eff_cov = build_weight_cache(
            model, data, kappa=100.0, tau=1.0, n_draws=60, seed=6
        )
        val, theta0 = min_max_t(model, data, kappa=100.0, budget=60, seed=6,
                                cache=cache)
        rng = np.random.default_rng(0)
        for _ in range(20):
            t0 = eff.theta_hat + rng.normal() * 3 * eff_cov.se_theta
            adv, _ = adversarial_t(model, data, t0, kappa=100.0, budget=60,
                                   seed=6, cache=cache)
            assert val <= adv + 1e-10

    def test_limit_bridge_exact(self):
        rng = np.random.default_rng(5)
        prob = random_problem(rng, k=4, p=1)
        Y = draw(prob, seed=3)
        pts, theta_eff, sigma_eff, J = exact_audit_points(prob, Y, n_random=200,
                                                          seed=8)
        from gmm_audit.audit import _min_max_over_points

        val, theta0 = _min_max_over_points([(t, s) for t, s, _ in pts])
        assert val == pytest.approx(np.sqrt(J), abs=1e-6)


class TestRunAudit:
    def test_report_consistency(self):
        model, data = msq_sample(300, seed=17, sd=1.2)
        rep = run_audit(model, data, kappa=50.0, tau=1.0, n_draws=60, seed=2)
        assert rep.df == 1
        assert rep.minmax_t >= 0 and rep.cs_critical >= 0
        iv = attainable_interval(rep.theta_eff, rep.se_eff, rep.j_stat, rep.tau)
        assert rep.interval.lo == iv.lo and rep.interval.hi == iv.hi

    def test_kappa_below_one_rejected(self):
        model, data = msq_sample(50, seed=1)
        with pytest.raises(ValueError):
            run_audit(model, data, kappa=0.5, tau=1.0, n_draws=5, seed=0)

    def test_deterministic(self):
        model, data = msq_sample(200, seed=19)
        a = run_audit(model, data, kappa=30.0, tau=0.5, n_draws=30, seed=7)
        b = run_audit(model, data, kappa=30.0, tau=0.5, n_draws=30, seed=7)
        assert a.j_stat == b.j_stat
        assert a.minmax_t == b.minmax_t
        assert [p.theta_hat for p in a.sampled_points] == [
            p.theta_hat for p in b.sampled_points
        ]
