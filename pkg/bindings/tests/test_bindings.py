import csv
import json
import os

import numpy as np
import pytest

import gmm_audit_bindings as gab

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "..", "configs")


def _demo_rows():
    with open(os.path.join(CONFIG_DIR, "demo_data.csv"), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(c) for c in rec] for rec in reader]
    return np.asarray(rows), header


@pytest.fixture(scope="module")
def golden():
    with open(os.path.join(CONFIG_DIR, "demo_out", "report.json")) as fh:
        return json.load(fh)


@pytest.fixture()
def session():
    rows, header = _demo_rows()
    return gab.open_session(rows, header, model="mean_square_match",
                            seed=20240817)


class TestLifecycle:
    def test_closed_handle_raises(self, session):
        session.close()
        with pytest.raises(gab.HandleClosedError, match="closed"):
            gab.py_fit(session, {"kind": "two_step"})

    def test_context_manager_closes(self):
        rows, header = _demo_rows()
        with gab.open_session(rows, header) as h:
            assert not h.closed
        assert h.closed

    def test_invalid_strategy(self, session):
        with pytest.raises(ValueError):
            gab.py_fit(session, {"kind": "no_such_kind"})
        with pytest.raises(ValueError, match="kind"):
            gab.py_fit(session, {})
        with pytest.raises(ValueError, match="mapping"):
            gab.py_fit(session, "two_step")

    def test_kappa_below_one(self, session):
        with pytest.raises(ValueError):
            gab.py_audit(session, kappa=0.5, tau=1.0, n_draws=5)


class TestParity:
    def test_fit_matches_cli_report(self, session, golden):
        specs = {
            "identity": {"kind": "fixed_weight",
                         "weight": [[1.0, 0.0], [0.0, 1.0]]},
            "two_step": {"kind": "two_step"},
        }
        for blk in golden["strategies"]:
            rec = gab.py_fit(session, specs[blk["name"]])
            assert rec["theta_hat"] == blk["theta_hat"]
            assert list(rec["psi_hat"]) == blk["psi_hat"]
            assert rec["criterion"] == blk["criterion"]
            assert rec["rounds"] == blk["rounds"]
            assert rec["weight_repaired"] == blk["weight_repaired"]
            assert rec["se"]["conventional"] == blk["se"]["conventional"]
            assert rec["se"]["robust"] == blk["se"]["robust"]

    def test_j_matches_cli_report(self, session, golden):
        rec = gab.py_j_statistic(session)
        assert rec["J"] == golden["j"]["J"]
        assert rec["df"] == golden["j"]["df"]

    def test_audit_matches_cli_report(self, session, golden):
        for blk in golden["audit"]:
            rec = gab.py_audit(session, kappa=100.0, tau=blk["tau"],
                               n_draws=200)
            assert rec == blk

    def test_limit_lab_matches_cli_report(self):
        with open(os.path.join(CONFIG_DIR, "limit_out", "report.json")) as fh:
            ref = json.load(fh)["limit_lab"]
        rec = gab.limit_lab(
            Gamma=[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
            Sigma=[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]],
            h=[1.0, 0.0],
            tau=[0.5, 1.0, 4.0],
            n_random=200,
            kappa=1.0e6,
            seed=7,
        )
        rec.pop("points")
        assert rec == ref


class TestBehavior:
    def test_tau_zero_degenerate_interval(self, session):
        rec = gab.py_audit(session, kappa=50.0, tau=0.0, n_draws=10)
        lo, hi = rec["interval"]
        assert lo == hi == rec["theta_eff"]

    def test_aliases(self):
        assert gab.fit is gab.py_fit
        assert gab.audit is gab.py_audit
        assert gab.j_statistic is gab.py_j_statistic
