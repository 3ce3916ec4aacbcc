import json
import os
import re
import shutil

import numpy as np
import pytest

from gmm_audit.audit import attainable_interval
from gmm_audit.cli import (
    ConfigError,
    CsvFormatError,
    ingest_csv,
    load_config,
    main,
    run,
)

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "configs")


def _strip_timestamp(text):
    return re.sub(r'^\s*"timestamp": "[^"]*",?\n', "", text, flags=re.M)


@pytest.fixture(scope="module")
def demo_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo_out")
    report = run(os.path.join(CONFIG_DIR, "demo.yaml"), output_dir=str(out))
    return report, out


class TestIngestCsv:
    def test_small_file(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b\n1,2\n3,4\n5,6\n")
        data = ingest_csv(p)
        assert data.rows.shape == (3, 2)
        assert list(data.column_names) == ["a", "b"]

    def test_na_cell_named(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b\n1,2\n3,NA\n")
        with pytest.raises(CsvFormatError, match=r"row 3.*column 'b'"):
            ingest_csv(p)

    def test_header_only(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b\n")
        with pytest.raises(CsvFormatError, match="no data rows"):
            ingest_csv(p)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("")
        with pytest.raises(CsvFormatError, match="empty file"):
            ingest_csv(p)

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "d.csv"
        p.write_text("a,b\n1,2\n3\n")
        with pytest.raises(CsvFormatError, match="row 3 has 1 cells"):
            ingest_csv(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CsvFormatError, match="not found"):
            ingest_csv(tmp_path / "nope.csv")


class TestLoadConfig:
    def test_missing_seed(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("strategies: []\n")
        with pytest.raises(ConfigError, match="seed"):
            load_config(p)

    def test_needs_some_work(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("seed: 1\n")
        with pytest.raises(ConfigError, match="strategies, limit_lab"):
            load_config(p)

    def test_non_mapping_root(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError, match="mapping"):
            load_config(p)


class TestDemoRun:
    def test_j_positive_and_intervals_monotone(self, demo_run):
        report, out = demo_run
        assert report["j"]["J"] > 0
        widths = [hi - lo for lo, hi in
                  (blk["interval"] for blk in report["audit"])]
        taus = [blk["tau"] for blk in report["audit"]]
        assert taus == sorted(taus)
        assert all(w1 <= w2 for w1, w2 in zip(widths, widths[1:]))

    def test_matches_bundled_golden(self, demo_run):
        _, out = demo_run
        fresh = _strip_timestamp((out / "report.json").read_text())
        golden_path = os.path.join(CONFIG_DIR, "demo_out", "report.json")
        golden = _strip_timestamp(open(golden_path).read())
        assert fresh == golden

    def test_output_files_written(self, demo_run):
        _, out = demo_run
        for name in ("report.json", "report.md", "audit_points.csv"):
            assert (out / name).exists()
        pngs = [f for f in os.listdir(out) if f.endswith(".png")]
        assert len(pngs) == 3  # one figure per tau

    def test_schema_roundtrip(self, demo_run):
        report, out = demo_run
        parsed = json.loads((out / "report.json").read_text())
        rendered = json.loads(json.dumps(report, default=lambda o: (
            o.tolist() if isinstance(o, np.ndarray) else o.item())))
        assert parsed == rendered

    def test_theta_inside_bootstrap_ci(self, demo_run):
        report, _ = demo_run
        for blk in report["strategies"]:
            lo, hi = blk["bootstrap"]["percentile_ci"]
            assert lo <= blk["theta_hat"] <= hi

    def test_audit_interval_recomputes(self, demo_run):
        report, _ = demo_run
        for blk in report["audit"]:
            iv = attainable_interval(
                blk["theta_eff"], blk["se_eff"], blk["j_stat"], blk["tau"]
            )
            assert blk["interval"] == [iv.lo, iv.hi]

    def test_every_se_labeled(self, demo_run):
        report, _ = demo_run
        for blk in report["strategies"]:
            assert set(blk["se"]) <= {"conventional", "robust"}
            assert blk["se"]

    def test_audit_points_csv_matches_report(self, demo_run):
        report, out = demo_run
        lines = (out / "audit_points.csv").read_text().strip().split("\n")
        n_points = sum(len(b["sampled_points"]) for b in report["audit"])
        assert len(lines) == 1 + n_points
        assert lines[0] == "tau,theta_hat,se_hat,kappa_used,accepted,source"


class TestDeterminism:
    def test_same_config_twice_byte_identical(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        shutil.copy(os.path.join(CONFIG_DIR, "demo_data.csv"),
                    tmp_path / "demo_data.csv")
        cfg.write_text(
            "seed: 5\n"
            "model: {name: mean_square_match, params: {}}\n"
            "data_path: demo_data.csv\n"
            "strategies:\n"
            "  - {name: ts, kind: two_step}\n"
            "audit: {kappa: 20.0, tau: [1.0], n_draws: 20}\n"
            "figures: false\n"
        )
        run(cfg, output_dir=str(tmp_path / "a"))
        run(cfg, output_dir=str(tmp_path / "b"))
        a = _strip_timestamp((tmp_path / "a" / "report.json").read_text())
        b = _strip_timestamp((tmp_path / "b" / "report.json").read_text())
        assert a == b

    def test_seed_flag_overrides(self, tmp_path):
        cfg = tmp_path / "c.yaml"
        shutil.copy(os.path.join(CONFIG_DIR, "demo_data.csv"),
                    tmp_path / "demo_data.csv")
        cfg.write_text(
            "seed: 5\n"
            "model: {name: mean_square_match, params: {}}\n"
            "data_path: demo_data.csv\n"
            "strategies:\n"
            "  - {name: ts, kind: two_step}\n"
            "audit: {kappa: 20.0, tau: [1.0], n_draws: 20}\n"
            "figures: false\n"
        )
        ra = run(cfg, seed=5, output_dir=str(tmp_path / "a"))
        rb = run(cfg, seed=6, output_dir=str(tmp_path / "b"))
        assert ra["provenance"]["seed"] == 5
        assert rb["provenance"]["seed"] == 6
        pa = [p[0] for p in ra["audit"][0]["sampled_points"]]
        pb = [p[0] for p in rb["audit"][0]["sampled_points"]]
        assert pa != pb


class TestMainExitCodes:
    def test_unknown_strategy_kind(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        shutil.copy(os.path.join(CONFIG_DIR, "demo_data.csv"),
                    tmp_path / "demo_data.csv")
        cfg.write_text(
            "seed: 1\n"
            "model: {name: mean_square_match, params: {}}\n"
            "data_path: demo_data.csv\n"
            "strategies:\n"
            "  - {name: x, kind: no_such_kind}\n"
        )
        code = main(["run", str(cfg)])
        assert code == 2
        assert "no_such_kind" in capsys.readouterr().err

    def test_missing_field_named(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text("seed: 1\nstrategies:\n  - {kind: two_step}\n")
        code = main(["run", str(cfg)])
        assert code == 2
        assert "model" in capsys.readouterr().err

    def test_module_error_writes_structured_report(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        cfg.write_text(
            "seed: 1\n"
            "limit_lab:\n"
            "  Gamma: [[1.0], [1.0]]\n"
            "  Sigma: [[1.0, 0.0], [0.0, 0.0]]\n"  # singular, not PD
            "  h: [1.0]\n"
        )
        code = main(["run", str(cfg), "--output-dir", str(tmp_path / "o")])
        capsys.readouterr()
        assert code == 1
        err = json.loads((tmp_path / "o" / "report.json").read_text())
        assert "error" in err and err["error"]["type"]

    def test_limit_lab_subcommand(self, tmp_path):
        code = main([
            "limit-lab", os.path.join(CONFIG_DIR, "limit_demo.yaml"),
            "--output-dir", str(tmp_path),
        ])
        assert code == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        blk = rep["limit_lab"]
        assert blk["J"] > 0
        widths = [hi - lo for lo, hi in blk["exact_intervals"].values()]
        assert widths == sorted(widths)
        assert (tmp_path / "limit_points.csv").exists()


class TestVerify:
    def test_exit_zero_and_lines(self, capsys):
        code = main(["verify", "--seed", "0"])
        out = capsys.readouterr().out.strip().split("\n")
        assert code == 0
        assert len(out) == 5
        assert all(line.startswith("PASS") for line in out)
