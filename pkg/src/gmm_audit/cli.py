"""Batch front door: config-driven runs, reports, and the verify suite.

Config files are YAML (dialect tag recorded in the report provenance).  A
run produces report.json (schema-stable, deterministic except for the
timestamp field), report.md, audit_points.csv, optional Monte Carlo CSVs,
and optional figures.  All files are written atomically.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import tempfile
from datetime import datetime, timezone

import numpy as np
import yaml

from . import __version__
from .audit import attainable_interval, run_audit
from .estimation import FitStrategy, fit
from .inference import (
    BootstrapInstabilityError,
    bootstrap,
    conventional_cov,
    j_statistic,
    robust_cov,
)
from .limitlab import (
    LimitProblem,
    canonical_form,
    draw,
    exact_audit_points,
    exact_interval,
    j_analog,
)
from .moments import Dataset, WeightMatrix, builtin_model

CONFIG_DIALECT = "yaml/1"


class ConfigError(ValueError):
    """Invalid or missing configuration field."""


class CsvFormatError(ValueError):
    pass


def ingest_csv(path) -> Dataset:
    """Read a numeric CSV with a header row into a Dataset.

    Every cell below the header must parse as a float; the first offending
    cell is reported by row and column name.
    """
    if not os.path.exists(path):
        raise CsvFormatError(f"data file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file, expected a header row")
        header = [name.strip() for name in header]
        rows = []
        for i, rec in enumerate(reader):
            if len(rec) != len(header):
                raise CsvFormatError(
                    f"{path}: row {i + 2} has {len(rec)} cells, expected {len(header)}"
                )
            vals = []
            for j, cell in enumerate(rec):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: non-numeric cell {cell!r} at row {i + 2}, "
                        f"column {header[j]!r}"
                    )
            rows.append(vals)
    if not rows:
        raise CsvFormatError(f"{path}: no data rows below the header")
    return Dataset(np.asarray(rows, dtype=float), header)


def _require(mapping, key, context):
    if key not in mapping:
        raise ConfigError(f"missing required field {context}.{key}")
    return mapping[key]


def load_config(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    cfg = yaml.safe_load(raw)
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a mapping")
    cfg["_hash"] = hashlib.sha256(raw).hexdigest()
    cfg["_dir"] = os.path.dirname(os.path.abspath(path))
    if "seed" not in cfg:
        raise ConfigError("missing required field seed")
    if "strategies" not in cfg and "limit_lab" not in cfg:
        raise ConfigError("config needs at least one of: strategies, limit_lab")
    return cfg


def _parse_strategy(spec, index):
    if not isinstance(spec, dict):
        raise ConfigError(f"strategies[{index}] must be a mapping")
    spec = dict(spec)
    name = spec.pop("name", f"strategy_{index}")
    kind = _require(spec, "kind", f"strategies[{index}]")
    spec.pop("kind")
    weight = spec.pop("weight", None)
    if weight is not None:
        if weight == "identity":
            weight = None
            if kind == "fixed_weight":
                raise ConfigError(
                    f"strategies[{index}]: fixed_weight needs an explicit matrix"
                )
        else:
            weight = WeightMatrix(np.asarray(weight, dtype=float))
    allowed = {"scale", "max_rounds", "round_tol", "multistart", "max_iter",
               "grad_tol", "seed", "first_step_weight"}
    bad = set(spec) - allowed
    if bad:
        raise ConfigError(f"strategies[{index}]: unknown field(s) {sorted(bad)}")
    try:
        strat = FitStrategy(kind=kind, weight=weight, **spec)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"strategies[{index}]: {exc}")
    return name, strat


def _resolve_model(cfg):
    model_cfg = _require(cfg, "model", "config")
    name = _require(model_cfg, "name", "model")
    return builtin_model(name, model_cfg.get("params", {}))


def _atomic_write(path, payload, mode="w"):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp_", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _chi2_sf(x, df):
    from scipy.stats import chi2

    return float(chi2.sf(x, df))


def _strategy_block(name, strat, model, data, infer_cfg, seed):
    res = fit(model, data, strat)
    block = {
        "name": name,
        "kind": strat.kind,
        "psi_hat": res.psi_hat.tolist(),
        "theta_hat": float(res.theta_hat),
        "criterion": float(res.criterion),
        "rounds": res.rounds,
        "weight_repaired": bool(res.weight_repaired),
        "se": {},
    }
    if infer_cfg.get("conventional", True):
        block["se"]["conventional"] = float(conventional_cov(res).se_theta)
    if infer_cfg.get("robust", True):
        block["se"]["robust"] = float(robust_cov(res).se_theta)
    bs_cfg = infer_cfg.get("bootstrap")
    if bs_cfg:
        bs = bootstrap(
            model, data, strat,
            B=int(bs_cfg.get("B", 200)),
            alpha=float(bs_cfg.get("alpha", 0.05)),
            scheme=bs_cfg.get("scheme", "plain"),
            seed=seed,
        )
        block["bootstrap"] = {
            "se": bs.se,
            "percentile_ci": list(bs.percentile_ci),
            "scheme": bs.scheme,
            "B": bs.B,
            "alpha": bs.alpha,
            "failures": len(bs.failures),
        }
    return block, res


def _audit_block(report):
    return {
        "tau": report.tau,
        "j_stat": report.j_stat,
        "df": report.df,
        "theta_eff": report.theta_eff,
        "se_eff": report.se_eff,
        "interval": [report.interval.lo, report.interval.hi],
        "sampled_points": [
            [p.theta_hat, p.se_hat, p.kappa_used, int(p.accepted), p.source]
            for p in report.sampled_points
        ],
        "n_failed_draws": report.n_failed_draws,
        "minmax_t": report.minmax_t,
        "minmax_theta0": report.minmax_theta0,
        "cs_critical": report.cs_critical,
        "cs_point": report.cs_point,
    }


def _write_audit_points_csv(path, audits):
    lines = ["tau,theta_hat,se_hat,kappa_used,accepted,source"]
    for blk in audits:
        for th, se, kap, acc, src in blk["sampled_points"]:
            lines.append(f"{blk['tau']!r},{th!r},{se!r},{kap!r},{acc},{src}")
    _atomic_write(path, "\n".join(lines) + "\n")


def _render_figures(out_dir, audits):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for blk in audits:
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        pts = blk["sampled_points"]
        acc = [(t, s) for t, s, _, a, _ in pts if a]
        rej = [(t, s) for t, s, _, a, _ in pts if not a]
        if rej:
            ax.scatter([t for t, _ in rej], [s for _, s in rej], s=12,
                       color="0.7", label="rejected")
        if acc:
            ax.scatter([t for t, _ in acc], [s for _, s in acc], s=12,
                       color="C0", label="accepted")
        lo, hi = blk["interval"]
        ax.axvspan(lo, hi, color="C1", alpha=0.15, label="attainable interval")
        ax.axvline(blk["theta_eff"], color="C1", lw=1)
        ax.set_xlabel("theta_hat")
        ax.set_ylabel("se_hat")
        ax.set_title(f"weight audit, tau={blk['tau']:g}, J={blk['j_stat']:.3g}")
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, f"audit_tau_{blk['tau']:g}.png"), dpi=120)
        plt.close(fig)


def _report_md(report):
    lines = ["# gmm-audit report", ""]
    prov = report["provenance"]
    lines += [
        f"- version: {prov['version']}",
        f"- seed: {prov['seed']}",
        f"- config hash: {prov['config_hash']}",
        "",
    ]
    if report.get("strategies"):
        lines += ["## Estimates", "",
                  "| strategy | kind | theta_hat | SE (conventional) | SE (robust) |",
                  "|---|---|---|---|---|"]
        for blk in report["strategies"]:
            se_c = blk["se"].get("conventional")
            se_r = blk["se"].get("robust")
            fmt = lambda v: "" if v is None else f"{v:.6g}"
            lines.append(
                f"| {blk['name']} | {blk['kind']} | {blk['theta_hat']:.6g} "
                f"| {fmt(se_c)} | {fmt(se_r)} |"
            )
        lines.append("")
    if report.get("j"):
        j = report["j"]
        lines += [
            "## J-statistic", "",
            f"J = {j['J']:.6g} with {j['df']} degrees of freedom "
            f"(chi-square tail probability {j['chi2_tail_probability']:.4g}, "
            "descriptive only).", "",
        ]
    if report.get("audit"):
        lines += ["## Weight audit", "",
                  "| tau | interval | minmax_t | sqrt(J) | cs_critical | cs_point |",
                  "|---|---|---|---|---|---|"]
        for blk in report["audit"]:
            lo, hi = blk["interval"]
            lines.append(
                f"| {blk['tau']:g} | [{lo:.6g}, {hi:.6g}] | {blk['minmax_t']:.6g} "
                f"| {np.sqrt(blk['j_stat']):.6g} | {blk['cs_critical']:.6g} "
                f"| {blk['cs_point']:.6g} |"
            )
        lines.append("")
    return "\n".join(lines) + "\n"


def run(config_path, seed=None, output_dir=None, threads=None):
    """Execute a config file; returns the report dict and writes all files."""
    cfg = load_config(config_path)
    seed = int(cfg["seed"] if seed is None else seed)
    out_dir = output_dir or cfg.get("output_dir") or "."
    if not os.path.isabs(out_dir):
        out_dir = os.path.join(cfg["_dir"], out_dir)
    os.makedirs(out_dir, exist_ok=True)

    report = {
        "provenance": {
            "seed": seed,
            "config_hash": cfg["_hash"],
            "config_dialect": CONFIG_DIALECT,
            "version": __version__,
            "threads": threads,
        },
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }

    model = data = None
    if "model" in cfg:
        model = _resolve_model(cfg)
        data_path = _require(cfg, "data_path", "config")
        if not os.path.isabs(data_path):
            data_path = os.path.join(cfg["_dir"], data_path)
        data = ingest_csv(data_path)
        model = model.bind(data)

    infer_cfg = cfg.get("inference", {})
    if cfg.get("strategies"):
        if model is None:
            raise ConfigError("strategies require a model and data_path")
        blocks = []
        for i, spec in enumerate(cfg["strategies"]):
            name, strat = _parse_strategy(spec, i)
            block, _ = _strategy_block(name, strat, model, data, infer_cfg, seed)
            blocks.append(block)
        report["strategies"] = blocks

    if model is not None and model.k > model.p:
        J, _, _ = j_statistic(model, data)
        df = model.k - model.p
        report["j"] = {
            "J": float(J),
            "df": df,
            "chi2_tail_probability": _chi2_sf(J, df),
            "tail_probability_role": "descriptive",
        }

    audit_cfg = cfg.get("audit")
    if audit_cfg:
        if model is None:
            raise ConfigError("audit requires a model and data_path")
        kappa = float(_require(audit_cfg, "kappa", "audit"))
        taus = audit_cfg.get("tau", [1.0])
        if np.isscalar(taus):
            taus = [taus]
        n_draws = int(audit_cfg.get("n_draws", 200))
        audits = []
        for tau in taus:
            rep = run_audit(model, data, kappa=kappa, tau=float(tau),
                            n_draws=n_draws, seed=seed)
            audits.append(_audit_block(rep))
        report["audit"] = audits
        _write_audit_points_csv(os.path.join(out_dir, "audit_points.csv"), audits)
        if cfg.get("figures", True):
            _render_figures(out_dir, audits)

    if cfg.get("limit_lab"):
        report["limit_lab"] = _run_limit_lab(cfg["limit_lab"], seed, out_dir)

    if cfg.get("mc"):
        report["mc"] = _run_mc(cfg["mc"], seed, out_dir)

    payload = json.dumps(report, indent=2, default=_json_default, sort_keys=True)
    _atomic_write(os.path.join(out_dir, "report.json"), payload + "\n")
    _atomic_write(os.path.join(out_dir, "report.md"), _report_md(report))
    return report


def _run_limit_lab(spec, seed, out_dir):
    problem = LimitProblem(
        Gamma=np.asarray(_require(spec, "Gamma", "limit_lab"), dtype=float),
        Sigma=np.asarray(_require(spec, "Sigma", "limit_lab"), dtype=float),
        h=np.asarray(_require(spec, "h", "limit_lab"), dtype=float),
        eta=np.asarray(spec["eta"], dtype=float) if "eta" in spec else None,
        phi=np.asarray(spec["phi"], dtype=float) if "phi" in spec else None,
    )
    can = canonical_form(problem)
    Y = draw(problem, seed=seed)
    J = j_analog(problem, Y)
    taus = spec.get("tau", [1.0])
    if np.isscalar(taus):
        taus = [taus]
    intervals = {}
    for tau in taus:
        (lo, hi), _ = exact_interval(problem, Y, float(tau))
        intervals[f"{float(tau):g}"] = [float(lo), float(hi)]
    points, theta_eff, sigma_eff, _ = exact_audit_points(
        problem,
        Y,
        n_random=int(spec.get("n_random", 200)),
        kappa=float(spec.get("kappa", 1e6)),
        seed=seed,
    )
    lines = ["theta,sigma,source"]
    for th, sg, src in points:
        lines.append(f"{th!r},{sg!r},{src}")
    _atomic_write(os.path.join(out_dir, "limit_points.csv"), "\n".join(lines) + "\n")
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
    }


def _run_mc(spec, seed, out_dir):
    from .mc import make_dgp, mc_local, write_mc_csv

    dgp = make_dgp(_require(spec, "dgp", "mc"), spec.get("params"))
    rows, summary, failures = mc_local(
        dgp,
        n_grid=_require(spec, "n_grid", "mc"),
        reps=int(_require(spec, "reps", "mc")),
        kappa=float(spec.get("kappa", 100.0)),
        tau=float(spec.get("tau", 0.5)),
        seed=seed,
        n_draws=int(spec.get("n_draws", 64)),
    )
    write_mc_csv(os.path.join(out_dir, "mc_replications.csv"), rows)
    return {"summary": summary, "n_failures": len(failures)}


def verify(seed=0):
    """Reduced-size exact-proposition suite; returns (ok, lines)."""
    rng = np.random.default_rng(seed)
    lines = []
    ok = True

    def record(name, passed, detail):
        nonlocal ok
        ok = ok and passed
        lines.append(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")

    from .limitlab import random_weight

    worst_contain = worst_attain = 0.0
    worst_ident = 0.0
    worst_t = worst_cs = worst_cs_pt = 0.0
    from .audit import cs_intersection, _min_max_over_points

    for i in range(25):
        k = int(rng.integers(2, 7))
        p = int(rng.integers(1, min(k, 4)))
        G = rng.standard_normal((k, p))
        A = rng.standard_normal((k, k))
        S = A @ A.T + k * np.eye(k)
        h = rng.standard_normal(p)
        prob = LimitProblem(Gamma=G, Sigma=S, h=h)
        can = canonical_form(prob)
        Y = draw(prob, seed=int(rng.integers(1 << 31)))
        J = j_analog(prob, Y)
        Qinv = np.hstack([-prob.Gamma, prob.Sigma @ can.M.T
                          @ np.linalg.inv(can.M @ prob.Sigma @ can.M.T)])
        worst_ident = max(
            worst_ident,
            np.abs(can.Q @ Qinv - np.eye(k)).max(),
            np.abs(can.M @ G).max(),
            np.abs(can.Lambda @ S @ can.M.T).max(),
        )
        tau = 1.0
        (lo, hi), (Wlo, Whi) = exact_interval(prob, Y, tau)
        from .limitlab import phi_hat

        var_cap = (1.0 + tau**2) * float(
            h @ np.linalg.solve(G.T @ np.linalg.solve(S, G), h)
        )
        for _ in range(80):
            W = random_weight(k, 1e6, rng).values
            _, th, vr = phi_hat(prob, W, Y)
            if vr <= var_cap:
                worst_contain = max(worst_contain, lo - th, th - hi, 0.0)
        for Wend, target in ((Wlo, lo), (Whi, hi)):
            _, th, _ = phi_hat(prob, Wend.values, Y)
            worst_attain = max(worst_attain, abs(th - target))
        pts, theta_eff, sigma_eff, Jp = exact_audit_points(
            prob, Y, n_random=60, seed=int(rng.integers(1 << 31))
        )
        pairs = [(t, s) for t, s, _ in pts]
        val, _ = _min_max_over_points(pairs)
        worst_t = max(worst_t, abs(val - np.sqrt(Jp)))
        c_star, point = cs_intersection(pairs)
        worst_cs = max(worst_cs, abs(c_star - np.sqrt(Jp)))
        worst_cs_pt = max(worst_cs_pt, abs(point - theta_eff))

    record("prop_jstat_containment", worst_contain <= 1e-8,
           f"worst excess {worst_contain:.2e} (tol 1e-8)")
    record("prop_jstat_endpoints", worst_attain <= 1e-8,
           f"worst endpoint miss {worst_attain:.2e} (tol 1e-8)")
    record("canonical_identities", worst_ident <= 1e-10,
           f"worst identity residual {worst_ident:.2e} (tol 1e-10)")
    record("cor_tstatmain", worst_t <= 1e-6,
           f"worst |minmax_t - sqrt(J)| {worst_t:.2e} (tol 1e-6)")
    record("cor_cs", max(worst_cs, worst_cs_pt) <= 1e-8,
           f"worst deviation {max(worst_cs, worst_cs_pt):.2e} (tol 1e-8)")
    return ok, lines


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="gmm-audit",
        description="GMM estimation and weighting-matrix audit toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "limit-lab"):
        sp = sub.add_parser(name)
        sp.add_argument("config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--output-dir", default=None)
        sp.add_argument("--threads", type=int, default=None)
    sv = sub.add_parser("verify")
    sv.add_argument("--seed", type=int, default=0)
    sv.add_argument("--output-dir", default=None)
    sv.add_argument("--threads", type=int, default=None)
    args = parser.parse_args(argv)

    if args.command == "verify":
        ok, lines = verify(seed=args.seed)
        print("\n".join(lines))
        return 0 if ok else 1

    try:
        if args.command == "limit-lab":
            cfg = load_config(args.config)
            if "limit_lab" not in cfg:
                raise ConfigError("missing required field limit_lab")
            seed = int(cfg["seed"] if args.seed is None else args.seed)
            out_dir = args.output_dir or cfg.get("output_dir") or "."
            if not os.path.isabs(out_dir):
                out_dir = os.path.join(cfg["_dir"], out_dir)
            os.makedirs(out_dir, exist_ok=True)
            block = _run_limit_lab(cfg["limit_lab"], seed, out_dir)
            report = {
                "provenance": {
                    "seed": seed,
                    "config_hash": cfg["_hash"],
                    "config_dialect": CONFIG_DIALECT,
                    "version": __version__,
                    "threads": args.threads,
                },
                "timestamp": datetime.now(timezone.utc).isoformat(),
                "limit_lab": block,
            }
            payload = json.dumps(report, indent=2, default=_json_default,
                                 sort_keys=True)
            _atomic_write(os.path.join(out_dir, "report.json"), payload + "\n")
        else:
            run(args.config, seed=args.seed, output_dir=args.output_dir,
                threads=args.threads)
    except (ConfigError, CsvFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        out_dir = args.output_dir or "."
        try:
            os.makedirs(out_dir, exist_ok=True)
            _atomic_write(
                os.path.join(out_dir, "report.json"),
                json.dumps(
                    {"error": {"type": type(exc).__name__, "message": str(exc)}},
                    indent=2,
                ) + "\n",
            )
        except OSError:
            pass
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
