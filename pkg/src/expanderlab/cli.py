"""Scenario runner and report generator.

A scenario JSON configures one testbed flow and the checks to run on
it; the runner emits a deterministic report tree:

    <out>/<scenario-name>/report.json     verdicts, fitted limits, residuals
    <out>/<scenario-name>/series/*.csv    per-time tables
    <out>/<scenario-name>/plots/*.svg     line charts of monotone quantities

Exit codes: 0 all verdicts hold, 1 a check failed, 2 the config is
malformed.  Outputs are a pure function of the config: repeated runs
are bitwise identical.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import math
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .conjugate_heat import (
    check_f_plus_evolution,
    check_harnack_identity,
    check_steady_harnack,
    construct_immortal_density,
)
from .entropy import (
    asymptotics_report,
    build_entropy_report,
    expander_entropy,
    lambda_bar,
    long_time_residual_integral,
    mu_plus,
    nu_plus,
)
from .flow import BlowdownSpec, blowdown, check_R_lower_bound, evolve, scaled_volume
from .geometry import validate_model_json, volume
from .reduced import (
    check_gradient_time_identities,
    check_inequalities,
    ell_plus_field,
    extrapolate_fields,
    theta_plus,
)
from .reports import write_csv, write_json, write_svg_chart

__all__ = ["Scenario", "run_scenario", "run_scenario_doc", "builtin_scenarios", "main"]

KNOWN_CHECKS = ("entropy", "harnack", "mu_nu", "reduced", "theta",
                "asymptotics", "blowdown")


class ConfigError(ValueError):
    """Malformed scenario configuration (exit code 2)."""


@dataclass
class Scenario:
    name: str
    model: object
    t_span: tuple
    checks: tuple
    tolerances: dict
    params: dict

    @staticmethod
    def from_doc(doc: dict) -> "Scenario":
        if not isinstance(doc, dict):
            raise ConfigError("scenario must be a JSON object")
        if doc.get("schema") != 1:
            raise ConfigError("missing or unsupported schema field (expected 1)")
        name = doc.get("name")
        if not name or not isinstance(name, str):
            raise ConfigError("scenario needs a nonempty string name")
        try:
            model = validate_model_json(doc["model"])
        except KeyError:
            raise ConfigError(f"scenario {name!r}: missing model") from None
        except ValueError as exc:
            raise ConfigError(f"scenario {name!r}: {exc}") from None
        span = doc.get("t_span")
        if (not isinstance(span, (list, tuple)) or len(span) != 2
                or not span[1] > span[0] or span[0] < 0):
            raise ConfigError(f"scenario {name!r}: t_span must be [t0, t1], 0 <= t0 < t1")
        checks = doc.get("checks")
        if not checks or not isinstance(checks, list):
            raise ConfigError(f"scenario {name!r}: checks must be a nonempty list")
        unknown = [c for c in checks if c not in KNOWN_CHECKS]
        if unknown:
            raise ConfigError(
                f"scenario {name!r}: unknown checks {unknown}; known: {list(KNOWN_CHECKS)}"
            )
        return Scenario(
            name=name,
            model=model,
            t_span=(float(span[0]), float(span[1])),
            checks=tuple(checks),
            tolerances=dict(doc.get("tolerances", {})),
            params=dict(doc.get("params", {})),
        )


def _default_times(scn: Scenario, h) -> np.ndarray:
    t0, t1 = scn.t_span
    lo = max(t0, t1 / 100.0, 1e-3)
    hi = 0.9 * t1
    n = int(scn.params.get("n_times", 17))
    return np.geomspace(lo, hi, n)


def _density_window(scn: Scenario, h):
    t0, t1 = scn.t_span
    if h.kind == "conformal_torus":
        lo = float(scn.params.get("window_lo", max(t0, 0.02 * t1)))
        hi = float(scn.params.get("window_hi", 0.45 * t1))
    else:
        lo = max(t0, t1 / 200.0, 1e-3)
        hi = 0.9 * t1
    return (lo, hi)


def run_scenario_doc(doc: dict, out_dir) -> dict:
    """Run one scenario document; writes artifacts, returns the report."""
    scn = Scenario.from_doc(doc)
    out = Path(out_dir) / scn.name
    series_dir = out / "series"
    plots_dir = out / "plots"
    series_dir.mkdir(parents=True, exist_ok=True)
    plots_dir.mkdir(parents=True, exist_ok=True)
    mono_tol = float(scn.tolerances.get("monotonicity", 0.0)) or None

    report = {
        "schema": 1,
        "tool_version": __version__,
        "scenario": scn.name,
        "checks": list(scn.checks),
        "verdicts": {},
        "fitted": {},
        "residuals": {},
        "tolerances": {},
        "failures": [],
    }

    evolve_kwargs = {}
    if "dt_cap" in scn.params:
        evolve_kwargs["dt_cap"] = float(scn.params["dt_cap"])
    if "retain_every" in scn.params:
        evolve_kwargs["retain_every"] = int(scn.params["retain_every"])
    h = evolve(scn.model, scn.t_span, **evolve_kwargs)
    h.export_csv(series_dir / "flow.csv")
    if h.extinct_at is not None:
        report["fitted"]["extinct_at"] = h.extinct_at
    rb = check_R_lower_bound(h, tol=float(scn.tolerances.get("r_bound", 1e-8)))
    report["verdicts"]["curvature_lower_bound"] = rb.ok
    report["tolerances"]["curvature_lower_bound"] = rb.tol

    dens = None
    if {"entropy", "harnack", "asymptotics"} & set(scn.checks):
        dens = construct_immortal_density(
            h, _density_window(scn, h),
            tol=float(scn.tolerances.get("immortal", 1e-8)),
        )
        report["fitted"]["immortal_tail"] = dens.construction_tail
        report["fitted"]["immortal_cauchy_gap"] = dens.cauchy_gap
        report["verdicts"]["immortal_converged"] = dens.converged

    if "entropy" in scn.checks:
        lo, hi = dens.window if h.kind == "conformal_torus" else (None, None)
        times = _default_times(scn, h)
        if lo is not None:
            times = np.linspace(lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo),
                                min(len(times), 9))
        rep = build_entropy_report(
            h, dens, times,
            birth_time=float(scn.params.get("birth_time", h.birth_time)),
        )
        rep.to_csv(series_dir / "entropy.csv")
        for key, val in rep.verdicts.items():
            if key == "w_plus_constant":
                # constancy marks the expander equality case; it is a
                # diagnostic unless the scenario claims an expander
                report["fitted"]["entropy.w_plus_constant"] = bool(val)
                if scn.params.get("expect_constant_entropy"):
                    report["verdicts"]["entropy.w_plus_constant"] = bool(val)
            elif isinstance(val, bool):
                report["verdicts"][f"entropy.{key}"] = val
            else:
                report["residuals"][f"entropy.{key}"] = val
        report["tolerances"]["entropy.monotonicity"] = rep.tolerances["monotonicity"]
        write_svg_chart(
            plots_dir / "entropy.svg", f"{scn.name}: monotone quantities",
            rep.times,
            {"W_plus": rep.columns["W_plus"], "N_plus": rep.columns["N_plus"],
             "lambda_bar": rep.columns["lambda_bar"], "V_tilde": rep.columns["V_tilde"]},
            y_label="value",
        )

    if "harnack" in scn.checks:
        if h.kind == "conformal_torus":
            lo, hi = dens.window
            center = 0.5 * (lo + hi)
            times = np.linspace(center - 0.02 * (hi - lo), center + 0.02 * (hi - lo), 5)
        else:
            t1 = scn.t_span[1]
            center = min(max(1.0, 0.3 * t1), 0.9 * t1)
            times = np.linspace(center - 0.02, center + 0.02, 9)
        states = [dens.state_at(t) for t in times]
        birth = float(scn.params.get("birth_time", h.birth_time))
        rep_h = check_harnack_identity(states, h, birth_time=birth)
        rep_s = check_steady_harnack(states, h)
        rep_f = check_f_plus_evolution(states, h, birth_time=birth)
        tol = float(scn.tolerances.get(
            "harnack", 1e-8 if h.kind != "conformal_torus" else 1e-2))
        report["residuals"]["harnack.identity"] = rep_h.max_residual
        report["residuals"]["harnack.prefactor"] = rep_h.extra[
            "prefactor_identity_residual"]
        report["residuals"]["harnack.steady"] = rep_s.max_residual
        report["residuals"]["harnack.potential_evolution"] = rep_f.max_residual
        report["verdicts"]["harnack.rhs_nonnegative"] = rep_h.rhs_min >= 0.0
        report["verdicts"]["harnack.identity_below_tol"] = rep_h.max_residual <= tol
        report["tolerances"]["harnack"] = tol

    if "mu_nu" in scn.checks:
        sigmas = scn.params.get("sigmas", [0.25, 0.5, 1.0, 2.0])
        t_mid = 0.5 * (scn.t_span[0] + scn.t_span[1])
        m_mid = h.metric_at(t_mid)
        mu_rows = []
        for s in sigmas:
            res = mu_plus(m_mid, float(s))
            mu_rows.append([float(s), res.value, float(res.converged)])
        write_csv(series_dir / "mu_plus.csv", ["sigma", "mu_plus", "converged"], mu_rows)
        vals = [row[1] for row in mu_rows]
        d2 = np.diff(vals, 2) if len(vals) >= 3 else np.array([])
        report["verdicts"]["mu.concave_on_samples"] = bool(np.all(d2 <= 1e-8))
        nu = nu_plus(m_mid)
        report["fitted"]["nu_plus"] = None if nu.value is None else nu.value
        report["fitted"]["nu_sigma_star"] = nu.sigma_star
        report["fitted"]["nu_status"] = nu.status
        report["fitted"]["lambda_at_mid"] = nu.lambda_value

    reduced_field = None
    if {"reduced", "theta"} & set(scn.checks):
        reduced_field, extra = _build_reduced_field(scn, h)
        reduced_field.to_csv(series_dir / "reduced_field.csv")
        report["fitted"].update(extra)

    if "reduced" in scn.checks:
        rep_id = check_gradient_time_identities(reduced_field, h)
        rep_in = check_inequalities(reduced_field, h)
        tol_in = float(scn.tolerances.get("inequalities", 1e-4))
        report["residuals"]["reduced.identity"] = rep_id.max_residual
        report["residuals"]["reduced.worst_inequality"] = rep_in.max_residual
        report["residuals"]["reduced.excluded_fraction"] = rep_in.excluded_fraction
        report["verdicts"]["reduced.inequalities_hold"] = (
            max(rep_in.details["subsolution"], rep_in.details["entropy_form"]) <= tol_in
        )
        report["tolerances"]["reduced.inequalities"] = tol_in
        if reduced_field.oracle_values is not None and np.any(
            np.isfinite(reduced_field.oracle_values)
        ):
            fin = np.isfinite(reduced_field.oracle_values)
            rel = np.abs(reduced_field.ell[fin] - reduced_field.oracle_values[fin])
            rel = rel / np.maximum(1.0, np.abs(reduced_field.oracle_values[fin]))
            report["residuals"]["reduced.oracle_rel_gap"] = float(np.max(rel))
            report["verdicts"]["reduced.oracle_agrees"] = bool(np.max(rel) <= 1e-3)

    if "theta" in scn.checks:
        series = theta_plus(reduced_field, h)
        series.to_csv(series_dir / "theta.csv")
        report["verdicts"]["theta.nonincreasing"] = series.monotone_ok
        report["verdicts"]["theta.lower_bound"] = bool(
            np.all(series.theta >= series.lower_bound - 1e-12)
        )
        report["residuals"]["theta.max_violation"] = series.max_violation
        report["residuals"]["theta.supersolution_max"] = series.supersolution_max
        if h.kind == "model_space" and abs(h.metric_at(h.times[1]).scale) > 0:
            spread = float(np.max(series.theta) - np.min(series.theta))
            report["fitted"]["theta.spread"] = spread
        write_svg_chart(
            plots_dir / "theta.svg", f"{scn.name}: forward reduced volume",
            series.times, {"theta": series.theta, "lower_bound": series.lower_bound},
            y_label="theta",
        )

    if "asymptotics" in scn.checks:
        rep_a = asymptotics_report(h, dens)
        report["fitted"]["v_tilde_inf"] = rep_a.v_tilde_inf
        report["fitted"]["collapsed"] = rep_a.collapsed
        report["fitted"]["w_plus_limit_fit"] = rep_a.w_plus_limit_fit
        report["fitted"]["w_plus_limit_predicted"] = (
            None if math.isinf(rep_a.w_plus_limit_predicted)
            else rep_a.w_plus_limit_predicted
        )
        report["fitted"]["lambda_bar_limit_fit"] = rep_a.lambda_bar_limit_fit
        report["fitted"]["lambda_bar_limit_predicted"] = rep_a.lambda_bar_limit_predicted
        report["fitted"]["w_plus_log_growth_rate"] = rep_a.w_plus_log_growth_rate
        if not rep_a.collapsed:
            gap = abs(rep_a.w_plus_limit_fit - rep_a.w_plus_limit_predicted)
            report["residuals"]["asymptotics.w_limit_gap"] = gap
            report["verdicts"]["asymptotics.limits_match"] = gap <= float(
                scn.tolerances.get("asymptotics", 1e-3))
        p15 = long_time_residual_integral(
            h, dens, (max(scn.t_span[0], scn.t_span[1] / 100.0, 1e-2),
                      0.9 * scn.t_span[1]))
        report["fitted"]["residual_integral"] = p15.integral
        report["fitted"]["residual_decay_exponent"] = p15.decay_exponent

    if "blowdown" in scn.checks:
        alpha = float(scn.params.get("alpha", 8.0))
        bd = blowdown(h, BlowdownSpec(alpha=alpha))
        worst = 0.0
        for t in np.geomspace(max(bd.t_min, bd.t_max / 50.0, 1e-4), 0.9 * bd.t_max, 5):
            m_b, m_s = bd.metric_at(t), h.metric_at(alpha * t)
            u_b, u_s = 1.0 / volume(m_b), 1.0 / volume(m_s)
            if h.kind == "conformal_torus":
                u_b = np.full(m_b.phi.shape, u_b)
                u_s = np.full(m_s.phi.shape, u_s)
            worst = max(worst, abs(expander_entropy(m_b, u_b, t)
                                   - expander_entropy(m_s, u_s, alpha * t)))
            worst = max(worst, abs(scaled_volume(bd, t) - scaled_volume(h, alpha * t)))
            worst = max(worst, abs(lambda_bar(m_b) - lambda_bar(m_s)))
        tol_bd = float(scn.tolerances.get("blowdown", 1e-6))
        report["residuals"]["blowdown.invariance_gap"] = worst
        report["verdicts"]["blowdown.scale_invariant"] = worst <= tol_bd
        report["tolerances"]["blowdown"] = tol_bd

    report["failures"] = [k for k, v in report["verdicts"].items() if v is False]
    write_json(out / "report.json", report)
    return report


def _build_reduced_field(scn: Scenario, h):
    extra = {}
    if h.kind == "model_space":
        radii = np.asarray(scn.params.get("radii", np.linspace(0.0, 1.0, 9).tolist()))
        t_mid = float(scn.params.get(
            "reduced_t", 0.5 * (scn.t_span[0] + scn.t_span[1])))
        times = np.linspace(0.8 * t_mid, 1.2 * t_mid, 5)
        birth_scale = h.metric_at(h.t_min).scale
        if birth_scale < 1e-6:  # flow born at zero size: regularized ladder
            fields = [ell_plus_field(h, 0.0, radii, times, eps=e)
                      for e in (1e-3, 1e-4, 1e-5)]
            extra["reduced_eps_ladder"] = [1e-3, 1e-4, 1e-5]
            return extrapolate_fields(fields), extra
        return ell_plus_field(h, 0.0, radii, times, eps=0.0), extra
    nt = int(scn.params.get("target_grid", 12))
    pts = np.array([(i / nt, j / nt) for i in range(nt) for j in range(nt)])
    pts = pts * np.asarray(h.template.periods)
    t0, t1 = scn.t_span
    center = float(scn.params.get("reduced_t", 0.75 * t1))
    half = 0.05 * t1
    times = np.linspace(center - half, center + half, 5)
    oracle = bool(scn.params.get("oracle_check", h.kind == "conformal_torus"
                                 and nt <= 12))
    fld = ell_plus_field(h, (0.0, 0.0), pts, times, oracle_check=oracle,
                         grid_shape=(nt, nt))
    return fld, extra


def builtin_scenarios() -> dict:
    """Name -> importlib resource path of the packaged scenario configs."""
    out = {}
    root = resources.files("expanderlab") / "scenarios"
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".json"):
            out[entry.name[:-5]] = entry
    return out


def run_scenario(config_path, out_dir=None, threads: int = 1) -> int:
    """Run a scenario config file; returns the process exit code."""
    path = Path(config_path)
    try:
        text = path.read_text()
    except OSError as exc:
        print(f"error: cannot read {path}: {exc}", file=sys.stderr)
        return 2
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        print(f"error: {path}:{exc.lineno}:{exc.colno}: {exc.msg}", file=sys.stderr)
        return 2
    docs = doc.get("scenarios", [doc]) if isinstance(doc, dict) else None
    if not docs:
        print(f"error: {path}: expected a scenario object or a scenarios list",
              file=sys.stderr)
        return 2
    try:
        scenarios = [Scenario.from_doc(d) for d in docs]
    except ConfigError as exc:
        print(f"error: {path}: {exc}", file=sys.stderr)
        return 2
    names = [s.name for s in scenarios]
    if len(set(names)) != len(names):
        print(f"error: {path}: scenario names must be unique per run", file=sys.stderr)
        return 2
    out = Path(out_dir) if out_dir else path.parent / "lab_out"
    exit_code = 0
    if threads > 1 and len(docs) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {pool.submit(run_scenario_doc, d, out): d for d in docs}
            for fut in concurrent.futures.as_completed(futures):
                rep = fut.result()
                exit_code = _report_outcome(rep, out, exit_code)
    else:
        for d in docs:
            rep = run_scenario_doc(d, out)
            exit_code = _report_outcome(rep, out, exit_code)
    return exit_code


def _report_outcome(rep: dict, out: Path, exit_code: int) -> int:
    status = "ok" if not rep["failures"] else f"FAILED: {', '.join(rep['failures'])}"
    print(f"{rep['scenario']}: {status}  -> {out / rep['scenario'] / 'report.json'}")
    return exit_code if not rep["failures"] else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lab",
        description="desk-scale monotonicity laboratory for long-time curvature flow",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run a scenario config")
    p_run.add_argument("config", help="path to a scenario JSON config")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--threads", type=int, default=1,
                       help="worker threads for multi-scenario configs")
    p_accept = sub.add_parser("accept", help="run the acceptance suite")
    p_accept.add_argument("--suite", choices=("fast", "full"), default="fast")
    sub.add_parser("list", help="list packaged scenario configs")
    args = parser.parse_args(argv)

    if args.command == "run":
        return run_scenario(args.config, args.out, args.threads)
    if args.command == "accept":
        from .acceptance import run_acceptance

        results = run_acceptance(args.suite)
        return 0 if all(r.passed for r in results) else 1
    if args.command == "list":
        for name, entry in builtin_scenarios().items():
            doc = json.loads(entry.read_text())
            desc = doc.get("description", "")
            print(f"{name:<24s} {desc}")
            print(f"{'':<24s} config: {entry}")
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
