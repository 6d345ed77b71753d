"""Command-line scenario runner.

Examples
--------
::

    planarvio --list-profiles
    planarvio --scenario varying --analysis observability --out runs/varying
    planarvio --scenario my_scenario.json --analysis both --seed 7 --check

Output files (all CSV files have a header row):

``scenario.json``
    The resolved scenario, including the seed.
``log/{imu,commands,frames,stereo}.csv``
    The simulated measurement log.
``observability_rank.csv``
    ``analysis, measurements, rows, cols, rank, nullspace_dim``.
``observability_candidates.csv``
    ``analysis, candidate, residual, max_principal_angle_rad``.
``rbf_singular_values.csv``
    ``index, singular_value``.
``estimate_report.json``
    Solver report (iterations, costs, parameters, marginal std devs).
``estimate_errors.csv``
    ``quantity, truth, estimate, error``.
``summary.json``
    Everything above that CI might assert on, plus the check results.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis
from .estimator import EstimatorConfig
from .observability import MEASUREMENTS
from .simulator import PROFILES, Scenario, generate

DEFAULT_MEASUREMENTS = ("plane", "motion", "features")

# thresholds used by --check
CHECK_PLANE_PRODUCT = 1e-8
CHECK_D_COMPONENT = 1e-10
CHECK_ORIENTATION_PROJECTION = 1e-6
CHECK_RBF_DEGENERATE = 1e-12
CHECK_RBF_CONDITION = 1e-8
CHECK_RBF_RELATIVE = 0.10
CHECK_PLANE_ANGLE_DEG = 0.5
GENERAL_MOTION = ("circle", "varying", "stop-and-go")


class ConfigError(Exception):
    pass


def list_profiles(stream=None) -> str:
    text = "\n".join(f"{name:<12} {desc}" for name, (_, desc) in PROFILES.items())
    print(text, file=stream or sys.stdout)
    return text


def load_scenario(source: str, seed: int | None = None) -> Scenario:
    """Built-in profile name or path to a JSON scenario file."""
    try:
        if source in PROFILES:
            sc = Scenario(profile=source)
        else:
            path = Path(source)
            if not path.is_file():
                raise ConfigError(f"{source!r} is neither a built-in profile ({', '.join(PROFILES)}) nor a file")
            sc = Scenario.load(path)
        if seed is not None:
            sc = replace(sc, seed=seed)
        sc.validate()
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid scenario {source!r}: {exc}") from exc
    return sc


def parse_measurements(text: str) -> tuple[str, ...]:
    items = tuple(dict.fromkeys(s.strip() for s in text.split(",") if s.strip()))
    if not items:
        raise ConfigError("measurement selection is empty")
    bad = [m for m in items if m not in MEASUREMENTS]
    if bad:
        raise ConfigError(f"unknown measurement(s) {bad}; choose from {list(MEASUREMENTS)}")
    return items


def estimator_config(measurements, seed: int) -> EstimatorConfig:
    forward = "motion_forward" in measurements
    return EstimatorConfig(
        stereo="features" in measurements,
        motion=forward or "motion" in measurements,
        motion_model="forward" if forward and "motion" not in measurements else "inverse",
        plane="plane" in measurements,
        seed=seed,
    )


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def _check(results: list, name: str, ok: bool, value) -> None:
    results.append({"check": name, "passed": bool(ok), "value": value})


def run_observability(sc: Scenario, measurements, out: Path, frames: int, checks: list) -> dict:
    scn = analysis.observability_state(sc, frames)
    rank_rows, cand_rows = analysis.observability_tables(scn, measurements)
    _write_csv(out / "observability_rank.csv", ["analysis", "measurements", "rows", "cols", "rank", "nullspace_dim"], rank_rows)
    _write_csv(out / "observability_candidates.csv", ["analysis", "candidate", "residual", "max_principal_angle_rad"], cand_rows)
    summary: dict = {"frames": len(scn.times), "first_time": float(scn.times[0])}

    if "plane" in measurements:
        summary["plane_product"] = analysis.plane_product(scn)
        summary["d_direction"] = analysis.d_direction(scn)
        _check(checks, "plane_product", summary["plane_product"] < CHECK_PLANE_PRODUCT, summary["plane_product"])
        dd = summary["d_direction"]
        _check(
            checks,
            "d_observable",
            dd["d_column_exact"] and dd["d_nullspace_component"] < CHECK_D_COMPONENT,
            dd["d_nullspace_component"],
        )
    if "motion" in measurements or "motion_forward" in measurements:
        inv, fwd = analysis.motion_ranks(scn)
        summary["motion_rank"] = {"inverse": inv, "forward": fwd}
        _check(checks, "forward_inverse_rank", inv == fwd, [inv, fwd])
        rbf = analysis.rbf_summary(scn)
        summary["rbf"] = rbf
        _write_csv(out / "rbf_singular_values.csv", ["index", "singular_value"], list(enumerate(rbf["singular_values"])))
        cols = rbf["column_max"]
        if sc.profile == "straight":
            degenerate = max(cols["mu"], cols["sigma"])
            _check(checks, "rbf_shape_unobservable", degenerate < CHECK_RBF_DEGENERATE, degenerate)
        elif sc.profile == "varying":
            ok = rbf["rank"] == 3 and rbf["condition_ratio"] > CHECK_RBF_CONDITION
            _check(checks, "rbf_observable", ok, rbf["condition_ratio"])
    if "features" in measurements:
        op = analysis.orientation_projection(scn)
        summary["orientation"] = op
        # the 4-dimensional gauge needs rotating motion
        general = sc.profile in GENERAL_MOTION
        if general:
            _check(checks, "feature_nullspace_dim", op["feature_nullspace_dim"] == 4, op["feature_nullspace_dim"])
        if general and "plane" in measurements:
            v = op["max_orientation_projection"]
            _check(checks, "orientation_observable", v < CHECK_ORIENTATION_PROJECTION, v)
    summary["ranks"] = [dict(zip(("analysis", "measurements", "rows", "cols", "rank", "nullspace_dim"), r)) for r in rank_rows]
    return summary


def run_estimate(sc: Scenario, measurements, out: Path, checks: list, rbf_observable: bool | None) -> dict:
    report, errors, truth = analysis.estimate(sc, estimator_config(measurements, sc.seed))
    (out / "estimate_report.json").write_text(report.to_json() + "\n")
    e = report.estimate
    names = ("s_lin", "mu_lin", "sigma_lin", "s_ang", "mu_ang", "sigma_ang")
    rows = [["plane_d", truth.plane.d, e.plane.d, e.plane.d - truth.plane.d]]
    for i, axis in enumerate("xyz"):
        rows.append([f"plane_normal_{axis}", truth.plane.normal[i], e.plane.normal[i], e.plane.normal[i] - truth.plane.normal[i]])
    for n, a, b in zip(names, truth.rbf.as_array(), e.rbf):
        rows.append([n, a, b, b - a])
    for i, axis in enumerate("xyz"):
        rows.append([f"ext_t_{axis}", truth.extrinsics.t[i], e.extrinsics.t[i], e.extrinsics.t[i] - truth.extrinsics.t[i]])
    rows.append(["plane_angle_deg", 0.0, errors["plane_angle_deg"], errors["plane_angle_deg"]])
    rows.append(["gravity_direction_deg", 0.0, errors["gravity_direction_deg"], errors["gravity_direction_deg"]])
    rows.append(["final_position_m", 0.0, errors["final_position"], errors["final_position"]])
    _write_csv(out / "estimate_errors.csv", ["quantity", "truth", "estimate", "error"], rows)

    if "plane" in measurements:
        _check(checks, "plane_angle", errors["plane_angle_deg"] < CHECK_PLANE_ANGLE_DEG, errors["plane_angle_deg"])
    if rbf_observable:
        worst = max(abs(v) for v in errors["rbf_relative"].values())
        _check(checks, "rbf_recovery", worst < CHECK_RBF_RELATIVE, worst)
    return {"report": report.to_dict(), "errors": errors}


def run(args) -> int:
    sc = load_scenario(args.scenario, args.seed)
    measurements = parse_measurements(args.measurements)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / ".write_test").write_text("")
        (out / ".write_test").unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {str(out)!r} is not writable: {exc}") from exc

    sc.dump(out / "scenario.json")
    truth, log_ = generate(sc)
    log_.to_csv(out / "log")
    summary: dict = {"scenario": sc.to_dict(), "measurements": list(measurements), "analysis": args.analysis}
    checks: list = []

    rbf_observable = None
    if args.analysis in ("observability", "both"):
        summary["observability"] = run_observability(sc, measurements, out, args.obs_frames, checks)
        rbf = summary["observability"].get("rbf")
        rbf_observable = rbf is not None and rbf["rank"] == 3
    if args.analysis in ("estimate", "both"):
        if rbf_observable is None and {"motion", "motion_forward"} & set(measurements):
            rbf_observable = analysis.rbf_summary(analysis.observability_state(sc, args.obs_frames))["rank"] == 3
        summary["estimate"] = run_estimate(sc, measurements, out, checks, rbf_observable)

    summary["checks"] = checks
    passed = all(c["passed"] for c in checks)
    summary["all_checks_passed"] = passed
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['check']}: {c['value']}")
    if args.check and not passed:
        print("one or more checks failed", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="planarvio", description="Planar-constrained VIO observability and estimation runs.")
    p.add_argument("--scenario", default="varying", help="built-in profile name or scenario JSON file")
    p.add_argument("--analysis", choices=("observability", "estimate", "both"), default="both")
    p.add_argument("--out", default="planarvio_out", help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the scenario seed (unsigned 64-bit)")
    p.add_argument("--check", action="store_true", help="exit nonzero when a threshold check fails")
    p.add_argument(
        "--measurements",
        default=",".join(DEFAULT_MEASUREMENTS),
        help=f"comma list from {','.join(MEASUREMENTS)}",
    )
    p.add_argument("--obs-frames", type=int, default=10, help="frames in the observability window")
    p.add_argument("--list-profiles", action="store_true", help="print built-in profiles and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.list_profiles:
        list_profiles()
        return 0
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {args.seed}")
        if args.obs_frames < 2:
            raise ConfigError("--obs-frames must be at least 2")
        return run(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
