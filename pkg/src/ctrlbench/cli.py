"""Command-line entry point: ``ctrlbench <command> [options]``.

Commands:

* ``gen-chem``    write the reaction-network training data and test cases
* ``score-chem``  score an impulse submission
* ``fit-chem``    identify the reaction fields from training data
* ``plan-chem``   plan impulses for the test cases (fitted model, true model or zero)
* ``gen-robo``    write the robot system list and training trajectories
* ``fit-robo``    identify one model per robot system
* ``run-robo``    calibrate and evaluate a controller on the robot systems
* ``report``      summarize score reports

Exit codes: 0 success, 2 invalid input, 3 file-system errors.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, chem, robo
from .controllers.base import ZeroController
from .controllers.chem_plan import plan_impulses
from .controllers.chem_sysid import FitError, FittedChemModel, fit_chem_model
from .controllers.lqr import oracle_lqr
from .controllers.robot_sysid import (
    FitError as RobotFitError,
    fit_linear_surrogate,
    fit_robot_model,
    model_from_json,
    sysid_lqr_controller,
)
from .protocol import DEFAULT_BUDGET_S, SubprocessController
from .robots import build_system_table, system_table_from_json, system_table_json

log = logging.getLogger("ctrlbench")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 2, 3
BUILTIN_CONTROLLERS = ("zero", "oracle-lqr", "sysid-lqr")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("LBD_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise CliError(f"LBD_SEED must be an integer, got {env!r}") from None


def default_jobs(jobs: int | None) -> int:
    return jobs if jobs and jobs > 0 else (os.cpu_count() or 1)


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _read(path: Path) -> str:
    return Path(path).read_text()


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, settings: dict, files: list[Path]) -> Path:
    """Reproducibility record: settings, versions and a hash per written file."""
    manifest = {
        "command": command,
        "settings": settings,
        "versions": {
            "ctrlbench": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "files": {str(f.relative_to(out)): sha256(f) for f in sorted(files)},
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    return _write(out / f"manifest_{command}.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _json_dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# reaction-network track


def cmd_gen_chem(args) -> int:
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    spec = chem.sample_ensemble(seed)
    if args.noise is not None:
        spec = chem.with_noise_sigma(spec, args.noise)
    episodes = chem.generate_training_data(spec, args.runs)
    cases = chem.generate_test_cases(spec, args.cases)
    files = [
        _write(out / "training.csv", chem.training_csv(episodes)),
        _write(out / "test_cases.csv", chem.test_cases_csv(cases)),
        _write(out / "private" / "chem_spec.json", _json_dump(spec.to_json())),
    ]
    write_manifest(out, "gen-chem", {"seed": seed, "runs": args.runs, "cases": args.cases,
                                     "noise": args.noise}, files)
    print(f"wrote {len(episodes)} training runs and {len(cases)} test cases to {out}")
    return EXIT_OK


def _load_chem_spec(path) -> chem.ChemSystemSpec:
    try:
        return chem.ChemSystemSpec.from_json(_read(path))
    except (KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"{path}: not a reaction-network spec ({exc})") from exc


def _cases_by_system(cases) -> dict[int, list]:
    by: dict[int, list] = {}
    for tc in cases:
        by.setdefault(tc.system, []).append(tc)
    return {k: sorted(v, key=lambda c: c.case) for k, v in sorted(by.items())}


def cmd_score_chem(args) -> int:
    spec = _load_chem_spec(args.spec)
    cases = chem.read_test_cases_csv(_read(args.cases), spec)
    per = len(_cases_by_system(cases)[1])
    controls = chem.read_submission_csv(_read(args.submission), per)
    report = chem.evaluate_submission(spec, cases, controls, tol=args.tol)
    for i, v in enumerate(report.per_system, start=1):
        print(f"system {i:2d}: J = {v:.6f}")
    print(f"grand mean: {report.grand_mean:.6f}")
    if args.out:
        _write(Path(args.out), _json_dump(report.to_json()))
    return EXIT_OK


def cmd_fit_chem(args) -> int:
    runs = chem.read_training_csv(_read(args.training))
    model = fit_chem_model(runs, args.sparsity)
    _write(Path(args.out), _json_dump(model.to_json()))
    d = model.diagnostics
    print(f"support: {d['support_size']} field coefficients, {d['control_support_size']} control entries")
    return EXIT_OK


def _plan_one(model, tcs, controls, seed, tol):
    x0 = np.stack([tc.x0 for tc in tcs])
    ystar = np.array([tc.ystar for tc in tcs])
    return plan_impulses(model, x0, ystar, controls=controls, seed=seed, tol=tol).u


def cmd_plan_chem(args) -> int:
    cases = chem.read_test_cases_csv(_read(args.cases))
    by = _cases_by_system(cases)
    per = len(by[1])
    controls = chem.WEAK_CONTROLS if args.weak_only else tuple(range(chem.N_CONTROLS))
    if args.zero:
        U = np.zeros((chem.N_SYSTEMS, per, chem.N_CONTROLS))
    else:
        if bool(args.model) == bool(args.oracle_spec):
            raise CliError("give exactly one of --model, --oracle-spec or --zero")
        if args.model:
            fitted = FittedChemModel.from_json(_read(args.model))
            models = [fitted.model(i) for i in range(fitted.n_systems)]
        else:
            spec = _load_chem_spec(args.oracle_spec)
            models = [spec.model(i) for i in range(chem.N_SYSTEMS)]
        if len(models) != chem.N_SYSTEMS:
            raise CliError(f"model has {len(models)} systems, expected {chem.N_SYSTEMS}")
        jobs = default_jobs(args.jobs)
        seed = resolve_seed(args.seed)
        if jobs == 1:
            plans = [_plan_one(models[i], by[i + 1], controls, seed, args.tol) for i in range(chem.N_SYSTEMS)]
        else:
            from joblib import Parallel, delayed

            plans = Parallel(n_jobs=jobs)(
                delayed(_plan_one)(models[i], by[i + 1], controls, seed, args.tol)
                for i in range(chem.N_SYSTEMS)
            )
        U = np.stack(plans)
    _write(Path(args.out), chem.submission_csv(U))
    print(f"wrote {U.shape[0] * U.shape[1]} impulses to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# robot track


def _training_name(index: int) -> str:
    return f"system_{index:02d}.csv"


def cmd_gen_robo(args) -> int:
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    systems = build_system_table(seed)
    public = [{"system": s.index, "name": s.name, "p": s.p, "d": s.d} for s in systems]
    files = [
        _write(out / "systems.json", _json_dump(public)),
        _write(out / "private" / "system_table.json", system_table_json(systems) + "\n"),
    ]
    select = _select(systems, args.systems)
    jobs = default_jobs(args.jobs)

    def gen(system):
        runs = robo.generate_training_trajectories(system, args.runs, seed, tol=args.tol)
        return system.index, robo.training_csv(runs)

    if jobs == 1:
        tables = [gen(s) for s in select]
    else:
        from joblib import Parallel, delayed

        tables = Parallel(n_jobs=jobs)(delayed(gen)(s) for s in select)
    for index, text in tables:
        files.append(_write(out / "training" / _training_name(index), text))
    write_manifest(out, "gen-robo", {"seed": seed, "runs": args.runs, "tol": args.tol,
                                     "systems": [s.index for s in select]}, files)
    print(f"wrote training data for {len(select)} systems to {out}")
    return EXIT_OK


def _select(systems, wanted):
    if not wanted:
        return list(systems)
    idx = set(wanted)
    unknown = idx - {s.index for s in systems}
    if unknown:
        raise CliError(f"unknown system indices: {sorted(unknown)}")
    return [s for s in systems if s.index in idx]


def cmd_fit_robo(args) -> int:
    train_dir = Path(args.training)
    out = Path(args.out)
    paths = sorted(train_dir.glob("system_*.csv"))
    if not paths:
        raise CliError(f"no system_*.csv files in {train_dir}", EXIT_IO)
    for path in paths:
        runs = robo.read_training_csv(path.read_text())
        index = runs[0].system
        try:
            model = fit_robot_model(runs)
            text = model.to_json()
            what = f"{model.kind.value}, residual {model.residual_rms:.2e}"
        except RobotFitError as exc:
            log.warning("system %d: structured fit failed (%s); using a linear surrogate", index, exc)
            text = fit_linear_surrogate(runs).to_json()
            what = "linear surrogate"
        _write(out / f"system_{index:02d}.json", text + "\n")
        print(f"system {index:2d}: {what}")
    return EXIT_OK


def _load_systems(args):
    if args.data:
        path = Path(args.data) / "private" / "system_table.json"
        return system_table_from_json(_read(path)), path
    return build_system_table(resolve_seed(args.seed)), None


def _controller_factory(args):
    name = args.controller
    if name == "zero":
        return lambda system: ZeroController(system.p)
    if name == "oracle-lqr":
        return lambda system: oracle_lqr(system.spec, system.interface)
    if name == "sysid-lqr":
        if not args.models:
            raise CliError("sysid-lqr needs --models (the output directory of fit-robo)")
        models = {}
        for path in sorted(Path(args.models).glob("system_*.json")):
            models[int(path.stem.split("_")[1])] = model_from_json(path.read_text())

        def make(system):
            if system.index not in models:
                raise OSError(f"no fitted model for system {system.index}")
            return sysid_lqr_controller(models[system.index])

        return make
    budget = DEFAULT_BUDGET_S if args.budget_ms is None else args.budget_ms / 1000.0
    return lambda system: SubprocessController(name, budget)


def cmd_run_robo(args) -> int:
    systems, table_path = _load_systems(args)
    systems = _select(systems, args.systems)
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    jobs = default_jobs(args.jobs)
    key = f"seed{seed}_n{args.targets}_tol{args.tol:g}_" + "-".join(str(s.index) for s in systems)
    cache = out / "private" / f"calibration_{hashlib.sha256(key.encode()).hexdigest()[:12]}.json"
    if cache.exists():
        calibrated = robo.calibration_from_json(cache.read_text())
    else:
        calibrated = robo.calibrate_table(systems, args.targets, seed, tol=args.tol, jobs=jobs)
        _write(cache, robo.calibration_json(calibrated))
    factory = _controller_factory(args)
    report, _ = robo.evaluate_controller(systems, calibrated, factory, tol=args.tol, jobs=jobs)
    label = args.label or (args.controller if args.controller in BUILTIN_CONTROLLERS else "external")
    path = _write(out / f"report_{label}.json", report.to_json() + "\n")
    files = [path, cache]
    if table_path is not None:
        files.append(table_path)
    settings = {"seed": seed, "targets": args.targets, "tol": args.tol, "controller": args.controller,
                "budget_ms": args.budget_ms, "systems": [s.index for s in systems]}
    write_manifest(out, f"run-robo_{label}", settings, [f for f in files if out in f.parents])
    for index, v in report.per_system().items():
        print(f"system {index:2d}: {v:.6f}")
    print(f"grand mean: {report.grand_mean:.6f}")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for path in args.reports:
        data = json.loads(_read(path))
        track = data.get("track", "robo")
        rows.append((Path(path).name, track, float(data["grand_mean"])))
    width = max(len(r[0]) for r in rows)
    print(f"{'report':<{width}}  track  grand mean")
    for name, track, mean in rows:
        print(f"{name:<{width}}  {track:<5}  {mean:.6f}")
    if args.out:
        _write(Path(args.out), _json_dump([{"report": n, "track": t, "grand_mean": m} for n, t, m in rows]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctrlbench", description="Control benchmark for reaction networks and robot arms.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True, out=True, tol=None, jobs=False):
        if seed:
            p.add_argument("--seed", type=int, default=None, help="seed (falls back to $LBD_SEED, then 0)")
        if out:
            p.add_argument("--out", required=True, help="output directory or file")
        if tol is not None:
            p.add_argument("--tol", type=float, default=tol, help="integration tolerance")
        if jobs:
            p.add_argument("--jobs", type=int, default=None, help="worker processes (default: CPU count)")

    p = sub.add_parser("gen-chem", help="generate reaction-network data")
    common(p)
    p.add_argument("--runs", type=int, default=chem.RUNS_PER_SYSTEM)
    p.add_argument("--cases", type=int, default=chem.CASES_PER_SYSTEM)
    p.add_argument("--noise", type=float, default=None, help="override the observation noise level")
    p.set_defaults(func=cmd_gen_chem)

    p = sub.add_parser("score-chem", help="score an impulse submission")
    p.add_argument("--spec", required=True, help="private/chem_spec.json from gen-chem")
    p.add_argument("--cases", required=True, help="test_cases.csv")
    p.add_argument("--submission", required=True, help="submission CSV (system, case, u1..u8)")
    p.add_argument("--out", default=None, help="JSON report path")
    p.add_argument("--tol", type=float, default=chem.DEFAULT_TOL)
    p.set_defaults(func=cmd_score_chem)

    p = sub.add_parser("fit-chem", help="identify reaction fields from training data")
    p.add_argument("--training", required=True)
    p.add_argument("--out", required=True, help="fitted model JSON path")
    p.add_argument("--sparsity", type=float, default=1e-3, help="relative group-sparsity weight")
    p.set_defaults(func=cmd_fit_chem)

    p = sub.add_parser("plan-chem", help="plan impulses for the test cases")
    common(p, tol=1e-6, jobs=True)
    p.add_argument("--cases", required=True)
    p.add_argument("--model", default=None, help="fitted model JSON from fit-chem")
    p.add_argument("--oracle-spec", default=None, help="plan with the true model (private spec JSON)")
    p.add_argument("--zero", action="store_true", help="write the all-zero submission")
    p.add_argument("--weak-only", action="store_true", help="only move the weak controls U5..U8")
    p.set_defaults(func=cmd_plan_chem)

    p = sub.add_parser("gen-robo", help="generate robot training data")
    common(p, tol=robo.DEFAULT_TOL, jobs=True)
    p.add_argument("--runs", type=int, default=robo.TRAINING_RUNS)
    p.add_argument("--systems", type=int, nargs="*", default=None, help="subset of system indices")
    p.set_defaults(func=cmd_gen_robo)

    p = sub.add_parser("fit-robo", help="identify robot models")
    p.add_argument("--training", required=True, help="training directory from gen-robo")
    p.add_argument("--out", required=True, help="directory for fitted model JSON files")
    p.set_defaults(func=cmd_fit_robo)

    p = sub.add_parser("run-robo", help="evaluate a controller on the robot systems")
    common(p, tol=robo.DEFAULT_TOL, jobs=True)
    p.add_argument("--controller", required=True,
                   help=f"one of {', '.join(BUILTIN_CONTROLLERS)} or a command line speaking the NDJSON protocol")
    p.add_argument("--data", default=None, help="gen-robo output directory (uses its system table)")
    p.add_argument("--models", default=None, help="fit-robo output directory, for sysid-lqr")
    p.add_argument("--budget-ms", type=float, default=None, help="per-step reply budget for external controllers")
    p.add_argument("--targets", type=int, default=robo.TARGETS_PER_SYSTEM)
    p.add_argument("--systems", type=int, nargs="*", default=None)
    p.add_argument("--label", default=None, help="report name (default: controller name)")
    p.set_defaults(func=cmd_run_robo)

    p = sub.add_parser("report", help="summarize score reports")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (FitError, RobotFitError, chem.SubmissionError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
