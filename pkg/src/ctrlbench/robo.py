"""Closed-loop trajectory tracking with robot arms.

An episode lasts two seconds on a 201-point grid.  At each of the 200 steps the
controller sees the Cartesian observation and the next target point and
returns an abstract control ``U``; the arm then moves for one step under the
constant actuation ``C = A U``.  Losses are

    J = b * int ||Z - z*||^2 dt + c * int U'U dt

with ``(b, c)`` calibrated per (system, target) so that doing nothing scores
100 and the oracle tracking LQR scores 1.  Reported scores are clipped at 100.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.interpolate import CubicSpline

from .controllers.base import Controller, ControllerDied, EpisodeInfo, ZeroController
from .controllers.lqr import oracle_lqr
from .ode import DivergenceError, StiffnessError, solve_segment
from .robots import Observation, RobotSpec, RobotSystem

log = logging.getLogger(__name__)

GRID = np.linspace(0.0, 2.0, 201)
DT = 0.01
N_STEPS = 200
TARGETS_PER_SYSTEM = 10
TRAINING_RUNS = 50
DEFAULT_TOL = 1e-8
SCORE_CAP = 100.0


def _rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 7002, *map(int, path)]))


# ---------------------------------------------------------------------------
# episodes


@dataclass(eq=False)
class EpisodeResult:
    """Everything recorded during one closed-loop run.

    ``U`` and ``C`` hold the applied controls for steps ``0..199``.  An aborted
    episode (controller death or numerical blow-up) keeps NaN rows after the
    failure and always scores the cap.
    """

    system: int
    episode: int
    times: np.ndarray
    states: np.ndarray
    Z: np.ndarray
    W: np.ndarray
    dZ: np.ndarray
    dW: np.ndarray
    U: np.ndarray
    C: np.ndarray
    target: np.ndarray
    timeout_steps: list[int] = field(default_factory=list)
    aborted: bool = False
    diagnostic: str = ""

    @property
    def timeouts(self) -> int:
        return len(self.timeout_steps)

    @property
    def tracking(self) -> float:
        """``int_0^2 ||Z - z*||^2 dt`` by the trapezoid rule on the grid."""
        if self.aborted:
            return math.inf
        sq = np.sum((self.Z - self.target) ** 2, axis=1)
        return float(np.trapezoid(sq, self.times))

    @property
    def effort(self) -> float:
        """``int_0^2 U'U dt``; exact for controls held over each step."""
        if self.aborted:
            return math.inf
        return float(np.sum(self.U**2) * DT)


def step_arm(model, x, tau, t0: float, t1: float, tol: float = DEFAULT_TOL) -> np.ndarray:
    """State at ``t1`` under torque ``tau`` held constant from ``t0``."""
    tau = np.asarray(tau, dtype=float)
    _, x1 = solve_segment(
        lambda t, y: model.rhs(y, tau), t0, t1, x, np.empty(0), rtol=tol, atol=tol * 1e-2
    )
    return x1


def _valid_reply(U, p: int) -> np.ndarray | None:
    if U is None:
        return None
    try:
        U = np.asarray(U, dtype=float)
    except (TypeError, ValueError):
        return None
    if U.shape != (p,) or not np.all(np.isfinite(U)):
        return None
    return U


def run_episode(
    system: RobotSystem,
    controller: Controller,
    target: np.ndarray,
    *,
    x0=None,
    episode: int = 1,
    tol: float = DEFAULT_TOL,
) -> EpisodeResult:
    """Run ``controller`` against ``target`` (shape ``(201, 2)``).

    Missing, late or malformed replies apply zero control for that step and
    are logged in ``timeout_steps``.  Controller death aborts the episode.
    """
    spec = system.spec
    itf = system.interface
    n, p = spec.n, itf.p
    target = np.asarray(target, dtype=float)
    if target.shape != (len(GRID), 2):
        raise ValueError(f"target must have shape {(len(GRID), 2)}, got {target.shape}")
    x = spec.home_state() if x0 is None else np.array(x0, dtype=float)
    states = np.full((len(GRID), 2 * n), np.nan)
    U = np.full((N_STEPS, p), np.nan)
    C = np.full((N_STEPS, n), np.nan)
    states[0] = x
    timeouts: list[int] = []
    aborted, diagnostic = False, ""
    info = EpisodeInfo(system.index, episode, p, system.d, tuple(float(t) for t in GRID))
    try:
        controller.start(info)
        for step in range(N_STEPS):
            obs = spec.observe(x)
            obs = Observation(obs.W, obs.Z, obs.dW, obs.dZ, float(GRID[step]))
            reply = _valid_reply(controller.query(step, obs, target[step + 1]), p)
            if reply is None:
                timeouts.append(step)
                reply = np.zeros(p)
            U[step] = reply
            C[step] = itf.actuation(reply)
            x = step_arm(spec, x, C[step], GRID[step], GRID[step + 1], tol)
            states[step + 1] = x
    except ControllerDied as exc:
        aborted, diagnostic = True, f"controller died: {exc}"
    except (DivergenceError, StiffnessError, np.linalg.LinAlgError) as exc:
        aborted, diagnostic = True, f"simulation failed: {exc}"
    finally:
        try:
            controller.finish()
        except ControllerDied:
            pass
    if aborted:
        log.warning("system %d episode %d aborted: %s", system.index, episode, diagnostic)
    obs = spec.observe(states)
    return EpisodeResult(
        system.index, episode, GRID.copy(), states, obs.Z, obs.W, obs.dZ, obs.dW, U, C, target,
        timeouts, aborted, diagnostic,
    )


# ---------------------------------------------------------------------------
# calibration and scoring


class DegenerateTargetError(ValueError):
    """The uncontrolled arm already follows the target, so no scale exists."""


@dataclass(frozen=True)
class Calibration:
    b: float
    c: float
    degenerate: bool = False

    def loss(self, tracking: float, effort: float) -> float:
        return self.b * tracking + self.c * effort

    def to_dict(self) -> dict:
        return {"b": self.b, "c": self.c, "degenerate": self.degenerate}


def calibrate_scaling(zero_tracking: float, oracle_tracking: float, oracle_effort: float) -> Calibration:
    """Solve ``b E_zero = 100`` and ``b E_oracle + c U_oracle = 1``.

    When the oracle is so good that ``c`` would be non-positive, ``c`` falls
    back to zero and the calibration is flagged degenerate.
    """
    if not zero_tracking > 0:
        raise DegenerateTargetError("zero-control tracking error is zero")
    b = SCORE_CAP / zero_tracking
    if not oracle_effort > 0:
        return Calibration(b, 0.0, True)
    c = (1.0 - b * oracle_tracking) / oracle_effort
    if c <= 0:
        return Calibration(b, 0.0, True)
    return Calibration(b, c)


def episode_score(result: EpisodeResult, cal: Calibration) -> tuple[float, float]:
    """``(raw, clipped)`` loss; aborted episodes score the cap."""
    if result.aborted:
        return math.inf, SCORE_CAP
    raw = cal.loss(result.tracking, result.effort)
    return raw, min(raw, SCORE_CAP)


# ---------------------------------------------------------------------------
# targets


def workspace_bounds(spec: RobotSpec) -> tuple[float, float]:
    """Inner and outer reach radius of a rotational arm."""
    L = spec.lengths
    return max(0.0, 2 * float(L.max()) - float(L.sum())), float(L.sum())


def in_workspace(spec: RobotSpec, points, margin: float = 0.0) -> np.ndarray:
    """Whether tip positions are reachable.

    Rotational arms reach an annulus around the base.  The prismatic arm is
    limited to extensions within half its rest lengths, a box around the rest
    tip.
    """
    pts = np.asarray(points, dtype=float)
    if spec.kind.rotational:
        inner, outer = workspace_bounds(spec)
        r = np.linalg.norm(pts, axis=-1)
        return (r <= outer * (1 - margin) + 1e-12) & (r >= inner + margin * outer - 1e-12)
    q = spec.lengths
    lo = np.array([0.5 * q[1], 0.5 * q[0]]) + margin * q[::-1]
    hi = np.array([1.5 * q[1], 1.5 * q[0]]) - margin * q[::-1]
    return np.all((pts >= lo - 1e-12) & (pts <= hi + 1e-12), axis=-1)


def _random_point(spec: RobotSpec, rng) -> np.ndarray:
    if spec.kind.rotational:
        inner, outer = workspace_bounds(spec)
        r = rng.uniform(inner + 0.2 * outer, 0.85 * outer)
        phi = rng.uniform(-np.pi, np.pi)
        return r * np.array([np.sin(phi), np.cos(phi)])
    q = spec.lengths
    return np.array([q[1] * rng.uniform(0.6, 1.4), q[0] * rng.uniform(0.6, 1.4)])


def generate_target(spec: RobotSpec, rng: np.random.Generator, *, waypoints: int = 3,
                    max_tries: int = 500) -> np.ndarray:
    """One smooth target path starting at rest at the home tip.

    A cubic spline with zero end velocities passes through random workspace
    waypoints; consecutive waypoints are at most 40% of the reach apart so the
    path is trackable.  Rotational arms start fully stretched, so their paths
    are splined in polar coordinates (radius and angle from the vertical),
    which keeps the radius from bulging past the reach.  Paths leaving the
    workspace are redrawn.
    """
    start = spec.tip(spec.home_state()[: spec.n])
    polar = spec.kind.rotational
    scale = spec.reach if polar else float(np.min(spec.lengths))
    for _ in range(max_tries):
        knots = np.sort(rng.uniform(0.3, 1.9, waypoints - 1))
        times = np.concatenate([[0.0], knots, [2.0]])
        if np.min(np.diff(times)) < 0.2:
            continue
        pts = [start]
        while len(pts) < len(times):
            cand = _random_point(spec, rng)
            if np.linalg.norm(cand - pts[-1]) <= 0.4 * scale:
                pts.append(cand)
        pts = np.array(pts)
        if polar:
            radius = np.linalg.norm(pts, axis=1)
            angle = np.unwrap(np.arctan2(pts[:, 0], pts[:, 1]))
            coords = CubicSpline(times, np.stack([radius, angle], 1), bc_type="clamped", axis=0)(GRID)
            path = coords[:, :1] * np.stack([np.sin(coords[:, 1]), np.cos(coords[:, 1])], 1)
        else:
            path = CubicSpline(times, pts, bc_type="clamped", axis=0)(GRID)
        path[0] = start
        if np.all(in_workspace(spec, path)):
            return path
    raise RuntimeError("could not draw a target path inside the workspace")


def generate_targets(spec: RobotSpec, count: int = TARGETS_PER_SYSTEM, seed: int = 0) -> np.ndarray:
    """``count`` target paths, shape ``(count, 201, 2)``; same seed, same paths."""
    return np.stack([generate_target(spec, _rng(seed, 1, k)) for k in range(count)])


@dataclass(eq=False)
class CalibratedTargets:
    system: int
    targets: np.ndarray                   # (K, 201, 2)
    calibrations: list[Calibration]
    zero_episodes: list[EpisodeResult]
    oracle_episodes: list[EpisodeResult]
    redraws: list[int]                    # degenerate draws discarded per target


def calibrate_system(
    system: RobotSystem,
    count: int = TARGETS_PER_SYSTEM,
    seed: int = 0,
    *,
    tol: float = DEFAULT_TOL,
    max_redraws: int = 20,
) -> CalibratedTargets:
    """Draw targets for ``system`` and calibrate each against zero and oracle runs.

    Targets whose calibration comes out degenerate are redrawn from the same
    per-target stream.
    """
    targets, cals, zeros, oracles, redraws = [], [], [], [], []
    for k in range(count):
        rng = _rng(seed, 2, system.index, k)
        for attempt in range(max_redraws + 1):
            target = generate_target(system.spec, rng)
            zero = run_episode(system, ZeroController(system.p), target, episode=k + 1, tol=tol)
            oracle = run_episode(
                system, oracle_lqr(system.spec, system.interface), target, episode=k + 1, tol=tol
            )
            if zero.aborted or oracle.aborted:
                log.info("system %d target %d: calibration run failed, redrawing", system.index, k + 1)
                continue
            try:
                cal = calibrate_scaling(zero.tracking, oracle.tracking, oracle.effort)
            except DegenerateTargetError:
                continue
            if not cal.degenerate or attempt == max_redraws:
                break
            log.info("system %d target %d: degenerate calibration, redrawing", system.index, k + 1)
        else:
            raise RuntimeError(f"system {system.index}: no usable target after {max_redraws} redraws")
        targets.append(target)
        cals.append(cal)
        zeros.append(zero)
        oracles.append(oracle)
        redraws.append(attempt)
    return CalibratedTargets(system.index, np.stack(targets), cals, zeros, oracles, redraws)


# ---------------------------------------------------------------------------
# training data


def minimum_jerk(start, goal, duration: float, times=GRID) -> np.ndarray:
    """Point-to-point path with zero velocity and acceleration at both ends, then hold."""
    s = np.clip(np.asarray(times) / duration, 0.0, 1.0)
    shape = 10 * s**3 - 15 * s**4 + 6 * s**5
    start = np.asarray(start, dtype=float)
    return start + shape[:, None] * (np.asarray(goal, dtype=float) - start)


def _random_configuration(spec: RobotSpec, rng) -> np.ndarray:
    """Random joint coordinates whose tip lies inside the workspace."""
    for _ in range(1000):
        if spec.kind.rotational:
            theta = rng.uniform(-0.5 * np.pi, 0.5 * np.pi, spec.n)
        else:
            theta = rng.uniform(-0.35, 0.35, spec.n) * spec.lengths
        if in_workspace(spec, spec.tip(theta), margin=0.05):
            return theta
    raise RuntimeError("could not draw a starting configuration")


def generate_training_trajectories(
    system: RobotSystem, count: int = TRAINING_RUNS, seed: int = 0, *, tol: float = DEFAULT_TOL
) -> list[EpisodeResult]:
    """Oracle-LQR point-to-point moves from random rest poses to random goals.

    Each run follows a minimum-jerk path of random duration (0.5 to 1.5 s) and
    then holds the goal.  The paths themselves are not part of the exported
    data.
    """
    spec = system.spec
    runs = []
    for r in range(count):
        rng = _rng(seed, 3, system.index, r)
        theta0 = _random_configuration(spec, rng)
        start = spec.tip(theta0)
        goal = _random_point(spec, rng)
        for _ in range(1000):
            if np.linalg.norm(goal - start) <= 0.5 * spec.reach:
                break
            goal = _random_point(spec, rng)
        path = minimum_jerk(start, goal, rng.uniform(0.5, 1.5))
        x0 = np.concatenate([theta0, np.zeros(spec.n)])
        res = run_episode(
            system, oracle_lqr(spec, system.interface), path, x0=x0, episode=r + 1, tol=tol
        )
        runs.append(res)
    return runs


# ---------------------------------------------------------------------------
# files


def _fmt(v: float) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def training_header(d: int, p: int) -> list[str]:
    cols = ["system", "run", "t"]
    cols += [f"{a}{i}" for i in range(1, d + 1) for a in ("X", "Y")] + ["X", "Y"]
    cols += [f"d{a}{i}" for i in range(1, d + 1) for a in ("X", "Y")] + ["dX", "dY"]
    cols += [f"U{i}" for i in range(1, p + 1)]
    return cols


def training_csv(runs: Sequence[EpisodeResult]) -> str:
    """Participant-facing training table for one system.

    The last row of each run has no control (the run ends there), so its
    ``U`` cells are empty.
    """
    if not runs:
        return ""
    d = runs[0].W.shape[1] // 2
    p = runs[0].U.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(training_header(d, p))
    for res in runs:
        for k, t in enumerate(res.times):
            u = res.U[k] if k < N_STEPS else np.full(p, np.nan)
            row = [res.system, res.episode, _fmt(t)]
            row += [_fmt(v) for v in (*res.W[k], *res.Z[k], *res.dW[k], *res.dZ[k], *u)]
            w.writerow(row)
    return buf.getvalue()


@dataclass(eq=False)
class TrainingRun:
    """One run as read back from a training table."""

    system: int
    run: int
    times: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    dW: np.ndarray
    dZ: np.ndarray
    U: np.ndarray        # (200, p): controls held over each step

    @property
    def d(self) -> int:
        return self.W.shape[1] // 2

    def observations(self) -> Observation:
        return Observation(self.W, self.Z, self.dW, self.dZ)


def episodes_as_runs(results: Sequence[EpisodeResult]) -> list[TrainingRun]:
    return [
        TrainingRun(r.system, r.episode, r.times, r.W, r.Z, r.dW, r.dZ, r.U) for r in results
    ]


def read_training_csv(text: str) -> list[TrainingRun]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    d = sum(1 for h in header if h.startswith("X") and h != "X")
    p = sum(1 for h in header if h.startswith("U"))
    if header != training_header(d, p):
        raise ValueError("unexpected training table header")
    rows: dict[tuple[int, int], list[list[float]]] = {}
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise ValueError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        key = (int(row[0]), int(row[1]))
        rows.setdefault(key, []).append([float(v) if v else math.nan for v in row[2:]])
    runs = []
    for (sys_i, run_i), vals in rows.items():
        a = np.array(vals)
        t = a[:, 0]
        W = a[:, 1:1 + 2 * d]
        Z = a[:, 1 + 2 * d:3 + 2 * d]
        dW = a[:, 3 + 2 * d:3 + 4 * d]
        dZ = a[:, 3 + 4 * d:5 + 4 * d]
        U = a[:-1, 5 + 4 * d:]
        runs.append(TrainingRun(sys_i, run_i, t, W, Z, dW, dZ, U))
    return runs


def targets_csv(target_sets: Sequence[tuple[int, np.ndarray]]) -> str:
    """``system, episode, t, zx, zy`` rows for each ``(system, targets)`` pair."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", "episode", "t", "zx", "zy"])
    for sys_i, targets in target_sets:
        for k, tgt in enumerate(targets):
            for t, (zx, zy) in zip(GRID, tgt):
                w.writerow([sys_i, k + 1, _fmt(t), _fmt(zx), _fmt(zy)])
    return buf.getvalue()


def read_targets_csv(text: str) -> dict[int, np.ndarray]:
    reader = csv.reader(io.StringIO(text))
    if next(reader) != ["system", "episode", "t", "zx", "zy"]:
        raise ValueError("unexpected target table header")
    acc: dict[int, dict[int, list]] = {}
    for row in reader:
        acc.setdefault(int(row[0]), {}).setdefault(int(row[1]), []).append((float(row[3]), float(row[4])))
    return {s: np.stack([np.array(v[k]) for k in sorted(v)]) for s, v in acc.items()}


# ---------------------------------------------------------------------------
# evaluation


@dataclass(eq=False)
class RoboScoreReport:
    rows: list[dict]

    @property
    def grand_mean(self) -> float:
        return float(np.mean([r["score"] for r in self.rows]))

    def per_system(self) -> dict[int, float]:
        out: dict[int, list[float]] = {}
        for r in self.rows:
            out.setdefault(r["system"], []).append(r["score"])
        return {k: float(np.mean(v)) for k, v in sorted(out.items())}

    def to_json(self) -> str:
        return json.dumps(
            {
                "grand_mean": self.grand_mean,
                "per_system": {str(k): v for k, v in self.per_system().items()},
                "episodes": self.rows,
            },
            indent=1,
        )


def score_results(results: Sequence[EpisodeResult], cals: Sequence[Calibration]) -> RoboScoreReport:
    rows = []
    for res, cal in zip(results, cals):
        raw, clipped = episode_score(res, cal)
        rows.append({
            "system": res.system,
            "episode": res.episode,
            "raw": raw if math.isfinite(raw) else None,
            "score": clipped,
            "clipped": bool(raw > SCORE_CAP),
            "b": cal.b,
            "c": cal.c,
            "degenerate": cal.degenerate,
            "timeouts": res.timeouts,
            "timeout_steps": list(res.timeout_steps),
            "aborted": res.aborted,
            "diagnostic": res.diagnostic,
        })
    return RoboScoreReport(rows)


def _evaluate_system(system, cset, make_controller, tol):
    out = []
    for k, target in enumerate(cset.targets):
        try:
            ctrl = make_controller(system)
        except (OSError, ControllerDied) as exc:
            res = _aborted(system, k + 1, target, f"controller could not start: {exc}")
        else:
            res = run_episode(system, ctrl, target, episode=k + 1, tol=tol)
        out.append(res)
    return out


def evaluate_controller(
    systems: Sequence[RobotSystem],
    calibrated: Sequence[CalibratedTargets],
    make_controller: Callable[[RobotSystem], Controller],
    *,
    tol: float = DEFAULT_TOL,
    jobs: int = 1,
) -> tuple[RoboScoreReport, list[EpisodeResult]]:
    """Run a fresh controller from ``make_controller`` on every (system, target).

    With ``jobs > 1`` systems are spread over worker processes, each owning
    its controllers; results keep the system order, so reports do not
    depend on ``jobs``.
    """
    if jobs == 1:
        per_sys = [_evaluate_system(s, c, make_controller, tol) for s, c in zip(systems, calibrated)]
    else:
        per_sys = Parallel(n_jobs=jobs)(
            delayed(_evaluate_system)(s, c, make_controller, tol) for s, c in zip(systems, calibrated)
        )
    results = [r for group in per_sys for r in group]
    cals = [cal for cset in calibrated for cal in cset.calibrations]
    return score_results(results, cals), results


def calibrate_table(
    systems: Sequence[RobotSystem],
    count: int = TARGETS_PER_SYSTEM,
    seed: int = 0,
    *,
    tol: float = DEFAULT_TOL,
    jobs: int = 1,
) -> list[CalibratedTargets]:
    """:func:`calibrate_system` for every system, optionally in parallel."""
    if jobs == 1:
        return [calibrate_system(s, count, seed, tol=tol) for s in systems]
    return Parallel(n_jobs=jobs)(delayed(calibrate_system)(s, count, seed, tol=tol) for s in systems)


def calibration_json(calibrated: Sequence[CalibratedTargets]) -> str:
    """Targets and scaling constants, enough to re-score without recalibrating."""
    return json.dumps([
        {
            "system": c.system,
            "targets": c.targets.tolist(),
            "calibrations": [cal.to_dict() for cal in c.calibrations],
            "redraws": c.redraws,
            "zero_tracking": [r.tracking for r in c.zero_episodes],
            "oracle_tracking": [r.tracking for r in c.oracle_episodes],
            "oracle_effort": [r.effort for r in c.oracle_episodes],
        }
        for c in calibrated
    ])


def calibration_from_json(text: str) -> list[CalibratedTargets]:
    out = []
    for d in json.loads(text):
        cals = [Calibration(c["b"], c["c"], c["degenerate"]) for c in d["calibrations"]]
        out.append(CalibratedTargets(d["system"], np.asarray(d["targets"], float), cals, [], [], d["redraws"]))
    return out


def _aborted(system: RobotSystem, episode: int, target, why: str) -> EpisodeResult:
    n, p = system.spec.n, system.p
    tip = np.full((len(GRID), 2), np.nan)
    inner = np.full((len(GRID), 2 * system.d), np.nan)
    return EpisodeResult(
        system.index, episode, GRID.copy(), np.full((len(GRID), 2 * n), np.nan), tip, inner, tip, inner,
        np.full((N_STEPS, p), np.nan), np.full((N_STEPS, n), np.nan), np.asarray(target), [], True, why,
    )
