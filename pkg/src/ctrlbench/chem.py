"""Chemistry track: ensemble sampling, training data, and impulse scoring."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .kinetics import N_SPECIES, Y_INDEX, PolynomialField, competition_network, mass_action_compile
from .ode import Impulse, integrate, windowed_rms_array

log = logging.getLogger(__name__)

N_SYSTEMS = 12
N_CONTROLS = 8
RUNS_PER_SYSTEM = 20
CASES_PER_SYSTEM = 50
U_BOUND = 10.0
COST_WEIGHT = 1 / 20
GRID = np.arange(81, dtype=float)
IMPULSE_WINDOW = (0.0, 3.0)
EVAL_WINDOW = (40.0, 80.0)
RATE_RANGE = (0.01, 0.2)
B_RANGE = (0.5, 1.5)
DEFAULT_TOL = 1e-8
# tracking term assigned when the true system blows up under a submitted impulse
DIVERGED_TERM = 100.0

# control -> driven species (0-based), one pair per control column
CONTROL_EDGES: tuple[tuple[int, int], ...] = (
    (0, 2), (1, 3), (4, 6), (5, 7),   # U1..U4
    (0, 6), (1, 7), (2, 4), (3, 5),   # U5..U8
)
WEAK_CONTROLS = (4, 5, 6, 7)


def _rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *path]))


@dataclass(frozen=True)
class ChemModel:
    """Dynamics ``z' = field(z) + B u`` of a single system."""

    field: PolynomialField
    B: np.ndarray

    def rhs(self, z: np.ndarray, c: np.ndarray | None) -> np.ndarray:
        d = self.field(z)
        return d if c is None else d + c

    def simulate(self, z0, u, grid=GRID, tol=DEFAULT_TOL, mask_divergent=False, max_abs=1e8):
        """States on ``grid`` under impulse ``u`` on the impulse window.

        ``z0``/``u`` may be batched along a leading axis; then the result is
        ``(len(grid), batch, 15)`` with NaN rows for diverged members.
        """
        z0 = np.asarray(z0, float)
        u = np.asarray(u, float)
        sig = Impulse(u, *IMPULSE_WINDOW)
        out = integrate(
            self.rhs, sig, z0, grid, mixing=self.B, tol=tol, mask_divergent=mask_divergent,
            max_abs=max_abs,
        )
        return out


@dataclass(frozen=True, eq=False)
class ChemSystemSpec:
    seed: int
    rates: np.ndarray                 # (12, 10)
    B: np.ndarray                     # (15, 8)
    noise_sigma: np.ndarray           # (15,)
    z0_logmean: np.ndarray            # (12, 15) log of the median initial value
    z0_logsd: float
    confounder: np.ndarray            # (12, 8, 15) Gamma
    control_mean: np.ndarray          # (12, 8)
    control_sd: float
    grid: np.ndarray = field(default_factory=lambda: GRID.copy())
    impulse_window: tuple[float, float] = IMPULSE_WINDOW
    eval_window: tuple[float, float] = EVAL_WINDOW
    bounds: tuple[float, float] = (-U_BOUND, U_BOUND)
    cost_weight: float = COST_WEIGHT

    @property
    def fields(self) -> list[PolynomialField]:
        return [mass_action_compile(competition_network(k)) for k in self.rates]

    def model(self, i: int) -> ChemModel:
        """0-based system index."""
        return ChemModel(mass_action_compile(competition_network(self.rates[i])), self.B)

    def z0_mean(self, i: int) -> np.ndarray:
        return np.exp(self.z0_logmean[i] + 0.5 * self.z0_logsd**2)

    def to_json(self) -> dict:
        return {
            "seed": int(self.seed),
            "rates": self.rates.tolist(),
            "B": self.B.tolist(),
            "noise_sigma": self.noise_sigma.tolist(),
            "z0_logmean": self.z0_logmean.tolist(),
            "z0_logsd": self.z0_logsd,
            "confounder": self.confounder.tolist(),
            "control_mean": self.control_mean.tolist(),
            "control_sd": self.control_sd,
            "fields": [f.to_json() for f in self.fields],
        }

    @classmethod
    def from_json(cls, data: dict | str) -> "ChemSystemSpec":
        if isinstance(data, str):
            data = json.loads(data)
        arr = lambda k: np.asarray(data[k], dtype=float)  # noqa: E731
        return cls(
            seed=int(data["seed"]),
            rates=arr("rates"),
            B=arr("B"),
            noise_sigma=arr("noise_sigma"),
            z0_logmean=arr("z0_logmean"),
            z0_logsd=float(data["z0_logsd"]),
            confounder=arr("confounder"),
            control_mean=arr("control_mean"),
            control_sd=float(data["control_sd"]),
        )


def control_matrix(values: np.ndarray) -> np.ndarray:
    """Place ``values`` (8 x 2) on the fixed control-to-species edges."""
    B = np.zeros((N_SPECIES, N_CONTROLS))
    for col, rows in enumerate(CONTROL_EDGES):
        for r, v in zip(rows, values[col]):
            B[r, col] = v
    return B


def sample_ensemble(seed: int, *, confounding_scale: float = 0.6) -> ChemSystemSpec:
    """Draw the 12-system ensemble; all systems share the network's sparsity and signs."""
    rng = _rng(seed, 0)
    lo, hi = np.log(RATE_RANGE[0]), np.log(RATE_RANGE[1])
    rates = np.exp(rng.uniform(lo, hi, size=(N_SYSTEMS, 10)))
    B = control_matrix(rng.uniform(*B_RANGE, size=(N_CONTROLS, 2)))
    z0_logmean = np.log(rng.uniform(0.5, 2.0, size=(N_SYSTEMS, N_SPECIES)))
    confounder = rng.normal(0.0, confounding_scale, size=(N_SYSTEMS, N_CONTROLS, N_SPECIES))
    control_mean = rng.uniform(0.5, 1.0, size=(N_SYSTEMS, N_CONTROLS))
    spec = ChemSystemSpec(
        seed=seed,
        rates=rates,
        B=B,
        noise_sigma=np.zeros(N_SPECIES),
        z0_logmean=z0_logmean,
        z0_logsd=0.25,
        confounder=confounder,
        control_mean=control_mean,
        control_sd=0.3,
    )
    return _with_noise(spec, _pilot_noise(spec))


def _pilot_noise(spec: ChemSystemSpec) -> np.ndarray:
    # 5% of each species' zero-control time average, pooled over systems
    avgs = []
    for i in range(N_SYSTEMS):
        z = spec.model(i).simulate(spec.z0_mean(i), np.zeros(N_CONTROLS)).states
        avgs.append(np.trapezoid(z, GRID, axis=0) / (GRID[-1] - GRID[0]))
    return np.maximum(0.05 * np.mean(avgs, axis=0), 1e-3)


def _with_noise(spec: ChemSystemSpec, sigma: np.ndarray) -> ChemSystemSpec:
    return ChemSystemSpec(
        seed=spec.seed, rates=spec.rates, B=spec.B, noise_sigma=np.asarray(sigma, float),
        z0_logmean=spec.z0_logmean, z0_logsd=spec.z0_logsd, confounder=spec.confounder,
        control_mean=spec.control_mean, control_sd=spec.control_sd,
    )


def with_noise_sigma(spec: ChemSystemSpec, sigma) -> ChemSystemSpec:
    return _with_noise(spec, np.broadcast_to(np.asarray(sigma, float), (N_SPECIES,)).copy())


def with_confounding(spec: ChemSystemSpec, scale: float) -> ChemSystemSpec:
    """Copy of ``spec`` with the confounder matrices rescaled (``0`` disables it)."""
    return ChemSystemSpec(
        seed=spec.seed, rates=spec.rates, B=spec.B, noise_sigma=spec.noise_sigma,
        z0_logmean=spec.z0_logmean, z0_logsd=spec.z0_logsd, confounder=spec.confounder * scale,
        control_mean=spec.control_mean, control_sd=spec.control_sd,
    )


def observe(states: np.ndarray, noise_sigma, rng: np.random.Generator) -> np.ndarray:
    """``X(t_l) = Z(t_l) + N(t_l)`` with independent mean-zero Gaussian ``N``."""
    states = np.asarray(states, float)
    sigma = np.broadcast_to(np.asarray(noise_sigma, float), states.shape[-1:])
    return states + rng.standard_normal(states.shape) * sigma


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True, eq=False)
class ChemEpisode:
    system: int          # 1-based
    run: int             # 1-based
    z0: np.ndarray
    u: np.ndarray
    latent: np.ndarray   # (81, 15)
    observations: np.ndarray  # (81, 15)


def _admissible(states: np.ndarray) -> np.ndarray:
    """Per batch member: finite and never meaningfully negative.  ``states`` is (T, B, n)."""
    finite = np.all(np.isfinite(states), axis=(0, 2))
    low = np.nanmin(np.where(np.isfinite(states), states, 0.0), axis=(0, 2))
    return finite & (low > -0.05)


def _draw_batched(model: ChemModel, draw, n: int, max_tries: int, fallback):
    """Rejection-sample ``n`` impulses; ``draw(j)`` proposes for member ``j``.

    Proposals are simulated together; rejected members are redrawn from their
    own streams.  After ``max_tries`` rounds ``fallback(j, u)`` supplies a
    final admissible impulse.  Returns ``(z0, u, states)`` stacked per member.
    """
    z0 = [None] * n
    u = [None] * n
    states = [None] * n
    pending = list(range(n))
    for _ in range(max_tries):
        if not pending:
            break
        props = [draw(j) for j in pending]
        Z0 = np.stack([p[0] for p in props])
        U = np.stack([p[1] for p in props])
        sim = model.simulate(Z0, U, mask_divergent=True, max_abs=1e3)
        ok = _admissible(sim)
        still = []
        for slot, j in enumerate(pending):
            if ok[slot]:
                z0[j], u[j], states[j] = Z0[slot], U[slot], sim[:, slot]
            else:
                z0[j], u[j] = Z0[slot], U[slot]
                still.append(j)
        pending = still
    for j in pending:
        z0[j], u[j] = fallback(j, z0[j], u[j])
        states[j] = model.simulate(z0[j], u[j]).states
    return np.stack(z0), np.stack(u), np.stack(states)


def generate_training_data(
    spec: ChemSystemSpec, runs_per_system: int = RUNS_PER_SYSTEM, seed: int | None = None,
    *, max_tries: int = 8,
) -> list[ChemEpisode]:
    """Confounded training runs: the impulse is drawn conditionally on ``z0``.

    ``u = clip(Gamma_i (z0 - E z0) + eps, bounds)``.  Draws whose trajectory
    leaves the non-negative orthant are redrawn; after ``max_tries`` the last
    draw is projected onto non-negative impulses.
    """
    seed = spec.seed if seed is None else seed
    episodes = []
    for i in range(N_SYSTEMS):
        model = spec.model(i)
        mean = spec.z0_mean(i)
        rngs = [_rng(seed, 1, i, r) for r in range(runs_per_system)]
        z0s = [
            np.exp(spec.z0_logmean[i] + spec.z0_logsd * g.standard_normal(N_SPECIES)) for g in rngs
        ]

        def draw(j):
            eps = spec.control_mean[i] + spec.control_sd * rngs[j].standard_normal(N_CONTROLS)
            return z0s[j], np.clip(spec.confounder[i] @ (z0s[j] - mean) + eps, *spec.bounds)

        def fallback(j, z0, u):
            return z0, np.clip(u, 0.0, spec.bounds[1])

        try:
            Z0, U, S = _draw_batched(model, draw, runs_per_system, max_tries, fallback)
        except RuntimeError as exc:
            raise RuntimeError(f"system {i + 1}: training episode failed: {exc}") from exc
        for r in range(runs_per_system):
            x = observe(S[r], spec.noise_sigma, _rng(seed, 2, i, r))
            episodes.append(ChemEpisode(i + 1, r + 1, Z0[r], U[r], S[r], x))
    return episodes


@dataclass(frozen=True, eq=False)
class ChemTestCase:
    system: int           # 1-based
    case: int             # 1-based
    x0: np.ndarray        # noisy observation of z0
    ystar: float
    z0: np.ndarray        # latent; kept out of participant-facing files


def generate_test_cases(
    spec: ChemSystemSpec, cases_per_system: int = CASES_PER_SYSTEM, seed: int | None = None,
    *, target_max: float = 2.0,
) -> list[ChemTestCase]:
    """Initial conditions plus reachable targets.

    ``ystar`` is the window mean of ``Y`` under a random non-negative impulse,
    so every target is attained by some feasible control.
    """
    seed = spec.seed if seed is None else seed
    out = []
    sel = GRID >= EVAL_WINDOW[0]
    for i in range(N_SYSTEMS):
        model = spec.model(i)
        rngs = [_rng(seed, 3, i, k) for k in range(cases_per_system)]
        z0s = [
            np.exp(spec.z0_logmean[i] + spec.z0_logsd * g.standard_normal(N_SPECIES)) for g in rngs
        ]
        Z0, U, S = _draw_batched(
            model,
            lambda j: (z0s[j], rngs[j].uniform(0.0, target_max, N_CONTROLS)),
            cases_per_system,
            1,
            lambda j, z0, u: (z0, u),
        )
        ystar = np.trapezoid(S[:, sel, Y_INDEX], GRID[sel], axis=1) / (EVAL_WINDOW[1] - EVAL_WINDOW[0])
        for k in range(cases_per_system):
            x0 = observe(Z0[k], spec.noise_sigma, _rng(seed, 4, i, k))
            out.append(ChemTestCase(i + 1, k + 1, x0, float(ystar[k]), Z0[k]))
    return out


# ---------------------------------------------------------------------------
# scoring


def penalty_term(u: np.ndarray, c: float = COST_WEIGHT) -> np.ndarray:
    """``c * sqrt(||u||^2 / 8)`` along the last axis."""
    u = np.asarray(u, float)
    return c * np.sqrt(np.sum(u * u, axis=-1) / u.shape[-1])


def tracking_terms(model: ChemModel, z0, u, ystar, tol=DEFAULT_TOL) -> np.ndarray:
    """RMS distance of ``Y`` from ``ystar`` on the evaluation window, batched."""
    z0 = np.atleast_2d(np.asarray(z0, float))
    u = np.atleast_2d(np.asarray(u, float))
    ystar = np.broadcast_to(np.asarray(ystar, float), (len(z0),))
    states = model.simulate(z0, u, tol=tol, mask_divergent=True)
    y = states[:, :, Y_INDEX]
    terms = windowed_rms_array(GRID, y, ystar[None, :], EVAL_WINDOW)
    return np.where(np.isfinite(terms), terms, DIVERGED_TERM)


@dataclass
class ScoreReport:
    per_system: list[float]
    grand_mean: float
    tracking: np.ndarray     # (12, K)
    penalty: np.ndarray      # (12, K)
    clipped: np.ndarray      # (12, K) bool
    diverged: np.ndarray     # (12, K) bool

    def to_json(self) -> dict:
        return {
            "track": "chem",
            "per_system": [float(v) for v in self.per_system],
            "grand_mean": float(self.grand_mean),
            "cases": [
                {
                    "system": i + 1,
                    "case": k + 1,
                    "tracking": float(self.tracking[i, k]),
                    "penalty": float(self.penalty[i, k]),
                    "clipped": bool(self.clipped[i, k]),
                    "diverged": bool(self.diverged[i, k]),
                }
                for i in range(self.tracking.shape[0])
                for k in range(self.tracking.shape[1])
            ],
            "any_clipped": bool(self.clipped.any()),
        }


def evaluate_submission(
    spec: ChemSystemSpec, cases: list[ChemTestCase], controls: np.ndarray, *, tol: float = DEFAULT_TOL
) -> ScoreReport:
    """Score impulses ``controls[i, k]`` (12 x K x 8) on the latent test systems."""
    controls = np.asarray(controls, float)
    by_sys: dict[int, list[ChemTestCase]] = {}
    for tc in cases:
        by_sys.setdefault(tc.system, []).append(tc)
    k_per = len(by_sys[1])
    if controls.shape != (N_SYSTEMS, k_per, N_CONTROLS):
        raise ValueError(
            f"submission shape {controls.shape} does not match test cases "
            f"{(N_SYSTEMS, k_per, N_CONTROLS)}"
        )
    clipped_u = np.clip(controls, *spec.bounds)
    clipped = np.any(clipped_u != controls, axis=-1)
    if clipped.any():
        log.warning("%d submitted impulses were clipped to the control box", int(clipped.sum()))
    tracking = np.zeros((N_SYSTEMS, k_per))
    for i in range(N_SYSTEMS):
        tcs = sorted(by_sys[i + 1], key=lambda c: c.case)
        z0 = np.stack([tc.z0 for tc in tcs])
        ystar = np.array([tc.ystar for tc in tcs])
        tracking[i] = tracking_terms(spec.model(i), z0, clipped_u[i], ystar, tol=tol)
    diverged = tracking == DIVERGED_TERM
    penalty = penalty_term(clipped_u, spec.cost_weight)
    per_system = (tracking + penalty).mean(axis=1)
    return ScoreReport(
        per_system=per_system.tolist(),
        grand_mean=float(per_system.mean()),
        tracking=tracking,
        penalty=penalty,
        clipped=clipped,
        diverged=diverged,
    )


# ---------------------------------------------------------------------------
# CSV formats


def _fmt(v: float) -> str:
    return repr(float(v))


def training_csv(episodes: list[ChemEpisode]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", "run", "t"] + [f"X{i + 1}" for i in range(N_SPECIES)]
               + [f"U{i + 1}" for i in range(N_CONTROLS)])
    for ep in episodes:
        for l, t in enumerate(GRID):
            u = ep.u if IMPULSE_WINDOW[0] <= t < IMPULSE_WINDOW[1] else np.zeros(N_CONTROLS)
            w.writerow([ep.system, ep.run, _fmt(t), *map(_fmt, ep.observations[l]), *map(_fmt, u)])
    return buf.getvalue()


@dataclass(frozen=True, eq=False)
class ObservedRun:
    system: int
    run: int
    times: np.ndarray
    x: np.ndarray        # (T, 15)
    u: np.ndarray        # impulse value (8,)


def read_training_csv(text: str) -> list[ObservedRun]:
    rows = list(csv.reader(io.StringIO(text)))
    data = np.array(rows[1:], dtype=float)
    runs = []
    keys = data[:, :2].astype(int)
    for key in sorted({tuple(k) for k in keys}):
        sel = np.all(keys == key, axis=1)
        block = data[sel]
        u_rows = block[:, 3 + N_SPECIES:]
        active = (block[:, 2] >= IMPULSE_WINDOW[0]) & (block[:, 2] < IMPULSE_WINDOW[1])
        u = u_rows[active][0] if active.any() else np.zeros(N_CONTROLS)
        runs.append(ObservedRun(key[0], key[1], block[:, 2], block[:, 3:3 + N_SPECIES], u))
    return runs


def episodes_as_runs(episodes: list[ChemEpisode], latent: bool = False) -> list[ObservedRun]:
    return [
        ObservedRun(ep.system, ep.run, GRID.copy(), ep.latent if latent else ep.observations, ep.u)
        for ep in episodes
    ]


def test_cases_csv(cases: list[ChemTestCase]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", "case"] + [f"X{i + 1}_0" for i in range(N_SPECIES)] + ["ystar"])
    for tc in cases:
        w.writerow([tc.system, tc.case, *map(_fmt, tc.x0), _fmt(tc.ystar)])
    return buf.getvalue()


def read_test_cases_csv(text: str, spec: ChemSystemSpec | None = None) -> list[ChemTestCase]:
    """Parse test cases; latent ``z0`` is regenerated from ``spec`` when given."""
    rows = list(csv.reader(io.StringIO(text)))
    out = []
    latent = None
    if spec is not None:
        per = max((int(r[1]) for r in rows[1:] if len(r) > 1 and r[1].strip().isdigit()), default=0)
        latent = {(tc.system, tc.case): tc.z0 for tc in generate_test_cases(spec, per)}
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            s, k = int(row[0]), int(row[1])
            vals = np.array(row[2:], dtype=float)
        except (ValueError, IndexError) as exc:
            raise ValueError(f"test-case CSV line {lineno}: {exc}") from exc
        if len(vals) != N_SPECIES + 1:
            raise ValueError(f"test-case CSV line {lineno}: expected {N_SPECIES + 1} values")
        if latent is not None and (s, k) not in latent:
            raise ValueError(f"test-case CSV line {lineno}: unknown case ({s}, {k})")
        z0 = latent[(s, k)] if latent is not None else vals[:N_SPECIES]
        out.append(ChemTestCase(s, k, vals[:N_SPECIES], float(vals[-1]), z0))
    return out


def submission_csv(controls: np.ndarray) -> str:
    controls = np.asarray(controls, float)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["system", "case"] + [f"u{i + 1}" for i in range(N_CONTROLS)])
    for i in range(controls.shape[0]):
        for k in range(controls.shape[1]):
            w.writerow([i + 1, k + 1, *map(_fmt, controls[i, k])])
    return buf.getvalue()


class SubmissionError(ValueError):
    pass


def read_submission_csv(text: str, cases_per_system: int = CASES_PER_SYSTEM) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [h.strip() for h in rows[0][:2]] != ["system", "case"]:
        raise SubmissionError("submission CSV line 1: expected header 'system,case,u1..u8'")
    out = np.full((N_SYSTEMS, cases_per_system, N_CONTROLS), np.nan)
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            s, k = int(row[0]), int(row[1])
            u = np.array(row[2:], dtype=float)
        except (ValueError, IndexError) as exc:
            raise SubmissionError(f"submission CSV line {lineno}: malformed row ({exc})") from exc
        if u.shape != (N_CONTROLS,) or not np.all(np.isfinite(u)):
            raise SubmissionError(f"submission CSV line {lineno}: need {N_CONTROLS} finite values")
        if not (1 <= s <= N_SYSTEMS and 1 <= k <= cases_per_system):
            raise SubmissionError(f"submission CSV line {lineno}: unknown (system, case) = ({s}, {k})")
        out[s - 1, k - 1] = u
    missing = np.argwhere(np.isnan(out[..., 0]))
    if len(missing):
        pairs = ", ".join(f"({s + 1}, {k + 1})" for s, k in missing[:5])
        raise SubmissionError(f"submission is missing {len(missing)} (system, case) rows, e.g. {pairs}")
    return out
