"""Identify arm dynamics and the control interface from training runs.

The structured fit works in two stages.  Joint coordinates are recovered from
the Cartesian observations (link lengths come from the observed joint
distances).  The equations of motion are linear in their coefficients, so
each joint equation

    sum_j K_ij cos(th_j - th_i) alpha_j + sum_j G_ij s_ij omega_j^2
        + N_i sin(th_i) + c_i omega_i = (A U)_i

is solved by least squares with ``K_ii = 1``.  That normalization removes
the one ambiguity of the problem: scaling an equation and the matching row of
the interface together leaves the motion unchanged.  The prismatic arm has a
constant inertia matrix, so only ``K^-1 A`` is identifiable there; its fit
uses ``K = I`` and lets the interface absorb the inertia.  Accelerations are first
taken from a cubic fit across each control step.  The coefficients are then
refined by matching simulated one-step transitions to the observed ones.

When the arm type cannot be determined, a ridge-regularized linear
state-space model of the observations is fitted instead.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from ..ode import solve_segment
from ..robots import ArmDynamics, InterfaceMap, Observation, RobotKind, RobotSpec, joint_state
from .lqr import LqrTracker, TrackingWeights, solve_dare

log = logging.getLogger(__name__)


class FitError(ValueError):
    """The training data do not determine the requested model."""


def infer_kind(runs) -> RobotKind:
    """Arm type from geometry: fixed link lengths mean revolute joints."""
    d = runs[0].d
    if d == 2:
        return RobotKind.ROT3
    P = np.concatenate([r.W for r in runs])
    Zs = np.concatenate([r.Z for r in runs])
    first = np.linalg.norm(P, axis=1)
    second = np.linalg.norm(Zs - P, axis=1)
    spread = max(np.ptp(first) / np.mean(first), np.ptp(second) / np.mean(second))
    if spread < 1e-6:
        return RobotKind.ROT2
    if np.max(np.abs(P[:, 0])) < 1e-9:
        return RobotKind.PRISMATIC
    raise FitError("observations match neither revolute nor prismatic geometry")


def estimate_lengths(runs, kind: RobotKind) -> np.ndarray:
    """Link lengths (revolute) or median link extents used as rest lengths (prismatic)."""
    P = np.concatenate([np.concatenate([r.W.reshape(len(r.W), -1, 2), r.Z[:, None]], 1) for r in runs])
    seg = np.diff(P, axis=1, prepend=np.zeros_like(P[:, :1]))
    if kind.rotational:
        return np.median(np.linalg.norm(seg, axis=2), axis=0)
    return np.median(np.stack([seg[:, 0, 1], seg[:, 1, 0]], 1), axis=0)


def _transitions(runs, kind, lengths):
    """Stacked ``(x_l, x_{l+1}, U_l)`` over all runs and steps."""
    X0, X1, U = [], [], []
    for r in runs:
        x = joint_state(kind, r.observations(), lengths)
        if kind.rotational:
            x[:, : x.shape[1] // 2] = np.unwrap(x[:, : x.shape[1] // 2], axis=0)
        ok = np.all(np.isfinite(r.U), axis=1)
        X0.append(x[:-1][ok])
        X1.append(x[1:][ok])
        U.append(r.U[ok])
    return np.concatenate(X0), np.concatenate(X1), np.concatenate(U)


def _cubic_acceleration(x0, x1, dt):
    """Acceleration at the start of each step from both endpoint states.

    A cubic in time through ``(theta, omega)`` at both ends gives
    ``alpha = 6 (dtheta - omega0 dt) / dt^2 - 2 domega / dt``.
    """
    n = x0.shape[1] // 2
    dth = x1[:, :n] - x0[:, :n] - x0[:, n:] * dt
    dom = x1[:, n:] - x0[:, n:]
    return 6 * dth / dt**2 - 2 * dom / dt


# ---------------------------------------------------------------------------
# parameter layout


@dataclass(frozen=True)
class _Layout:
    """Maps a flat parameter vector to coefficient tables and interface rows."""

    kind: RobotKind
    basis: np.ndarray        # (r, p): orthonormal rows spanning the excited control space

    @property
    def n(self) -> int:
        return self.kind.joints

    def names(self) -> list[str]:
        out = []
        for i in range(1, self.n + 1):
            others = [j for j in range(1, self.n + 1) if j != i]
            if self.kind.rotational:
                out += [f"K{i}{j}" for j in others]
                out += [f"G{i}{j}" for j in others]
            out += [f"N{i}", f"c{i}"]
            out += [f"A{i}[{k}]" for k in range(1, self.basis.shape[0] + 1)]
        return out

    @property
    def per_eq(self) -> int:
        n = self.n
        return (n - 1) * (2 if self.kind.rotational else 0) + 2 + self.basis.shape[0]

    def unpack(self, params):
        n = self.n
        K = np.eye(n)
        G = np.zeros((n, n))
        Nc = np.zeros(n)
        fr = np.zeros(n)
        Ar = np.zeros((n, self.basis.shape[0]))
        for i in range(n):
            row = params[i * self.per_eq:(i + 1) * self.per_eq]
            others = [j for j in range(n) if j != i]
            k = 0
            if self.kind.rotational:
                for j in others:
                    K[i, j] = row[k]
                    k += 1
                for j in others:
                    G[i, j] = row[k]
                    k += 1
            Nc[i], fr[i] = row[k], row[k + 1]
            Ar[i] = row[k + 2:]
        return K, G, Nc, fr, Ar @ self.basis

    def features(self, x, alpha, U):
        """Design matrices per equation: ``features[i] @ params_i = -alpha_i``."""
        n = self.n
        th, om = x[:, :n], x[:, n:]
        Ub = U @ self.basis.T
        mats = []
        for i in range(n):
            others = [j for j in range(n) if j != i]
            cols = []
            if self.kind.rotational:
                for j in others:
                    cols.append(np.cos(th[:, j] - th[:, i]) * alpha[:, j])
                for j in others:
                    s = np.sin(th[:, j] - th[:, i]) * (1.0 if j > i else -1.0)
                    cols.append(s * om[:, j] ** 2)
                cols.append(np.sin(th[:, i]))
            else:
                cols.append(np.ones(len(x)))
            cols.append(om[:, i])
            mats.append(np.column_stack(cols + [-Ub]))
        return mats


@dataclass(eq=False)
class FittedRobotModel:
    """Identified arm: coefficient tables, interface estimate and fit diagnostics.

    ``interface`` maps abstract controls to the normalized torques of
    ``dynamics`` (each equation scaled so its own inertia coefficient is 1).
    """

    kind: RobotKind
    dynamics: ArmDynamics
    interface: np.ndarray
    residual_rms: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    def acceleration(self, x, U) -> np.ndarray:
        return self.dynamics.acceleration(x, np.asarray(U, float) @ self.interface.T)

    def to_json(self) -> str:
        d = self.dynamics
        return json.dumps({
            "model": "structured",
            "kind": self.kind.value,
            "K": d.K.tolist(),
            "G": d.G.tolist(),
            "N": d.Nc.tolist(),
            "friction": d.friction.tolist(),
            "lengths": d.lengths.tolist(),
            "A": self.interface.tolist(),
            "residual_rms": self.residual_rms,
            "diagnostics": self.diagnostics,
        }, indent=1)

    @classmethod
    def from_truth(cls, spec: RobotSpec, interface: InterfaceMap) -> "FittedRobotModel":
        """The true model in fitted form (unnormalized torques)."""
        return cls(spec.kind, spec.dynamics, interface.A.copy(), 0.0, {"source": "truth"})


def _dynamics_from(layout: _Layout, params, lengths) -> tuple[ArmDynamics, np.ndarray]:
    K, G, Nc, fr, A = layout.unpack(params)
    return ArmDynamics(layout.kind, K, G, Nc, fr, lengths), A


def _one_step(dyn: ArmDynamics, A, X0, U, dt, tol):
    tau = U @ A.T
    # one batched run: every transition shares the step-size sequence
    _, x1 = solve_segment(lambda t, y: dyn.rhs(y, tau), 0.0, dt, X0, np.empty(0),
                          rtol=tol, atol=tol * 1e-2)
    return x1


def fit_robot_model(
    runs,
    kind_hint: RobotKind | str | None = None,
    *,
    dt: float = 0.01,
    refine: bool = True,
    refine_samples: int = 400,
    refine_tol: float = 1e-12,
    seed: int = 0,
) -> FittedRobotModel:
    """Structured fit of arm dynamics and interface from training runs.

    Raises :class:`FitError` when the data cannot pin down the coefficients;
    the message lists the unidentifiable parameter combinations.
    """
    if len(runs) == 0:
        raise FitError("no training runs")
    kind = RobotKind(kind_hint) if kind_hint is not None else infer_kind(runs)
    if kind.joints - 1 != runs[0].d:
        raise FitError(f"{kind.value} needs {kind.joints - 1} interior joints, data have {runs[0].d}")
    lengths = estimate_lengths(runs, kind)
    X0, X1, U = _transitions(runs, kind, lengths)
    n = kind.joints
    if len(X0) < 10 * n:
        raise FitError(f"only {len(X0)} usable transitions")

    # controls only ever excite a subspace; interface rows live in it
    sv, Vt = np.linalg.svd(U, full_matrices=False)[1:]
    rank = int(np.sum(sv > sv[0] * 1e-8)) if sv.size and sv[0] > 0 else 0
    if rank < n:
        raise FitError(f"controls excite only {rank} of {n} actuated directions")
    layout = _Layout(kind, Vt[:rank])

    alpha = _cubic_acceleration(X0, X1, dt)
    mats = layout.features(X0, alpha, U)
    names = layout.names()
    params = []
    for i, Phi in enumerate(mats):
        scale = np.linalg.norm(Phi, axis=0)
        scale[scale == 0] = 1.0
        Phis = Phi / scale
        s = np.linalg.svd(Phis, compute_uv=False)
        if s[-1] < s[0] * 1e-10:
            null = np.linalg.svd(Phis)[2][-1]
            block = names[i * layout.per_eq:(i + 1) * layout.per_eq]
            combo = " + ".join(f"{v:.3g}*{nm}" for v, nm in zip(null, block) if abs(v) > 1e-3)
            raise FitError(f"equation {i + 1} is rank deficient; unidentifiable direction: {combo}")
        sol = np.linalg.lstsq(Phis, -alpha[:, i], rcond=None)[0] / scale
        params.append(sol)
    params = np.concatenate(params)
    diagnostics = {"stage1_params": params.tolist(), "excited_rank": rank, "transitions": len(X0)}

    if refine:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(len(X0), size=min(refine_samples, len(X0)), replace=False))
        X0s, X1s, Us = X0[idx], X1[idx], U[idx]
        weights = np.concatenate([np.full(n, 2.0 / dt**2), np.full(n, 1.0 / dt)])

        def residual(pv):
            dyn, A = _dynamics_from(layout, pv, lengths)
            try:
                x1 = _one_step(dyn, A, X0s, Us, dt, refine_tol)
            except Exception:  # noqa: BLE001 - any blow-up just means a bad trial point
                return np.full(X1s.size, 1e6)
            return ((x1 - X1s) * weights).ravel()

        sol = least_squares(residual, params, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15,
                            max_nfev=50 * (len(params) + 1))
        params = sol.x
        diagnostics["refine_cost"] = float(sol.cost)
        diagnostics["refine_status"] = int(sol.status)

    dyn, A = _dynamics_from(layout, params, lengths)
    pred = dyn.acceleration(X0, U @ A.T)
    resid = float(np.sqrt(np.mean((pred - _cubic_acceleration(X0, X1, dt)) ** 2)))
    return FittedRobotModel(kind, dyn, A, resid, diagnostics)


# ---------------------------------------------------------------------------
# linear surrogate


def _obs_vector(obs: Observation) -> np.ndarray:
    return np.concatenate([obs.Z, obs.W, obs.dZ, obs.dW], axis=-1)


@dataclass(eq=False)
class LinearSurrogate:
    """``s_{l+1} = F s_l + H U_l + g`` on the observation vector ``s = (Z, W, dZ, dW)``."""

    F: np.ndarray
    H: np.ndarray
    g: np.ndarray
    ridge: float

    def predict(self, s, U) -> np.ndarray:
        return s @ self.F.T + U @ self.H.T + self.g

    def to_json(self) -> str:
        return json.dumps({
            "model": "linear",
            "F": self.F.tolist(),
            "H": self.H.tolist(),
            "g": self.g.tolist(),
            "ridge": self.ridge,
        }, indent=1)


def fit_linear_surrogate(runs, ridge: float = 1e-6) -> LinearSurrogate:
    """Ridge regression of the next observation on the current one and ``U``."""
    S0, S1, U = [], [], []
    for r in runs:
        s = _obs_vector(r.observations())
        ok = np.all(np.isfinite(r.U), axis=1)
        S0.append(s[:-1][ok])
        S1.append(s[1:][ok])
        U.append(r.U[ok])
    S0, S1, U = map(np.concatenate, (S0, S1, U))
    X = np.column_stack([S0, U, np.ones(len(S0))])
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    coef = np.linalg.solve(Xs.T @ Xs + ridge * np.eye(X.shape[1]), Xs.T @ S1) / scale[:, None]
    m = S0.shape[1]
    p = U.shape[1]
    return LinearSurrogate(coef[:m].T, coef[m:m + p].T, coef[-1], ridge)


class SurrogateLqr:
    """LQR on the linear surrogate, weighting only the tip position error."""

    def __init__(self, model: LinearSurrogate, *, position: float = 1e4, effort: float = 1e-3):
        self.model = model
        m = model.F.shape[0]
        Q = np.full(m, 1e-6)
        Q[:2] = position
        R = effort * np.eye(model.H.shape[1])
        F, H = model.F, model.H
        try:
            P = solve_dare(F, H, np.diag(Q), R)
            self.K = np.linalg.solve(R + H.T @ P @ H, H.T @ P)
        except Exception as exc:  # noqa: BLE001 - fall back to zero control
            log.warning("surrogate LQR design failed: %s", exc)
            self.K = None

    def start(self, info) -> None:
        pass

    def finish(self) -> None:
        pass

    def query(self, step, obs: Observation, target) -> np.ndarray:
        p = self.model.H.shape[1]
        if self.K is None:
            return np.zeros(p)
        s = _obs_vector(obs)
        pred = self.model.predict(s, np.zeros(p))
        err = pred.copy()
        err[:2] -= target
        err[2:] = 0.0
        return -self.K @ err


# ---------------------------------------------------------------------------
# controller


def sysid_lqr_controller(model, *, dt: float = 0.01, weights: TrackingWeights = TrackingWeights()):
    """Same tracking law as the oracle, driven by an identified model."""
    if isinstance(model, LinearSurrogate):
        return SurrogateLqr(model)
    return LqrTracker(model.dynamics, np.linalg.pinv(model.interface), dt=dt, weights=weights)


def model_from_json(text: str):
    d = json.loads(text)
    if d.get("model") == "linear":
        return LinearSurrogate(np.array(d["F"]), np.array(d["H"]), np.array(d["g"]), d["ridge"])
    kind = RobotKind(d["kind"])
    dyn = ArmDynamics(kind, d["K"], d["G"], d["N"], d["friction"], d["lengths"])
    return FittedRobotModel(kind, dyn, np.array(d["A"]), d.get("residual_rms", float("nan")),
                            d.get("diagnostics", {}))
