"""Discrete-time LQR design and a re-linearizing tracking controller for arms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ..robots import InterfaceMap, Observation, RobotSpec


class RiccatiError(RuntimeError):
    """The discrete Riccati equation could not be solved for the given data."""


def discretize(A, B, dt: float, drift=None):
    """Zero-order-hold discretization via the matrix exponential.

    For ``x' = A x + B u + drift`` returns ``(Ad, Bd, d)`` such that
    ``x(t+dt) = Ad x(t) + Bd u + d`` with ``u`` held constant.  ``d`` is zero
    when no drift is given.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n, m = B.shape
    aug = np.zeros((n + m + 1, n + m + 1))
    aug[:n, :n] = A
    aug[:n, n:n + m] = B
    if drift is not None:
        aug[:n, -1] = drift
    E = scipy.linalg.expm(aug * dt)
    return E[:n, :n], E[:n, n:n + m], E[:n, -1].copy()


def is_stabilizable(A, B, tol: float = 1e-9) -> bool:
    """Hautus test on the eigenvalues of ``A`` outside the open unit disc."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if abs(lam) >= 1.0 - tol:
            pencil = np.hstack([A - lam * np.eye(n), B.astype(complex)])
            if np.linalg.matrix_rank(pencil, tol=tol * max(1.0, np.abs(pencil).max())) < n:
                return False
    return True


def solve_dare(A, B, Q, R, *, tol: float = 1e-10, max_iter: int = 10_000, check: bool = True):
    """Stabilizing solution of ``P = A'PA - A'PB (R + B'PB)^-1 B'PA + Q``.

    Uses the structured doubling iteration, which squares the effective horizon
    of the Riccati recursion every pass; it stops once the relative change of
    ``P`` drops below ``tol``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    n = A.shape[0]
    if check:
        if not np.any(B):
            raise RiccatiError("control matrix is zero: system is uncontrollable")
        if not is_stabilizable(A, B):
            raise RiccatiError("pair (A, B) is not stabilizable")
        if np.min(np.linalg.eigvalsh((R + R.T) / 2)) <= 0:
            raise RiccatiError("control weight R must be positive definite")
    I = np.eye(n)
    Ak = A.copy()
    Gk = B @ np.linalg.solve(R, B.T)
    Hk = Q.copy()
    for _ in range(max_iter):
        W = I + Gk @ Hk
        WA = np.linalg.solve(W, Ak)
        WG = np.linalg.solve(W, Gk)
        H_next = Hk + Ak.T @ Hk @ WA
        Gk = Gk + Ak @ WG @ Ak.T
        Ak = Ak @ WA
        change = np.linalg.norm(H_next - Hk) / max(np.linalg.norm(H_next), 1e-300)
        Hk = H_next
        if not np.all(np.isfinite(Hk)):
            break
        if change < tol:
            return (Hk + Hk.T) / 2
    raise RiccatiError(
        f"Riccati iteration did not converge; cond(R)={np.linalg.cond(R):.3g}, "
        f"spectral radius of A={np.max(np.abs(np.linalg.eigvals(A))):.3g}"
    )


def dare_residual(A, B, Q, R, P) -> float:
    """Spectral norm of the Riccati equation residual at ``P``."""
    BtP = B.T @ P
    res = A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A) + Q - P
    return float(np.linalg.norm(res, 2))


@dataclass(frozen=True, eq=False)
class LqrGain:
    """Discrete gain ``K`` for ``u = -K (x - x_ref) + u_ff``.

    ``feedforward`` is the input that holds the linearization point.
    """

    K: np.ndarray
    P: np.ndarray
    Ad: np.ndarray
    Bd: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    feedforward: np.ndarray

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.Ad - self.Bd @ self.K))))


def lqr_design(A, B, Q, R, dt: float, feedforward=None) -> LqrGain:
    """Discretize continuous Jacobians ``(A, B)`` at step ``dt`` and solve the DARE."""
    Ad, Bd, _ = discretize(A, B, dt)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = solve_dare(Ad, Bd, Q, R)
    K = np.linalg.solve(R + Bd.T @ P @ Bd, Bd.T @ P @ Ad)
    ff = np.zeros(Bd.shape[1]) if feedforward is None else np.asarray(feedforward, float)
    return LqrGain(K, P, Ad, Bd, np.asarray(Q, float), R, ff)


# ---------------------------------------------------------------------------
# tracking


def damped_ik(model, target, seed, *, damping: float = 1e-3, iters: int = 50, tol: float = 1e-12):
    """Joint coordinates placing the tip at ``target``, by damped least squares.

    Iterates ``theta += J' (J J' + damping^2 I)^-1 (target - tip)`` from
    ``seed``; near singular poses the damping keeps steps bounded.
    """
    theta = np.array(seed, dtype=float)
    target = np.asarray(target, dtype=float)
    lam2 = damping**2 * np.eye(2)
    for _ in range(iters):
        err = target - model.tip(theta)
        if err @ err < tol**2:
            break
        J = model.tip_jacobian(theta)
        theta = theta + J.T @ np.linalg.solve(J @ J.T + lam2, err)
    return theta


@dataclass(frozen=True)
class TrackingWeights:
    """Cost weights of the tracking LQR.

    Joint errors are weighted through the tip Jacobian (Cartesian metric) plus
    ``joint_floor`` times the identity so redundant directions stay damped.
    """

    position: float = 1e4
    velocity: float = 10.0
    effort: float = 1e-3
    joint_floor: float = 1e-2


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


class LqrTracker:
    """Re-linearizing LQR that follows a Cartesian target one step ahead.

    At every query the joint state is recovered from the observation, the
    next target is mapped to joint space by damped IK (seeded with the
    previous solution, so the controller keeps state), and the dynamics are
    linearized about the current state with bias compensation as the nominal
    torque.  The gain comes from the DARE of the exactly discretized model; the
    correction is applied to the predicted error one step ahead.  The latent
    torque is returned through the interface pseudo-inverse.

    ``model`` must offer ``n``, ``kind``, ``bias_force``, ``jacobian``,
    ``rhs``, ``tip``, ``tip_jacobian`` and ``state_from_observation``; both
    the true dynamics and identified models qualify.
    """

    def __init__(self, model, pinv, *, dt: float = 0.01, weights: TrackingWeights = TrackingWeights(),
                 damping: float = 1e-3):
        self.model = model
        self.pinv = np.asarray(pinv, dtype=float)
        self.dt = dt
        self.weights = weights
        self.damping = damping
        self.reset()

    def reset(self) -> None:
        self._prev_ref = None

    def start(self, info) -> None:
        self.reset()

    def finish(self) -> None:
        pass

    def query(self, step: int, obs: Observation, target) -> np.ndarray:
        x = self.model.state_from_observation(obs)
        return self.pinv @ self.torque(x, target)

    def torque(self, x, target) -> np.ndarray:
        model = self.model
        n = model.n
        w = self.weights
        x = np.asarray(x, dtype=float)
        theta = x[:n]
        rotational = model.kind.rotational
        if self._prev_ref is None:
            self._prev_ref = theta.copy()
        elif rotational:
            # keep the reference on the same branch as the measured angles
            self._prev_ref = theta + _wrap(self._prev_ref - theta)
        theta_d = damped_ik(model, target, self._prev_ref, damping=self.damping)
        omega_d = (theta_d - self._prev_ref) / self.dt
        self._prev_ref = theta_d

        tau0 = model.bias_force(x)
        A, B = model.jacobian(x, tau0)
        Ad, Bd, drift = discretize(A, B, self.dt, model.rhs(x, tau0))
        J = model.tip_jacobian(theta)
        metric = J.T @ J + w.joint_floor * np.eye(n)
        Q = np.zeros((2 * n, 2 * n))
        Q[:n, :n] = w.position * metric
        Q[n:, n:] = w.velocity * metric
        R = w.effort * np.eye(n)
        P = solve_dare(Ad, Bd, Q, R, check=False)
        err = x + drift - np.concatenate([theta_d, omega_d])
        if rotational:
            err[:n] = _wrap(err[:n])
        BtP = Bd.T @ P
        return tau0 - np.linalg.solve(R + BtP @ Bd, BtP @ err)


def oracle_lqr(spec: RobotSpec, interface: InterfaceMap, **kwargs) -> LqrTracker:
    """Tracking LQR with the true dynamics and the true interface."""
    return LqrTracker(spec.dynamics, interface.pinv, **kwargs)
