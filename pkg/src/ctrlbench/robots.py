"""Planar robot arms: dynamics, kinematics and the abstract control interface.

Rotational arms measure every joint angle from the vertical axis, so the
configuration ``theta = 0`` stands the whole chain upright.  Joint accelerations
follow ``alpha = M^-1 (tau - C omega - N)`` with

* ``M_ij = K_ij cos(theta_j - theta_i)`` (``K`` the inertia coefficients),
* ``C`` carrying ``sin(theta_j - theta_i) omega_j`` terms, and
* ``N_i = N_i sin(theta_i) + c_i omega_i`` for gravity and viscous friction.

The prismatic arm changes link lengths ``L_i = q_i + theta_i``; link 1 points
along ``+y`` and link 2 along ``+x``, which leaves a constant inertia matrix.

State vectors are ``x = (theta, omega)``.  All dynamics functions accept
leading batch axes.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np

GRAVITY = 9.81


class RobotKind(str, enum.Enum):
    ROT2 = "Rotational2"
    ROT3 = "Rotational3"
    PRISMATIC = "Prismatic2"

    @property
    def joints(self) -> int:
        return 3 if self is RobotKind.ROT3 else 2

    @property
    def rotational(self) -> bool:
        return self is not RobotKind.PRISMATIC


class SingularConfigurationError(RuntimeError):
    """The inertia matrix is numerically singular at the requested state."""


class ArmDynamics:
    """Equations of motion from coefficient tables.

    ``K`` holds the inertia coefficients, ``G`` the Coriolis coefficients in
    ``sin(theta_hi - theta_lo)`` layout, ``Nc`` the gravity coefficients and
    ``friction`` the viscous terms.  ``K`` need not be symmetric, which lets an
    identified model with independently scaled equations share this code.
    For the prismatic arm ``K`` and ``Nc`` are constant.
    """

    def __init__(self, kind, K, G, Nc, friction, lengths):
        self.kind = RobotKind(kind)
        self.n = self.kind.joints
        n = self.n
        self.K = _frozen(K, (n, n))
        self.G = _frozen(G, (n, n))
        self.Nc = _frozen(Nc, (n,))
        self.friction = _frozen(friction, (n,))
        self.lengths = _frozen(lengths, (n,))
        self._sgn = np.sign(np.subtract.outer(np.arange(n), np.arange(n))) * -1.0
        self._Kinv = None if self.kind.rotational else np.linalg.inv(self.K)
        self._K_list = self.K.tolist()
        self._G_list = self.G.tolist()
        self._Nc_list = self.Nc.tolist()
        self._fr_list = self.friction.tolist()

    def mass_matrix(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if not self.kind.rotational:
            return np.broadcast_to(self.K, theta.shape[:-1] + self.K.shape).copy()
        d = theta[..., None, :] - theta[..., :, None]  # theta_j - theta_i
        return self.K * np.cos(d)

    def coriolis_matrix(self, theta, omega) -> np.ndarray:
        """``C`` with entries ``C_ij`` such that the Coriolis torque is ``C @ omega``."""
        theta = np.asarray(theta, dtype=float)
        omega = np.asarray(omega, dtype=float)
        if not self.kind.rotational:
            return np.zeros(theta.shape[:-1] + (self.n, self.n))
        d = theta[..., None, :] - theta[..., :, None]
        # upper triangle uses sin(theta_j - theta_i), lower sin(theta_i - theta_j)
        return self.G * self._sgn * np.sin(d) * omega[..., None, :]

    def external_force(self, theta, omega) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        omega = np.asarray(omega, dtype=float)
        if self.kind.rotational:
            return self.Nc * np.sin(theta) + self.friction * omega
        return self.Nc + self.friction * omega + 0.0 * theta

    def bias_force(self, x) -> np.ndarray:
        """``C omega + N``: the torque that holds the state at zero acceleration."""
        x = np.asarray(x, dtype=float)
        theta, omega = x[..., : self.n], x[..., self.n:]
        c = np.einsum("...ij,...j->...i", self.coriolis_matrix(theta, omega), omega)
        return c + self.external_force(theta, omega)

    def acceleration(self, x, tau) -> np.ndarray:
        """Joint accelerations for state(s) ``x = (theta, omega)`` and torques ``tau``."""
        x = np.asarray(x, dtype=float)
        h = np.asarray(tau, dtype=float) - self.bias_force(x)
        if not self.kind.rotational:
            return h @ self._Kinv.T
        M = self.mass_matrix(x[..., : self.n])
        _check_conditioning(M)
        return np.linalg.solve(M, h[..., None])[..., 0]

    def rhs(self, x, tau) -> np.ndarray:
        """``dx/dt`` for the first-order system; ``tau`` is the latent actuation."""
        x = np.asarray(x, dtype=float)
        if tau is None:
            tau = np.zeros(x.shape[:-1] + (self.n,))
        if x.ndim == 1 and self.kind.rotational:
            return self._rhs_single(x, tau)
        return np.concatenate([x[..., self.n:], self.acceleration(x, tau)], axis=-1)

    def _rhs_single(self, x, tau) -> np.ndarray:
        # scalar arithmetic: numpy call overhead dominates for 2x2 and 3x3 solves
        n = self.n
        th = x[:n].tolist()
        om = x[n:].tolist()
        tq = np.asarray(tau, dtype=float).tolist()
        K, G, Nc, fr = self._K_list, self._G_list, self._Nc_list, self._fr_list
        M = [[0.0] * n for _ in range(n)]
        h = [0.0] * n
        for i in range(n):
            acc = tq[i] - Nc[i] * math.sin(th[i]) - fr[i] * om[i]
            for j in range(n):
                if i == j:
                    M[i][i] = K[i][i]
                    continue
                dij = th[j] - th[i]
                M[i][j] = K[i][j] * math.cos(dij)
                s = math.sin(dij) if j > i else -math.sin(dij)
                acc -= G[i][j] * s * om[j] * om[j]
            h[i] = acc
        if n == 2:
            det = M[0][0] * M[1][1] - M[0][1] * M[1][0]
            _check_ratio(det, M[0][0] * M[1][1])
            a0 = (M[1][1] * h[0] - M[0][1] * h[1]) / det
            a1 = (M[0][0] * h[1] - M[1][0] * h[0]) / det
            return np.array([om[0], om[1], a0, a1])
        c00 = M[1][1] * M[2][2] - M[1][2] * M[2][1]
        c01 = M[1][2] * M[2][0] - M[1][0] * M[2][2]
        c02 = M[1][0] * M[2][1] - M[1][1] * M[2][0]
        det = M[0][0] * c00 + M[0][1] * c01 + M[0][2] * c02
        _check_ratio(det, M[0][0] * M[1][1] * M[2][2])
        inv = [
            [c00, M[0][2] * M[2][1] - M[0][1] * M[2][2], M[0][1] * M[1][2] - M[0][2] * M[1][1]],
            [c01, M[0][0] * M[2][2] - M[0][2] * M[2][0], M[0][2] * M[1][0] - M[0][0] * M[1][2]],
            [c02, M[0][1] * M[2][0] - M[0][0] * M[2][1], M[0][0] * M[1][1] - M[0][1] * M[1][0]],
        ]
        a = [(inv[i][0] * h[0] + inv[i][1] * h[1] + inv[i][2] * h[2]) / det for i in range(3)]
        return np.array(om + a)

    def jacobian(self, x, tau) -> tuple[np.ndarray, np.ndarray]:
        """Analytic ``(d rhs/dx, d rhs/dtau)`` at a single state."""
        x = np.asarray(x, dtype=float)
        tau = np.asarray(tau, dtype=float)
        n = self.n
        theta, omega = x[:n], x[n:]
        A = np.zeros((2 * n, 2 * n))
        A[:n, n:] = np.eye(n)
        Minv = np.linalg.inv(self.mass_matrix(theta))
        B = np.zeros((2 * n, n))
        B[n:] = Minv
        if not self.kind.rotational:
            A[n:, n:] = -Minv * self.friction[None, :]
            return A, B
        alpha = self.acceleration(x, tau)
        d = theta[None, :] - theta[:, None]  # theta_j - theta_i
        sin_d, cos_d = np.sin(d), np.cos(d)
        # Coriolis vector v_i = sum_j G_ij sgn_ij sin(theta_j - theta_i) omega_j^2
        Gs = self.G * self._sgn
        dv_dw = 2.0 * Gs * sin_d * omega[None, :]
        coupling = Gs * cos_d * (omega**2)[None, :]  # derivative of term j w.r.t. theta_j
        dv_dth = coupling - np.diag(coupling.sum(axis=1))
        # (dM/dtheta_k) alpha with dM_ij/dtheta_k = -K_ij sin(d_ij) (delta_jk - delta_ik)
        Ka = self.K * sin_d * alpha[None, :]
        dMa = -Ka + np.diag(Ka.sum(axis=1))
        dh_dth = -dv_dth - np.diag(self.Nc * np.cos(theta))
        dh_dw = -dv_dw - np.diag(self.friction)
        A[n:, :n] = Minv @ (dh_dth - dMa)
        A[n:, n:] = Minv @ dh_dw
        return A, B

    # -- kinematics ----------------------------------------------------------

    def joint_positions(self, theta) -> np.ndarray:
        """Positions of joint ends ``(..., n, 2)``; the last row is the tip."""
        theta = np.asarray(theta, dtype=float)
        if self.kind.rotational:
            seg = self.lengths[:, None] * np.stack([np.sin(theta), np.cos(theta)], axis=-1)
            return np.cumsum(seg, axis=-2)
        q = self.lengths
        l1 = q[0] + theta[..., 0]
        l2 = q[1] + theta[..., 1]
        zero = np.zeros_like(l1)
        return np.stack([np.stack([zero, l1], -1), np.stack([l2, l1], -1)], axis=-2)

    def tip(self, theta) -> np.ndarray:
        return self.joint_positions(theta)[..., -1, :]

    def tip_jacobian(self, theta) -> np.ndarray:
        """``d tip / d theta`` as a ``(2, n)`` matrix."""
        theta = np.asarray(theta, dtype=float)
        if self.kind.rotational:
            return np.stack([self.lengths * np.cos(theta), -self.lengths * np.sin(theta)])
        return np.array([[0.0, 1.0], [1.0, 0.0]])

    def observe(self, x) -> "Observation":
        """Cartesian observation ``(W, Z, dW, dZ)`` of state(s) ``x``."""
        x = np.asarray(x, dtype=float)
        n = self.n
        theta, omega = x[..., :n], x[..., n:]
        P = self.joint_positions(theta)
        if self.kind.rotational:
            dseg = (self.lengths * omega)[..., None] * np.stack(
                [np.cos(theta), -np.sin(theta)], axis=-1
            )
            dP = np.cumsum(dseg, axis=-2)
        else:
            zero = np.zeros_like(omega[..., 0])
            dP = np.stack(
                [np.stack([zero, omega[..., 0]], -1), np.stack([omega[..., 1], omega[..., 0]], -1)],
                axis=-2,
            )
        lead = x.shape[:-1]
        return Observation(
            W=P[..., :-1, :].reshape(lead + (2 * (n - 1),)),
            Z=P[..., -1, :],
            dW=dP[..., :-1, :].reshape(lead + (2 * (n - 1),)),
            dZ=dP[..., -1, :],
        )

    def state_from_observation(self, obs: "Observation") -> np.ndarray:
        """Invert :meth:`observe` using the model geometry."""
        return joint_state(self.kind, obs, self.lengths)


def _frozen(v, shape) -> np.ndarray:
    a = np.array(v, dtype=float)
    if a.shape != shape:
        raise ValueError(f"expected shape {shape}, got {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class RobotSpec:
    """Physical parameters of one arm.

    For the prismatic arm ``lengths`` holds the rest lengths ``q_i``;
    ``com`` and ``inertia`` are unused there and may be omitted.  Dynamics
    and kinematics are delegated to :attr:`dynamics`.
    """

    kind: RobotKind
    masses: np.ndarray
    lengths: np.ndarray
    friction: np.ndarray
    com: np.ndarray | None = None
    inertia: np.ndarray | None = None
    gravity: float = GRAVITY
    dynamics: ArmDynamics = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        kind = RobotKind(self.kind)
        object.__setattr__(self, "kind", kind)
        n = kind.joints
        for name in ("masses", "lengths", "friction", "com", "inertia"):
            v = getattr(self, name)
            if v is None:
                if kind.rotational and name in ("com", "inertia"):
                    raise ValueError(f"rotational arms need {name}")
                continue
            v = np.array(v, dtype=float)
            if v.shape != (n,):
                raise ValueError(f"{name} must have {n} entries, got shape {v.shape}")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        if np.any(self.masses <= 0) or np.any(self.lengths <= 0):
            raise ValueError("masses and lengths must be positive")
        if np.any(self.friction < 0):
            raise ValueError("friction coefficients must be non-negative")
        if kind.rotational:
            if np.any(self.inertia <= 0):
                raise ValueError("moments of inertia must be positive")
            if np.any(self.com <= 0) or np.any(self.com > self.lengths):
                raise ValueError("centre-of-mass offsets must lie in (0, L_i]")
        K, G, Nc = coefficient_tables(self.coefficients(), kind)
        object.__setattr__(self, "dynamics", ArmDynamics(kind, K, G, Nc, self.friction, self.lengths))

    @property
    def n(self) -> int:
        return self.kind.joints

    @property
    def reach(self) -> float:
        return float(np.sum(self.lengths))

    def coefficients(self) -> dict[str, float]:
        """Named scalar coefficients of ``M``, ``C`` and ``N``."""
        if self.kind is RobotKind.ROT3:
            return rot3_coefficients(self)
        if self.kind is RobotKind.ROT2:
            return rot2_coefficients(self)
        m1, m2 = self.masses
        g = self.gravity
        return {"M11": m1 + m2, "M22": m2, "N1": g * (m1 + m2), "N2": 0.0}

    def __getattr__(self, name):
        # dynamics and kinematics methods live on the coefficient model
        if name in _DELEGATED:
            return getattr(self.dynamics, name)
        raise AttributeError(name)

    def energy(self, x) -> np.ndarray:
        """Total mechanical energy; potential is zero at the base height."""
        x = np.asarray(x, dtype=float)
        n = self.n
        theta, omega = x[..., :n], x[..., n:]
        M = self.mass_matrix(theta)
        kinetic = 0.5 * np.einsum("...i,...ij,...j->...", omega, M, omega)
        g = self.gravity
        if not self.kind.rotational:
            return kinetic + g * (self.masses[0] + self.masses[1]) * theta[..., 0]
        c = np.cos(theta)
        link_base = np.cumsum(self.lengths * c, axis=-1) - self.lengths * c
        heights = link_base + self.com * c
        return kinetic + g * np.sum(self.masses * heights, axis=-1)

    def home_state(self) -> np.ndarray:
        return np.zeros(2 * self.n)

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind.value,
            "masses": self.masses.tolist(),
            "lengths": self.lengths.tolist(),
            "friction": self.friction.tolist(),
            "gravity": self.gravity,
        }
        if self.kind.rotational:
            out["com"] = self.com.tolist()
            out["inertia"] = self.inertia.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RobotSpec":
        return cls(
            kind=RobotKind(d["kind"]),
            masses=d["masses"],
            lengths=d["lengths"],
            friction=d["friction"],
            com=d.get("com"),
            inertia=d.get("inertia"),
            gravity=float(d.get("gravity", GRAVITY)),
        )


_DELEGATED = frozenset({
    "mass_matrix", "coriolis_matrix", "external_force", "bias_force", "acceleration", "rhs",
    "jacobian", "joint_positions", "tip", "tip_jacobian", "observe", "state_from_observation",
})


def rot3_coefficients(spec: RobotSpec) -> dict[str, float]:
    m1, m2, m3 = spec.masses
    l1, l2, l3 = spec.com
    L1, L2, _ = spec.lengths
    J1, J2, J3 = spec.inertia
    g = spec.gravity
    return {
        "M11": m1 * l1**2 + J1 + (m2 + m3) * L1**2,
        "M12": (m2 * l2 + m3 * L2) * L1,
        "M13": m3 * l3 * L1,
        "M22": m2 * l2**2 + J2 + m3 * L2**2,
        "M23": m3 * l3 * L2,
        "M33": m3 * l3**2 + J3,
        "C12": -(m2 * l2 + m3 * L2) * L1,
        "C13": -m3 * l3 * L1,
        "C21": (m2 * l2 + m3 * L2) * L1,
        "C23": -m3 * l3 * L2,
        "C32": m3 * l3 * L2,
        "N1": -(m1 * l1 + (m2 + m3) * L1) * g,
        "N2": -(m2 * l2 + m3 * L2) * g,
        "N3": -m3 * l3 * g,
    }


def rot2_coefficients(spec: RobotSpec) -> dict[str, float]:
    """Two-link coefficients: the three-link list with the third link removed.

    ``C12 = -m2 l2 L1``.  A squared offset ``l2**2`` sometimes quoted for this
    entry is dimensionally inconsistent and breaks energy conservation.
    """
    m1, m2 = spec.masses
    l1, l2 = spec.com
    L1, _ = spec.lengths
    J1, J2 = spec.inertia
    g = spec.gravity
    return {
        "M11": m1 * l1**2 + J1 + m2 * L1**2,
        "M12": m2 * l2 * L1,
        "M22": m2 * l2**2 + J2,
        "C12": -m2 * l2 * L1,
        "C21": m2 * l2 * L1,
        "N1": -(m1 * l1 + m2 * L1) * g,
        "N2": -m2 * l2 * g,
    }


def coefficient_tables(c: dict[str, float], kind: RobotKind):
    """``(K, G, Nc)`` arrays from named coefficients.

    The Coriolis entry ``(i, j)`` is ``G_ij * sin(theta_hi - theta_lo) * omega_j``,
    matching the layout of the coefficient list, whose ``(3, 1)`` entry is
    written ``-C13``.
    """
    n = RobotKind(kind).joints
    K = np.zeros((n, n))
    G = np.zeros((n, n))
    Nc = np.array([c[f"N{i + 1}"] for i in range(n)])
    for i in range(n):
        K[i, i] = c[f"M{i + 1}{i + 1}"]
    if RobotKind(kind).rotational:
        for i in range(n):
            for j in range(i + 1, n):
                K[i, j] = K[j, i] = c[f"M{i + 1}{j + 1}"]
                G[i, j] = c[f"C{i + 1}{j + 1}"]
                lower = f"C{j + 1}{i + 1}"
                G[j, i] = c[lower] if lower in c else -c[f"C{i + 1}{j + 1}"]
    return K, G, Nc


def _check_ratio(det: float, diag_product: float, limit: float = 1e12) -> None:
    if not det / diag_product > 1.0 / limit:
        raise SingularConfigurationError("inertia matrix is numerically singular")


def _check_conditioning(M: np.ndarray, limit: float = 1e12) -> None:
    # scaled determinant: det(D^-1/2 M D^-1/2) shrinks like 1/cond for SPD M
    diag = np.diagonal(M, axis1=-2, axis2=-1)
    ratio = np.linalg.det(M) / np.prod(diag, axis=-1)
    if np.any(~(ratio > 1.0 / limit)):
        raise SingularConfigurationError("inertia matrix is numerically singular")


# ---------------------------------------------------------------------------
# observations


@dataclass(frozen=True, eq=False)
class Observation:
    """Cartesian view of the arm; ``W`` stacks interior joints ``(x1, y1, ...)``."""

    W: np.ndarray
    Z: np.ndarray
    dW: np.ndarray
    dZ: np.ndarray
    t: float = 0.0

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        """Joint positions and velocities as ``(..., n, 2)`` arrays, tip last."""
        lead = self.Z.shape[:-1]
        P = np.concatenate([self.W.reshape(lead + (-1, 2)), self.Z[..., None, :]], axis=-2)
        dP = np.concatenate([self.dW.reshape(lead + (-1, 2)), self.dZ[..., None, :]], axis=-2)
        return P, dP

    def to_dict(self) -> dict:
        return {
            "t": float(self.t),
            "Z": self.Z.tolist(),
            "W": self.W.tolist(),
            "dZ": self.dZ.tolist(),
            "dW": self.dW.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        return cls(
            W=np.asarray(d["W"], float),
            Z=np.asarray(d["Z"], float),
            dW=np.asarray(d["dW"], float),
            dZ=np.asarray(d["dZ"], float),
            t=float(d.get("t", 0.0)),
        )


def joint_state(kind: RobotKind, obs: Observation, lengths=None) -> np.ndarray:
    """Joint angles/extensions and their rates from a Cartesian observation.

    For rotational arms each link vector ``(dx, dy) = L (sin th, cos th)`` gives
    ``th = atan2(dx, dy)`` and ``omega = (d(dx) dy - d(dy) dx) / L^2``.  Link
    lengths are taken from the observation itself when not supplied.  For the
    prismatic arm ``lengths`` are the rest lengths ``q``.
    """
    kind = RobotKind(kind)
    P, dP = obs.points()
    if kind.rotational:
        seg = np.diff(P, axis=-2, prepend=np.zeros_like(P[..., :1, :]))
        dseg = np.diff(dP, axis=-2, prepend=np.zeros_like(dP[..., :1, :]))
        theta = np.arctan2(seg[..., 0], seg[..., 1])
        sq = np.sum(seg**2, axis=-1) if lengths is None else np.asarray(lengths, float) ** 2
        omega = (dseg[..., 0] * seg[..., 1] - dseg[..., 1] * seg[..., 0]) / sq
        return np.concatenate([theta, omega], axis=-1)
    if lengths is None:
        raise ValueError("prismatic joint recovery needs the rest lengths")
    q = np.asarray(lengths, float)
    Z, dZ = obs.Z, obs.dZ
    theta = np.stack([Z[..., 1] - q[0], Z[..., 0] - q[1]], axis=-1)
    omega = np.stack([dZ[..., 1], dZ[..., 0]], axis=-1)
    return np.concatenate([theta, omega], axis=-1)


# ---------------------------------------------------------------------------
# interfaces and the system table


@dataclass(frozen=True, eq=False)
class InterfaceMap:
    """Linear map from abstract controls ``U`` (length p) to actuation ``C = A U``."""

    A: np.ndarray
    pinv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.ndim != 2 or A.shape[1] < A.shape[0]:
            raise ValueError(f"interface must be q x p with p >= q, got {A.shape}")
        if np.linalg.matrix_rank(A) < A.shape[0]:
            raise ValueError("interface matrix must have full row rank")
        A.setflags(write=False)
        P = np.linalg.pinv(A)
        P.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "pinv", P)

    @property
    def q(self) -> int:
        return self.A.shape[0]

    @property
    def p(self) -> int:
        return self.A.shape[1]

    def actuation(self, U) -> np.ndarray:
        return np.asarray(U, float) @ self.A.T

    def preimage(self, C) -> np.ndarray:
        """Minimum-norm ``U`` with ``A U = C``."""
        return np.asarray(C, float) @ self.pinv.T

    @classmethod
    def identity(cls, q: int) -> "InterfaceMap":
        return cls(np.eye(q))


@dataclass(frozen=True, eq=False)
class RobotSystem:
    index: int            # 1-based
    name: str
    spec: RobotSpec
    interface: InterfaceMap

    @property
    def p(self) -> int:
        return self.interface.p

    @property
    def d(self) -> int:
        """Number of interior joints reported in ``W``."""
        return self.spec.n - 1

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "name": self.name,
            "spec": self.spec.to_dict(),
            "A": self.interface.A.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RobotSystem":
        return cls(int(d["index"]), d["name"], RobotSpec.from_dict(d["spec"]), InterfaceMap(d["A"]))


_FAMILIES = (
    (RobotKind.ROT2, ("great", "rebel"), "beetle", ("devious", "vivacious", "mauve", "wine"), (3, 4)),
    (RobotKind.ROT3, ("talented", "thoughtful"), "butterfly", ("ruddy", "steel", "zippy", "antique"), (4, 6)),
    (RobotKind.PRISMATIC, ("great", "lush"), "bumblebee", ("piquant", "bipedal", "impartial", "proficient"), (3, 4)),
)

MASS_RANGE = (0.5, 2.0)
LENGTH_RANGE = (0.5, 1.0)
FRICTION_RANGE = (0.05, 0.2)


def sample_spec(kind: RobotKind, rng: np.random.Generator) -> RobotSpec:
    """Random physically plausible parameters; prismatic joints are frictionless."""
    kind = RobotKind(kind)
    n = kind.joints
    m = rng.uniform(*MASS_RANGE, n)
    L = rng.uniform(*LENGTH_RANGE, n)
    if not kind.rotational:
        return RobotSpec(kind, m, L, np.zeros(n))
    c = rng.uniform(*FRICTION_RANGE, n)
    return RobotSpec(kind, m, L, c, com=L / 2, inertia=m * L**2 / 12)


def sample_interface(q: int, p: int, rng: np.random.Generator, max_cond: float = 50.0) -> InterfaceMap:
    """Random full-rank ``q x p`` matrix whose row norms span one decade."""
    norms = np.geomspace(1.0, 10.0, q)[rng.permutation(q)]
    for _ in range(1000):
        A = rng.standard_normal((q, p))
        A = A / np.linalg.norm(A, axis=1, keepdims=True)
        if np.linalg.cond(A) <= max_cond:
            return InterfaceMap(norms[:, None] * A)
    raise RuntimeError("could not draw a well-conditioned interface")


def build_system_table(seed: int) -> list[RobotSystem]:
    """24 systems: per family, two parameter sets crossed with four interfaces.

    The first interface of each family is the identity; the others are a
    square and two wide random matrices.
    """
    root = np.random.SeedSequence([int(seed), 7001])
    fam_seqs = root.spawn(len(_FAMILIES))
    systems = []
    for (kind, adjectives, animal, colours, widths), seq in zip(_FAMILIES, fam_seqs):
        rng = np.random.default_rng(seq)
        q = kind.joints
        specs = [sample_spec(kind, rng) for _ in adjectives]
        interfaces = [InterfaceMap.identity(q)] + [sample_interface(q, p, rng) for p in (q, *widths)]
        for adj, spec in zip(adjectives, specs):
            for colour, itf in zip(colours, interfaces):
                systems.append(RobotSystem(len(systems) + 1, f"{adj}-{colour}-{animal}", spec, itf))
    return systems


def system_table_json(systems: list[RobotSystem]) -> str:
    return json.dumps([s.to_dict() for s in systems], indent=1)


def system_table_from_json(text: str) -> list[RobotSystem]:
    return [RobotSystem.from_dict(d) for d in json.loads(text)]
