"""Controlled ODE integration on fixed output grids.

The integrator is an adaptive Dormand-Prince 5(4) pair with its quartic
continuous extension for sampling the output grid.  States may carry leading
batch axes; a batch shares one step size, chosen from the worst member.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np


class DivergenceError(RuntimeError):
    def __init__(self, t: float, message: str = ""):
        super().__init__(message or f"state became non-finite or unbounded at t={t:.6g}")
        self.t = t


class StiffnessError(RuntimeError):
    def __init__(self, t: float, h: float):
        super().__init__(f"step size underflow (h={h:.3g}) at t={t:.6g}")
        self.t = t
        self.h = h


# ---------------------------------------------------------------------------
# control signals


class ControlSignal(Protocol):
    def __call__(self, t: float) -> np.ndarray: ...

    def breakpoints(self, t0: float, t1: float) -> list[float]: ...


@dataclass(frozen=True)
class ZeroControl:
    dim: int

    def __call__(self, t: float) -> np.ndarray:
        return np.zeros(self.dim)

    def breakpoints(self, t0: float, t1: float) -> list[float]:
        return []


@dataclass(frozen=True, eq=False)
class Impulse:
    """``u`` on ``[start, end)``, zero elsewhere.  ``u`` may be batched ``(..., p)``."""

    u: np.ndarray
    start: float
    end: float

    def __post_init__(self):
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float))
        if not self.end > self.start:
            raise ValueError("impulse window must have positive length")

    def __call__(self, t: float) -> np.ndarray:
        if self.start <= t < self.end:
            return self.u
        return np.zeros_like(self.u)

    def breakpoints(self, t0: float, t1: float) -> list[float]:
        return [b for b in (self.start, self.end) if t0 < b < t1]


@dataclass(frozen=True, eq=False)
class PiecewiseConstant:
    """``values[i]`` on ``[grid[i], grid[i+1])``; the last value holds afterwards."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if grid.ndim != 1 or np.any(np.diff(grid) <= 0):
            raise ValueError("piecewise-constant grid must be strictly increasing")
        if len(values) != len(grid) - 1:
            raise ValueError("need exactly one value per grid interval")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    def __call__(self, t: float) -> np.ndarray:
        if t < self.grid[0]:
            return np.zeros_like(self.values[0])
        i = int(np.searchsorted(self.grid, t, side="right")) - 1
        return self.values[min(i, len(self.values) - 1)]

    def breakpoints(self, t0: float, t1: float) -> list[float]:
        return [float(b) for b in self.grid if t0 < b < t1]


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        states = np.asarray(self.states, dtype=float)
        if times.ndim != 1 or len(times) != len(states):
            raise ValueError("times and states must have equal length")
        if len(times) > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
        if self.controls is not None:
            controls = np.asarray(self.controls, dtype=float)
            if len(controls) != len(times):
                raise ValueError("need one control vector per time point")
            object.__setattr__(self, "controls", controls)

    def to_csv(self) -> str:
        n = self.states.shape[1]
        header = ["t"] + [f"x{i + 1}" for i in range(n)]
        if self.controls is not None:
            header += [f"u{i + 1}" for i in range(self.controls.shape[1])]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for i, t in enumerate(self.times):
            row = [t, *self.states[i]]
            if self.controls is not None:
                row += list(self.controls[i])
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Trajectory":
        rows = list(csv.reader(io.StringIO(text)))
        header, data = rows[0], np.array(rows[1:], dtype=float)
        nx = sum(h.startswith("x") for h in header)
        nu = sum(h.startswith("u") for h in header)
        controls = data[:, 1 + nx : 1 + nx + nu] if nu else None
        return cls(data[:, 0], data[:, 1 : 1 + nx], controls)


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)

_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
]
_A2 = np.zeros((6, 6))
for _i, _row in enumerate(_A):
    _A2[_i, : len(_row)] = _row
_B = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array([-71 / 57600, 0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# quartic dense output, rows = stages 1..7, columns = powers theta^1..theta^4
_P = np.array(
    [
        [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0, 0, 0, 0],
        [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

Rhs = Callable[[float, np.ndarray], np.ndarray]


def _err_norm(err: np.ndarray, scale: np.ndarray, alive: np.ndarray | None) -> float:
    per = np.sqrt(np.mean((err / scale) ** 2, axis=-1))
    if alive is not None:
        per = np.where(alive, per, 0.0)
    return float(np.max(per)) if per.size else 0.0


def _initial_step(rhs: Rhs, t0: float, y0: np.ndarray, f0: np.ndarray, direction: float,
                  rtol: float, atol: float, alive) -> float:
    scale = atol + np.abs(y0) * rtol
    d0 = _err_norm(y0, scale, alive)
    d1 = _err_norm(f0, scale, alive)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = y0 + h0 * direction * f0
    f1 = rhs(t0 + h0 * direction, y1)
    d2 = _err_norm(f1 - f0, scale, alive) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1)


def solve_segment(
    rhs: Rhs,
    t0: float,
    t1: float,
    y0: np.ndarray,
    out_times: np.ndarray,
    *,
    rtol: float = 1e-8,
    atol: float = 1e-10,
    max_abs: float = 1e8,
    mask_divergent: bool = False,
    max_steps: int = 200_000,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate ``y' = rhs(t, y)`` from ``t0`` to exactly ``t1``.

    Returns ``(samples at out_times, y(t1))``.  ``out_times`` must lie in
    ``[t0, t1]``.  With ``mask_divergent``, batch members that blow up are
    frozen at NaN instead of raising.
    """
    y = np.array(y0, dtype=float)
    out_times = np.asarray(out_times, dtype=float)
    out = np.full((len(out_times),) + y.shape, np.nan)
    batched = y.ndim > 1
    alive = np.ones(y.shape[:-1], dtype=bool) if batched else None

    def check(yv: np.ndarray, t: float) -> None:
        bad = ~np.isfinite(yv) | (np.abs(yv) > max_abs)
        if not bad.any():
            return
        if mask_divergent and batched:
            dead = bad.any(axis=-1)
            alive[dead] = False
            yv[dead] = 0.0
        else:
            raise DivergenceError(t)

    def f(t, yv):
        d = rhs(t, yv)
        if batched and not alive.all():
            d = np.where(alive[..., None], d, 0.0)
        return d

    k_done = 0
    while k_done < len(out_times) and out_times[k_done] <= t0:
        out[k_done] = y
        k_done += 1
    if t1 <= t0:
        return _finish(out, alive), _finish(y, alive)

    f0 = f(t0, y)
    check(f0, t0)
    h = _initial_step(f, t0, y, f0, 1.0, rtol, atol, alive)
    t = t0
    shape = y.shape
    K = np.empty((7, y.size))
    K[0] = f0.ravel()
    yf = y.ravel()
    steps = 0
    while t < t1:
        h_min = 10 * np.spacing(t)
        h = min(h, t1 - t)
        if t + h > t1 - h_min:
            h = t1 - t
        while True:
            for s in range(1, 6):
                ys = yf + h * (_A2[s, :s] @ K[:s])
                K[s] = f(t + _C[s] * h, ys.reshape(shape)).ravel()
            y_new = (yf + h * (_B @ K[:6])).reshape(shape)
            check(y_new, t + h)
            K[6] = f(t + h, y_new).ravel()
            check(K[6].reshape(shape), t + h)
            err = (h * (_E @ K)).reshape(shape)
            scale = atol + np.maximum(np.abs(y), np.abs(y_new)) * rtol
            en = _err_norm(err, scale, alive)
            if not np.isfinite(en):
                en = 1e10
            if en <= 1.0:
                break
            h *= max(0.2, 0.9 * en ** -0.2)
            if h < h_min:
                raise StiffnessError(t, h)
        t_new = t + h if t1 - (t + h) > h_min else t1
        # dense output for grid points inside (t, t_new]
        if k_done < len(out_times) and out_times[k_done] <= t_new:
            Q = _P.T @ K  # (4, size)
            while k_done < len(out_times) and out_times[k_done] <= t_new:
                tk = out_times[k_done]
                if tk >= t_new:
                    out[k_done] = y_new
                else:
                    th = (tk - t) / h
                    powers = np.array([th, th**2, th**3, th**4])
                    out[k_done] = (yf + h * (powers @ Q)).reshape(shape)
                k_done += 1
        t, y = t_new, y_new
        yf = y.ravel()
        K[0] = K[6]
        fac = 10.0 if en == 0 else min(10.0, 0.9 * en ** -0.2)
        h = h * fac
        steps += 1
        if steps > max_steps:
            raise StiffnessError(t, h)
    return _finish(out, alive), _finish(y, alive)


def _finish(a: np.ndarray, alive) -> np.ndarray:
    if alive is None or alive.all():
        return a
    a = np.array(a)
    a[..., ~alive, :] = np.nan
    return a


def integrate(
    field: Callable[[np.ndarray, np.ndarray], np.ndarray],
    control: ControlSignal | None,
    x0: np.ndarray,
    grid: Sequence[float],
    *,
    mixing: np.ndarray | None = None,
    tol: float = 1e-8,
    atol: float | None = None,
    mask_divergent: bool = False,
    max_abs: float = 1e8,
) -> Trajectory | np.ndarray:
    """Solve ``x' = field(x, c(t))`` with ``c = mixing @ u(t)`` on ``grid``.

    The run restarts at every control discontinuity inside the grid span, so
    no step straddles a jump.  Returns a :class:`Trajectory` for a single
    state, or an array ``(len(grid), *batch, n)`` for batched ``x0``.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) < 1 or np.any(np.diff(grid) <= 0):
        raise ValueError("output grid must be strictly increasing")
    if tol <= 0:
        raise ValueError("tol must be positive")
    atol = tol * 1e-3 if atol is None else atol
    x0 = np.asarray(x0, dtype=float)
    t0, t1 = float(grid[0]), float(grid[-1])
    cuts = sorted(set(control.breakpoints(t0, t1))) if control is not None else []
    edges = [t0, *cuts, t1]

    def make_rhs(tc: float) -> Rhs:
        if control is None:
            return lambda t, x: field(x, None)
        u = control(tc)
        c = u if mixing is None else u @ np.asarray(mixing).T
        return lambda t, x: field(x, c)

    chunks = []
    x = x0
    for a, b in zip(edges[:-1], edges[1:]):
        last = b == t1
        sel = (grid >= a) & ((grid <= b) if last else (grid < b))
        samples, x = solve_segment(
            make_rhs(a), a, b, x, grid[sel], rtol=tol, atol=atol,
            mask_divergent=mask_divergent, max_abs=max_abs,
        )
        chunks.append(samples)
    states = np.concatenate(chunks, axis=0)
    if x0.ndim > 1:
        return states
    if not np.all(np.isfinite(states)):
        raise DivergenceError(float(grid[np.argmax(~np.isfinite(states).all(axis=1))]))
    controls = None
    if control is not None:
        controls = np.array([np.asarray(control(t), dtype=float) for t in grid])
    return Trajectory(grid, states, controls)


# ---------------------------------------------------------------------------
# linearization and quadrature


def linearize(
    field: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x0: np.ndarray,
    u0: np.ndarray,
    *,
    mixing: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """State and control Jacobians of ``field(x, mixing @ u)`` at ``(x0, u0)``.

    Uses ``field.jacobian(x, c) -> (dfdx, dfdc)`` when the evaluator offers
    one; otherwise central differences with ``h = max(1e-6, 1e-6 |v|)``.
    """
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    mix = np.eye(len(u0)) if mixing is None else np.asarray(mixing, dtype=float)
    c0 = mix @ u0
    jac = getattr(field, "jacobian", None)
    if callable(jac):
        dfdx, dfdc = jac(x0, c0)
        return np.asarray(dfdx), np.asarray(dfdc) @ mix

    def g(x, u):
        return np.asarray(field(x, mix @ u), dtype=float)

    return central_difference(lambda x: g(x, u0), x0), central_difference(lambda u: g(x0, u), u0)


def central_difference(f: Callable[[np.ndarray], np.ndarray], x0: np.ndarray) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    cols = []
    for i in range(len(x0)):
        h = max(1e-6, 1e-6 * abs(x0[i]))
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * h))
    return np.stack(cols, axis=-1)


def windowed_rms(
    traj: Trajectory, component: int, target: float, window: tuple[float, float]
) -> float:
    """``sqrt(1/(b-a) * int_a^b (x_c(t) - target)^2 dt)`` by grid trapezoid."""
    return float(windowed_rms_array(traj.times, traj.states[:, component], target, window))


def windowed_rms_array(times: np.ndarray, values: np.ndarray, target, window) -> np.ndarray:
    """Vectorized :func:`windowed_rms`; ``values`` has time on axis 0."""
    a, b = float(window[0]), float(window[1])
    times = np.asarray(times, dtype=float)
    if not (b > a and a >= times[0] - 1e-12 and b <= times[-1] + 1e-12):
        raise ValueError(f"window [{a}, {b}] outside trajectory [{times[0]}, {times[-1]}]")
    sel = (times >= a - 1e-12) & (times <= b + 1e-12)
    ts = times[sel]
    if not (np.isclose(ts[0], a) and np.isclose(ts[-1], b)):
        raise ValueError("window edges must fall on trajectory grid points")
    sq = (np.asarray(values)[sel] - target) ** 2
    return np.sqrt(np.trapezoid(sq, ts, axis=0) / (b - a))
