"""Impulse planning for the reaction-network track.

The planner minimizes the predicted case loss

    RMS_[40,80](Y - y*) + c * sqrt(||u||^2 / 8)

over the control box by multi-start descent.  Every start is simulated once;
the most promising ones are improved by trust-region steps.  Each step
linearizes the output trajectory in ``u`` (finite differences over a batched
simulation whose members share one step-size sequence, so differences are
smooth), and minimizes the resulting convex model by cyclic coordinate
descent within the box and the trust region.  Every simulated candidate is
remembered, and the answer is the best one under the exact predicted loss,
ties going to the smaller norm.  Zero is always a candidate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..chem import COST_WEIGHT, EVAL_WINDOW, GRID, N_CONTROLS, U_BOUND, WEAK_CONTROLS, ChemModel
from ..kinetics import Y_INDEX

ALL_CONTROLS = tuple(range(N_CONTROLS))


def _window_weights(times=GRID, window=EVAL_WINDOW):
    """Trapezoid weights ``w`` with ``RMS^2 = sum w_k r_k^2`` on the window grid points."""
    a, b = window
    sel = (times >= a - 1e-12) & (times <= b + 1e-12)
    ts = times[sel]
    w = np.zeros(len(ts))
    h = np.diff(ts)
    w[:-1] += h / 2
    w[1:] += h / 2
    return sel, w / (b - a)


_SEL, _W = _window_weights()


def predicted_outputs(model: ChemModel, x0, u, *, tol: float = 1e-6, max_abs: float = 1e3,
                      floor: float | None = 0.0):
    """``Y`` on the evaluation window for batched ``(x0, u)``.

    Rows are NaN when the prediction diverges or, with ``floor`` set, when
    any concentration drops below ``floor`` on the grid: such plans sit next
    to the blow-up of the quadratic terms, where a small error in the
    initial state turns the outcome into a divergence.
    """
    states = model.simulate(x0, u, tol=tol, mask_divergent=True, max_abs=max_abs)
    y = states[:, :, Y_INDEX][_SEL].T            # (batch, window points)
    bad = ~np.all(np.isfinite(states), axis=(0, 2))
    if floor is not None:
        bad |= np.nanmin(np.where(np.isfinite(states), states, 0.0), axis=(0, 2)) < floor
    y[bad] = np.nan
    return y


def tracking_from_outputs(y, ystar) -> np.ndarray:
    """Windowed RMS from window outputs ``y`` (batch, T); divergent rows give ``inf``."""
    r = y - np.asarray(ystar, float)[:, None]
    out = np.sqrt(np.sum(_W * r * r, axis=1))
    return np.where(np.isfinite(out), out, np.inf)


def penalty(u, c: float = COST_WEIGHT) -> np.ndarray:
    u = np.asarray(u, float)
    return c * np.sqrt(np.sum(u * u, axis=-1) / N_CONTROLS)


def best_candidate(tracking, candidates, c: float = COST_WEIGHT, rtol: float = 1e-12) -> int:
    """Index of the candidate minimizing ``tracking + c * ||u|| / sqrt(8)``.

    Losses within ``rtol`` (relative) of the minimum count as ties, which go
    to the smallest norm.  Over a fixed candidate set, raising ``c`` can then
    never select a larger norm.
    """
    tracking = np.asarray(tracking, float)
    candidates = np.atleast_2d(np.asarray(candidates, float))
    loss = tracking + penalty(candidates, c)
    best = np.min(loss)
    if not np.isfinite(best):
        return int(np.argmin(np.linalg.norm(candidates, axis=1)))
    ties = np.flatnonzero(loss <= best + rtol * max(abs(best), 1.0))
    norms = np.linalg.norm(candidates[ties], axis=1)
    return int(ties[np.argmin(norms)])


def start_points(controls=ALL_CONTROLS, bounds=(-U_BOUND, U_BOUND), rng=None, n_random: int = 3):
    """The multi-start set: zero, box corners on the weak controls, random draws.

    Corners move the weak controls ``U5..U8`` together (all up, all down)
    and in the two opposing pairs; random starts are uniform on ``[0, 2]``
    for the free controls, the scale at which impulses act without driving
    concentrations negative.  Coordinates outside ``controls`` stay zero.
    """
    lo, hi = bounds
    weak = np.array(WEAK_CONTROLS)
    pats = [
        np.array([1, 1, 1, 1]) * hi,
        np.array([1, 1, 1, 1]) * lo,
        np.array([lo, lo, hi, hi]),
        np.array([hi, hi, lo, lo]),
    ]
    starts = [np.zeros(N_CONTROLS)]
    for p in pats:
        s = np.zeros(N_CONTROLS)
        s[weak] = p
        starts.append(s)
    rng = np.random.default_rng(0) if rng is None else rng
    for _ in range(n_random):
        s = np.zeros(N_CONTROLS)
        s[list(controls)] = rng.uniform(0.0, min(2.0, hi), len(controls))
        starts.append(s)
    mask = np.zeros(N_CONTROLS, dtype=bool)
    mask[list(controls)] = True
    return np.clip(np.where(mask, np.array(starts), 0.0), lo, hi)


def _coordinate_descent(a, A, u, lo, hi, active, c, eps=1e-4, sweeps=10, newton=8):
    """Minimize the convex step model over ``d`` in ``[lo, hi]`` one coordinate at a time.

    The model is ``sqrt(e(d)) + c * sqrt(||u + d||^2 / 8 + eps^2)`` with
    ``e(d)`` the weighted squared residual of the linearized outputs, kept
    in Gram form so a coordinate update costs O(8).  Along a coordinate the
    model is convex; its minimizer is found by Newton steps safeguarded by a
    shrinking bracket.
    """
    Wa = a * _W
    G = np.einsum("mtk,mtl->mkl", A * _W[None, :, None], A)
    g = np.einsum("mtk,mt->mk", A, Wa)
    e = np.sum(a * Wa, axis=1)
    d = np.zeros_like(u)
    Gd = np.zeros_like(u)
    v = u.copy()
    vv = np.sum(v * v, axis=1)
    for _ in range(sweeps):
        moved = np.zeros(len(u))
        for j in active:
            gj = g[:, j] + Gd[:, j]
            Gjj = G[:, j, j]
            vj = v[:, j]
            rest = vv - vj * vj
            left, right = lo[:, j] - d[:, j], hi[:, j] - d[:, j]

            def derivs(t):
                E = np.maximum(e + 2 * gj * t + Gjj * t * t, 1e-300)
                sE = np.sqrt(E)
                w = vj + t
                P = (rest + w * w) / N_CONTROLS + eps * eps
                sP = np.sqrt(P)
                d1 = (gj + Gjj * t) / sE + c * w / (N_CONTROLS * sP)
                d2 = (Gjj * E - (gj + Gjj * t) ** 2) / (E * sE) + c * (P - w * w / N_CONTROLS) / (
                    N_CONTROLS * P * sP)
                return d1, np.maximum(d2, 1e-300)

            d1_lo, _ = derivs(left)
            d1_hi, _ = derivs(right)
            t = np.clip(np.zeros(len(u)), left, right)
            for _ in range(newton):
                d1, d2 = derivs(t)
                left = np.where(d1 > 0, np.minimum(left, t), np.where(d1 < 0, t, left))
                right = np.where(d1 > 0, t, right)
                step = t - d1 / d2
                t = np.where((step > left) & (step < right), step, 0.5 * (left + right))
            t = np.where(d1_lo >= 0, lo[:, j] - d[:, j], np.where(d1_hi <= 0, hi[:, j] - d[:, j], t))
            # accept the move
            e = e + 2 * gj * t + Gjj * t * t
            Gd += G[:, :, j] * t[:, None]
            d[:, j] += t
            vv = rest + (vj + t) ** 2
            v[:, j] = vj + t
            moved = np.maximum(moved, np.abs(t))
        if moved.max(initial=0.0) < 1e-9:
            break
    return d


@dataclass
class PlanResult:
    """Planned impulses and what the planner predicted for them."""

    u: np.ndarray                 # (K, 8)
    tracking: np.ndarray          # (K,) predicted tracking term
    loss: np.ndarray              # (K,) predicted full loss
    evaluations: int              # simulated trajectories
    candidates: list              # per case: (tracking array, candidate array)


def plan_impulses(
    model: ChemModel,
    x0,
    ystar,
    *,
    controls=ALL_CONTROLS,
    bounds=(-U_BOUND, U_BOUND),
    c: float = COST_WEIGHT,
    seed: int = 0,
    keep: int = 3,
    max_iter: int = 12,
    radius: float = 2.0,
    xtol: float = 1e-4,
    tol: float = 1e-6,
    fd_step: float = 1e-4,
    floor: float | None = 0.0,
) -> PlanResult:
    """Plan impulses for a batch of cases of one system.

    Args:
        model: dynamics used for prediction (fitted or true).
        x0: initial states ``(K, 15)``.
        ystar: targets ``(K,)``.
        controls: indices of the controls the planner may move; the others
            stay zero (``WEAK_CONTROLS`` gives the weak-controls-only planner).
        keep: starts per case carried into the descent after screening.
        max_iter: descent steps per kept start.
        radius: initial trust-region half-width per coordinate.
        xtol: the descent stops once the trust region is smaller than this.
        tol: integration tolerance for the predictions.
        floor: candidates predicted to drive a concentration below this value
            are treated as infeasible (``None`` disables the check).
    """
    x0 = np.atleast_2d(np.asarray(x0, float))
    ystar = np.broadcast_to(np.asarray(ystar, float), (len(x0),)).copy()
    K = len(x0)
    lo_b, hi_b = bounds
    controls = tuple(sorted(int(j) for j in controls))
    free = np.zeros(N_CONTROLS, dtype=bool)
    free[list(controls)] = True
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7003]))
    starts = start_points(controls, bounds, rng)
    S = len(starts)

    hist_u = [[] for _ in range(K)]
    hist_t = [[] for _ in range(K)]
    evals = 0

    # screening: every start for every case in one batch
    U0 = np.tile(starts, (K, 1))
    X0 = np.repeat(x0, S, axis=0)
    Ys = np.repeat(ystar, S)
    track0 = tracking_from_outputs(predicted_outputs(model, X0, U0, tol=tol, floor=floor), Ys)
    evals += len(U0)
    for idx in range(len(U0)):
        hist_u[idx // S].append(U0[idx])
        hist_t[idx // S].append(track0[idx])
    loss0 = (track0 + penalty(U0, c)).reshape(K, S)
    order = np.argsort(loss0, axis=1, kind="stable")[:, :keep]

    # members carried into the descent: finite-loss kept starts
    mem_case, mem_u = [], []
    for k in range(K):
        for s in order[k]:
            if np.isfinite(loss0[k, s]):
                mem_case.append(k)
                mem_u.append(starts[s])
    mem_case = np.array(mem_case, dtype=int)
    u = np.array(mem_u, float).reshape(-1, N_CONTROLS)
    M = len(u)
    active = np.flatnonzero(free)
    if M and len(active):
        rad = np.full(M, radius)
        live = np.ones(M, dtype=bool)
        for _ in range(max_iter):
            idx = np.flatnonzero(live)
            if not len(idx):
                break
            # outputs at the current points and finite-difference columns, one batch
            n_a = len(active)
            h = fd_step * np.maximum(1.0, np.abs(u[idx][:, active]))
            pts = [u[idx]]
            for col, j in enumerate(active):
                p = u[idx].copy()
                # step inward when at the upper bound
                sgn = np.where(p[:, j] + h[:, col] > hi_b, -1.0, 1.0)
                p[:, j] += sgn * h[:, col]
                pts.append(p)
                h[:, col] *= sgn
            P = np.concatenate(pts)
            xs = np.tile(x0[mem_case[idx]], (n_a + 1, 1))
            Y = predicted_outputs(model, xs, P, tol=tol, floor=floor)
            evals += len(P)
            Y = Y.reshape(n_a + 1, len(idx), -1)
            y_c = Y[0]
            r_c = y_c - ystar[mem_case[idx]][:, None]
            cur_track = tracking_from_outputs(y_c, ystar[mem_case[idx]])
            for n, m in enumerate(idx):
                hist_u[mem_case[m]].append(u[m].copy())
                hist_t[mem_case[m]].append(cur_track[n])
            A = np.zeros((len(idx), Y.shape[2], N_CONTROLS))
            for col, j in enumerate(active):
                A[:, :, j] = (Y[col + 1] - y_c) / h[:, col][:, None]
            ok = np.all(np.isfinite(A), axis=(1, 2)) & np.isfinite(cur_track)
            if not ok.all():
                live[idx[~ok]] = False
                idx, r_c, A, cur_track = idx[ok], r_c[ok], A[ok], cur_track[ok]
                if not len(idx):
                    break
            cur_loss = cur_track + penalty(u[idx], c)
            # trust-region step from the convex model
            for _ in range(4):
                lo = np.where(free, np.maximum(lo_b - u[idx], -rad[idx][:, None]), 0.0)
                hi = np.where(free, np.minimum(hi_b - u[idx], rad[idx][:, None]), 0.0)
                d = _coordinate_descent(r_c, A, u[idx], lo, hi, active, c)
                trial = np.clip(u[idx] + d, lo_b, hi_b)
                y_t = predicted_outputs(model, x0[mem_case[idx]], trial, tol=tol, floor=floor)
                evals += len(trial)
                t_track = tracking_from_outputs(y_t, ystar[mem_case[idx]])
                for n, m in enumerate(idx):
                    hist_u[mem_case[m]].append(trial[n].copy())
                    hist_t[mem_case[m]].append(t_track[n])
                t_loss = t_track + penalty(trial, c)
                better = t_loss < cur_loss
                u[idx[better]] = trial[better]
                rad[idx[better]] = np.minimum(2 * rad[idx[better]], hi_b - lo_b)
                rad[idx[~better]] /= 4
                small = rad[idx] < xtol
                live[idx[small]] = False
                if better.all():
                    break
                # retry the rejected members with the smaller region
                keep_idx = ~better & ~small
                idx, r_c, A = idx[keep_idx], r_c[keep_idx], A[keep_idx]
                cur_loss = cur_loss[keep_idx]
                if not len(idx):
                    break

    chosen = np.zeros((K, N_CONTROLS))
    tr = np.zeros(K)
    cands = []
    for k in range(K):
        Uk = np.array(hist_u[k])
        Tk = np.array(hist_t[k])
        b = best_candidate(Tk, Uk, c)
        chosen[k], tr[k] = Uk[b], Tk[b]
        cands.append((Tk, Uk))
    return PlanResult(chosen, tr, tr + penalty(chosen, c), evals, cands)


def plan_impulse(model: ChemModel, x0, ystar, **kwargs) -> np.ndarray:
    """Single-case convenience wrapper around :func:`plan_impulses`."""
    return plan_impulses(model, np.asarray(x0, float)[None], [ystar], **kwargs).u[0]
