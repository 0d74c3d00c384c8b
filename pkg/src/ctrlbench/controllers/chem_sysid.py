"""System identification and impulse planning for the reaction-network track.

The fit works on the integral form of the dynamics.  Over a sampling interval
``[t_a, t_b]`` the state increment equals the integral of the monomial
library along the path (times the coefficients) plus ``(t_b - t_a) B u`` when
the interval lies inside the impulse window.  Integrals are first taken by
Simpson's rule on smoothing-spline estimates of the states; a sign-constrained
group lasso selects one support shared by all systems; after hard
thresholding the support is refit, and the coefficients are polished by
replacing the Simpson integrals with integrals along the fitted model's own
short-horizon paths until the fit is self-consistent.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear

from ..chem import (
    IMPULSE_WINDOW,
    N_CONTROLS,
    ChemModel,
    ObservedRun,
)
from ..kinetics import N_SPECIES, PolynomialField
from ..ode import solve_segment

log = logging.getLogger(__name__)


class FitError(ValueError):
    """The data cannot determine the requested model."""


_PJ, _PK = np.triu_indices(N_SPECIES)
N_FEATURES = N_SPECIES + len(_PJ)


def library(z: np.ndarray) -> np.ndarray:
    """Linear then quadratic (``j <= k``) monomials along the last axis."""
    return np.concatenate([z, z[..., _PJ] * z[..., _PK]], axis=-1)


def feature_names() -> list[str]:
    names = [f"Z{j + 1}" for j in range(N_SPECIES)]
    names += [f"Z{j + 1}*Z{k + 1}" for j, k in zip(_PJ, _PK)]
    return names


def _contains_species(row: int) -> np.ndarray:
    """Monomials that contain species ``row`` (the only ones it may be consumed by)."""
    out = np.zeros(N_FEATURES, dtype=bool)
    out[row] = True
    out[N_SPECIES:] = (_PJ == row) | (_PK == row)
    return out


def field_from_coefficients(theta: np.ndarray) -> PolynomialField:
    """``theta`` is ``(N_FEATURES, n)``: column ``l`` holds the coefficients of ``F_l``."""
    lin = theta[:N_SPECIES].T
    quad = theta[N_SPECIES:].T
    keep = np.any(quad != 0, axis=0)
    pairs = np.stack([_PJ[keep], _PK[keep]], axis=1)
    return PolynomialField(lin, pairs, quad[:, keep])


def coefficients_from_field(f: PolynomialField) -> np.ndarray:
    dense = f.dense_quadratic()
    return np.concatenate([f.linear.T, dense[:, _PJ, _PK].T], axis=0)


# ---------------------------------------------------------------------------
# fitted model


@dataclass(eq=False)
class FittedChemModel:
    """Per-system fields with one shared support and an estimated control matrix.

    ``theta[i]`` is ``(N_FEATURES, 15)``; ``support`` marks the monomials kept
    for each species (shared by all systems), ``signs`` the sign constraint
    each kept coefficient obeys.
    """

    theta: np.ndarray           # (S, N_FEATURES, 15)
    B: np.ndarray               # (15, 8)
    support: np.ndarray         # (N_FEATURES, 15) bool
    signs: np.ndarray           # (N_FEATURES, 15) in {-1, 0, 1}
    residual_rms: np.ndarray    # (S, 15)
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_systems(self) -> int:
        return self.theta.shape[0]

    @property
    def fields(self) -> list[PolynomialField]:
        return [field_from_coefficients(t) for t in self.theta]

    def model(self, i: int) -> ChemModel:
        """0-based system index."""
        return ChemModel(field_from_coefficients(self.theta[i]), self.B)

    def rates(self) -> np.ndarray:
        """Magnitudes of the nonzero coefficients per system, in support order."""
        return np.abs(self.theta[:, self.support])

    def to_json(self) -> dict:
        return {
            "kind": "chem-fit",
            "fields": [f.to_json() for f in self.fields],
            "B": self.B.tolist(),
            "support": np.argwhere(self.support).tolist(),
            "signs": [int(self.signs[a, b]) for a, b in np.argwhere(self.support)],
            "residual_rms": self.residual_rms.tolist(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_json(cls, data: dict | str) -> "FittedChemModel":
        if isinstance(data, str):
            data = json.loads(data)
        theta = np.stack([coefficients_from_field(PolynomialField.from_json(f)) for f in data["fields"]])
        support = np.zeros(theta.shape[1:], dtype=bool)
        signs = np.zeros(theta.shape[1:], dtype=int)
        for (a, b), s in zip(data.get("support", []), data.get("signs", [])):
            support[a, b] = True
            signs[a, b] = s
        return cls(
            theta=theta,
            B=np.asarray(data["B"], float),
            support=support,
            signs=signs,
            residual_rms=np.asarray(data.get("residual_rms", np.zeros(theta.shape[::2])), float),
            diagnostics=data.get("diagnostics", {}),
        )

    @classmethod
    def from_truth(cls, fields: list[PolynomialField], B: np.ndarray) -> "FittedChemModel":
        """Wrap known fields, for oracle planning."""
        theta = np.stack([coefficients_from_field(f) for f in fields])
        support = np.any(theta != 0, axis=0)
        signs = np.sign(theta[0]).astype(int)
        return cls(theta, np.asarray(B, float), support, signs, np.zeros((len(fields), N_SPECIES)))


# ---------------------------------------------------------------------------
# data preparation


class SplineSmoother:
    """Cubic smoothing spline on a fixed set of sample times.

    Uses the Reinsch form: the fitted values are ``(I + lam K)^-1 y`` with
    ``K = Q R^-1 Q'`` the roughness penalty of the natural cubic spline, so
    ``lam`` has the same meaning as in :func:`scipy.interpolate.make_smoothing_spline`.
    With the eigendecomposition of ``K`` in hand, generalized cross-validation
    over a log grid of penalties costs a few matrix products for any number
    of series at once.
    """

    def __init__(self, times):
        t = np.asarray(times, float)
        n = len(t)
        if n < 5:
            raise ValueError("a smoothing spline needs at least five samples")
        h = np.diff(t)
        Q = np.zeros((n, n - 2))
        R = np.zeros((n - 2, n - 2))
        for j in range(1, n - 1):
            Q[j - 1, j - 1] = 1 / h[j - 1]
            Q[j, j - 1] = -1 / h[j - 1] - 1 / h[j]
            Q[j + 1, j - 1] = 1 / h[j]
            R[j - 1, j - 1] = (h[j - 1] + h[j]) / 3
            if j < n - 2:
                R[j - 1, j] = R[j, j - 1] = h[j] / 6
        K = Q @ np.linalg.solve(R, Q.T)
        d, V = np.linalg.eigh((K + K.T) / 2)
        self.times = t
        self.eigvals = np.maximum(d, 0.0)
        self.basis = V

    def gcv_penalty(self, y, grid=np.logspace(-8, 8, 161)) -> np.ndarray:
        """GCV-optimal penalty for every column of ``y`` (shape ``(n, m)``)."""
        a = self.basis.T @ np.asarray(y, float).reshape(len(self.times), -1)
        n = len(self.times)
        shrink = 1.0 / (1.0 + grid[:, None] * self.eigvals[None, :])         # (G, n)
        rss = ((1.0 - shrink) ** 2) @ (a * a)                                 # (G, m)
        dof = shrink.sum(axis=1)                                              # (G,)
        score = n * rss / ((n - dof) ** 2)[:, None]
        return grid[np.argmin(score, axis=0)]

    def smooth(self, y, lam) -> np.ndarray:
        """Fitted values for each column of ``y`` with per-column penalties ``lam``."""
        y = np.asarray(y, float)
        a = self.basis.T @ y.reshape(len(self.times), -1)
        lam = np.broadcast_to(np.asarray(lam, float), a.shape[1:])
        a = a / (1.0 + self.eigvals[:, None] * lam[None, :])
        return (self.basis @ a).reshape(y.shape)


def _smooth(cache: dict, times: np.ndarray, x: np.ndarray, lam) -> np.ndarray:
    """Smoothing-spline estimate of every column of ``x``; GCV picks ``lam`` when it is None.

    Pieces shorter than five samples pass through unchanged.
    """
    if len(times) < 5:
        return x.copy()
    key = tuple(np.round(times, 12))
    if key not in cache:
        cache[key] = SplineSmoother(times)
    sm = cache[key]
    pen = sm.gcv_penalty(x) if lam is None else lam
    return sm.smooth(x, pen)


@dataclass
class _SystemData:
    """Integral equations of one system: ``dz = Phi theta + dt_u * (B u)``."""

    starts: np.ndarray   # (M, 15) state at the start of each interval
    t0: np.ndarray       # (M,) interval starts
    dt: np.ndarray       # (M,) interval lengths
    dz: np.ndarray       # (M, 15) increments
    phi: np.ndarray      # (M, N_FEATURES) integrated library
    uu: np.ndarray       # (M, 8) impulse times its active duration
    runs: list           # smoothed states per run, for validation


def _prepare(runs: list[ObservedRun], smoothing) -> dict[int, _SystemData]:
    a, b = IMPULSE_WINDOW
    cache: dict = {}
    by_sys: dict[int, list[ObservedRun]] = {}
    for r in runs:
        by_sys.setdefault(int(r.system), []).append(r)
    out = {}
    for sys_id, group in sorted(by_sys.items()):
        starts, t0s, dts, dzs, phis, uus, smoothed = [], [], [], [], [], [], []
        for r in sorted(group, key=lambda q: q.run):
            t = np.asarray(r.times, float)
            x = np.asarray(r.x, float)
            if np.any(np.diff(t) <= 0):
                raise FitError(f"system {sys_id} run {r.run}: sample times must increase")
            if smoothing is False:
                s = x.copy()
            else:
                lam = None if smoothing is True else smoothing
                inside = t <= b
                s = np.empty_like(x)
                s[inside] = _smooth(cache, t[inside], x[inside], lam)
                # the post-impulse piece restarts at the switch so the kink is not smoothed away
                post = t >= b
                s[post] = _smooth(cache, t[post], x[post], lam)
            smoothed.append(s)
            F = library(s)
            for k in range(len(t) - 2):
                lo, mid, hi = t[k], t[k + 1], t[k + 2]
                on_lo = lo >= a and hi <= b
                crosses = lo < b < hi or lo < a < hi
                if crosses or not np.isclose(mid - lo, hi - mid):
                    continue
                h = mid - lo
                starts.append(s[k])
                t0s.append(lo)
                dts.append(hi - lo)
                dzs.append(s[k + 2] - s[k])
                phis.append(h / 3 * (F[k] + 4 * F[k + 1] + F[k + 2]))
                uus.append((hi - lo) * np.asarray(r.u, float) if on_lo else np.zeros(N_CONTROLS))
        out[sys_id] = _SystemData(
            np.array(starts), np.array(t0s), np.array(dts), np.array(dzs), np.array(phis),
            np.array(uus), smoothed,
        )
    return out


# ---------------------------------------------------------------------------
# sparse regression


def _group_lasso_row(grams, cross, ucross, uu, lam, weights, lower, upper, bweights=None,
                     start=None, iters=3000, tol=1e-9):
    """Proximal gradient (FISTA) for one species row, on Gram matrices.

    Minimizes ``sum_i ||y_i - X_i beta_i - U_i gamma||^2 / (2N) + lam * sum_f w_f ||beta_{:, f}||``
    (plus ``lam * sum_c bweights_c |gamma_c|`` when ``bweights`` is given)
    subject to box (sign) constraints on ``beta``; ``gamma`` is shared by all
    systems.  Inputs are the normalized moments ``X_i'X_i / N`` (``grams``),
    ``X_i'y_i / N`` (``cross``), ``X_i'U_i / N`` (``ucross``) and
    ``sum_i U_i'U_i / N`` (``uu``) together with ``sum_i U_i'y_i / N`` in
    ``uu[1]``.  Returns ``(beta (S, F), gamma)``.
    """
    UtU, Uty = uu
    S, F = cross.shape
    L = max(np.linalg.eigvalsh(G)[-1] for G in grams) + np.linalg.eigvalsh(UtU)[-1]
    L = max(2 * L, 1e-12)
    if start is None:
        beta, gamma = np.zeros((S, F)), np.zeros(len(Uty))
    else:
        beta, gamma = np.clip(start[0], lower, upper), np.array(start[1], float)
    zb, zg = beta.copy(), gamma.copy()
    tk = 1.0
    thr = lam * weights / L
    for _ in range(iters):
        gb = (grams @ zb[:, :, None])[:, :, 0] + ucross @ zg - cross
        gg = np.tensordot(zb, ucross, axes=([0, 1], [0, 1])) + UtU @ zg - Uty
        vb = np.clip(zb - gb / L, lower, upper)
        norms = np.linalg.norm(vb, axis=0)
        shrink = np.where(norms > thr, 1 - thr / np.maximum(norms, 1e-300), 0.0)
        nb = vb * shrink
        ng = zg - gg / L
        if bweights is not None:
            ng = np.sign(ng) * np.maximum(np.abs(ng) - lam * bweights / L, 0.0)
        t_next = (1 + np.sqrt(1 + 4 * tk * tk)) / 2
        mom = (tk - 1) / t_next
        zb = nb + mom * (nb - beta)
        zg = ng + mom * (ng - gamma)
        scale = max(np.abs(nb).max(), np.abs(ng).max(), 1e-300)
        change = max(np.abs(nb - beta).max(), np.abs(ng - gamma).max()) / scale
        beta, gamma, tk = nb, ng, t_next
        if change < tol:
            break
    return beta, gamma


def _lstsq_row(blocks, ys, Us, supp, bsupp, sign):
    """Joint least squares for one row: per-system coefficients, shared ``B`` row.

    ``sign`` (per monomial, in ``{-1, 0, 1}``) bounds the coefficients of the
    kept monomials; a bounded solve is used only when the plain solution
    breaks a sign.
    """
    S = len(blocks)
    k = int(supp.sum())
    nb = int(bsupp.sum())
    rows = sum(len(y) for y in ys)
    A = np.zeros((rows, S * k + nb))
    rhs = np.concatenate(ys)
    off = 0
    for i in range(S):
        m = len(ys[i])
        A[off:off + m, i * k:(i + 1) * k] = blocks[i][:, supp]
        A[off:off + m, S * k:] = Us[i][:, bsupp]
        off += m
    scale = np.linalg.norm(A, axis=0)
    scale[scale == 0] = 1.0
    coef = np.linalg.lstsq(A / scale, rhs, rcond=None)[0]
    s = np.concatenate([np.tile(sign[supp], S), np.zeros(nb)])
    if np.any(coef * s < 0):
        lo = np.where(s > 0, 0.0, -np.inf)
        hi = np.where(s < 0, 0.0, np.inf)
        coef = lsq_linear(A / scale, rhs, bounds=(lo, hi), method="bvls", tol=1e-12).x
    coef = coef / scale
    theta = np.zeros((S, len(supp)))
    theta[:, supp] = coef[:S * k].reshape(S, k)
    b = np.zeros(len(bsupp))
    b[bsupp] = coef[S * k:]
    return theta, b


def _path_integrals(fields, B, data: dict[int, _SystemData], keys, fine: int = 8, tol: float = 1e-10):
    """Integrated library along each model's own path across every interval."""
    out = {}
    for key, f in zip(keys, fields):
        d = data[key]
        u_rate = np.where(d.uu.any(axis=1, keepdims=True), d.uu / d.dt[:, None], 0.0)
        drive = u_rate @ B.T
        phis = np.empty_like(d.phi)
        for span in np.unique(d.dt):
            sel = np.flatnonzero(d.dt == span)
            nodes = np.linspace(0.0, span, 2 * fine + 1)
            c = drive[sel]

            def rhs(_t, z, c=c):
                return f(z) + c

            samples, _ = solve_segment(rhs, 0.0, span, d.starts[sel], nodes, rtol=tol, atol=tol * 1e-2,
                                       mask_divergent=True, max_abs=1e6)
            lib = library(samples)
            h = span / (2 * fine)
            w = np.ones(2 * fine + 1)
            w[1:-1:2] = 4
            w[2:-1:2] = 2
            phis[sel] = h / 3 * np.tensordot(w, lib, axes=(0, 0))
        out[key] = np.nan_to_num(phis, nan=0.0, posinf=0.0, neginf=0.0)
    return out


def fit_chem_model(
    runs: list[ObservedRun],
    sparsity: float = 1e-3,
    *,
    threshold: float = 1e-4,
    smoothing: bool | float = True,
    mass_action_signs: bool = True,
    refine_iters: int = 10,
    refine_tol: float = 1e-9,
) -> FittedChemModel:
    """Identify per-system quadratic fields with a shared support and a shared ``B``.

    Args:
        runs: training runs of all systems (state observations on the grid).
        sparsity: group-lasso weight relative to the smallest weight that
            zeroes every coefficient.
        threshold: coefficients below this magnitude are set to zero.
        smoothing: ``True`` for smoothing splines with GCV-selected penalty, a
            float for a fixed penalty, ``False`` to use the observations as-is.
        mass_action_signs: allow a negative coefficient of a monomial in
            ``F_l`` only if the monomial contains ``Z_l``.
        refine_iters: maximum self-consistency passes after the support refit.

    Raises:
        FitError: when the data has fewer usable intervals than unknowns.
    """
    if not runs:
        raise FitError("no training runs given")
    data = _prepare(runs, smoothing)
    keys = list(data)
    S = len(keys)
    for key in keys:
        m = len(data[key].dz)
        if m < N_FEATURES:
            raise FitError(
                f"system {key}: {m} usable intervals for {N_FEATURES} candidate monomials; "
                f"supply more runs (at least {int(np.ceil(N_FEATURES / max(m / 20, 1)))} at this length)"
            )
    imp = sum(int(data[k].uu.any(axis=1).sum()) for k in keys)
    if imp < N_CONTROLS:
        raise FitError(f"only {imp} intervals inside the impulse window for {N_CONTROLS} controls; "
                       "supply more runs")

    # standardization per system
    xscale = [np.sqrt(np.mean(data[k].phi ** 2, axis=0)) for k in keys]
    xscale = [np.where(s > 0, s, 1.0) for s in xscale]
    uall = np.concatenate([data[k].uu for k in keys])
    uscale = np.sqrt(np.mean(uall ** 2, axis=0))
    uscale = np.where(uscale > 0, uscale, 1.0)
    Xs = [data[k].phi / s for k, s in zip(keys, xscale)]
    Us = [data[k].uu / uscale for k in keys]

    N = sum(len(X) for X in Xs)
    grams = np.stack([X.T @ X / N for X in Xs])
    ucross = np.stack([X.T @ U / N for X, U in zip(Xs, Us)])
    UtU = sum(U.T @ U for U in Us) / N

    theta = np.zeros((S, N_FEATURES, N_SPECIES))
    B = np.zeros((N_SPECIES, N_CONTROLS))
    signs = np.zeros((N_FEATURES, N_SPECIES), dtype=int)
    inf = np.full(N_FEATURES, np.inf)
    for row in range(N_SPECIES):
        ys = [data[k].dz[:, row] for k in keys]
        cross = np.stack([X.T @ y / N for X, y in zip(Xs, ys)])
        uu = (UtU, sum(U.T @ y for U, y in zip(Us, ys)) / N)
        lam_max = np.linalg.norm(cross, axis=0).max()
        if lam_max == 0:
            continue
        lam = sparsity * lam_max
        lower = -inf.copy()
        if mass_action_signs:
            lower[~_contains_species(row)] = 0.0
        # pass 1: signs left free (apart from mass action), plain group penalty
        beta1, gamma1 = _group_lasso_row(grams, cross, ucross, uu, lam, np.ones(N_FEATURES), lower, inf)
        s1 = np.sign(beta1.sum(axis=0)).astype(int)
        # pass 2: adaptive weights and one sign per monomial across systems
        gn = np.linalg.norm(beta1, axis=0)
        weights = np.where(gn > 0, gn.max() / np.maximum(gn, 1e-12 * gn.max()), 1e12)
        lo2 = np.where(s1 < 0, -np.inf, 0.0)
        hi2 = np.where(s1 > 0, np.inf, 0.0)
        gmax = max(np.abs(gamma1).max(), 1e-300)
        bweights = gmax / np.maximum(np.abs(gamma1), 1e-12 * gmax)
        beta2, gamma = _group_lasso_row(grams, cross, ucross, uu, lam, weights, lo2, hi2, bweights,
                                        start=(beta1, gamma1))
        for i, s in enumerate(xscale):
            theta[i, :, row] = beta2[i] / s
        B[row] = gamma / uscale
        signs[:, row] = s1

    # hard threshold; a monomial stays if any system needs it
    support = np.any(np.abs(theta) >= threshold, axis=0)
    bsupport = np.abs(B) >= threshold
    signs = np.where(support, signs, 0)

    def refit(phis):
        th = np.zeros_like(theta)
        Bn = np.zeros_like(B)
        for row in range(N_SPECIES):
            if not support[:, row].any() and not bsupport[row].any():
                continue
            t_row, b_row = _lstsq_row(
                [phis[k] for k in keys], [data[k].dz[:, row] for k in keys],
                [data[k].uu for k in keys], support[:, row], bsupport[row], signs[:, row],
            )
            th[:, :, row] = t_row
            Bn[row] = b_row
        return th, Bn

    theta, B = refit({k: data[k].phi for k in keys})
    history = []
    for _ in range(refine_iters):
        fields = [field_from_coefficients(theta[i]) for i in range(S)]
        phis = _path_integrals(fields, B, data, keys)
        new_theta, new_B = refit(phis)
        step = max(np.abs(new_theta - theta).max(), np.abs(new_B - B).max())
        theta, B = new_theta, new_B
        history.append(float(step))
        if step < refine_tol:
            break
    # coefficients the polished fit drives below the threshold leave the support
    shrunk = np.any(np.abs(theta) >= threshold, axis=0)
    bshrunk = np.abs(B) >= threshold
    if refine_iters and ((shrunk != support).any() or (bshrunk != bsupport).any()):
        support, bsupport = shrunk, bshrunk
        signs = np.where(support, signs, 0)
        theta, B = refit(phis)

    violated = (np.sign(theta) * signs[None] < 0) & support[None]
    if violated.any():
        log.warning("%d refit coefficients disagree with the inferred sign pattern", int(violated.sum()))

    resid = np.zeros((S, N_SPECIES))
    phis = _path_integrals([field_from_coefficients(theta[i]) for i in range(S)], B, data, keys)
    for i, k in enumerate(keys):
        pred = phis[k] @ theta[i] + data[k].uu @ B.T
        resid[i] = np.sqrt(np.mean((data[k].dz - pred) ** 2, axis=0))
    diag = {
        "systems": [int(k) for k in keys],
        "support_size": int(support.sum()),
        "control_support_size": int(bsupport.sum()),
        "refine_steps": history,
        "sign_violations": int(violated.sum()),
    }
    return FittedChemModel(theta, B, support, signs, resid, diag)
