"""Classical voxel-wise inversion of T1/T2/PD from weighted signal stacks.

The signal models are linear in PD, so for any (T1, T2) the optimal PD has
a closed form; a log-spaced (T1, T2) grid seeded with closed-form PD picks
the best starting cell, and Levenberg-Marquardt with analytic Jacobians
refines it under box constraints.  FLAIR magnitude derivatives are oriented
by the sign of the pre-magnitude signal.  fit_voxel is pure; fit_map fans
out over voxels with results written to disjoint slots, so thread count
cannot change the output.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .physics import (ParametricMaps, ScanParams, Sequence,
                      flair_recovery_signed)

_FLAIR_NULL_EPS = 1e-6


class IllPosedFitError(ValueError):
    """The observation set cannot identify (PD, T1, T2)."""


@dataclass(frozen=True)
class FitOptions:
    t1_bounds_ms: tuple = (100.0, 6000.0)
    t2_bounds_ms: tuple = (10.0, 3000.0)
    n_t1_grid: int = 24
    n_t2_grid: int = 24
    max_iterations: int = 100
    residual_tol: float = 0.0
    step_tol: float = 1e-10
    damping_init: float = 1e-3
    damping_grow: float = 10.0
    damping_shrink: float = 0.5

    def __post_init__(self):
        for name, (lo, hi) in (("t1", self.t1_bounds_ms), ("t2", self.t2_bounds_ms)):
            if not (0 < lo < hi):
                raise ValueError(f"{name} bounds must be positive and ordered, got ({lo}, {hi})")
        if self.n_t1_grid < 2 or self.n_t2_grid < 2:
            raise ValueError("grid sizes must be >= 2")


@dataclass
class FitResult:
    t1_ms: float
    t2_ms: float
    pd: float
    residual: float
    iterations: int
    converged: bool


def _basis(params: ScanParams, t1, t2):
    """Model signal at PD=1 (FLAIR as magnitude)."""
    t1 = np.asarray(t1, dtype=np.float64)
    t2 = np.asarray(t2, dtype=np.float64)
    ee = np.exp(-params.te_ms / t2)
    if params.sequence is Sequence.FLAIR:
        return np.abs(flair_recovery_signed(t1, params.tr_ms, params.ti_ms)) * ee
    return (1.0 - np.exp(-params.tr_ms / t1)) * ee


def pd_closed_form(signals, basis):
    """Least-squares PD for fixed (T1, T2): sum(y*f) / sum(f^2)."""
    y = np.asarray(signals, dtype=np.float64)
    f = np.asarray(basis, dtype=np.float64)
    denom = float(np.dot(f, f))
    if denom <= 0.0 or not np.isfinite(denom):
        raise ValueError("degenerate basis: all model signals are zero")
    return float(np.dot(y, f) / denom)


def model_and_jacobian(t1, t2, pd, protocols):
    """Signals and d(signal)/d(pd, t1, t2) for every protocol.

    TSE:    S = pd*(1-exp(-TR/T1))*exp(-TE/T2)
    FLAIR:  S = |g|*exp(-TE/T2)*pd with g the signed recovery term; the
            magnitude's derivative carries sign(g).
    """
    n = len(protocols)
    s = np.empty(n)
    jac = np.empty((n, 3))
    for i, p in enumerate(protocols):
        ee = np.exp(-p.te_ms / t2)
        if p.sequence is Sequence.FLAIR:
            g = float(flair_recovery_signed(t1, p.tr_ms, p.ti_ms))
            sign = 1.0 if g >= 0 else -1.0
            base = abs(g) * ee
            # dg/dT1 = (-2*TI*exp(-TI/T1) + TR*exp(-TR/T1)) / T1^2... sign carried
            dg_dt1 = (-2.0 * p.ti_ms * np.exp(-p.ti_ms / t1)
                      + p.tr_ms * np.exp(-p.tr_ms / t1)) / (t1 * t1)
            ds_dt1 = pd * ee * sign * dg_dt1
        else:
            er = np.exp(-p.tr_ms / t1)
            base = (1.0 - er) * ee
            ds_dt1 = -pd * ee * er * p.tr_ms / (t1 * t1)
        s[i] = pd * base
        jac[i, 0] = base                                  # dS/dPD
        jac[i, 1] = ds_dt1                                # dS/dT1
        jac[i, 2] = pd * base * p.te_ms / (t2 * t2)       # dS/dT2
    return s, jac


def jacobian_check(t1, t2, pd, protocol: ScanParams, eps_rel=1e-4):
    """Central finite differences vs the analytic Jacobian for one protocol;
    returns the max relative error over the three derivatives.

    The default step is at the large end of the usable range: the T1 term of
    a long-TR signal is tiny against the total intensity, and a smaller step
    loses it to cancellation before truncation error matters."""
    worst = 0.0
    _, jac = model_and_jacobian(t1, t2, pd, [protocol])
    theta = [pd, t1, t2]
    for k in range(3):
        h = eps_rel * max(abs(theta[k]), 1.0)
        plus = theta.copy()
        minus = theta.copy()
        plus[k] += h
        minus[k] -= h
        sp, _ = model_and_jacobian(plus[1], plus[2], plus[0], [protocol])
        sm, _ = model_and_jacobian(minus[1], minus[2], minus[0], [protocol])
        fd = (sp[0] - sm[0]) / (2.0 * h)
        a = jac[0, k]
        worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
    return worst


def _grid_axes(opts: FitOptions):
    t1_axis = np.geomspace(*opts.t1_bounds_ms, opts.n_t1_grid)
    t2_axis = np.geomspace(*opts.t2_bounds_ms, opts.n_t2_grid)
    return t1_axis, t2_axis


def _grid_basis(protocols, opts: FitOptions):
    """Basis matrix (n_cells, n_obs) for the whole seeding grid; shared
    across voxels of a map fit."""
    t1_axis, t2_axis = _grid_axes(opts)
    t1g, t2g = np.meshgrid(t1_axis, t2_axis, indexing="ij")
    t1f, t2f = t1g.ravel(), t2g.ravel()
    cols = [_basis(p, t1f, t2f) for p in protocols]
    return np.stack(cols, axis=1), t1f, t2f


def _validate_protocols(signals, protocols, opts: FitOptions):
    if len(signals) != len(protocols):
        raise ValueError(f"{len(signals)} signals vs {len(protocols)} protocols")
    if len(signals) < 3:
        raise IllPosedFitError("need at least 3 observations to fit (PD, T1, T2)")
    distinct = {(p.sequence, p.tr_ms, p.te_ms, p.ti_ms) for p in protocols}
    if len(distinct) < 3:
        raise IllPosedFitError(
            f"only {len(distinct)} distinct protocols; the fit is ill-posed")
    tes = {p.te_ms for p in protocols}
    if len(tes) < 2:
        raise IllPosedFitError("need at least 2 distinct echo times for T2")
    t1_sensitive = any(
        p.sequence is Sequence.FLAIR or p.tr_ms <= 0.5 * opts.t1_bounds_ms[1]
        for p in protocols)
    if not t1_sensitive:
        raise IllPosedFitError(
            "no T1-sensitive observation (short-TR TSE or FLAIR) in the protocol set")


def fit_voxel(signals, protocols, opts: FitOptions | None = None,
              _grid=None) -> FitResult:
    """Recover (T1, T2, PD) for one voxel from >= 3 weighted observations."""
    opts = opts or FitOptions()
    y = np.asarray(signals, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite signal value in fit input")
    _validate_protocols(y, protocols, opts)
    if np.all(y == 0.0):
        return FitResult(t1_ms=opts.t1_bounds_ms[0], t2_ms=opts.t2_bounds_ms[0],
                         pd=0.0, residual=0.0, iterations=0, converged=False)

    if _grid is None:
        _grid = _grid_basis(protocols, opts)
    fmat, t1f, t2f = _grid

    # closed-form PD per grid cell, then rank cells by residual
    denom = np.einsum("ij,ij->i", fmat, fmat)
    numer = fmat @ y
    pd_cells = np.where(denom > 0, numer / np.maximum(denom, 1e-300), 0.0)
    resid2 = np.einsum("ij->i", (pd_cells[:, None] * fmat - y) ** 2)
    order = np.argsort(resid2, kind="stable")

    # several seeds from well-separated (T1, T2) basins: the magnitude FLAIR
    # folds the sign, so the least-squares landscape is multi-modal and the
    # best cell alone is not always in the right basin
    seeds = []
    for idx in order:
        t1c, t2c = float(t1f[idx]), float(t2f[idx])
        too_close = any(
            max(t1c / s.t1, s.t1 / t1c) < 1.3 and max(t2c / s.t2, s.t2 / t2c) < 1.3
            for s in seeds)
        if too_close:
            continue
        seeds.append(_Seed(t1=t1c, t2=t2c, pd=float(pd_cells[idx]),
                           resid=float(np.sqrt(resid2[idx]))))
        if len(seeds) == 8:
            break

    # near the FLAIR signal null the magnitude kink makes derivatives
    # unusable; keep the grid estimate for such voxels
    lead = seeds[0]
    for p in protocols:
        if p.sequence is Sequence.FLAIR:
            if abs(float(flair_recovery_signed(lead.t1, p.tr_ms, p.ti_ms))) < _FLAIR_NULL_EPS:
                return FitResult(t1_ms=lead.t1, t2_ms=lead.t2, pd=lead.pd,
                                 residual=lead.resid, iterations=0, converged=False)

    yscale = float(np.linalg.norm(y))
    best_res = None
    for seed in seeds:
        refined = _local_refine(y, protocols, seed, opts)
        res = _levenberg_marquardt(y, protocols, refined, opts)
        if best_res is None or res.residual < best_res.residual:
            best_res = res
        if best_res.residual <= 1e-10 * yscale:
            return best_res

    # escalation for stubborn multi-modal cases: re-seed from a much finer
    # full grid; rare for exact data, bounded extra cost for noisy data
    fine = FitOptions(t1_bounds_ms=opts.t1_bounds_ms, t2_bounds_ms=opts.t2_bounds_ms,
                      n_t1_grid=72, n_t2_grid=56, max_iterations=opts.max_iterations,
                      residual_tol=opts.residual_tol, step_tol=opts.step_tol,
                      damping_init=opts.damping_init, damping_grow=opts.damping_grow,
                      damping_shrink=opts.damping_shrink)
    fmat_f, t1f_f, t2f_f = _grid_basis(protocols, fine)
    denom_f = np.einsum("ij,ij->i", fmat_f, fmat_f)
    pd_f = np.where(denom_f > 0, (fmat_f @ y) / np.maximum(denom_f, 1e-300), 0.0)
    resid2_f = np.einsum("ij->i", (pd_f[:, None] * fmat_f - y) ** 2)
    order_f = np.argsort(resid2_f, kind="stable")
    fine_seeds = []
    for idx in order_f:
        t1c, t2c = float(t1f_f[idx]), float(t2f_f[idx])
        if any(max(t1c / s.t1, s.t1 / t1c) < 1.2 and max(t2c / s.t2, s.t2 / t2c) < 1.2
               for s in fine_seeds):
            continue
        fine_seeds.append(_Seed(t1=t1c, t2=t2c, pd=float(pd_f[idx]),
                                resid=float(np.sqrt(resid2_f[idx]))))
        if len(fine_seeds) == 8:
            break
    for seed in fine_seeds:
        refined = _local_refine(y, protocols, seed, fine)
        res = _levenberg_marquardt(y, protocols, refined, fine)
        if res.residual < best_res.residual:
            best_res = res
        if best_res.residual <= 1e-10 * yscale:
            break
    return best_res


@dataclass(frozen=True)
class _Seed:
    t1: float
    t2: float
    pd: float
    resid: float


def _local_refine(y, protocols, seed: _Seed, opts: FitOptions,
                  stages: int = 2, points: int = 9) -> _Seed:
    """Zoom the closed-form-PD grid search into the seed's neighbourhood.

    The least-squares landscape of stacked exponentials has local minima only
    a few percent apart, closer than the coarse grid spacing; two log-space
    refinement stages (one coarse cell wide, then one fine cell wide) resolve
    the basins so Levenberg-Marquardt starts inside the right one.
    """
    t1, t2, pd, resid = seed.t1, seed.t2, seed.pd, seed.resid
    t1_lo, t1_hi = opts.t1_bounds_ms
    t2_lo, t2_hi = opts.t2_bounds_ms
    # window of +-1.5 coarse cells catches basins straddling cell boundaries
    half1 = (t1_hi / t1_lo) ** (1.5 / (opts.n_t1_grid - 1))
    half2 = (t2_hi / t2_lo) ** (1.5 / (opts.n_t2_grid - 1))
    for _ in range(stages):
        t1_axis = np.geomspace(max(t1 / half1, t1_lo), min(t1 * half1, t1_hi), points)
        t2_axis = np.geomspace(max(t2 / half2, t2_lo), min(t2 * half2, t2_hi), points)
        t1g, t2g = np.meshgrid(t1_axis, t2_axis, indexing="ij")
        t1f, t2f = t1g.ravel(), t2g.ravel()
        fmat = np.stack([_basis(p, t1f, t2f) for p in protocols], axis=1)
        denom = np.einsum("ij,ij->i", fmat, fmat)
        pd_cells = np.where(denom > 0, (fmat @ y) / np.maximum(denom, 1e-300), 0.0)
        resid2 = np.einsum("ij->i", (pd_cells[:, None] * fmat - y) ** 2)
        best = int(np.argmin(resid2))
        t1, t2, pd = float(t1f[best]), float(t2f[best]), float(pd_cells[best])
        resid = float(np.sqrt(resid2[best]))
        half1 = (t1_axis[-1] / t1_axis[0]) ** (1.0 / (points - 1))
        half2 = (t2_axis[-1] / t2_axis[0]) ** (1.0 / (points - 1))
    return _Seed(t1=t1, t2=t2, pd=pd, resid=resid)


def _levenberg_marquardt(y, protocols, seed: _Seed, opts: FitOptions) -> FitResult:
    t1_lo, t1_hi = opts.t1_bounds_ms
    t2_lo, t2_hi = opts.t2_bounds_ms
    t1, t2, pd = seed.t1, seed.t2, max(seed.pd, 0.0)

    s, jac = model_and_jacobian(t1, t2, pd, protocols)
    r = s - y
    cost = float(r @ r)
    lam = opts.damping_init
    iterations = 0
    converged = False
    for _ in range(opts.max_iterations):
        iterations += 1
        jtj = jac.T @ jac
        jtr = jac.T @ r
        diag = np.maximum(np.diag(jtj), 1e-12)
        try:
            delta = np.linalg.solve(jtj + lam * np.diag(diag), -jtr)
        except np.linalg.LinAlgError:
            lam *= opts.damping_grow
            continue
        cand = np.array([pd, t1, t2]) + delta
        cand[0] = max(cand[0], 0.0)
        cand[1] = min(max(cand[1], t1_lo), t1_hi)
        cand[2] = min(max(cand[2], t2_lo), t2_hi)
        s_new, jac_new = model_and_jacobian(cand[1], cand[2], cand[0], protocols)
        r_new = s_new - y
        cost_new = float(r_new @ r_new)
        if cost_new <= cost:
            step = np.linalg.norm(cand - np.array([pd, t1, t2]))
            scale = np.linalg.norm([pd, t1, t2]) + 1e-30
            pd, t1, t2 = float(cand[0]), float(cand[1]), float(cand[2])
            r, jac, cost = r_new, jac_new, cost_new
            lam *= opts.damping_shrink
            # a tiny step only means convergence once the damping is back at
            # Gauss-Newton scale; heavily damped micro-steps are not done yet
            if (step / scale < opts.step_tol and lam <= 1.0) \
                    or np.sqrt(cost) <= opts.residual_tol or cost == 0.0:
                converged = True
                break
        else:
            lam *= opts.damping_grow
            if lam > 1e14:
                break
    return FitResult(t1_ms=t1, t2_ms=t2, pd=pd, residual=float(np.sqrt(cost)),
                     iterations=iterations, converged=converged)


def fit_map(images, opts: FitOptions | None = None, threads: int = 1):
    """Per-voxel fit over a stack of aligned weighted images.

    ``images`` is a list of WeightedImage sharing one shape; voxels outside
    the implied mask (all-zero signal vectors) are left at zero.  Returns
    (ParametricMaps, stats dict).  Deterministic for any thread count.
    """
    opts = opts or FitOptions()
    if not images:
        raise ValueError("no images to fit")
    shape = images[0].data.shape
    for img in images[1:]:
        if img.data.shape != shape:
            raise ValueError(f"image shapes differ: {img.data.shape} vs {shape}")
    protocols = [img.params for img in images]
    stack = np.stack([img.data for img in images], axis=-1)
    mask = np.any(stack != 0.0, axis=-1)

    grid = _grid_basis(protocols, opts)
    t1 = np.zeros(shape)
    t2 = np.zeros(shape)
    pd = np.zeros(shape)
    n_conv = 0
    residuals = []

    coords = np.argwhere(mask)

    def run(chunk):
        out = []
        for (i, j) in chunk:
            res = fit_voxel(stack[i, j], protocols, opts, _grid=grid)
            out.append((i, j, res))
        return out

    if threads <= 1:
        results = run(coords)
    else:
        chunks = np.array_split(coords, threads * 4)
        results = []
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for part in pool.map(run, [c for c in chunks if len(c)]):
                results.extend(part)

    for (i, j, res) in results:
        t1[i, j] = res.t1_ms
        t2[i, j] = res.t2_ms
        pd[i, j] = res.pd
        n_conv += int(res.converged)
        residuals.append(res.residual)

    stats = {
        "n_voxels": int(mask.sum()),
        "n_converged": int(n_conv),
        "convergence_rate": float(n_conv / max(mask.sum(), 1)),
        "residual_median": float(np.median(residuals)) if residuals else 0.0,
        "residual_max": float(np.max(residuals)) if residuals else 0.0,
    }
    maps = ParametricMaps(t1=t1, t2=t2, pd=pd, mask=mask)
    return maps, stats
