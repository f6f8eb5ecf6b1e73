"""Curvature measurements under a norm geometry.

* ``directional_smoothness`` -- average curvature along a chord, defined so the
  quadratic expansion holds with equality (can be negative).
* ``sharpness_fw``           -- generalized sharpness max_{||d||<=1} d'Hd
  approximated by conditional-gradient ascent with random restarts and a final
  sphere projection.  Each restart is an independent deterministic stream, so
  the estimate does not depend on scheduling.
* ``sharpness_closed``       -- exact-form paths: l2 via shifted power
  iteration, preconditioned via the similarity transform, block-l12 via
  per-block power iteration (exact only for PSD Hessians).
* ``sharpness_bruteforce_linf`` -- exhaustive hypercube-vertex enumeration
  oracle for small dense Hessians.
* ``fw_gap``                 -- first-order stationarity certificate
  2(||Hu||_* - u'Hu) >= 0.
* ``projected_power_iteration`` -- u <- project(Hu); guarantee-free outside the
  Euclidean case, provided for comparison studies.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .norms import NormSpec
from .params import ParamVector, RngState, gaussian_like, inner

STATIONARY_CUTOFF = 1e-14


@dataclass(frozen=True)
class FwConfig:
    """Budget for the restarted conditional-gradient sharpness estimator."""

    iters: int = 50      # K inner iterations
    restarts: int = 5    # M random restarts
    seed: int = 0

    def __post_init__(self):
        if self.iters < 1 or self.restarts < 1:
            raise ValueError("iters and restarts must be >= 1")


@dataclass
class SharpnessEstimate:
    value: float
    direction: ParamVector
    fw_gap: float
    restarts_used: int
    per_restart: tuple[float, ...] = ()
    flag: str = "exact"
    wall_ms: float = 0.0


def directional_smoothness(obj, w: ParamVector, y: ParamVector, norm: NormSpec) -> float:
    """(L(y) - L(w) - <grad(w), y-w>) / (||y-w||^2 / 2); undefined at y == w."""
    delta = y.data - w.data
    if not delta.any():
        raise ValueError("directional smoothness undefined along a zero chord")
    dv = ParamVector(w.layout, delta)
    chord = norm.norm_value(dv)
    g = obj.grad(w)
    return (obj.loss(y) - obj.loss(w) - float(g.data @ delta)) / (0.5 * chord * chord)


def directional_curvature(obj, w: ParamVector, d: ParamVector) -> float:
    """Quadratic form d' H(w) d via one Hessian-vector product."""
    return inner(d, obj.hvp(w, d))


def fw_gap(u: ParamVector, hvp, norm: NormSpec) -> float:
    """Stationarity gap max_{||v||<=1} <v - u, 2Hu> = 2(||Hu||_* - u'Hu)."""
    nu = norm.norm_value(u)
    if nu > 1.0 + 1e-10:
        raise ValueError(f"fw_gap needs ||u|| <= 1, got {nu}")
    z = hvp(u)
    return 2.0 * (norm.dual_norm(z) - inner(u, z))


def _fw_single_restart(hvp, norm: NormSpec, iters: int, seed: int):
    """One conditional-gradient ascent run; returns (value, direction)."""
    rng = RngState(seed)
    layout = norm.layout
    u = None
    for _ in range(8):  # redraw on degenerate starts (zero draw or zero dual image)
        cand = gaussian_like(layout, rng)
        if not cand.data.any():
            continue
        cand = norm.project_sphere(cand)
        if hvp(cand).data.any():
            u = cand
            break
    if u is None:
        u = norm.project_sphere(gaussian_like(layout, rng))
    for k in range(iters):
        z = hvp(u)
        if not np.all(np.isfinite(z.data)) or not z.data.any():
            break  # stationary (or broken) point: keep current iterate
        v = norm.dual_vector(z)
        gamma = 2.0 / (2.0 + k)
        u = ParamVector(layout, (1.0 - gamma) * u.data + gamma * v.data)
        if not u.data.any():
            u = norm.project_sphere(gaussian_like(layout, rng))
    u = norm.project_sphere(u)
    value = inner(u, hvp(u))
    return value, u


def _fw_lockstep(hvp_multi, norm: NormSpec, cfg: FwConfig):
    """All restarts advanced together so one batched HVP serves every stream."""
    layout = norm.layout
    M = cfg.restarts
    U = np.empty((M, layout.total_dim))
    for m in range(M):
        rng = RngState(cfg.seed + m)
        u = None
        for _ in range(8):
            cand = gaussian_like(layout, rng)
            if cand.data.any():
                u = norm.project_sphere(cand)
                break
        U[m] = u.data
    # redraw rows whose dual image is zero at the start
    Z = hvp_multi(U)
    for m in range(M):
        if not Z[m].any():
            rng = RngState(cfg.seed + M + m)
            U[m] = norm.project_sphere(gaussian_like(layout, rng)).data
    frozen = np.zeros(M, dtype=bool)
    for k in range(cfg.iters):
        Z = hvp_multi(U)
        gamma = 2.0 / (2.0 + k)
        for m in range(M):
            if frozen[m]:
                continue
            z = Z[m]
            if not np.all(np.isfinite(z)) or not z.any():
                frozen[m] = True  # stationary or broken: keep the iterate
                continue
            v = norm.dual_vector(ParamVector(layout, z))
            U[m] = (1.0 - gamma) * U[m] + gamma * v.data
    dirs = [norm.project_sphere(ParamVector(layout, U[m])) for m in range(M)]
    P = np.stack([d.data for d in dirs])
    ZP = hvp_multi(P)
    values = tuple(float(P[m] @ ZP[m]) for m in range(M))
    return values, dirs


def sharpness_fw(hvp, norm: NormSpec, cfg: FwConfig = FwConfig(), threads: int = 1,
                 hvp_multi=None) -> SharpnessEstimate:
    """Generalized sharpness estimate: max over restarts of projected FW values.

    Restart m draws from its own stream (seed + m), so results do not depend on
    scheduling; ties keep the earliest restart's direction.  Passing a batched
    oracle (hvp_multi) advances all restarts in lockstep with one matmul-sized
    call per iteration, which is much faster on network objectives.
    """
    t0 = time.perf_counter()
    if hvp_multi is not None and cfg.restarts > 1:
        values, dirs = _fw_lockstep(hvp_multi, norm, cfg)
        best = int(np.argmax(values))
        direction = dirs[best]
    else:
        seeds = [cfg.seed + m for m in range(cfg.restarts)]

        def work(s):
            return _fw_single_restart(hvp, norm, cfg.iters, s)

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, seeds))
        else:
            results = [work(s) for s in seeds]
        values = tuple(r[0] for r in results)
        best = int(np.argmax(values))
        direction = results[best][1]
    gap = fw_gap(direction, hvp, norm)
    return SharpnessEstimate(
        value=values[best],
        direction=direction,
        fw_gap=gap,
        restarts_used=cfg.restarts,
        per_restart=values,
        flag="fw",
        wall_ms=(time.perf_counter() - t0) * 1e3,
    )


def _power_lambda_max(apply, dim: int, iters: int, tol: float, rng: RngState):
    """Largest algebraic eigenvalue of a symmetric operator given only matvecs.

    Phase 1 estimates the spectral radius; phase 2 runs power iteration on the
    shifted PSD operator A + cI so convergence targets lambda_max even for
    indefinite spectra.
    """
    v = rng.normal(dim)
    v /= np.linalg.norm(v)
    rho = 0.0
    for _ in range(50):
        z = apply(v)
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return 0.0, v
        rho = nz
        v = z / nz
    shift = 1.01 * rho + 1e-30
    v = rng.normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        z = apply(v) + shift * v
        nz = np.linalg.norm(z)
        if nz == 0.0:
            return -shift, v
        z /= nz
        new_lam = float(z @ apply(z))
        if abs(new_lam - lam) <= tol * max(1.0, abs(new_lam)):
            v = z
            lam = new_lam
            break
        v, lam = z, new_lam
    return lam, v


def sharpness_closed(norm: NormSpec, hvp=None, H=None, iters: int = 5000,
                     tol: float = 1e-10, seed: int = 0, psd_known: bool | None = None) -> SharpnessEstimate:
    """Closed-form sharpness for geometries that admit one.

    euclidean       -> lambda_max(H)
    preconditioned  -> lambda_max(P^{-1/2} H P^{-1/2})
    block_l12       -> max over blocks of per-block lambda_max; exact only when
                       H is PSD (otherwise the result is flagged, not a bound).
    Pass a dense H or an hvp callable.
    """
    t0 = time.perf_counter()
    layout = norm.layout
    dim = layout.total_dim
    if H is not None:
        Hd = np.asarray(H, dtype=np.float64)
        apply = lambda x: Hd @ x
    elif hvp is not None:
        apply = lambda x: hvp(ParamVector(layout, x)).data
    else:
        raise ValueError("provide H= or hvp=")
    rng = RngState(seed)

    variant = norm.variant
    if variant == "euclidean":
        if H is not None:
            evals, evecs = np.linalg.eigh(Hd)
            lam, v = float(evals[-1]), evecs[:, -1]
        else:
            lam, v = _power_lambda_max(apply, dim, iters, tol, rng)
        d = ParamVector(layout, v / np.linalg.norm(v))
        flag = "exact"
    elif variant == "preconditioned":
        if norm.diag is not None:
            inv_sqrt = 1.0 / np.sqrt(norm.diag)
            sim = lambda x: inv_sqrt * apply(inv_sqrt * x)
            back = lambda v: inv_sqrt * v
        else:
            from scipy.linalg import solve_triangular

            L = norm._L
            sim = lambda x: solve_triangular(L, apply(solve_triangular(L, x, lower=True, trans="T")), lower=True)
            back = lambda v: solve_triangular(L, v, lower=True, trans="T")
        if H is not None:
            M = np.column_stack([sim(e) for e in np.eye(dim)])
            M = 0.5 * (M + M.T)
            evals, evecs = np.linalg.eigh(M)
            lam, v = float(evals[-1]), evecs[:, -1]
        else:
            lam, v = _power_lambda_max(sim, dim, iters, tol, rng)
        raw = back(v)
        d = ParamVector(layout, raw / norm.norm_value(ParamVector(layout, raw)))
        flag = "exact"
    elif variant == "block_l12":
        best_lam, best_idx, best_vec = -np.inf, 0, None
        for i in range(len(layout.blocks)):
            sl = layout.slice_of(i)
            bdim = sl.stop - sl.start

            def block_apply(x, sl=sl):
                full = np.zeros(dim)
                full[sl] = x
                return apply(full)[sl]

            lam_b, v_b = _power_lambda_max(block_apply, bdim, iters, tol, rng)
            if lam_b > best_lam:
                best_lam, best_idx, best_vec = lam_b, i, v_b
        data = np.zeros(dim)
        data[layout.slice_of(best_idx)] = best_vec / np.linalg.norm(best_vec)
        lam, d = best_lam, ParamVector(layout, data)
        if psd_known is None and H is not None:
            psd_known = bool(np.linalg.eigvalsh(Hd).min() >= -1e-10)
        flag = "exact_psd" if psd_known else "psd_only_formula_not_a_bound"
    else:
        raise ValueError(f"no closed form for variant {norm.variant!r}")

    value = inner(d, ParamVector(layout, apply(d.data)))
    gap = fw_gap(d, lambda u: ParamVector(layout, apply(u.data)), norm)
    return SharpnessEstimate(value=value, direction=d, fw_gap=gap, restarts_used=0,
                             per_restart=(value,), flag=flag,
                             wall_ms=(time.perf_counter() - t0) * 1e3)


def sharpness_bruteforce_linf(H, max_dim: int = 22):
    """Exact max of d'Hd over sign vectors d in {-1,+1}^n (half cube by symmetry).

    Returns (value, argmax sign vector).  This is the vertex optimum; for PSD H
    it equals the max over the whole infinity-norm ball.
    """
    H = np.asarray(H, dtype=np.float64)
    n = H.shape[0]
    if n > max_dim:
        raise ValueError(f"enumeration limited to dimension {max_dim}, got {n}")
    m = n - 1  # fix last coordinate to +1
    best_val, best_sign = -np.inf, None
    chunk = 1 << 14
    codes = np.arange(1 << m, dtype=np.int64)
    for start in range(0, len(codes), chunk):
        block = codes[start:start + chunk]
        signs = np.ones((len(block), n))
        for j in range(m):
            signs[:, j] = np.where((block >> j) & 1, 1.0, -1.0)
        vals = np.einsum("ij,jk,ik->i", signs, H, signs)
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val, best_sign = float(vals[k]), signs[k].copy()
    return best_val, best_sign


def projected_power_iteration(hvp, norm: NormSpec, iters: int = 100, seed: int = 0) -> SharpnessEstimate:
    """u <- project_sphere(Hu), tracking the best quadratic form seen.

    Classical power method under the Euclidean norm; for other geometries the
    iteration can stall or cycle, so only the best visited value is returned.
    """
    t0 = time.perf_counter()
    rng = RngState(seed)
    layout = norm.layout
    u = norm.project_sphere(gaussian_like(layout, rng))
    best_val, best_u = -np.inf, u
    restarts = 1
    for _ in range(iters):
        z = hvp(u)
        val = inner(u, z)
        if val > best_val:
            best_val, best_u = val, u
        if not z.data.any():
            u = norm.project_sphere(gaussian_like(layout, rng))  # restart on Hu = 0
            restarts += 1
            continue
        u = norm.project_sphere(z)
    gap = fw_gap(best_u, hvp, norm)
    return SharpnessEstimate(value=best_val, direction=best_u, fw_gap=gap,
                             restarts_used=restarts, per_restart=(best_val,),
                             flag="projected_power", wall_ms=(time.perf_counter() - t0) * 1e3)
