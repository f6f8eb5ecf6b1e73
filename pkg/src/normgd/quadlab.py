"""Quadratic-objective laboratory: oracle constants, invariant directions,
stability classification, threshold bisection, and Taylor-switch curves.

On L(w) = 1/2 w'Hw with H positive definite, steepest descent under any norm
converges linearly for eta < 2/S and admits the closed trajectory
w_t = (1 - eta S)^t w_0 from initializations along the sharpness maximizer.
This module computes the constants (S, mu, dhat) with the best oracle each
geometry admits and simulates the dynamics to verify those facts numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .norms import NormSpec
from .objectives import make_taylor
from .params import ParamVector, RngState
from .spectra import FwConfig, sharpness_bruteforce_linf, sharpness_fw

CONVERGED_RTOL = 1e-16
DIVERGED_RTOL = 1e12


def random_pd_matrix(d: int, cond: float, seed: int, scale: float = 1.0) -> np.ndarray:
    """Random symmetric PD matrix with condition number <= cond (log-uniform spectrum)."""
    rng = RngState(seed)
    lam = np.exp(rng.uniform(d) * math.log(cond))
    lam.sort()
    A = rng.normal(d * d).reshape(d, d)
    Q, R = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(R))  # deterministic orientation
    H = (Q * (scale * lam)) @ Q.T
    return 0.5 * (H + H.T)


@dataclass
class QuadCase:
    H: np.ndarray
    norm: NormSpec
    S: float
    mu: float
    dhat: ParamVector
    s_provenance: str = "exact"
    mu_provenance: str = "exact"


# ---------------------------------------------------------------------------
# oracle constants per geometry
# ---------------------------------------------------------------------------

def _mu_linf(H: np.ndarray) -> float:
    """inf of v'Hv over the infinity-norm sphere: per-face box-constrained QPs."""
    d = H.shape[0]
    best = math.inf
    for i in range(d):  # by symmetry v -> -v, fixing coordinate i to +1 suffices
        free = [j for j in range(d) if j != i]

        def fun(x, i=i, free=free):
            v = np.empty(d)
            v[i] = 1.0
            v[free] = x
            Hv = H @ v
            return float(v @ Hv), 2.0 * Hv[free]

        x0 = np.zeros(d - 1)
        res = minimize(fun, x0, jac=True, method="L-BFGS-B",
                       bounds=[(-1.0, 1.0)] * (d - 1),
                       options={"ftol": 1e-16, "gtol": 1e-12, "maxiter": 500})
        best = min(best, float(res.fun))
    return best


def _mu_generic(H: np.ndarray, norm: NormSpec, restarts: int = 20, seed: int = 0) -> float:
    """Multi-start minimization of the ratio v'Hv / ||v||^2 (approximate)."""
    d = H.shape[0]
    rng = RngState(seed)
    layout = norm.layout
    best = math.inf

    def ratio(x):
        v = ParamVector(layout, x)
        n = norm.norm_value(v)
        if n == 0.0:
            return math.inf
        return float(x @ (H @ x)) / (n * n)

    for _ in range(restarts):
        x0 = rng.normal(d)
        res = minimize(ratio, x0, method="Nelder-Mead",
                       options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 4000})
        best = min(best, float(res.fun))
    return best


def _orthogonal_family(theta: np.ndarray, reflect: bool) -> np.ndarray:
    """Stack of 2x2 rotations (or reflections) for a vector of angles."""
    c, s = np.cos(theta), np.sin(theta)
    out = np.empty((theta.size, 2, 2))
    out[:, 0, 0] = c
    out[:, 0, 1] = -s if not reflect else s
    out[:, 1, 0] = s
    out[:, 1, 1] = c if not reflect else -c
    return out


def _spectral_grid_oracle(H: np.ndarray, norm: NormSpec, grid: int = 96):
    """Global max of d'Hd over the spectral unit ball for <=2 square blocks of
    size <=2, by dense search over per-block orthogonal families plus polish.

    The maximum of a convex quadratic over this ball is attained at an extreme
    point, where every block is a multiple of an orthogonal matrix; for 2x2
    blocks the search space is a torus of rotation/reflection angles (plus a
    radius split for the sum geometry).
    """
    layout = norm.layout
    shapes = [shape for _, shape in layout.blocks]
    if len(shapes) > 2 or any(len(s) != 2 or s[0] != s[1] or s[0] > 2 for s in shapes):
        return None
    sum_mode = norm.variant == "spectral_sum" and len(shapes) == 2
    import itertools

    sheet_choices = []
    for s in shapes:
        sheet_choices.append([1.0, -1.0] if s[0] == 1 else ["rot", "ref"])

    def build(sheets, params):
        """params: one angle per 2x2 block, then the radius-split angle if used."""
        idx = 0
        if sum_mode:
            alpha = params[-1]
            radii = [math.cos(alpha), math.sin(alpha)]
        else:
            radii = [1.0] * len(shapes)
        parts = []
        for sheet, s, r in zip(sheets, shapes, radii):
            if s[0] == 1:
                parts.append(np.array([sheet * r]))
            else:
                Q = _orthogonal_family(np.array([params[idx]]), sheet == "ref")[0]
                idx += 1
                parts.append((r * Q).reshape(-1))
        return np.concatenate(parts)

    def vec_grid(sheets):
        """Vectorized grid of candidate directions for one sheet assignment."""
        n_theta = sum(1 for s in shapes if s[0] == 2)
        axes = [np.linspace(0.0, 2.0 * np.pi, grid, endpoint=False)] * n_theta
        if sum_mode:
            axes.append(np.linspace(0.0, 0.5 * np.pi, grid // 2 + 1))
        if not axes:
            return np.zeros((1, 0)), build(sheets, np.zeros(0))[None, :]
        mesh = np.meshgrid(*axes, indexing="ij")
        flat = [m.reshape(-1) for m in mesh]
        N = flat[0].size
        if sum_mode:
            radii = [np.cos(flat[-1]), np.sin(flat[-1])]
        else:
            radii = [np.ones(N)] * len(shapes)
        cols, ti = [], 0
        for sheet, s, r in zip(sheets, shapes, radii):
            if s[0] == 1:
                cols.append((sheet * r)[:, None])
            else:
                Q = _orthogonal_family(flat[ti], sheet == "ref")
                ti += 1
                cols.append(Q.reshape(N, 4) * r[:, None])
        return np.stack(flat, axis=1), np.concatenate(cols, axis=1)

    coarse = []
    for sheets in itertools.product(*sheet_choices):
        params, vecs = vec_grid(sheets)
        vals = np.einsum("ni,ij,nj->n", vecs, H, vecs)
        k = int(np.argmax(vals))
        coarse.append((float(vals[k]), sheets, params[k]))
    coarse.sort(key=lambda c: -c[0])

    best_val, best_sheets, best_x = coarse[0]
    for val, sheets, x in coarse[:2]:  # polish the two leading sheets
        if x.shape[0] > 0:
            res = minimize(lambda p: -float(build(sheets, p) @ (H @ build(sheets, p))),
                           x, method="Nelder-Mead",
                           options={"xatol": 1e-11, "fatol": 1e-13, "maxiter": 2000})
            val = max(val, -float(res.fun))
            x = res.x if -res.fun >= val else x
        if val > best_val:
            best_val, best_sheets, best_x = val, sheets, x
    return best_val, build(best_sheets, best_x)


def oracle_constants(H: np.ndarray, norm: NormSpec, seed: int = 0,
                     compute_mu: bool = True) -> QuadCase:
    """Best available (S, mu, dhat) for the geometry; provenance flags attached.

    mu is exact for euclidean/preconditioned, a per-face QP for linf, and a
    flagged multi-start estimate elsewhere; pass compute_mu=False to skip the
    (comparatively slow) estimate when only S and dhat are needed.
    """
    H = 0.5 * (np.asarray(H, dtype=np.float64) + np.asarray(H, dtype=np.float64).T)
    layout = norm.layout
    d = layout.total_dim
    variant = norm.variant
    mu_prov = "approximate"

    if variant == "euclidean":
        evals, evecs = np.linalg.eigh(H)
        S, mu = float(evals[-1]), float(evals[0])
        dhat = ParamVector(layout, evecs[:, -1])
        return QuadCase(H, norm, S, mu, dhat, "exact", "exact")

    if variant == "preconditioned":
        if norm.diag is not None:
            inv_sqrt = np.diag(1.0 / np.sqrt(norm.diag))
        else:
            inv_sqrt = np.linalg.inv(np.linalg.cholesky(norm.dense)).T
            # P = LL' -> P^(-1/2)-like factor: use L^-T; similarity has the same spectrum
        M = inv_sqrt.T @ H @ inv_sqrt if norm.diag is None else inv_sqrt @ H @ inv_sqrt
        M = 0.5 * (M + M.T)
        evals, evecs = np.linalg.eigh(M)
        S, mu = float(evals[-1]), float(evals[0])
        raw = inv_sqrt @ evecs[:, -1]
        pv = ParamVector(layout, raw)
        dhat = ParamVector(layout, raw / norm.norm_value(pv))
        return QuadCase(H, norm, S, mu, dhat, "exact", "exact")

    if variant == "linf":
        if d > 14:  # enumeration infeasible: fall back to the flagged estimate
            est = sharpness_fw(lambda v: ParamVector(layout, H @ v.data), norm,
                               FwConfig(iters=200, restarts=200, seed=seed))
            mu = _mu_linf(H) if compute_mu else math.nan
            return QuadCase(H, norm, est.value, float(mu), est.direction,
                            "approximate_fw", "face_qp")
        S, sign = sharpness_bruteforce_linf(H)
        dhat = ParamVector(layout, sign)
        mu = _mu_linf(H) if compute_mu else math.nan
        return QuadCase(H, norm, float(S), float(mu), dhat, "exact", "face_qp")

    if variant == "block_l12":
        best_lam, best_idx, best_vec = -math.inf, 0, None
        for i in range(len(layout.blocks)):
            sl = layout.slice_of(i)
            evals, evecs = np.linalg.eigh(H[sl, sl])
            if evals[-1] > best_lam:
                best_lam, best_idx, best_vec = float(evals[-1]), i, evecs[:, -1]
        data = np.zeros(d)
        data[layout.slice_of(best_idx)] = best_vec
        dhat = ParamVector(layout, data)
        mu = _mu_generic(H, norm, seed=seed) if compute_mu else math.nan
        return QuadCase(H, norm, best_lam, mu, dhat, "exact_psd", mu_prov)

    if variant in ("spectral_max", "spectral_sum"):
        grid = _spectral_grid_oracle(H, norm)
        if grid is not None:
            S, vec = grid
            prov = "grid_polish"
        else:
            est = sharpness_fw(lambda v: ParamVector(layout, H @ v.data), norm,
                               FwConfig(iters=200, restarts=200, seed=seed))
            S, vec = est.value, est.direction.data
            prov = "approximate_fw"
        dhat = norm.project_sphere(ParamVector(layout, vec))
        mu = _mu_generic(H, norm, seed=seed) if compute_mu else math.nan
        return QuadCase(H, norm, float(S), mu, dhat, prov, mu_prov)

    raise ValueError(f"no oracle for geometry {variant!r}")


def verify_invariant_direction(H: np.ndarray, norm: NormSpec, dhat: ParamVector) -> dict:
    """Check that the sharpness maximizer is a fixed point of the dual map."""
    Hd = ParamVector(dhat.layout, H @ dhat.data)
    dual = norm.dual_vector(Hd)
    residual = float(np.abs(dual.data - dhat.data).max())
    quad = float(dhat.data @ (H @ dhat.data))
    dual_n = norm.dual_norm(Hd)
    attain_err = abs(dual_n - quad) / max(abs(quad), 1e-300)
    tied = residual > 1e-6 and attain_err <= 1e-6
    return {
        "residual": residual,
        "attainment_rel_err": attain_err,
        "tied_maximizer": tied,
        "passed": residual <= 1e-6 or tied,
    }


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

@dataclass
class SimResult:
    classification: str        # converged | diverged | oscillating
    losses: np.ndarray
    iterates: np.ndarray | None
    steps_run: int
    sign_alternations: int     # <w_{t+1}-w_t, w_t-w_{t-1}> sign flips (recorded only)


def simulate(H: np.ndarray, norm: NormSpec, eta: float, w0: ParamVector, T: int,
             keep_iterates: bool = False) -> SimResult:
    """Unnormalized steepest descent on the quadratic, classified against
    relative guards: converged when loss < 1e-16 L0, diverged past 1e12 L0."""
    if T < 1:
        raise ValueError("T must be >= 1")
    layout = w0.layout
    w = w0.data.copy()
    L0 = 0.5 * float(w @ (H @ w))
    losses = [L0]
    iterates = [w.copy()] if keep_iterates else None
    prev_step = None
    alternations = 0
    classification = "oscillating"
    t = 0
    for t in range(1, T + 1):
        g = H @ w
        pv = ParamVector(layout, g)
        gstar = norm.dual_norm(pv)
        if gstar <= 1e-300:
            classification = "converged"
            break
        dual = norm.dual_vector(pv)
        delta = -eta * gstar * dual.data
        w = w + delta
        if prev_step is not None:
            s = float(delta @ prev_step)
            if s < 0.0:
                alternations += 1
        prev_step = delta
        L = 0.5 * float(w @ (H @ w))
        losses.append(L)
        if keep_iterates:
            iterates.append(w.copy())
        if not math.isfinite(L) or (L0 > 0 and L > DIVERGED_RTOL * L0):
            classification = "diverged"
            break
        if L0 > 0 and L < CONVERGED_RTOL * L0:
            classification = "converged"
            break
    return SimResult(classification, np.array(losses),
                     np.array(iterates) if keep_iterates else None, t, alternations)


def pl_rate_factor(mu: float, eta: float, S: float) -> float:
    """Per-step loss contraction factor 1 - 2 mu eta (1 - eta S / 2)."""
    return 1.0 - 2.0 * mu * eta * (1.0 - eta * S / 2.0)


def locate_transition(H: np.ndarray, norm: NormSpec, dhat: ParamVector,
                      lo: float, hi: float, T: int = 20000, rel_tol: float = 1e-4) -> float:
    """Bisect the converge/diverge boundary in eta starting from w0 = dhat."""

    def diverges(eta):
        return simulate(H, norm, eta, dhat, T).classification == "diverged"

    if diverges(lo):
        raise ValueError("lower bracket already diverges")
    if not diverges(hi):
        raise ValueError("upper bracket does not diverge")
    while (hi - lo) > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if diverges(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def stability_diagram(H: np.ndarray, norm: NormSpec, etas, dhat: ParamVector,
                      T: int = 20000, seed: int = 0, n_random: int = 1) -> list[dict]:
    """Classification table over an eta grid for dhat and random initializations."""
    rows = []
    rng = RngState(seed)
    randoms = [rng.normal(dhat.layout.total_dim) for _ in range(n_random)]
    for eta in etas:
        res = simulate(H, norm, float(eta), dhat, T)
        rows.append({"eta": float(eta), "init": "dhat",
                     "classification": res.classification,
                     "steps": res.steps_run,
                     "sign_alternations": res.sign_alternations})
        for i, r in enumerate(randoms):
            res = simulate(H, norm, float(eta), ParamVector(dhat.layout, r), T)
            rows.append({"eta": float(eta), "init": f"random{i}",
                         "classification": res.classification,
                         "steps": res.steps_run,
                         "sign_alternations": res.sign_alternations})
    return rows


def taylor_switch(obj, w_t0: ParamVector, opt_spec, T2: int,
                  perturb: float = 0.0, perturb_direction: ParamVector | None = None):
    """Continue the true run and its frozen quadratic model side by side.

    Both runs start at w_t0 with identical optimizer settings.  By default no
    perturbation is added (the empirical protocol); theory-mode runs can seed
    the quadratic model's start with perturb * perturb_direction to place it on
    the invariant line along which above-threshold divergence is guaranteed.
    Returns (true_losses, taylor_losses), each of length T2 + 1 including the
    starting loss.
    """
    from .optimizers import run

    taylor = make_taylor(obj, w_t0)
    start = w_t0
    if perturb != 0.0:
        if perturb_direction is None:
            raise ValueError("perturb != 0 needs a perturb_direction")
        start = ParamVector(w_t0.layout, w_t0.data + perturb * perturb_direction.data)
    res_true = run(obj, w_t0, opt_spec, T2)
    res_tay = run(taylor, start, opt_spec, T2)

    def curve(res, start_loss):
        vals = [start_loss] + [r.loss_after for r in res.records]
        return np.array(vals)

    return curve(res_true, obj.loss(w_t0)), curve(res_tay, taylor.loss(start))
