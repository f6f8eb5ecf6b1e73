"""Steepest-descent steps under a norm geometry and the instrumented run loop.

Two step modes share one geometry interface:

* unnormalized:  w' = w - eta * ||g||_* * (g)_*     (loss decreases iff D <= 2/eta)
* normalized:    w' = w - eta * (g)_*               (loss decreases iff D <= 2||g||_*/eta)

Specialized closed-form steppers (``block_cd_step``, ``spectral_step``,
``rmsprop_step``) are provided both as practical optimizers and as
cross-checks of the generic dual-vector path.  ``run`` drives a deterministic
trajectory with directional smoothness every step and a sharpness estimate on
a cadence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matrixfns import PolarMethod, nuclear_norm, polar_factor
from .norms import (BlockL12Norm, NormSpec, PreconditionedNorm,
                    SpectralMaxNorm, _matrix_shapes)
from .objectives import Objective
from .params import ParamVector
from .spectra import FwConfig, sharpness_fw

STATIONARY_CUTOFF = 1e-14
DIVERGENCE_GUARD = 1e12

UNNORMALIZED = "unnormalized"
NORMALIZED = "normalized"


@dataclass(frozen=True)
class OptimizerSpec:
    norm: NormSpec | None
    eta: float
    mode: str = UNNORMALIZED
    # EMA second-moment preconditioner (RMSprop-style); when set, the run
    # rebuilds a diagonal preconditioned norm every step.
    beta2: float | None = None
    epsilon: float | None = None

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.mode not in (UNNORMALIZED, NORMALIZED):
            raise ValueError(f"mode must be {UNNORMALIZED!r} or {NORMALIZED!r}")
        if (self.beta2 is None) != (self.epsilon is None):
            raise ValueError("beta2 and epsilon must be set together")
        if self.beta2 is not None:
            if not (0.0 <= self.beta2 < 1.0) or self.epsilon <= 0:
                raise ValueError("need 0 <= beta2 < 1 and epsilon > 0")
            if self.norm is not None and self.norm.variant != "preconditioned":
                raise ValueError("EMA preconditioning requires a (diagonal) preconditioned norm")
        elif self.norm is None:
            raise ValueError("norm is required unless an EMA schedule is given")

    @property
    def ema(self) -> bool:
        return self.beta2 is not None


@dataclass
class StepRecord:
    step: int
    loss_before: float
    loss_after: float
    dual_grad_norm: float
    threshold: float
    dir_smoothness: float | None = None
    direction: ParamVector | None = None
    stationary: bool = False
    diverged: bool = False
    precond_diag: np.ndarray | None = None
    sharpness: float | None = None
    sharp_fw_gap: float | None = None
    sharp_restarts: int | None = None
    sharp_wall_ms: float | None = None
    sharp_direction: ParamVector | None = None

    @property
    def delta_loss(self) -> float:
        return self.loss_after - self.loss_before


def _finish_record(obj, norm, w, w_new, g, gstar, eta, mode, step_index, loss_w, direction):
    """Populate the trace entry for a completed step."""
    loss_new = obj.loss(w_new)
    delta = w_new.data - w.data
    threshold = 2.0 / eta if mode == UNNORMALIZED else 2.0 * gstar / eta
    dir_smooth = None
    if delta.any() and np.all(np.isfinite(delta)):
        chord = norm.norm_value(ParamVector(w.layout, delta))
        if chord > 0 and np.isfinite(loss_new):
            dir_smooth = (loss_new - loss_w - float(g.data @ delta)) / (0.5 * chord * chord)
    diverged = (not np.isfinite(loss_new)) or loss_new > DIVERGENCE_GUARD or not w_new.is_finite()
    return StepRecord(step=step_index, loss_before=loss_w, loss_after=loss_new,
                      dual_grad_norm=gstar, threshold=threshold,
                      dir_smoothness=dir_smooth, direction=direction, diverged=diverged)


def step(obj: Objective, w: ParamVector, spec: OptimizerSpec,
         step_index: int = 0, loss_w: float | None = None):
    """One generic non-Euclidean descent step; returns (w', StepRecord)."""
    norm = spec.norm
    loss_w = obj.loss(w) if loss_w is None else loss_w
    g = obj.grad(w)
    if not g.is_finite():
        return w, StepRecord(step=step_index, loss_before=loss_w, loss_after=loss_w,
                             dual_grad_norm=float("nan"), threshold=2.0 / spec.eta,
                             diverged=True)
    gstar = norm.dual_norm(g)
    if gstar <= STATIONARY_CUTOFF:
        thr = 2.0 / spec.eta if spec.mode == UNNORMALIZED else 2.0 * gstar / spec.eta
        return w, StepRecord(step=step_index, loss_before=loss_w, loss_after=loss_w,
                             dual_grad_norm=gstar, threshold=thr, stationary=True)
    dual = norm.dual_vector(g)
    scale = gstar if spec.mode == UNNORMALIZED else 1.0
    direction = ParamVector(w.layout, scale * dual.data)
    w_new = ParamVector(w.layout, w.data - spec.eta * direction.data)
    rec = _finish_record(obj, norm, w, w_new, g, gstar, spec.eta, spec.mode,
                         step_index, loss_w, direction)
    return w_new, rec


def block_cd_step(obj: Objective, w: ParamVector, eta: float,
                  step_index: int = 0, loss_w: float | None = None):
    """Block-coordinate step in the block-l12 geometry.

    All blocks whose gradient l2 norm ties the maximum (relative tolerance
    1e-12) move by -(eta/|J|) g_block; other blocks stay put.  With a single
    maximizing block this is plain Block CD.
    """
    norm = BlockL12Norm(w.layout)
    loss_w = obj.loss(w) if loss_w is None else loss_w
    g = obj.grad(w)
    if not g.is_finite():
        return w, StepRecord(step=step_index, loss_before=loss_w, loss_after=loss_w,
                             dual_grad_norm=float("nan"), threshold=2.0 / eta, diverged=True)
    gstar = norm.dual_norm(g)
    if gstar <= STATIONARY_CUTOFF:
        return w, StepRecord(step=step_index, loss_before=loss_w, loss_after=loss_w,
                             dual_grad_norm=gstar, threshold=2.0 / eta, stationary=True)
    tied = norm.tied_blocks(g)
    data = w.data.copy()
    for i in tied:
        sl = w.layout.slice_of(i)
        data[sl] -= (eta / len(tied)) * g.data[sl]
    w_new = ParamVector(w.layout, data)
    direction = ParamVector(w.layout, (w.data - data) / eta)
    rec = _finish_record(obj, norm, w, w_new, g, gstar, eta, UNNORMALIZED,
                         step_index, loss_w, direction)
    return w_new, rec


def spectral_step(obj: Objective, w: ParamVector, eta: float,
                  method: PolarMethod = PolarMethod.exact(),
                  step_index: int = 0, loss_w: float | None = None):
    """Spectral descent: every matrix block moves along its polar factor,
    scaled by the summed nuclear norms gamma = sum_l ||G_l||_nuc."""
    norm = SpectralMaxNorm(w.layout, polar_method=method)
    shapes = _matrix_shapes(w.layout)
    loss_w = obj.loss(w) if loss_w is None else loss_w
    g = obj.grad(w)
    if not g.is_finite():
        return w, StepRecord(step=step_index, loss_before=loss_w, loss_after=loss_w,
                             dual_grad_norm=float("nan"), threshold=2.0 / eta, diverged=True)
    mats, gamma = [], 0.0
    for i, (r, c) in enumerate(shapes):
        G = g.data[w.layout.slice_of(i)].reshape(r, c)
        mats.append(G)
        if np.linalg.norm(G) > STATIONARY_CUTOFF:
            gamma += nuclear_norm(G)
    if gamma <= STATIONARY_CUTOFF:
        return w, StepRecord(step=step_index, loss_before=loss_w, loss_after=loss_w,
                             dual_grad_norm=gamma, threshold=2.0 / eta, stationary=True)
    data = w.data.copy()
    for i, G in enumerate(mats):
        if np.linalg.norm(G) <= STATIONARY_CUTOFF:
            continue
        data[w.layout.slice_of(i)] -= eta * gamma * polar_factor(G, method).reshape(-1)
    w_new = ParamVector(w.layout, data)
    direction = ParamVector(w.layout, (w.data - data) / eta)
    rec = _finish_record(obj, norm, w, w_new, g, gamma, eta, UNNORMALIZED,
                         step_index, loss_w, direction)
    return w_new, rec


def rmsprop_step(obj: Objective, w: ParamVector, state: np.ndarray,
                 beta2: float, epsilon: float, eta: float, mode: str = UNNORMALIZED,
                 step_index: int = 0, loss_w: float | None = None):
    """EMA-preconditioned step: nu <- beta2 nu + (1-beta2) g^2, P = diag(sqrt(nu)+eps).

    Returns (w', nu', StepRecord); the record carries the P diagonal so
    sharpness can be measured against the same preconditioner the step used.
    At beta2 = 0 and vanishing eps the update direction tends to -sign(g).
    """
    loss_w = obj.loss(w) if loss_w is None else loss_w
    g = obj.grad(w)
    if not g.is_finite():
        rec = StepRecord(step=step_index, loss_before=loss_w, loss_after=loss_w,
                         dual_grad_norm=float("nan"), threshold=2.0 / eta, diverged=True)
        return w, state, rec
    nu = beta2 * state + (1.0 - beta2) * g.data * g.data
    pdiag = np.sqrt(nu) + epsilon
    norm = PreconditionedNorm(w.layout, diag=pdiag)
    gstar = norm.dual_norm(g)
    if gstar <= STATIONARY_CUTOFF:
        thr = 2.0 / eta if mode == UNNORMALIZED else 2.0 * gstar / eta
        rec = StepRecord(step=step_index, loss_before=loss_w, loss_after=loss_w,
                         dual_grad_norm=gstar, threshold=thr, stationary=True,
                         precond_diag=pdiag)
        return w, nu, rec
    if mode == UNNORMALIZED:
        delta = eta * g.data / pdiag             # eta ||g||_* (g)_* = eta P^{-1} g
    else:
        delta = eta * g.data / (pdiag * gstar)   # eta (g)_*
    w_new = ParamVector(w.layout, w.data - delta)
    direction = ParamVector(w.layout, delta / eta)
    rec = _finish_record(obj, norm, w, w_new, g, gstar, eta, mode,
                         step_index, loss_w, direction)
    rec.precond_diag = pdiag
    return w_new, nu, rec


@dataclass
class MeasureConfig:
    """What the run loop measures beyond the per-step trace."""

    fw: FwConfig = field(default_factory=FwConfig)
    cadence: int = 20
    estimator: str = "fw"   # "fw" | "closed" | "none"
    threads: int = 1
    keep_directions: bool = False  # retain sharpness maximizers on cadence rows


@dataclass
class RunResult:
    records: list[StepRecord]
    final: ParamVector
    final_loss: float
    diverged: bool
    ema_state: np.ndarray | None = None


def _measure_sharpness(obj, w, norm, measure: MeasureConfig, step_index: int):
    hvp = obj.hvp_at(w)
    if measure.estimator == "closed":
        from .spectra import sharpness_closed

        est = sharpness_closed(norm, hvp=hvp, seed=measure.fw.seed + step_index)
    else:
        cfg = FwConfig(iters=measure.fw.iters, restarts=measure.fw.restarts,
                       seed=measure.fw.seed + step_index)
        est = sharpness_fw(hvp, norm, cfg, threads=measure.threads,
                           hvp_multi=obj.hvp_multi_at(w))
    return est


def run(obj: Objective, w0: ParamVector, spec: OptimizerSpec, steps: int,
        measure: MeasureConfig | None = None, keep_directions: bool = False) -> RunResult:
    """Deterministic trajectory of `steps` steps with instrumentation attached.

    Directional smoothness is recorded every step; a sharpness estimate is
    attached to records at the measurement cadence (step 0 included).  On a
    diverged step the loop exits early with the partial trace preserved.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    w = w0
    loss_w = obj.loss(w)
    records: list[StepRecord] = []
    nu = np.zeros(w0.layout.total_dim) if spec.ema else None
    for t in range(steps):
        if spec.ema:
            w_next, nu, rec = rmsprop_step(obj, w, nu, spec.beta2, spec.epsilon,
                                           spec.eta, spec.mode, t, loss_w)
            norm_t = PreconditionedNorm(w.layout, diag=rec.precond_diag) \
                if rec.precond_diag is not None else spec.norm
        else:
            w_next, rec = step(obj, w, spec, t, loss_w)
            norm_t = spec.norm
        if measure is not None and measure.estimator != "none" and t % measure.cadence == 0 \
                and norm_t is not None and not rec.diverged:
            est = _measure_sharpness(obj, w, norm_t, measure, t)
            rec.sharpness = est.value
            rec.sharp_fw_gap = est.fw_gap
            rec.sharp_restarts = est.restarts_used
            rec.sharp_wall_ms = est.wall_ms
            if measure.keep_directions:
                rec.sharp_direction = est.direction
        if not keep_directions:
            rec.direction = None
        records.append(rec)
        if rec.diverged:
            return RunResult(records, w_next, rec.loss_after, True, nu)
        w, loss_w = w_next, rec.loss_after
    return RunResult(records, w, loss_w, False, nu)
