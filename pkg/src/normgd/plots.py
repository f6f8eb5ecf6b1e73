"""Static SVG figures for run artifacts.

Every figure-producing command also writes the CSV backing it; these helpers
only render what is already on disk-ready rows.  Loss and gradient-norm curves
can be exponentially smoothed for display (alpha = 0.1 convention); raw
columns are never altered.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams["svg.hashsalt"] = "normgd"
plt.rcParams["figure.dpi"] = 110
plt.rcParams["axes.grid"] = True
plt.rcParams["grid.alpha"] = 0.3
plt.rcParams["font.size"] = 9

THRESHOLD_STYLE = dict(color="k", linestyle="--", linewidth=1.0, alpha=0.8)


def ema_smooth(values, alpha: float):
    """Exponential smoothing for display only (None entries pass through)."""
    out, state = [], None
    for v in values:
        if v is None or (isinstance(v, float) and v != v):
            out.append(state)
            continue
        state = v if state is None else alpha * v + (1 - alpha) * state
        out.append(state)
    return out


def _series(rows, key):
    xs, ys = [], []
    for row in rows:
        v = row.get(key)
        if v is None or (isinstance(v, float) and v != v):
            continue
        xs.append(row["step"])
        ys.append(v)
    return xs, ys


def fig_train_panels(rows, path, mode: str, eta: float, smoothing: float = 0.0,
                     normalized_panels: bool = False) -> None:
    """Four panels: loss, dual gradient norm, directional smoothness, sharpness.

    The dashed horizontal rule marks 2/eta; in normalized mode the smoothness
    and sharpness panels show the dual-norm-normalized columns against it.
    """
    fig, axes = plt.subplots(1, 4, figsize=(13, 3.0))
    thr = 2.0 / eta

    xs, ys = _series(rows, "loss")
    if smoothing > 0:
        ys = ema_smooth(ys, smoothing)
    axes[0].plot(xs, ys, color="C0")
    axes[0].set_yscale("log")
    axes[0].set_title("train loss")

    xs, ys = _series(rows, "dual_grad_norm")
    if smoothing > 0:
        ys = ema_smooth(ys, smoothing)
    axes[1].plot(xs, ys, color="C1")
    axes[1].set_yscale("log")
    axes[1].set_title("dual gradient norm")

    use_norm = normalized_panels or mode == "normalized"
    d_key = "normalized_dir_smoothness" if use_norm else "dir_smoothness"
    s_key = "normalized_sharpness" if use_norm else "sharpness"

    xs, ys = _series(rows, d_key)
    axes[2].plot(xs, ys, color="C2", linewidth=0.9)
    axes[2].axhline(thr, **THRESHOLD_STYLE)
    axes[2].set_title("directional smoothness" + (" / ||g||*" if use_norm else ""))

    xs, ys = _series(rows, s_key)
    axes[3].plot(xs, ys, color="C3", marker="o", markersize=2.5, linewidth=0.9)
    axes[3].axhline(thr, **THRESHOLD_STYLE)
    axes[3].set_title("sharpness" + (" / ||g||*" if use_norm else ""))

    for ax in axes:
        ax.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(str(path), format="svg")
    plt.close(fig)


def fig_quad_diagram(rows, path, two_over_s: float | None = None) -> None:
    """Stability classification over the eta grid, one marker row per init policy."""
    fig, ax = plt.subplots(figsize=(6.5, 3.2))
    inits = sorted({r["init"] for r in rows})
    colors = {"converged": "C2", "diverged": "C3", "oscillating": "C1"}
    for j, init in enumerate(inits):
        sub = [r for r in rows if r["init"] == init]
        for r in sub:
            ax.scatter(r["eta"], j, color=colors.get(r["classification"], "k"),
                       marker="o", s=22)
    if two_over_s is not None:
        ax.axvline(two_over_s, **THRESHOLD_STYLE)
    ax.set_yticks(range(len(inits)))
    ax.set_yticklabels(inits)
    ax.set_xscale("log")
    ax.set_xlabel("step size")
    handles = [plt.Line2D([], [], marker="o", linestyle="", color=c, label=k)
               for k, c in colors.items()]
    ax.legend(handles=handles, fontsize=7, loc="upper left")
    fig.tight_layout()
    fig.savefig(str(path), format="svg")
    plt.close(fig)


def fig_switch_overlay(true_losses, taylor_losses, t0: int, path) -> None:
    """True-loss vs frozen-quadratic continuation, switch step marked."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    steps = np.arange(t0, t0 + len(true_losses))
    ax.plot(steps, true_losses, color="C0", label="true objective")
    ax.plot(steps, taylor_losses, color="C1", label="quadratic model")
    ax.axvline(t0, color="k", linestyle=":", linewidth=1.0)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(str(path), format="svg")
    plt.close(fig)


def fig_tracking(rows, path, threshold: float) -> None:
    """Fixed-direction curvature, its running mean, and the sharpness envelope."""
    fig, ax = plt.subplots(figsize=(6.0, 3.2))
    steps = [r["step"] for r in rows]
    ax.plot(steps, [r["curvature"] for r in rows], color="C0", linewidth=0.9,
            label="fixed-direction curvature")
    ax.plot(steps, [r["running_mean"] for r in rows], color="C1", linewidth=1.4,
            label="running mean")
    env = [(r["step"], r["sharpness"]) for r in rows if r.get("sharpness") is not None]
    if env:
        ax.plot([e[0] for e in env], [e[1] for e in env], color="C3", marker="o",
                markersize=2.5, linewidth=0.8, label="per-step sharpness")
    ax.axhline(threshold, **THRESHOLD_STYLE)
    ax.set_xlabel("step")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(str(path), format="svg")
    plt.close(fig)


def fig_oracle_check(table, path) -> None:
    """Relative FW error vs restart budget, one line per inner-iteration budget."""
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    iters_values = sorted({row["iters"] for row in table})
    for i, K in enumerate(iters_values):
        sub = sorted((r for r in table if r["iters"] == K), key=lambda r: r["restarts"])
        ax.plot([r["restarts"] for r in sub], [r["mean_rel_error"] for r in sub],
                marker="o", color=f"C{i}", label=f"{K} iterations")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("restarts")
    ax.set_ylabel("mean relative error")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(str(path), format="svg")
    plt.close(fig)


def fig_sweep(rows, path) -> None:
    """Final loss and band occupancy across the sweep grid."""
    fig, axes = plt.subplots(1, 2, figsize=(8.0, 3.2))
    seeds = sorted({r["seed"] for r in rows})
    for i, seed in enumerate(seeds):
        sub = sorted((r for r in rows if r["seed"] == seed), key=lambda r: r["eta"])
        axes[0].plot([r["eta"] for r in sub], [r["final_loss"] for r in sub],
                     marker="o", color=f"C{i}", label=f"seed {seed}")
        axes[1].plot([r["eta"] for r in sub], [r["smoothness_band_occupancy"] for r in sub],
                     marker="s", color=f"C{i}")
    axes[0].set_xscale("log")
    axes[0].set_yscale("log")
    axes[0].set_xlabel("step size")
    axes[0].set_ylabel("final loss")
    axes[0].legend(fontsize=7)
    axes[1].set_xscale("log")
    axes[1].set_xlabel("step size")
    axes[1].set_ylabel("smoothness band occupancy")
    fig.tight_layout()
    fig.savefig(str(path), format="svg")
    plt.close(fig)
