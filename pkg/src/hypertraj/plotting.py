"""Static figures: mode overlays, per-level metric bars, plan comparisons."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps SVG output reproducible
    meta = {"Date": None} if str(path).endswith(".svg") else {}
    fig.savefig(path, metadata=meta, bbox_inches="tight")
    plt.close(fig)


def _draw_lanes(ax, lanes) -> None:
    for seg in lanes:
        ax.plot([seg.start[0], seg.end[0]], [seg.start[1], seg.end[1]], color="0.85", lw=1, zorder=0)


def plot_modes(scene, mu_world: np.ndarray, pi: np.ndarray, path, agent_index: int = 0, window: float = 60.0) -> None:
    """K predicted modes (opacity by confidence) against history and ground truth."""
    fig, ax = plt.subplots(figsize=(6, 6))
    _draw_lanes(ax, scene.lanes)
    agent = scene.agents[agent_index]
    for other in scene.agents:
        obs = other.positions[other.mask]
        ax.plot(obs[:, 0], obs[:, 1], color="tab:blue" if other is agent else "0.5", lw=1.5)
    order = np.argsort(-pi)
    for rank, k in enumerate(order):
        alpha = 0.25 + 0.75 * float(pi[k]) / float(pi.max())
        ax.plot(mu_world[k, :, 0], mu_world[k, :, 1], color="tab:orange", alpha=alpha, lw=1.5,
                label="prediction" if rank == 0 else None)
        ax.plot(mu_world[k, -1, 0], mu_world[k, -1, 1], "o", color="tab:orange", alpha=alpha, ms=3)
    if scene.ground_truth and agent.id in scene.ground_truth:
        gt = scene.ground_truth[agent.id]
        ax.plot(gt[:, 0], gt[:, 1], color="tab:red", lw=1.5, ls="--", label="ground truth")
    c = agent.current_position
    ax.set_xlim(c[0] - window / 2, c[0] + window / 2)
    ax.set_ylim(c[1] - window / 2, c[1] + window / 2)
    ax.set_aspect("equal")
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title(f"agent {agent.id}")
    _save(fig, path)


def plot_buckets(report: dict, path, metric: str = "min_fde") -> None:
    """Bar chart of one metric per interaction level."""
    levels = [lv for lv in ("slight", "moderate", "strong") if lv in report.get("buckets", {})]
    values = [report["buckets"][lv][metric] for lv in levels]
    counts = [report["buckets"][lv]["count"] for lv in levels]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    bars = ax.bar(levels, values, color=["tab:green", "tab:orange", "tab:red"][: len(levels)])
    for bar, n in zip(bars, counts):
        ax.annotate(f"n={n}", (bar.get_x() + bar.get_width() / 2, bar.get_height()), ha="center", va="bottom", fontsize=8)
    ax.set_ylabel(metric)
    _save(fig, path)


def plot_plan(problem, result, path) -> None:
    """Initial vs optimized ego plan with neighbour predictions, plus the cost history."""
    fig, (ax, ax_c) = plt.subplots(1, 2, figsize=(11, 4.5), gridspec_kw={"width_ratios": [2, 1]})
    ax.plot(problem.lane_ref[:, 0], problem.lane_ref[:, 1], color="0.8", lw=6, zorder=0, label="lane reference")
    for i, nb in enumerate(problem.neighbors):
        ax.plot(nb[:, 0], nb[:, 1], color="0.4", ls=":", label="neighbour prediction" if i == 0 else None)
    ax.plot(result.initial_positions[:, 0], result.initial_positions[:, 1], color="tab:orange", label="initial plan")
    ax.plot(result.positions[:, 0], result.positions[:, 1], color="tab:blue", label="optimized plan")
    pts = np.vstack([result.initial_positions, result.positions])
    lo, hi = pts.min(0) - 10.0, pts.max(0) + 10.0
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])
    ax.set_aspect("equal")
    ax.legend(fontsize=8)
    for term in result.breakdowns[0]:
        ax_c.plot([b[term] for b in result.breakdowns], label=term)
    ax_c.plot(result.costs, color="k", label="total")
    ax_c.set_yscale("symlog")
    ax_c.set_xlabel("accepted iteration")
    ax_c.legend(fontsize=8)
    _save(fig, path)
