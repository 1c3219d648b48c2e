"""PNG figures written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def finetune_figure(report, path) -> None:
    trace = report.finetune_trace
    fig, ax = plt.subplots(1, 2, figsize=(10, 3.8))
    if trace.loss:
        ax[0].semilogy(np.arange(trace.steps), np.maximum(trace.loss, 1e-300))
    ax[0].axhline(report.config["search"]["optimizer"]["early_stop_threshold"], color="gray", ls="--", lw=0.8)
    ax[0].set_xlabel("Adam step")
    ax[0].set_ylabel("loss")
    if trace.relative_error:
        steps = sorted(trace.relative_error)
        ax[1].semilogy(steps, [max(trace.relative_error[s], 1e-300) for s in steps], marker="o", ms=3)
    ax[1].set_xlabel("Adam step")
    ax[1].set_ylabel("relative error")
    fig.suptitle(report.expression or "no finite candidate", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def search_figure(rows, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.8))
    if rows:
        it = [r["iteration"] for r in rows]
        best = np.array([r["best_pool_loss"] for r in rows], dtype=float)
        ax.semilogy(it, np.clip(best, 1e-300, None), label="best in pool")
        cur = np.array([r["iteration_best_loss"] for r in rows], dtype=float)
        ax.semilogy(it, np.clip(cur, 1e-300, None), ls=":", label="best this iteration")
        ax.legend()
    ax.set_xlabel("search iteration")
    ax.set_ylabel("coarse-tuned loss")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def bench_figure(rows, path) -> None:
    fig, ax = plt.subplots(1, 2, figsize=(10, 3.8))
    for name in sorted({r["problem"] for r in rows}):
        sub = [r for r in rows if r["problem"] == name and r["relative_error"] is not None]
        dims = sorted({r["dim"] for r in sub})
        err = [np.mean([r["relative_error"] for r in sub if r["dim"] == d]) for d in dims]
        wall = [np.mean([r["total_s"] for r in sub if r["dim"] == d]) for d in dims]
        ax[0].semilogy(dims, err, marker="o", label=name)
        ax[1].plot(dims, wall, marker="o", label=name)
    ax[0].set_xlabel("dimension")
    ax[0].set_ylabel("relative error")
    ax[1].set_xlabel("dimension")
    ax[1].set_ylabel("wall time [s]")
    ax[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
