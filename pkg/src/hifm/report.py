"""Static figures rendered next to the delimited outputs.

Every CLI command that writes a CSV can also render a small matplotlib
figure summarizing it (training curves, spectrum bars, NLL histograms).
The Agg backend is forced so this works in batch jobs without a display.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def training_figure(log, path) -> None:
    """Loss curve plus periodic eval NLL / NFE markers."""
    steps = [r.step for r in log.rows]
    losses = [r.loss for r in log.rows]
    evals = log.eval_points()
    fig, axes = plt.subplots(1, 2 if evals else 1, figsize=(9, 3.2))
    ax0 = axes[0] if evals else axes
    ax0.semilogy(steps, losses, lw=0.8)
    ax0.set_xlabel("step")
    ax0.set_ylabel("matching loss")
    ax0.set_title("training loss")
    if evals:
        es, enll, enfe = zip(*evals)
        ax1 = axes[1]
        ax1.plot(es, enll, "o-", ms=3)
        ax1.set_xlabel("step")
        ax1.set_ylabel("eval NLL (nats)")
        ax1.set_title("held-out NLL")
        ax2 = ax1.twinx()
        ax2.plot(es, enfe, "s--", ms=3, color="tab:gray", alpha=0.6)
        ax2.set_ylabel("NFE")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def spectrum_figure(alpha_raw, alpha_processed, null_mask, path) -> None:
    """Raw vs processed eigenvalues, null directions highlighted."""
    alpha_raw = np.asarray(alpha_raw)
    alpha_processed = np.asarray(alpha_processed)
    null_mask = np.asarray(null_mask, dtype=bool)
    idx = np.arange(len(alpha_raw))
    fig, ax = plt.subplots(figsize=(6.5, 3.2))
    ax.plot(idx, alpha_raw, "o", ms=4, label="raw", color="tab:blue")
    ax.plot(idx, alpha_processed, "x", ms=5, label="processed",
            color="tab:orange")
    if null_mask.any():
        ax.plot(idx[null_mask], alpha_raw[null_mask], "o", ms=8,
                mfc="none", mec="tab:red", label="null")
    ax.set_xlabel("eigenvalue index")
    ax.set_ylabel("alpha")
    ax.set_title("Hessian spectrum")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def nll_figure(nlls, nfes, path) -> None:
    """Histograms of per-sample NLL and integrator cost."""
    nlls = np.asarray(nlls, dtype=float)
    nfes = np.asarray(nfes, dtype=float)
    ok = np.isfinite(nlls)
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.2))
    if ok.any():
        ax0.hist(nlls[ok], bins=min(30, max(5, ok.sum() // 3)),
                 color="tab:blue", alpha=0.8)
        ax0.axvline(np.mean(nlls[ok]), color="k", lw=1, ls="--",
                    label=f"mean {np.mean(nlls[ok]):.3f}")
        ax0.legend(fontsize=8)
    ax0.set_xlabel("NLL (nats)")
    ax0.set_ylabel("count")
    ax0.set_title("per-sample NLL")
    ax1.hist(nfes[ok], bins=min(30, max(5, int(ok.sum()) // 3 or 5)),
             color="tab:gray", alpha=0.8)
    ax1.set_xlabel("NFE")
    ax1.set_title("function evaluations")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
