"""Matplotlib figures rendered next to the delimited reports."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def latency_figure(rows, path):
    """Median latency vs token count, one line per variant (log-log)."""
    variants = sorted({r["variant"] for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for v in variants:
        pts = sorted((r["HW"], r["median_s"], r["iqr_s"]) for r in rows if r["variant"] == v)
        hws = [p[0] for p in pts]
        med = [p[1] * 1e3 for p in pts]
        iqr = [p[2] * 1e3 for p in pts]
        ax.errorbar(hws, med, yerr=iqr, marker="o", capsize=3, label=v)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("visual tokens (HW)")
    ax.set_ylabel("median latency [ms]")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def loss_curve_figure(trajectory, path):
    steps = [t["step"] for t in trajectory]
    losses = [t["loss"] for t in trajectory]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def sweep_figure(rows, x_key, y_keys, path, x_label=None):
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [r[x_key] for r in rows]
    for key in y_keys:
        ax.plot(xs, [r[key] for r in rows], marker="o", label=key)
    ax.set_xlabel(x_label or x_key)
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
