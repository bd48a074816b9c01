"""Optional PNG output for sweeps; matplotlib is imported on first use."""

import math

METRICS = ("sup_dev", "k_norm", "w_dev", "defect_before_hi")


def plot_sweep(rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    per_eta = {}
    for r in rows:
        per_eta.setdefault(r["eta"], r)
    etas = sorted(e for e in per_eta if e > 0)
    fig, ax = plt.subplots(figsize=(5, 4))
    for key in METRICS:
        ys = [per_eta[e][key] for e in etas]
        pts = [(e, y) for e, y in zip(etas, ys) if y > 0 and math.isfinite(y)]
        if pts:
            ax.loglog(*zip(*pts), marker="o", label=key)
    ax.set_xlabel("eta")
    ax.set_ylabel("norm")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
