"""DET curve rendering for evaluation reports."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import det_points  # noqa: E402


def plot_det(sweeps, path, target_fa=1.0):
    """Draw FR rate against FA/hour, one curve per domain, and save to ``path``.

    ``sweeps`` maps a domain label to the operating points of its sweep.
    """
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    for label, points in sweeps.items():
        rows = det_points(points)
        fa = [r[0] for r in rows]
        fr = [100.0 * r[1] for r in rows]
        ax.step(fa, fr, where="post", label=label)
    ax.axvline(target_fa, color="0.5", linestyle="--", linewidth=0.8)
    ax.set_xscale("symlog", linthresh=1.0)
    ax.set_xlabel("false alarms per hour")
    ax.set_ylabel("false reject rate (%)")
    ax.set_ylim(-2, 102)
    ax.grid(True, alpha=0.3)
    if sweeps:
        ax.legend(title="test domain")
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes stable across runs
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
