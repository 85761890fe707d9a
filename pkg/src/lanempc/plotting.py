"""Figures of per-step KPIs, one line per controller."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

FIGURES = (
    ("density.png", "average_density", "average lane density [veh/m]"),
    ("speed.png", "average_speed_proxy", "average speed [m/s]"),
    ("relative_loss_time.png", "relative_loss_time", "relative loss time [-]"),
)


def plot_run(steps_by_controller, out_dir):
    """Write one PNG per KPI into ``out_dir``; returns the paths."""
    paths = []
    for fname, key, label in FIGURES:
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        for name, rows in steps_by_controller.items():
            ax.plot([r["step"] for r in rows], [r[key] for r in rows], label=name, linewidth=1.4)
        ax.set_xlabel("control step")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        path = out_dir / fname
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths
