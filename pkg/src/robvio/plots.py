"""Report figures rendered to files (no display needed)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_rte(series, path, title="", onset=None):
    """``series`` maps a label to ``(stamps, errors)``."""
    fig, ax = plt.subplots(figsize=(8, 3.2))
    for label, (t, e) in series.items():
        ax.plot(t, e, lw=1.0, label=label)
    if onset is not None:
        ax.axvline(onset, color="k", ls="--", lw=0.8, label="object starts moving")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("RTE per segment [m]")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_weights(rows, dynamic_ids, path, title="", onset=None):
    """Weight traces; ``rows`` are (stamp, feature_id, weight) tuples."""
    by_id = {}
    for t, fid, w in rows:
        by_id.setdefault(int(fid), []).append((t, w))
    fig, ax = plt.subplots(figsize=(8, 3.2))
    for fid, tw in by_id.items():
        tw = np.asarray(tw)
        dyn = fid in dynamic_ids
        ax.plot(tw[:, 0], tw[:, 1], lw=0.5, alpha=0.5, color="tab:red" if dyn else "tab:blue")
    ax.plot([], [], color="tab:red", label="dynamic landmarks")
    ax.plot([], [], color="tab:blue", label="static landmarks")
    if onset is not None:
        ax.axvline(onset, color="k", ls="--", lw=0.8)
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("weight")
    ax.set_title(title)
    ax.legend(fontsize=8, loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_bias(stamps, est, gt, path, title=""):
    """Accelerometer and gyro bias, estimated (solid) against truth (dashed)."""
    stamps = np.asarray(stamps)
    fig, axes = plt.subplots(2, 1, figsize=(8, 4.5), sharex=True)
    names = ("x", "y", "z")
    for row, (ax, sl, unit) in enumerate(zip(axes, (slice(0, 3), slice(3, 6)), ("m/s^2", "rad/s"))):
        for j in range(3):
            line, = ax.plot(stamps, est[:, sl][:, j], lw=1.0, label=names[j])
            ax.plot(stamps, gt[:, sl][:, j], lw=0.8, ls="--", color=line.get_color())
        ax.set_ylabel(("b_a [%s]" if row == 0 else "b_w [%s]") % unit)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    axes[0].set_title(title)
    axes[1].set_xlabel("time [s]")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
