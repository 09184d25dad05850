"""Static SVG figures for the report command.

Every function takes plain tables (as read back from the eval / protocol CSVs)
and writes one standalone SVG.  Output is byte-stable: the SVG hash salt is
fixed and the date metadata dropped.  Data series carry ``gid`` attributes
(``series-<name>``) so downstream tools can find them in the SVG tree.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "mvprior", "svg.fonttype": "none", "font.size": 9}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def pr_figure(curves: dict, path) -> None:
    """``curves``: name -> (recall, precision) arrays."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.5, 4))
        for name, (rec, prec) in sorted(curves.items()):
            (line,) = ax.plot(np.concatenate([[0.0], rec]), np.concatenate([[1.0], prec]),
                              drawstyle="steps-post", label=name)
            line.set_gid(f"series-{name}")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.legend(loc="lower left")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        _save(fig, path)


def confusion_figure(conf: np.ndarray, path, title: str = "") -> None:
    """Row-normalized viewpoint confusion (rows: true bin, columns: predicted bin)."""
    conf = np.asarray(conf, dtype=float)
    totals = conf.sum(axis=1, keepdims=True)
    norm = np.divide(conf, totals, out=np.zeros_like(conf), where=totals > 0)
    V = conf.shape[0]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.8))
        im = ax.imshow(norm, vmin=0, vmax=1, cmap="viridis")
        im.set_gid("confusion")
        ax.set_xticks(range(V))
        ax.set_yticks(range(V))
        ax.set_xlabel("predicted bin")
        ax.set_ylabel("true bin")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        _save(fig, path)


def kshot_figure(series: dict, path) -> None:
    """Mean AP (left) and VP (right) against k, one line per method.

    ``series``: method -> list of (k_label, ap_mean, ap_std, vp_mean, vp_std).
    Labels are plotted in the given order on a categorical axis so ``all``
    fits next to the integers.
    """
    labels = []
    for rows in series.values():
        for r in rows:
            if r[0] not in labels:
                labels.append(r[0])
    pos = {k: i for i, k in enumerate(labels)}
    with plt.rc_context(_RC):
        fig, (ax_ap, ax_vp) = plt.subplots(1, 2, figsize=(8, 3.4))
        for name in sorted(series):
            rows = series[name]
            x = [pos[r[0]] for r in rows]
            for ax, mi, si in ((ax_ap, 1, 2), (ax_vp, 3, 4)):
                m = np.array([r[mi] for r in rows]) * 100
                s = np.array([r[si] for r in rows]) * 100
                (line,) = ax.plot(x, m, marker="o", label=name)
                line.set_gid(f"series-{name}")
                ax.fill_between(x, m - s, m + s, alpha=0.15, color=line.get_color())
        for ax, what in ((ax_ap, "AP (%)"), (ax_vp, "VP (%)")):
            ax.set_xticks(range(len(labels)))
            ax.set_xticklabels(labels)
            ax.set_xlabel("positives per view (k)")
            ax.set_ylabel(what)
            ax.grid(alpha=0.3)
        ax_ap.set_title("localization")
        ax_vp.set_title("viewpoint")
        ax_vp.legend(loc="lower right")
        fig.tight_layout()
        _save(fig, path)
