"""Figures rendered from a finished run directory (metrics.csv, optional feature dump).

Nothing here runs during training; ``drda report`` reads the files a run left
behind and writes PNGs next to them.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .files import read_metrics_csv  # noqa: E402

LOSS_COLUMNS = ("L_ce", "L_global", "phi", "L_ot", "L_R")
STRUCTURE_COLUMNS = ("phi_s_sgt", "phi_t_tgt", "phi_sgt_tgt", "gw_fixed")

plt.rcParams.update({"font.size": 9, "axes.grid": True, "grid.alpha": 0.3, "savefig.dpi": 120})


def _column(rows: list[dict], name: str) -> np.ndarray:
    return np.array([r.get(name, math.nan) for r in rows], dtype=np.float64)


def _curves(ax, rows, names, logy=False):
    it = _column(rows, "iteration")
    drawn = 0
    for name in names:
        y = _column(rows, name)
        ok = np.isfinite(y)
        if logy:
            ok &= y > 0
        if ok.any():
            ax.plot(it[ok], y[ok], label=name, lw=1.2)
            drawn += 1
    if logy and drawn:
        ax.set_yscale("log")
    ax.set_xlabel("iteration")
    if drawn:
        ax.legend(frameon=False)


def plot_metrics(rows: list[dict], fig_dir: Path) -> list[str]:
    written = []
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    _curves(ax, rows, LOSS_COLUMNS, logy=True)
    ax.set_title("loss terms")
    written.append(_save(fig, fig_dir / "losses.png"))

    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    _curves(ax, rows, ("source_accuracy", "target_accuracy"))
    ax.set_ylim(0, 1.02)
    ax.set_title("accuracy")
    written.append(_save(fig, fig_dir / "accuracy.png"))

    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    _curves(ax, rows, STRUCTURE_COLUMNS, logy=True)
    ax.set_title("structure discrepancy")
    written.append(_save(fig, fig_dir / "structure.png"))

    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    _curves(ax, rows, ("align_grad_norm", "delta_grad_norm", "transfer_weight"))
    ax.set_title("alignment gradient and weight")
    written.append(_save(fig, fig_dir / "alignment.png"))
    return written


def read_dump(path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        body = list(reader)
    zcols = [i for i, h in enumerate(header) if h.startswith("z_")]
    return {
        "domain": np.array([r[0] for r in body]),
        "label": np.array([int(r[1]) for r in body]),
        "anchor": np.array([int(r[2]) for r in body]),
        "z": np.array([[float(r[i]) for i in zcols] for r in body]).reshape(len(body), len(zcols)),
    }


def plot_features(dump: dict, path: Path) -> str:
    """Scatter of the first two bottleneck coordinates with the radial anchor fans."""
    z = dump["z"]
    if z.shape[1] < 2:
        z = np.hstack([z, np.zeros((len(z), 1))])
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.8), sharex=True, sharey=True)
    cmap = plt.get_cmap("tab10")
    for ax, name in zip(axes, ("source", "target")):
        pts = (dump["domain"] == name) & (dump["anchor"] == 0)
        anc = (dump["domain"] == name) & (dump["anchor"] == 1)
        ax.scatter(z[pts, 0], z[pts, 1], c=[cmap(int(c) % 10) for c in dump["label"][pts]], s=3, alpha=0.5,
                   linewidths=0)
        glob = anc & (dump["label"] < 0)
        if glob.any():
            g = z[glob][0]
            for j in np.flatnonzero(anc & (dump["label"] >= 0)):
                ax.plot([g[0], z[j, 0]], [g[1], z[j, 1]], color="k", lw=0.8)
                ax.scatter(z[j, 0], z[j, 1], color=cmap(int(dump["label"][j]) % 10), marker="*", s=90,
                           edgecolors="k", linewidths=0.5, zorder=3)
            ax.scatter(g[0], g[1], color="k", marker="o", s=30, zorder=3)
        ax.set_title(name)
        ax.set_xlabel("z_0")
    axes[0].set_ylabel("z_1")
    return _save(fig, path)


def _save(fig, path: Path) -> str:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def render_run(run_dir, dump=None, fig_dir=None) -> tuple[list[str], dict]:
    run_dir = Path(run_dir)
    fig_dir = Path(fig_dir) if fig_dir else run_dir / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    _, rows = read_metrics_csv(run_dir / "metrics.csv")
    written = plot_metrics(rows, fig_dir) if rows else []
    summary = {"rows": len(rows)}
    if rows:
        last = rows[-1]
        for key in ("iteration", "source_accuracy", "target_accuracy", "phi_s_sgt", "phi_t_tgt", "phi_sgt_tgt"):
            summary[key] = repr(last[key])
    dump_path = Path(dump) if dump else run_dir / "features.csv"
    if dump_path.exists():
        written.append(plot_features(read_dump(dump_path), fig_dir / "features.png"))
    return written, summary
