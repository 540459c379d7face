"""Figures written next to the CSV outputs of the command-line tool."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _read_csv(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {name: [] for name in header}
    for row in body:
        for name, val in zip(header, row):
            cols[name].append(val)
    return cols


def _floats(values):
    out = []
    for v in values:
        try:
            out.append(float(v))
        except ValueError:
            out.append(np.nan)
    return np.array(out)


def plot_history(csv_path, png_path) -> Path:
    cols = _read_csv(Path(csv_path))
    it = _floats(cols["iter"])
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.4))
    ax[0].semilogy(it, np.abs(_floats(cols["gap"])) + 1e-300, "o-")
    ax[0].set_xlabel("iteration")
    ax[0].set_ylabel("density gap")
    ax[1].plot(it, _floats(cols["residual_outside_omega"]), "s-", color="C3")
    ax[1].set_xlabel("iteration")
    ax[1].set_ylabel("mass outside omega at T")
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return Path(png_path)


def plot_trajectories(csv_paths, png_path) -> Path:
    fig, ax = plt.subplots(figsize=(4.6, 4.6))
    for k, p in enumerate(csv_paths):
        cols = _read_csv(Path(p))
        x1, x2 = _floats(cols["x1"]), _floats(cols["x2"])
        # break the polyline where the torus wraps
        jump = np.flatnonzero((np.abs(np.diff(x1)) > 0.5) | (np.abs(np.diff(x2)) > 0.5)) + 1
        for seg1, seg2 in zip(np.split(x1, jump), np.split(x2, jump)):
            ax.plot(seg1, seg2, lw=0.8, color=f"C{k % 10}")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_aspect("equal")
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return Path(png_path)


def plot_grid(grid: np.ndarray, png_path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4.6, 4))
    im = ax.imshow(np.asarray(grid).T, origin="lower", extent=(0, 1, 0, 1), cmap="viridis")
    fig.colorbar(im, ax=ax)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return Path(png_path)


def plot_checks(csv_path, png_path) -> Path:
    """Measured value over tolerance for each check (below 1 passes)."""
    cols = _read_csv(Path(csv_path))
    names = cols["check"]
    measured = np.abs(_floats(cols["measured"]))
    tol = np.abs(_floats(cols["tolerance"]))
    ratio = np.where(tol > 0, measured / np.where(tol > 0, tol, 1.0), np.nan)
    fig, ax = plt.subplots(figsize=(7, 0.35 * len(names) + 1.2))
    colors = ["C2" if p == "True" else "C3" for p in cols["pass"]]
    ax.barh(range(len(names)), np.nan_to_num(ratio, nan=0.0) + 1e-300, color=colors)
    ax.set_xscale("log")
    ax.axvline(1.0, color="k", lw=0.8)
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=8)
    ax.set_xlabel("measured / tolerance")
    fig.tight_layout()
    fig.savefig(png_path, dpi=110)
    plt.close(fig)
    return Path(png_path)


def render_directory(out_dir) -> list[Path]:
    """Render every figure whose source CSV is present in ``out_dir``."""
    out = Path(out_dir)
    made = []
    for hist in sorted(out.glob("*history*.csv")):
        made.append(plot_history(hist, hist.with_suffix(".png")))
    traces = sorted(out.glob("trace_[0-9]*.csv"))
    if traces:
        made.append(plot_trajectories(traces, out / "traces.png"))
    for checks in sorted(out.glob("*checks.csv")):
        made.append(plot_checks(checks, checks.with_suffix(".png")))
    for grid_csv in sorted(out.glob("density_*.csv")):
        made.append(plot_grid(np.loadtxt(grid_csv, delimiter=","), grid_csv.with_suffix(".png"), grid_csv.stem))
    return made
