#!/usr/bin/env python3
"""Multi-panel space-time heatmaps from a gridded prediction/field CSV.

Reads the documented CSV contract (columns x, y, t plus value columns such
as mean/sd/prob/value), selects a set of time slices, and renders them as a
grid of panels sharing one color scale. Pure reader: no computation beyond
pivoting values onto the grid.

Example:
    python3 heatmap_panels.py --in run/prediction.csv --value-col mean \\
        --times 1,2,3,4,5,6 --layout 2x3 --out panels.png
"""

from __future__ import annotations

import argparse
import csv
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


class VizError(Exception):
    pass


def read_columns(path: str) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    cols = {h: np.array([float(r[i]) for r in rows]) for i, h in enumerate(header)}
    return cols


def pivot_slice(cols: dict, value_col: str, t: float):
    for need in ("x", "y", "t", value_col):
        if need not in cols:
            raise VizError(f"missing column {need!r} in input CSV")
    sel = np.isclose(cols["t"], t)
    if not sel.any():
        raise VizError(f"time index {t} not present in input")
    xs = np.unique(cols["x"][sel])
    ys = np.unique(cols["y"][sel])
    grid = np.full((len(ys), len(xs)), np.nan)
    xi = np.searchsorted(xs, cols["x"][sel])
    yi = np.searchsorted(ys, cols["y"][sel])
    grid[yi, xi] = cols[value_col][sel]
    return xs, ys, grid


def render(args) -> None:
    cols = read_columns(args.inp)
    times = [float(s) for s in args.times.split(",")]
    rows, cols_n = (int(v) for v in args.layout.split("x"))
    if rows * cols_n < len(times):
        raise VizError(f"layout {args.layout} too small for {len(times)} panels")
    slices = [pivot_slice(cols, args.value_col, t) for t in times]
    vmin = args.vmin if args.vmin is not None else min(np.nanmin(g) for _, _, g in slices)
    vmax = args.vmax if args.vmax is not None else max(np.nanmax(g) for _, _, g in slices)
    if vmin == vmax:  # constant field: widen so the colormap is defined
        vmin, vmax = vmin - 0.5, vmax + 0.5
    fig, axes = plt.subplots(
        rows, cols_n, figsize=(3.2 * cols_n, 2.8 * rows), squeeze=False
    )
    im = None
    for k, (t, (xs, ys, grid)) in enumerate(zip(times, slices)):
        ax = axes[k // cols_n][k % cols_n]
        im = ax.imshow(
            grid, origin="lower", cmap=args.cmap, vmin=vmin, vmax=vmax,
            extent=(xs.min(), xs.max(), ys.min(), ys.max()), aspect="auto",
        )
        ax.set_title(f"t = {t:g}", fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    for k in range(len(times), rows * cols_n):
        axes[k // cols_n][k % cols_n].axis("off")
    fig.colorbar(im, ax=[a for row in axes for a in row], shrink=0.85)
    fig.savefig(args.out, dpi=args.dpi, metadata={"Software": None})
    plt.close(fig)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--in", dest="inp", required=True, help="prediction/field CSV")
    p.add_argument("--value-col", default="mean")
    p.add_argument("--times", required=True, help="comma-separated time values")
    p.add_argument("--layout", default="1x1", help="RxC panel grid")
    p.add_argument("--vmin", type=float)
    p.add_argument("--vmax", type=float)
    p.add_argument("--cmap", default="viridis")
    p.add_argument("--dpi", type=int, default=110)
    p.add_argument("--out", required=True)
    args = p.parse_args(argv)
    try:
        render(args)
    except VizError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
