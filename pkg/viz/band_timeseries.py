#!/usr/bin/env python3
"""Observed-vs-predicted time series for one coarse cell, with min-max band.

Black steps: the coarse observations of the selected cell, each covering its
whole aggregation window. Line: the mean of the fine-resolution predictions
inside the cell at each fine time. Shaded band: their min-max envelope.
Inputs are the documented contracts: an observation dataset directory
(metadata.json + observations.csv) and a prediction.csv; the only
computation is grouping with mean/min/max, checked for band containment
before drawing.

Example:
    python3 band_timeseries.py --obs aggdir --pred run/prediction.csv \\
        --cell-x 3 --cell-y 5 --out delhi.png
"""

from __future__ import annotations

import argparse
import csv
import json
import os
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
    return {h: np.array([float(r[i]) for r in rows]) for i, h in enumerate(header)}


def cell_series(obs_dir: str, pred_csv: str, cx: int, cy: int):
    with open(os.path.join(obs_dir, "metadata.json")) as fh:
        meta = json.load(fh)
    fine = meta["fine_lattice"]
    s_f, t_f = meta["factors"]["s_f"], meta["factors"]["t_f"]
    x_lo = fine["x0"] + cx * s_f * fine["dx"]
    x_hi = fine["x0"] + (cx + 1) * s_f * fine["dx"]
    y_lo = fine["y0"] + cy * s_f * fine["dy"]
    y_hi = fine["y0"] + (cy + 1) * s_f * fine["dy"]

    pred = read_columns(pred_csv)
    col = "mean" if "mean" in pred else "value"
    if col not in pred:
        raise VizError("prediction CSV lacks a 'mean' or 'value' column")
    inside = (
        (pred["x"] > x_lo) & (pred["x"] < x_hi)
        & (pred["y"] > y_lo) & (pred["y"] < y_hi)
    )
    if not inside.any():
        raise VizError(f"cell ({cx},{cy}) contains no fine prediction nodes")
    times = np.unique(pred["t"][inside])
    mean, lo, hi = [], [], []
    for t in times:
        v = pred[col][inside & (pred["t"] == t)]
        mean.append(v.mean())
        lo.append(v.min())
        hi.append(v.max())
    mean, lo, hi = np.array(mean), np.array(lo), np.array(hi)
    if not (np.all(lo <= mean + 1e-12) and np.all(mean <= hi + 1e-12)):
        raise VizError("band containment violated: min <= mean <= max fails")

    obs_rows = read_columns(os.path.join(obs_dir, "observations.csv"))
    sel = (obs_rows["cell_x"] == cx) & (obs_rows["cell_y"] == cy)
    if not sel.any():
        raise VizError(f"cell ({cx},{cy}) has no observations")
    win = obs_rows["cell_t"][sel].astype(int)
    val = obs_rows["value"][sel]
    order = np.argsort(win)
    # window ct covers fine times [t0 + ct*t_f*dt, t0 + (ct+1)*t_f*dt)
    t0, dt = fine["t0"], fine["dt"]
    steps = [
        (t0 + w * t_f * dt - 0.5 * dt, t0 + ((w + 1) * t_f - 1) * dt + 0.5 * dt, v)
        for w, v in zip(win[order], val[order])
    ]
    return times, mean, lo, hi, steps


def render(args) -> None:
    times, mean, lo, hi, steps = cell_series(
        args.obs, args.pred, args.cell_x, args.cell_y
    )
    fig, ax = plt.subplots(figsize=(9, 3.2))
    ax.fill_between(times, lo, hi, color="tab:red", alpha=0.25, linewidth=0,
                    label="min-max of fine cells")
    ax.plot(times, mean, color="tab:red", lw=1.5, label="fine-cell mean")
    first = True
    for (a, b, v) in steps:
        ax.hlines(v, a, b, color="black", lw=1.8,
                  label="coarse observation" if first else None)
        first = False
    ax.set_xlabel("time")
    ax.set_ylabel("value")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(args.out, dpi=args.dpi, metadata={"Software": None})
    plt.close(fig)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--obs", required=True, help="observation dataset directory")
    p.add_argument("--pred", required=True, help="prediction.csv path")
    p.add_argument("--cell-x", type=int, required=True)
    p.add_argument("--cell-y", type=int, required=True)
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
