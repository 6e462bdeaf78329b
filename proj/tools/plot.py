#!/usr/bin/env python3
"""Render figures from mrfuse CSV outputs.

The binary only emits CSV; this script turns each file into a PNG next to it
(or under --out-dir). The CSV kind is detected from its header:

  epoch,split,loss,...        training metrics  -> loss + dice curves
  split,n_iter,...            convergence study -> dice vs iterations
  model,j,seed,...            capacity study    -> paired OOD comparison
  sample,dice_0,...           evaluation        -> per-sample dice bars
"""

import argparse
import pathlib
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd


def dice_cols(df):
    return [c for c in df.columns if c.startswith("dice_") and c != "dice_mean"]


def plot_metrics(df, ax_loss, ax_dice):
    for split, g in df.groupby("split"):
        ax_loss.plot(g["epoch"], g["loss"], marker=".", label=split)
        ax_dice.plot(g["epoch"], g["dice_mean"], marker=".", label=split)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross-entropy")
    ax_loss.legend()
    ax_dice.set_xlabel("epoch")
    ax_dice.set_ylabel("mean dice")
    ax_dice.set_ylim(0, 1)
    ax_dice.legend()


def plot_convergence(df, ax):
    for split, g in df.groupby("split"):
        ax.plot(g["n_iter"], g["dice_mean"], marker=".", label=str(split))
    ax.set_xlabel("mean-field iterations")
    ax.set_ylabel("mean dice")
    ax.legend()


def plot_capacity(df, ax):
    js = sorted(df["j"].unique())
    width = 0.35
    for i, model in enumerate(["unet", "mrf_unet"]):
        sub = df[df["model"] == model]
        means = [sub[sub["j"] == j]["dice_out"].mean() for j in js]
        xs = [k + (i - 0.5) * width for k in range(len(js))]
        ax.bar(xs, means, width=width, label=model)
        for k, j in enumerate(js):
            pts = sub[sub["j"] == j]["dice_out"]
            ax.plot([xs[k]] * len(pts), pts, "k.", ms=4)
    ax.set_xticks(range(len(js)), [f"j={j}" for j in js])
    ax.set_ylabel("out-of-distribution mean dice")
    ax.legend()


def plot_eval(df, ax):
    ax.bar(df["sample"], df["dice_mean"])
    ax.set_ylabel("mean dice")
    ax.set_ylim(0, 1)
    ax.tick_params(axis="x", rotation=90)


def render(csv_path, out_dir):
    df = pd.read_csv(csv_path)
    cols = list(df.columns)
    if cols[:3] == ["epoch", "split", "loss"]:
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
        plot_metrics(df, ax1, ax2)
    elif cols[:2] == ["split", "n_iter"]:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        plot_convergence(df, ax)
    elif cols[:3] == ["model", "j", "seed"]:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        plot_capacity(df, ax)
    elif cols[0] == "sample":
        fig, ax = plt.subplots(figsize=(max(4, 0.3 * len(df)), 3.5))
        plot_eval(df, ax)
    else:
        raise SystemExit(f"{csv_path}: unrecognized column layout {cols[:4]}")
    fig.suptitle(csv_path.name)
    fig.tight_layout()
    out = (out_dir or csv_path.parent) / (csv_path.stem + ".png")
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("csv", nargs="+", type=pathlib.Path)
    ap.add_argument("--out-dir", type=pathlib.Path, default=None)
    args = ap.parse_args()
    if args.out_dir:
        args.out_dir.mkdir(parents=True, exist_ok=True)
    for path in args.csv:
        print(render(path, args.out_dir))
    return 0


if __name__ == "__main__":
    sys.exit(main())
