#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Plots for the CSV outputs of moesim. Needs matplotlib and numpy.

  plot.py heatmap  PREFIX.similarity.csv  out.png
  plot.py steps    PREFIX.steps.csv       out.png
  plot.py curve    curve.csv [curve2.csv] out.png
  plot.py compare  PREFIX.csv             out.png
"""
import csv
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def heatmap(src, out):
    r = rows(src)
    n = max(int(x["t"]) for x in r) + 1
    m = np.zeros((n, n))
    for x in r:
        m[int(x["t"]), int(x["s"])] = float(x["value"])
    plt.imshow(m, cmap="viridis", vmin=min(0.5, m.min()), vmax=1.0, origin="lower")
    plt.colorbar(label="cosine similarity")
    plt.xlabel("step")
    plt.ylabel("step")


def steps(src, out):
    r = rows(src)
    t = [int(x["t"]) for x in r]
    fig, ax = plt.subplots()
    ax.plot(t, [float(x["unique"]) for x in r], label="unique experts")
    ax.set_xlabel("step")
    ax.set_ylabel("unique experts")
    if "drift" in r[0]:
        ax2 = ax.twinx()
        ax2.plot(t[1:], [float(x["drift"]) for x in r[1:]], color="tab:red", label="drift")
        ax2.set_ylabel("drift rate")


def curve(srcs, out):
    # analytic curves are per layer and count only the extra CPU time, so
    # totals are compared relative to each curve's own minimum
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    first = rows(srcs[0])
    tau = [int(x["tau"]) for x in first]
    for key in ("io_cost", "cpu_cost", "total"):
        left.plot(tau, [float(x[key]) for x in first], label=key)
    left.set_title(srcs[0])
    left.set_xlabel("refresh interval tau")
    left.legend(fontsize="small")
    for src in srcs:
        r = rows(src)
        total = np.array([float(x["total"]) for x in r])
        right.plot([int(x["tau"]) for x in r], total / total.min(), label=src)
        right.axvline(int(r[int(total.argmin())]["tau"]), linestyle=":", color="grey")
    right.set_xlabel("refresh interval tau")
    right.set_ylabel("total / minimum")
    right.legend(fontsize="small")


def compare(src, out):
    r = rows(src)
    labels = [f'{x["label"]}\nB={x["budget"]}' for x in r]
    plt.bar(range(len(r)), [float(x["speedup"]) for x in r])
    plt.xticks(range(len(r)), labels, fontsize="small")
    plt.ylabel("FFN-bound throughput vs baseline")


def main(argv):
    if len(argv) < 4:
        sys.exit(__doc__)
    kind, srcs, out = argv[1], argv[2:-1], argv[-1]
    if kind == "curve":
        curve(srcs, out)
    else:
        {"heatmap": heatmap, "steps": steps, "compare": compare}[kind](srcs[0], out)
    plt.tight_layout()
    plt.savefig(out, dpi=150)


if __name__ == "__main__":
    main(sys.argv)
