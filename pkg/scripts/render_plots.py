#!/usr/bin/env python3
"""Render the CSV tables written by ``owlseg plot-data``.

Reads ``plots/summary.csv`` and ``plots/loss_curves.csv`` from an experiment
directory, prints them as text tables, and writes PNG figures next to them
when matplotlib is installed. The experiment pipeline itself never imports
matplotlib; this script is the only optional consumer.
"""

import argparse
import csv
import sys
from pathlib import Path


def read_rows(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def print_summary(rows: list[dict]) -> None:
    cols = ("report", "miou", "miou_old", "miou_novel", "auroc", "aupr")
    widths = {c: max(len(c), *(len(r[c]) for r in rows)) for c in cols}
    header = "  ".join(c.ljust(widths[c]) for c in cols)
    print(header)
    print("-" * len(header))
    for r in rows:
        print("  ".join(r[c].ljust(widths[c]) for c in cols))


def print_curves(rows: list[dict]) -> None:
    by_cmd: dict[str, list[float]] = {}
    for r in rows:
        by_cmd.setdefault(r["command"], []).append(float(r["loss"]))
    for cmd, losses in by_cmd.items():
        print(f"{cmd}: {len(losses)} epochs, "
              f"first {losses[0]:.4f}, last {losses[-1]:.4f}")


def render_png(summary: list[dict], curves: list[dict], out_dir: Path) -> bool:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False

    fig, ax = plt.subplots(figsize=(8, 4))
    names = [r["report"].removeprefix("report-") for r in summary]
    for key in ("miou_old", "miou_novel"):
        ax.plot(names, [float(r[key]) if r[key] else None for r in summary],
                marker="o", label=key)
    aurocs = [(n, float(r["auroc"])) for n, r in zip(names, summary) if r["auroc"]]
    if aurocs:
        ax.plot(*zip(*aurocs), marker="s", linestyle="--", label="auroc")
    ax.set_ylim(0.0, 1.05)
    ax.legend()
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(out_dir / "summary.png", dpi=120)
    plt.close(fig)

    by_cmd: dict[str, list[float]] = {}
    for r in curves:
        by_cmd.setdefault(r["command"], []).append(float(r["loss"]))
    fig, ax = plt.subplots(figsize=(8, 4))
    for cmd, losses in by_cmd.items():
        ax.plot(range(len(losses)), losses, label=cmd)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "loss_curves.png", dpi=120)
    plt.close(fig)
    return True


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("experiment_dir", type=Path,
                        help="directory written by the owlseg CLI")
    args = parser.parse_args()

    plots = args.experiment_dir / "plots"
    summary_path = plots / "summary.csv"
    curves_path = plots / "loss_curves.csv"
    if not summary_path.exists() or not curves_path.exists():
        print(f"no plot tables under {plots}; run `owlseg plot-data` first",
              file=sys.stderr)
        return 2

    summary = read_rows(summary_path)
    curves = read_rows(curves_path)
    print_summary(summary)
    print()
    print_curves(curves)
    if render_png(summary, curves, plots):
        print(f"\nwrote {plots / 'summary.png'} and {plots / 'loss_curves.png'}")
    else:
        print("\nmatplotlib not installed; skipped PNG output")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
