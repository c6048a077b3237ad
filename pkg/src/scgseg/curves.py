"""Dice and loss curves from a metrics log."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ValidationError  # noqa: E402
from .training import read_metrics  # noqa: E402

CURVE_METRICS = {"dice": "Dice score", "loss": "Total loss"}


def emit_curves(log_path, output_dir) -> list[Path]:
    """One PNG per (metric, split) plus a CSV sidecar holding the plotted points.

    ``curves.json`` in the output directory records the axis limits of every
    plot.
    """
    rows = read_metrics(log_path)
    if not rows:
        raise ValidationError(f"metrics log {log_path} has no records")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    max_step = max(r["step"] for r in rows)
    splits = sorted({r["split"] for r in rows}, key=lambda s: (s != "train", s))
    written, meta = [], {}
    for metric, label in CURVE_METRICS.items():
        key = "total" if metric == "loss" else metric
        for split in splits:
            pts = [(r["step"], r[key]) for r in rows if r["split"] == split]
            name = f"{metric}_{split}"
            fig, ax = plt.subplots(figsize=(6, 4))
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="." if len(pts) < 50 else None)
            ax.set_xlim(0, max(max_step, 1))
            ax.set_xlabel("Training step")
            ax.set_ylabel(label)
            ax.set_title(f"{label} ({split})")
            ax.grid(alpha=0.3)
            fig.tight_layout()
            png = out / f"{name}.png"
            fig.savefig(png, dpi=100)
            plt.close(fig)
            with open(out / f"{name}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh)
                w.writerow(["step", key])
                w.writerows(pts)
            meta[name] = {"png": png.name, "data": f"{name}.csv", "xlim": list(ax.get_xlim())}
            written.append(png)
    (out / "curves.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return written
