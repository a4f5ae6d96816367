"""Render experiment report CSVs into paper-style figures.

Consumes the delimited outputs of `deepc-sampling report`:

  boxplot_data.csv  -- columns plant, strategy, n_s, e_t (raw per-step errors)
  timing_table.csv  -- columns plant, strategy, n_s, p99_ms, max_ms

and produces per-(strategy, n_s) tracking-error boxplots plus a fixed-width
solve-time percentile table. Quartiles are computed with linear interpolation
(type 7); rendering recomputes nothing else.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

BOXPLOT_COLUMNS = ("plant", "strategy", "n_s", "e_t")
TIMING_COLUMNS = ("plant", "strategy", "n_s", "p99_ms", "max_ms")

_STRATEGY_COLORS = {
    "contextual": "#1f77b4",
    "random": "#ff7f0e",
    "full": "#2ca02c",
}


class ReportSchemaError(ValueError):
    """An input CSV does not match the report schema."""


def _load(path, required) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing report file: {path}")
    frame = pd.read_csv(path)
    if frame.empty:
        raise ReportSchemaError(f"{path.name} contains no rows")
    for column in required:
        if column not in frame.columns:
            raise ReportSchemaError(f"{path.name} is missing column {column!r}")
    return frame


def _ordered_groups(frame: pd.DataFrame):
    """(n_s, strategy) groups ordered by n_s ascending, then strategy name."""
    keys = sorted({(int(n), s) for n, s in zip(frame["n_s"], frame["strategy"])})
    return keys


def render_boxplots(boxplot_csv, out_path) -> Path:
    """One box per (strategy, n_s): median, quartiles (type 7) and whiskers."""
    frame = _load(boxplot_csv, BOXPLOT_COLUMNS)
    groups = _ordered_groups(frame)
    stats = []
    for n_s, strategy in groups:
        errors = frame.loc[(frame["n_s"] == n_s) & (frame["strategy"] == strategy),
                           "e_t"].to_numpy(dtype=float)
        q1, med, q3 = np.percentile(errors, [25, 50, 75])
        iqr = q3 - q1
        lo = errors[errors >= q1 - 1.5 * iqr].min()
        hi = errors[errors <= q3 + 1.5 * iqr].max()
        stats.append({
            "label": f"{strategy}\nn_s={n_s}",
            "med": med, "q1": q1, "q3": q3, "whislo": lo, "whishi": hi,
            "fliers": [],
            "_strategy": strategy,
        })

    width = max(6.0, 1.1 * len(stats) + 1.5)
    fig, ax = plt.subplots(figsize=(width, 4.2))
    artists = ax.bxp(stats, showfliers=False, patch_artist=True)
    for patch, item in zip(artists["boxes"], stats):
        patch.set_facecolor(_STRATEGY_COLORS.get(item["_strategy"], "#999999"))
        patch.set_alpha(0.6)
    for median in artists["medians"]:
        median.set_color("black")
    plant = str(frame["plant"].iloc[0])
    ax.set_ylabel("weighted tracking error")
    ax.set_title(f"{plant}: closed-loop tracking error by strategy and sample count")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_timing_table(timing_csv, out_path) -> Path:
    """Fixed-width per-step solve-time table: p99 and max (ms, 2 decimals).

    Rows are n_s values ascending; column pairs are strategies in name order,
    mirroring the per-strategy percentile layout of the experiment tables.
    """
    frame = _load(timing_csv, TIMING_COLUMNS)
    strategies = sorted(frame["strategy"].unique())
    n_s_values = sorted(int(v) for v in frame["n_s"].unique())
    header = ["n_s"]
    for strategy in strategies:
        header += [f"{strategy} p99 [ms]", f"{strategy} max [ms]"]
    rows = []
    for n_s in n_s_values:
        row = [str(n_s)]
        for strategy in strategies:
            match = frame[(frame["n_s"] == n_s) & (frame["strategy"] == strategy)]
            if len(match):
                row += [f"{match.iloc[0]['p99_ms']:.2f}", f"{match.iloc[0]['max_ms']:.2f}"]
            else:
                row += ["-", "-"]
        rows.append(row)
    widths = [max(len(header[j]), max(len(r[j]) for r in rows)) for j in range(len(header))]
    lines = [
        "  ".join(h.rjust(w) for h, w in zip(header, widths)),
        "  ".join("-" * w for w in widths),
    ]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in rows]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + "\n")
    return out_path


def render_all(runs_dir, out_dir) -> list:
    """Render both figures from a report directory; returns written paths."""
    runs_dir = Path(runs_dir)
    out_dir = Path(out_dir)
    written = [
        render_boxplots(runs_dir / "boxplot_data.csv", out_dir / "tracking_error_boxplots.png"),
        render_timing_table(runs_dir / "timing_table.csv", out_dir / "timing_table.txt"),
    ]
    return written
