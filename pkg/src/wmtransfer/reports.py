"""Tables, CSV and figures for coverage, transfer, degradation and ablation reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .trainer import CoverageTable  # noqa: E402

KINDS = ("coverage", "transfer", "degradation", "ablation")


@dataclass
class Report:
    kind: str
    columns: list[str]
    rows: list[list]
    provenance: dict = field(default_factory=dict)
    histograms: list[list] | None = None  # coverage only

    def text_table(self) -> str:
        cells = [self.columns] + [[_cell(v) for v in row] for row in self.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.columns))]
        lines = ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def csv_text(self) -> str:
        return _csv(self.columns, self.rows, self.provenance)

    def histogram_csv(self) -> str:
        if self.histograms is None:
            raise ValueError("only coverage reports carry histograms")
        cols = ["dim", "bin_lo", "bin_hi", "expert_count", "behavioral_count"]
        return _csv(cols, self.histograms, self.provenance)

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name, text in (("table.txt", self.text_table()), (f"{self.kind}.csv", self.csv_text())):
            (out / name).write_text(text, encoding="utf-8")
            written.append(out / name)
        if self.histograms is not None:
            (out / "histograms.csv").write_text(self.histogram_csv(), encoding="utf-8")
            written.append(out / "histograms.csv")
        fig_path = out / f"{self.kind}.png"
        render_figure(self, fig_path)
        written.append(fig_path)
        return written


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _csv(columns: Sequence[str], rows, provenance: dict) -> str:
    buf = io.StringIO()
    for key in sorted(provenance):
        buf.write(f"# {key}: {json.dumps(provenance[key], sort_keys=True)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------- builders


def coverage(table: CoverageTable, dim_names: Sequence[str] | None = None,
             provenance: dict | None = None) -> Report:
    n_dims = table.expert_counts.shape[0]
    names = list(dim_names) if dim_names is not None else [f"s{d}" for d in range(n_dims)]
    rows = []
    for d in range(n_dims):
        rows.append([names[d], int(table.expert_occupied[d]), int(table.behavioral_occupied[d]),
                     float(table.ratio[d])])
    edges = np.linspace(-1.0, 1.0, table.bins_per_dim + 1)
    hist = []
    for d in range(n_dims):
        for b in range(table.bins_per_dim):
            hist.append([names[d], float(edges[b]), float(edges[b + 1]),
                         int(table.expert_counts[d, b]), int(table.behavioral_counts[d, b])])
    return Report("coverage", ["dim", "expert_cells", "behavioral_cells", "ratio"], rows,
                  provenance or {}, hist)


def transfer(results: Sequence[tuple[str, float]], provenance: dict | None = None) -> Report:
    """One row per method: success rate in the target domain."""
    return Report("transfer", ["method", "success_rate"],
                  [[name, float(rate)] for name, rate in results], provenance or {})


def degradation(results: Sequence[tuple[str, float, float]], provenance: dict | None = None) -> Report:
    """``(method, original, finetuned)`` rows; the drop column is original minus finetuned."""
    rows = [[name, float(o), float(f), float(o) - float(f)] for name, o, f in results]
    return Report("degradation", ["method", "original", "finetuned", "drop"], rows, provenance or {})


def ablation(results: Sequence[tuple[int, float]], provenance: dict | None = None) -> Report:
    """Success rate per number of finetuning demos."""
    rows = [[int(n), float(r)] for n, r in sorted(results)]
    return Report("ablation", ["demos", "success_rate"], rows, provenance or {})


# ----------------------------------------------------------------- figures


def render_figure(report: Report, path) -> None:
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    if report.kind == "coverage":
        names = [r[0] for r in report.rows]
        x = np.arange(len(names))
        ax.bar(x - 0.2, [r[1] for r in report.rows], 0.4, label="expert")
        ax.bar(x + 0.2, [r[2] for r in report.rows], 0.4, label="behavioral")
        ax.set_xticks(x, names)
        ax.set_ylabel("occupied cells")
        ax.legend(frameon=False)
    elif report.kind == "transfer":
        names = [r[0] for r in report.rows]
        ax.bar(np.arange(len(names)), [r[1] for r in report.rows])
        ax.set_xticks(np.arange(len(names)), names)
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("success rate")
    elif report.kind == "degradation":
        names = [r[0] for r in report.rows]
        x = np.arange(len(names))
        ax.bar(x - 0.2, [r[1] for r in report.rows], 0.4, label="original")
        ax.bar(x + 0.2, [r[2] for r in report.rows], 0.4, label="finetuned")
        ax.set_xticks(x, names)
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("success rate")
        ax.legend(frameon=False)
    elif report.kind == "ablation":
        ax.plot([r[0] for r in report.rows], [r[1] for r in report.rows], marker="o")
        ax.set_xscale("log")
        ax.set_xlabel("finetuning demos")
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("success rate")
    else:
        plt.close(fig)
        raise ValueError(f"unknown report kind {report.kind!r}")
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
