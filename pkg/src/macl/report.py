"""Score-report serialization, side-by-side comparisons, and figures.

`score` emits one JSON report (plus an optional per-example CSV); `report`
lines several of those up as a metric-by-run CSV and text table, writes
per-run histogram CSVs, and can render the histograms and a PoD/KUD
comparison as PNG files next to the delimited output.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Sequence

from .errors import ValidationError
from .ioutil import atomic_write_text, write_json
from .metrics import MetricsReport

_COMPARISON_METRICS = (
    ("pod", "PoD"),
    ("kud", "KUD"),
    ("plcs_mean", "PLCS"),
    ("dup_16", "Dup-16"),
    ("dup_32", "Dup-32"),
    ("mkp_1", "mKP-1"),
    ("mkp_2", "mKP-2"),
)


def per_example_csv(report: MetricsReport) -> str:
    lines = ["example_id,plcs_reference,kp1_reference,plcs_generated,kp1_generated"]
    for row in report.per_example:

        def fmt(v: float | None) -> str:
            return "" if v is None else f"{v:.6f}"

        lines.append(
            f"{row.example_id},{fmt(row.plcs_reference)},{fmt(row.kp1_reference)},"
            f"{fmt(row.plcs_generated)},{fmt(row.kp1_generated)}"
        )
    return "\n".join(lines) + "\n"


def write_score_report(
    report: MetricsReport, json_path: str | Path, csv_path: str | Path | None = None
) -> None:
    write_json(json_path, report.as_dict())
    if csv_path is not None:
        atomic_write_text(csv_path, per_example_csv(report))


def load_score_report(path: str | Path) -> dict[str, Any]:
    with Path(path).open("r", encoding="utf-8") as fh:
        data = json.load(fh)
    for key in ("generated", "reference", "kud", "histograms"):
        if key not in data:
            raise ValidationError(f"{path}: not a score report (missing {key!r})")
    return data


def _metric_value(report: dict[str, Any], key: str) -> float | None:
    if key == "kud":
        return report["kud"]
    return report["generated"].get(key)


def comparison_rows(reports: dict[str, dict[str, Any]]) -> list[list[str]]:
    labels = list(reports)
    rows = [["metric"] + labels + ["reference"]]
    first = next(iter(reports.values()))
    for key, name in _COMPARISON_METRICS:
        row = [name]
        for label in labels:
            v = _metric_value(reports[label], key)
            row.append("" if v is None else f"{v:.4f}")
        if key == "kud":
            row.append("0.0000")
        else:
            ref = first["reference"].get(key)
            row.append("" if ref is None else f"{ref:.4f}")
        rows.append(row)
    return rows


def comparison_csv(reports: dict[str, dict[str, Any]]) -> str:
    return "\n".join(",".join(cell for cell in row) for row in comparison_rows(reports)) + "\n"


def comparison_table(reports: dict[str, dict[str, Any]]) -> str:
    rows = comparison_rows(reports)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    out = []
    for r, row in enumerate(rows):
        out.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if r == 0:
            out.append("  ".join("-" * widths[i] for i in range(len(widths))))
    return "\n".join(out) + "\n"


def histogram_csv(report: dict[str, Any]) -> str:
    hists = report["histograms"]
    names = [n for n in ("reference_kp1", "generated_kp1", "reference_kp2", "generated_kp2") if n in hists]
    edges = hists[names[0]]["bin_edges"]
    lines = ["bin_start,bin_end," + ",".join(names)]
    for b in range(len(edges) - 1):
        masses = ",".join(f"{hists[n]['masses'][b]:.6f}" for n in names)
        lines.append(f"{edges[b]:.2f},{edges[b + 1]:.2f},{masses}")
    return "\n".join(lines) + "\n"


def write_comparison(
    reports: dict[str, dict[str, Any]], out_dir: str | Path, plots: bool = False
) -> list[Path]:
    """Write comparison.csv and per-run histogram CSVs; PNGs when asked."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    path = out_dir / "comparison.csv"
    atomic_write_text(path, comparison_csv(reports))
    written.append(path)
    for label, report in reports.items():
        path = out_dir / f"histograms_{label}.csv"
        atomic_write_text(path, histogram_csv(report))
        written.append(path)
    if plots:
        written.extend(render_figures(reports, out_dir))
    return written


def render_figures(reports: dict[str, dict[str, Any]], out_dir: str | Path) -> list[Path]:
    """KP-distribution bars per run plus a PoD/KUD summary figure."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    written: list[Path] = []
    for label, report in reports.items():
        hists = report["histograms"]
        orders = [n for n in (1, 2) if f"generated_kp{n}" in hists]
        fig, axes = plt.subplots(1, len(orders), figsize=(5.5 * len(orders), 3.6), squeeze=False)
        for ax, n in zip(axes[0], orders):
            ref = hists[f"reference_kp{n}"]
            gen = hists[f"generated_kp{n}"]
            edges = ref["bin_edges"]
            centers = [(edges[i] + edges[i + 1]) / 2 for i in range(len(edges) - 1)]
            width = (edges[1] - edges[0]) * 0.42
            ax.bar([c - width / 2 for c in centers], ref["masses"], width=width,
                   label="reference", color="#c44e52")
            ax.bar([c + width / 2 for c in centers], gen["masses"], width=width,
                   label="generated", color="#4c72b0")
            ax.set_xlabel(f"KP-{n}")
            ax.set_ylabel("probability mass")
            ax.set_title(f"{label}: knowledge precision ({n}-gram)")
            ax.legend()
        fig.tight_layout()
        path = out_dir / f"kp_histogram_{label}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    labels = list(reports)
    fig, axes = plt.subplots(1, 2, figsize=(8.5, 3.4))
    for ax, key, title in ((axes[0], "pod", "PoD"), (axes[1], "kud", "KUD")):
        values = [_metric_value(reports[l], key) or 0.0 for l in labels]
        ax.bar(labels, values, color="#55a868")
        ax.set_title(title)
        ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    path = out_dir / "comparison.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    return written
