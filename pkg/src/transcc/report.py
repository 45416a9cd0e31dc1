"""Report emission: training-curve and error-histogram figures rendered to
image files, plus delimited summary tables using the standard robust error
statistics columns (Mean, Median, Tri., Best25%, Worst25%).
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from transcc.evaluation import ErrorStats, EvaluationResult, aggregate

STAT_COLUMNS = ("Mean", "Median", "Tri.", "Best25%", "Worst25%")


def stat_values(stats: ErrorStats) -> tuple[float, ...]:
    return (stats.mean, stats.median, stats.trimean, stats.best25, stats.worst25)


# ---------------------------------------------------------------------------
# delimited inputs


def read_metrics(path) -> list[dict]:
    """Parse a training metrics log (metrics.csv) into row dicts."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        if row.get("kind") not in ("step", "epoch"):
            raise ValueError(f"{path}: not a metrics log (bad kind {row.get('kind')!r})")
    return rows


def read_per_image_table(path) -> list[dict]:
    """Parse a per-image error table (id, num_lights, mae, error)."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "mae" not in reader.fieldnames:
            raise ValueError(f"{path}: not a per-image table (no 'mae' column)")
        rows = []
        for raw in reader:
            rows.append(
                {
                    "id": raw.get("id", "?"),
                    "num_lights": int(raw["num_lights"]) if raw.get("num_lights") else 0,
                    "mae": float(raw["mae"]) if raw.get("mae") else None,
                    "error": raw.get("error", ""),
                }
            )
    return rows


# ---------------------------------------------------------------------------
# tables


def result_rows(result: EvaluationResult) -> list[tuple[str, ErrorStats]]:
    """Overall row plus one row per light count."""
    rows = [("All", result.overall)]
    rows.extend((f"K={k}", stats) for k, stats in result.breakdown.per_light.items())
    return rows


def table_rows_to_result(rows) -> EvaluationResult:
    """Rebuild aggregate statistics from a per-image table's scored rows."""
    from transcc.evaluation import PerLightBreakdown

    scored = [row for row in rows if row.get("mae") is not None]
    if not scored:
        raise ValueError("per-image table has no scored rows")
    by_k: dict[int, list[float]] = {}
    for row in scored:
        by_k.setdefault(int(row["num_lights"]), []).append(float(row["mae"]))
    return EvaluationResult(
        overall=aggregate([row["mae"] for row in scored]),
        breakdown=PerLightBreakdown({k: aggregate(v) for k, v in sorted(by_k.items())}),
        table=list(rows),
        failures=sum(1 for row in rows if row.get("mae") is None),
    )


def format_stats_table(rows: list[tuple[str, ErrorStats]]) -> str:
    """Fixed-width text table; one labeled row of the five statistics each."""
    label_width = max(5, *(len(label) for label, _ in rows))
    header = " ".join([" " * label_width] + [f"{c:>9}" for c in STAT_COLUMNS])
    lines = [header]
    for label, stats in rows:
        cells = " ".join(f"{v:9.4f}" for v in stat_values(stats))
        lines.append(f"{label:<{label_width}} {cells}")
    return "\n".join(lines)


def write_stats_csv(rows: list[tuple[str, ErrorStats]], path) -> None:
    """Delimited summary: unnamed leading label column, then exactly the five
    statistics columns."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + list(STAT_COLUMNS))
        for label, stats in rows:
            writer.writerow([label] + [repr(v) for v in stat_values(stats)])


def write_per_image_csv(table: list[dict], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "num_lights", "mae", "error"])
        for row in table:
            mae = row.get("mae")
            writer.writerow(
                [row.get("id", "?"), row.get("num_lights", 0), "" if mae is None else repr(mae), row.get("error", "")]
            )


def write_comparison_csv(named_results, path) -> None:
    """Side-by-side summary of several runs (e.g. full losses vs an ablation):
    rows are run/label pairs over the same five statistics columns."""
    rows = []
    for run_name, result in named_results:
        rows.extend((f"{run_name}/{label}", stats) for label, stats in result_rows(result))
    write_stats_csv(rows, path)


# ---------------------------------------------------------------------------
# figures


def training_curve_figure(metrics_rows, out_path) -> Path:
    """Per-step total loss and per-epoch validation MAE, rendered to a file."""
    steps = [row for row in metrics_rows if row["kind"] == "step"]
    epochs = [row for row in metrics_rows if row["kind"] == "epoch"]
    if not steps and not epochs:
        raise ValueError("nothing to plot: metrics log has no rows")
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(10, 4))
    if steps:
        ax_loss.plot([int(r["step"]) for r in steps], [float(r["total"]) for r in steps], lw=0.8)
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("total loss")
    ax_loss.set_title("training loss")
    if epochs:
        ax_val.plot(
            [int(r["epoch"]) for r in epochs],
            [float(r["val_mae"]) for r in epochs],
            marker="o",
            ms=3,
        )
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation MAE (deg)")
    ax_val.set_title("validation error")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def error_histogram_figure(maes, out_path) -> Path:
    """Histogram of per-image angular errors, rendered to a file."""
    maes = [float(v) for v in maes if v is not None]
    if not maes:
        raise ValueError("nothing to plot: no scored images")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(maes, bins=min(30, max(5, len(maes) // 3)), edgecolor="black", lw=0.5)
    ax.set_xlabel("per-image MAE (deg)")
    ax.set_ylabel("images")
    ax.set_title("angular error distribution")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
