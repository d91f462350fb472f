from typing import Iterable

import pandas as pd

from app.models import ConvergenceRow

SUPPORTED_FORMATS: dict[str, str] = {
    "csv": ".csv",
    "markdown": ".md",
}

SUPPORTED_FORMATS_MESSAGE = "Unsupported table format. Use csv or markdown."

CSV_COLUMNS = ("h", "error_linf", "order")
MARKDOWN_HEADER = ("h", "Error", "Order")


def rows_frame(rows: Iterable[ConvergenceRow]) -> pd.DataFrame:
    frame = pd.DataFrame(
        [{"h": row.h, "error_linf": row.error_linf, "order": row.order} for row in rows],
        columns=list(CSV_COLUMNS),
    )
    formatted = pd.DataFrame(
        {
            "h": frame["h"].map(lambda value: f"{value:.3e}"),
            "error_linf": frame["error_linf"].map(lambda value: f"{value:.3e}"),
            "order": frame["order"].map(lambda value: "" if pd.isna(value) else f"{value:.2f}"),
        },
        columns=list(CSV_COLUMNS),
    )
    return formatted


def render_csv(rows: Iterable[ConvergenceRow]) -> str:
    return rows_frame(rows).to_csv(index=False, lineterminator="\n")


def render_markdown(rows: Iterable[ConvergenceRow]) -> str:
    frame = rows_frame(rows)
    lines = [
        "| " + " | ".join(MARKDOWN_HEADER) + " |",
        "|" + "|".join([" --- "] * len(MARKDOWN_HEADER)) + "|",
    ]
    for h, error, order in frame.itertuples(index=False):
        lines.append(f"| {h} | {error} | {order} |")
    return "\n".join(lines) + "\n"


def render(rows: Iterable[ConvergenceRow], table_format: str) -> str:
    rows = list(rows)
    if table_format == "csv":
        return render_csv(rows)
    if table_format == "markdown":
        return render_markdown(rows)
    raise ValueError(SUPPORTED_FORMATS_MESSAGE)
