"""Render portfolio allocations and return summaries as text or CSV tables.

Text tables show weights to four decimals for reading; CSV carries full
float precision so a parsed table reproduces the numbers exactly.
"""

from __future__ import annotations

import csv
import io

from .model import PortfolioAllocation, ReturnSummary

PORTFOLIO_HEADER = ("Series Name", "Token ID", "Weight")
RETURNS_HEADER = ("Series Name", "Token ID", "Total Return", "Intervals")


def _portfolio_rows(alloc: PortfolioAllocation) -> list[tuple[str, str, float]]:
    rows = list(zip(alloc.assets, alloc.weights))
    rows.sort(key=lambda aw: -aw[1])  # stable: ties keep asset order
    return [(a.series_name, a.token, w) for a, w in rows]


def _render(header: tuple[str, ...], rows: list[tuple], fmt: str) -> str:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([str(c) for c in row])
        return buf.getvalue()
    if fmt == "text":
        cells = [tuple(str(c) for c in header)] + [tuple(_text_cell(c) for c in row) for row in rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
        lines = [" | ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}; expected 'text' or 'csv'")


def _text_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def render_portfolio_table(alloc: PortfolioAllocation, fmt: str = "text") -> str:
    """One table for one allocation, rows in descending weight order."""
    return _render(PORTFOLIO_HEADER, _portfolio_rows(alloc), fmt)


def render_portfolio_report(allocs: list[PortfolioAllocation], fmt: str = "text") -> str:
    """A single table covering several allocations (one per series), with
    each allocation's rows in descending weight order."""
    rows: list[tuple[str, str, float]] = []
    for alloc in allocs:
        rows.extend(_portfolio_rows(alloc))
    return _render(PORTFOLIO_HEADER, rows, fmt)


def render_returns_report(summaries: list[ReturnSummary], fmt: str = "text") -> str:
    """Return summaries sorted by total return, best first."""
    ordered = sorted(summaries, key=lambda s: -s.total_return)
    rows = [
        (s.token.series_name, s.token.token, s.total_return, s.interval_count) for s in ordered
    ]
    return _render(RETURNS_HEADER, rows, fmt)
