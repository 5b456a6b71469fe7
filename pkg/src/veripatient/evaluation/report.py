"""Markdown and CSV tables for performance, agreement, and ablation results."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

from veripatient.evaluation.metrics import AblationColumn, AgreementRow, PerformanceMetrics
from veripatient.evaluation.stats import significance_stars

LAYOUTS = ("performance", "agreement", "ablation")

PERFORMANCE_HEADER = ("Model", "Size", "Type", "Clean", "Noisy", "ΔAcc", "ΔTurns")
AGREEMENT_HEADER = ("Dimension", "H1-H2", "LLM-H", "Metric")
ABLATION_HEADER = ("Metric", "No Ctrl", "Prompt", "Ours")
ABLATION_MODES = ("no_controller", "prompt_only", "hybrid")

MISSING = "n/a"


class LayoutError(ValueError):
    """The result bundle does not fit the requested layout."""


@dataclass(frozen=True)
class PerformanceRow:
    model: str
    metrics: PerformanceMetrics
    size: str = ""
    type: str = ""


@dataclass(frozen=True)
class Report:
    header: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]

    @property
    def markdown(self) -> str:
        lines = ["| " + " | ".join(self.header) + " |", "|" + "|".join("---" for _ in self.header) + "|"]
        lines += ["| " + " | ".join(row) + " |" for row in self.rows]
        return "\n".join(lines) + "\n"

    @property
    def csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header)
        writer.writerows(self.rows)
        return buf.getvalue()


def _signed(value: float, digits: int = 1) -> str:
    text = f"{value:+.{digits}f}"
    # -0.0 and +0.0 both read as zero change
    return text.replace("-", "+") if float(text) == 0 else text


def fmt_pct(value: float | None) -> str:
    return MISSING if value is None else f"{value:.1f}"


def fmt_2(value: float | None) -> str:
    return MISSING if value is None else f"{value:.2f}"


def _performance(rows: Sequence[PerformanceRow]) -> Report:
    out = []
    for row in rows:
        m = row.metrics
        if "clean" not in m.accuracy_pct or "noisy" not in m.accuracy_pct:
            raise LayoutError(f"{row.model}: delta columns need both clean and noisy outcomes")
        p = m.significance.p_two_tailed if m.significance else None
        out.append((
            row.model,
            row.size,
            row.type,
            fmt_pct(m.accuracy_pct["clean"]),
            fmt_pct(m.accuracy_pct["noisy"]),
            _signed(m.delta_acc) + significance_stars(p),
            _signed(m.delta_turns_pct) + "%",
        ))
    return Report(PERFORMANCE_HEADER, tuple(out))


def _agreement(rows: Sequence[AgreementRow]) -> Report:
    return Report(AGREEMENT_HEADER, tuple(
        (r.dimension, fmt_2(r.human_human.value), fmt_2(r.llm_human), r.metric) for r in rows
    ))


def _ablation(columns: Mapping[str, AblationColumn]) -> Report:
    unknown = set(columns) - set(ABLATION_MODES)
    if unknown:
        raise LayoutError(f"unknown ablation modes {sorted(unknown)}")
    if not columns:
        return Report(ABLATION_HEADER, ())
    cols = [columns.get(m) for m in ABLATION_MODES]

    def pct(col: AblationColumn | None, attr: str) -> str:
        value = getattr(col, attr) if col else None
        return MISSING if value is None else f"{value:.1f}%"

    return Report(ABLATION_HEADER, (
        ("Halluc. Rate", *(pct(c, "hallucination_rate_pct") for c in cols)),
        ("Consist. Rate", *(pct(c, "consistency_rate_pct") for c in cols)),
        ("Realism (1-5)", *(fmt_2(c.realism if c else None) for c in cols)),
    ))


def render_report(results: Any, layout: str) -> Report:
    """Render one results bundle as a table.

    Args:
        results: A sequence of :class:`PerformanceRow` (performance), a
            sequence of :class:`AgreementRow` (agreement), or a mapping of mode
            name to :class:`AblationColumn` (ablation).
        layout: One of ``performance``, ``agreement``, ``ablation``.

    Raises:
        LayoutError: Unknown layout, wrong bundle type, or a delta column
            without both conditions.
    """
    if layout not in LAYOUTS:
        raise LayoutError(f"unknown layout {layout!r}; choose from {', '.join(LAYOUTS)}")
    if layout == "ablation":
        if not isinstance(results, Mapping) or not all(isinstance(v, AblationColumn) for v in results.values()):
            raise LayoutError("ablation layout needs a mapping of mode to AblationColumn")
        return _ablation(results)
    expected = PerformanceRow if layout == "performance" else AgreementRow
    if isinstance(results, Mapping) or not all(isinstance(r, expected) for r in results):
        raise LayoutError(f"{layout} layout needs a sequence of {expected.__name__}")
    return _performance(results) if layout == "performance" else _agreement(results)
