"""Diagnostic performance, truth preservation, and agreement by dimension."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Iterable, Mapping, Sequence

from veripatient.evaluation.judge import JudgeScores
from veripatient.evaluation.stats import (
    AgreementStats,
    StatisticsError,
    TestStats,
    cohens_kappa,
    paired_t_test,
    pearson_r,
)

if TYPE_CHECKING:
    from veripatient.runner import Transcript

CONDITIONS = ("clean", "noisy")


@dataclass(frozen=True)
class Outcome:
    case_id: str
    doctor_id: str
    condition: str
    correct: bool
    turns: int

    def __post_init__(self) -> None:
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be clean or noisy, got {self.condition!r}")
        if self.turns < 1:
            raise ValueError("an outcome needs at least one turn")


def outcomes_from_transcripts(transcripts: Iterable[Transcript]) -> list[Outcome]:
    """One outcome per finished transcript. Error transcripts are left out."""
    return [
        Outcome(t.case_id, t.doctor_id, t.condition, t.correct, t.n_turns)
        for t in transcripts
        if t.terminated != "error" and t.n_turns >= 1
    ]


@dataclass(frozen=True)
class PerformanceMetrics:
    accuracy_pct: Mapping[str, float]
    avg_turns: Mapping[str, float]
    n: Mapping[str, int]
    significance: TestStats | None = None

    def _need_both(self) -> None:
        missing = [c for c in CONDITIONS if c not in self.accuracy_pct]
        if missing:
            raise ValueError(f"delta needs both conditions; missing {missing}")

    @property
    def delta_acc(self) -> float:
        """Noisy minus clean accuracy, in percentage points."""
        self._need_both()
        return self.accuracy_pct["noisy"] - self.accuracy_pct["clean"]

    @property
    def delta_turns_pct(self) -> float:
        """Relative change in average turns from clean to noisy, in percent."""
        self._need_both()
        clean = self.avg_turns["clean"]
        return (self.avg_turns["noisy"] - clean) / clean * 100.0


def performance_metrics(outcomes: Sequence[Outcome]) -> PerformanceMetrics:
    """Per-condition top-1 accuracy and average turns.

    When both conditions are present, a paired t-test on per-case
    correctness (matched on case and doctor) is attached if it is defined.
    """
    if not outcomes:
        raise ValueError("no outcomes to score")
    by_condition: dict[str, list[Outcome]] = defaultdict(list)
    for o in outcomes:
        by_condition[o.condition].append(o)
    accuracy = {c: 100.0 * sum(o.correct for o in os) / len(os) for c, os in by_condition.items()}
    turns = {c: math.fsum(o.turns for o in os) / len(os) for c, os in by_condition.items()}
    counts = {c: len(os) for c, os in by_condition.items()}

    significance = None
    if all(c in by_condition for c in CONDITIONS):
        clean = {(o.case_id, o.doctor_id): float(o.correct) for o in by_condition["clean"]}
        noisy = {(o.case_id, o.doctor_id): float(o.correct) for o in by_condition["noisy"]}
        keys = sorted(clean.keys() & noisy.keys())
        try:
            significance = paired_t_test([clean[k] for k in keys], [noisy[k] for k in keys])
        except StatisticsError:
            significance = None
    return PerformanceMetrics(dict(sorted(accuracy.items())), dict(sorted(turns.items())),
                              dict(sorted(counts.items())), significance)


@dataclass(frozen=True)
class TruthRates:
    hallucination_rate_pct: float
    consistency_rate_pct: float
    n: int


def truth_preservation_rates(judgments: Sequence[JudgeScores]) -> TruthRates:
    """Hallucination rate from item A1; consistency rate from A1-A3 all negative."""
    if not judgments:
        raise ValueError("no judgments to score")
    scored = [j for j in judgments if j.a1 is not None and j.a2 is not None and j.a3 is not None]
    if len(scored) != len(judgments):
        raise ValueError("every judgment needs a1, a2 and a3 answered")
    n = len(scored)
    hallucinated = sum(1 for j in scored if j.a1)
    consistent = sum(1 for j in scored if j.truth_preserved)
    return TruthRates(100.0 * hallucinated / n, 100.0 * consistent / n, n)


def realism_score(judgments: Iterable[JudgeScores]) -> float | None:
    """Mean of the B1-B4 averages over judgments that carry them."""
    values = [_mean_items(j, ("b1", "b2", "b3", "b4")) for j in judgments]
    values = [v for v in values if v is not None]
    return math.fsum(values) / len(values) if values else None


def _mean_items(j: JudgeScores, items: Sequence[str]) -> float | None:
    vals = [getattr(j, i) for i in items]
    if any(v is None for v in vals):
        return None
    return math.fsum(vals) / len(vals)


# --- agreement by reported dimension --------------------------------------------

@dataclass(frozen=True)
class Dimension:
    """How a reported dimension is built from questionnaire items.

    Categorical dimensions pool every listed item across units and use
    kappa; continuous ones average the items per unit and use Pearson r.
    """

    name: str
    items: tuple[str, ...]
    categorical: bool


DEFAULT_DIMENSIONS: tuple[Dimension, ...] = (
    Dimension("Truth Preservation", ("a1", "a2", "a3"), categorical=True),
    Dimension("Realism Assessment", ("b1", "b2", "b3", "b4"), categorical=False),
    Dimension("Clinical Utility", ("c1", "c2", "c3"), categorical=False),
    Dimension("Noise Fidelity", ("b2", "b5"), categorical=True),
)


def _align(a: Sequence[JudgeScores], b: Sequence[JudgeScores]) -> list[tuple[JudgeScores, JudgeScores]]:
    index_a = {j.key: j for j in a}
    index_b = {j.key: j for j in b}
    if len(index_a) != len(a) or len(index_b) != len(b):
        raise ValueError("duplicate judgment units for one rater")
    if index_a.keys() != index_b.keys():
        raise ValueError("raters judged different units")
    return [(index_a[k], index_b[k]) for k in sorted(index_a, key=repr)]


def dimension_agreement(
    rater_a: Sequence[JudgeScores], rater_b: Sequence[JudgeScores], dimension: Dimension
) -> AgreementStats:
    pairs = _align(rater_a, rater_b)
    if dimension.categorical:
        xs, ys = [], []
        for ja, jb in pairs:
            for item in dimension.items:
                va, vb = getattr(ja, item), getattr(jb, item)
                if va is not None and vb is not None:
                    xs.append(va)
                    ys.append(vb)
        return AgreementStats(kappa=cohens_kappa(xs, ys), pearson=None, n=len(xs))
    xs, ys = [], []
    for ja, jb in pairs:
        ma, mb = _mean_items(ja, dimension.items), _mean_items(jb, dimension.items)
        if ma is not None and mb is not None:
            xs.append(ma)
            ys.append(mb)
    return AgreementStats(kappa=None, pearson=pearson_r(xs, ys), n=len(xs))


@dataclass(frozen=True)
class AgreementRow:
    dimension: str
    human_human: AgreementStats
    llm_human: float  # mean of the LLM's agreement with each human
    metric: str


def agreement_rows(
    judgments: Sequence[JudgeScores],
    humans: tuple[str, str] = ("h1", "h2"),
    llm: str = "llm",
    dimensions: Sequence[Dimension] = DEFAULT_DIMENSIONS,
    unit: str = "conversation",
) -> list[AgreementRow]:
    """Human-human and LLM-human agreement per dimension, from mixed-rater judgments."""
    by_rater: dict[str, list[JudgeScores]] = defaultdict(list)
    for j in judgments:
        if j.unit == unit:
            by_rater[j.rater].append(j)
    for rater in (*humans, llm):
        if not by_rater.get(rater):
            raise ValueError(f"no {unit} judgments from rater {rater!r}")
    h1, h2, model = by_rater[humans[0]], by_rater[humans[1]], by_rater[llm]
    rows = []
    for dim in dimensions:
        hh = dimension_agreement(h1, h2, dim)
        lh = (dimension_agreement(model, h1, dim).value + dimension_agreement(model, h2, dim).value) / 2
        rows.append(AgreementRow(dim.name, hh, lh, hh.metric))
    return rows


# --- ablation -------------------------------------------------------------------

@dataclass(frozen=True)
class AblationColumn:
    hallucination_rate_pct: float | None
    consistency_rate_pct: float | None
    realism: float | None
    unit: str = "response"


def ablation_columns(
    judgments: Sequence[JudgeScores], unit: str = "response", rater: str = "llm"
) -> dict[str, AblationColumn]:
    """Per-mode truth-preservation rates and realism.

    Rates come from ``unit`` judgments when a mode has them, otherwise from
    conversation-level ones. Realism always uses conversation-level scores.
    """
    by_mode: dict[str, list[JudgeScores]] = defaultdict(list)
    for j in judgments:
        if j.rater == rater:
            by_mode[j.mode].append(j)
    out = {}
    pick: Callable[[list[JudgeScores], str], list[JudgeScores]] = lambda js, u: [j for j in js if j.unit == u]
    for mode, js in sorted(by_mode.items()):
        rated = pick(js, unit) or pick(js, "conversation")
        rated = [j for j in rated if j.truth_preserved is not None]
        rates = truth_preservation_rates(rated) if rated else None
        out[mode] = AblationColumn(
            hallucination_rate_pct=rates.hallucination_rate_pct if rates else None,
            consistency_rate_pct=rates.consistency_rate_pct if rates else None,
            realism=realism_score(pick(js, "conversation")),
            unit=rated[0].unit if rated else unit,
        )
    return out
