"""Scoring, statistics, judging, and report rendering."""

from veripatient.evaluation.judge import (
    CRITERIA,
    JudgeError,
    JudgeParseError,
    JudgeRangeError,
    JudgeScores,
    judge_conversation,
    read_judgments,
    write_judgments,
)
from veripatient.evaluation.matching import match_diagnosis, normalize_label
from veripatient.evaluation.metrics import (
    Outcome,
    PerformanceMetrics,
    TruthRates,
    ablation_columns,
    agreement_rows,
    outcomes_from_transcripts,
    performance_metrics,
    truth_preservation_rates,
)
from veripatient.evaluation.report import PerformanceRow, Report, render_report
from veripatient.evaluation.stats import (
    AgreementStats,
    StatisticsError,
    TestStats,
    cohens_kappa,
    paired_t_test,
    pearson_r,
)

__all__ = [
    "CRITERIA", "JudgeError", "JudgeParseError", "JudgeRangeError", "JudgeScores",
    "judge_conversation", "read_judgments", "write_judgments", "match_diagnosis",
    "normalize_label", "Outcome", "PerformanceMetrics", "TruthRates", "ablation_columns",
    "agreement_rows", "outcomes_from_transcripts", "performance_metrics",
    "truth_preservation_rates", "PerformanceRow", "Report", "render_report",
    "AgreementStats", "StatisticsError", "TestStats", "cohens_kappa", "paired_t_test", "pearson_r",
]
