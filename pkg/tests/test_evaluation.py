from __future__ import annotations

import json
import random
from fractions import Fraction

import mpmath
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import make_gateway
from veripatient.evaluation import (
    JudgeParseError,
    JudgeRangeError,
    JudgeScores,
    Outcome,
    PerformanceRow,
    StatisticsError,
    ablation_columns,
    agreement_rows,
    cohens_kappa,
    match_diagnosis,
    paired_t_test,
    pearson_r,
    performance_metrics,
    read_judgments,
    render_report,
    truth_preservation_rates,
    write_judgments,
)
from veripatient.evaluation.judge import CRITERIA, CRITERIA_BY_ID, judge_batch, judge_prompt, parse_judge_output
from veripatient.evaluation.metrics import AblationColumn, outcomes_from_transcripts
from veripatient.evaluation.report import LayoutError
from veripatient.evaluation.stats import significance_stars, t_two_tailed_p
from veripatient.runner import run_conversation

mpmath.mp.dps = 50


# --- independent oracles --------------------------------------------------------
# Exact rational or 50-digit arithmetic, written from the textbook definitions.

def oracle_kappa(a, b):
    n = len(a)
    cats = sorted(set(a) | set(b), key=repr)
    table = {(x, y): 0 for x in cats for y in cats}
    for x, y in zip(a, b):
        table[x, y] += 1
    p_o = Fraction(sum(table[c, c] for c in cats), n)
    p_e = sum(Fraction(sum(table[c, y] for y in cats), n) * Fraction(sum(table[x, c] for x in cats), n)
              for c in cats)
    if p_e == 1:
        return 1.0
    return float((p_o - p_e) / (1 - p_e))


def oracle_pearson(x, y):
    n = len(x)
    xs, ys = [mpmath.mpf(v) for v in x], [mpmath.mpf(v) for v in y]
    mx, my = sum(xs) / n, sum(ys) / n
    num = sum((a - mx) * (b - my) for a, b in zip(xs, ys))
    den = mpmath.sqrt(sum((a - mx) ** 2 for a in xs) * sum((b - my) ** 2 for b in ys))
    return float(num / den)


def oracle_t(clean, noisy):
    d = [mpmath.mpf(b) - mpmath.mpf(a) for a, b in zip(clean, noisy)]
    n = len(d)
    mean = sum(d) / n
    sd = mpmath.sqrt(sum((v - mean) ** 2 for v in d) / (n - 1))
    t = mean / (sd / mpmath.sqrt(n))
    df = n - 1
    # two-tailed p straight from the Student t density
    density = lambda u: mpmath.gamma((df + 1) / mpmath.mpf(2)) / (
        mpmath.sqrt(df * mpmath.pi) * mpmath.gamma(df / mpmath.mpf(2))) * (1 + u * u / df) ** (-(df + 1) / mpmath.mpf(2))
    p = 2 * mpmath.quad(density, [abs(t), mpmath.inf])
    return float(t), df, float(p), float(mean / sd)


def random_instances(count, seed=2024):
    rng = random.Random(seed)
    for _ in range(count):
        n = rng.randint(2, 50)
        yield rng, n


class TestMatching:
    @pytest.mark.parametrize(
        "pred, gold, icd, ok",
        [
            ("Migraine", "Migraine", "", True),
            ("  migraine. ", "Migraine", "", True),
            ("Migraine without aura", "Migraine", "", False),
            ("Acute MI (I21.9)", "Myocardial infarction", "I21.9", True),
            (None, "Migraine", "G43.9", False),
            ("", "Migraine", "", False),
            ("Tension headache", "Migraine", "G43.9", False),
        ],
    )
    def test_examples(self, pred, gold, icd, ok):
        assert match_diagnosis(pred, gold, icd) is ok


def outcomes(condition, n, correct, turns):
    return [Outcome(f"C{i:04d}", "m", condition, i < correct, turns[i] if isinstance(turns, list) else turns)
            for i in range(n)]


class TestPerformance:
    def test_accuracy(self):
        m = performance_metrics(outcomes("clean", 200, 169, 10))
        assert m.accuracy_pct["clean"] == pytest.approx(84.5) and m.avg_turns["clean"] == 10.0

    def test_turn_delta(self):
        noisy_turns = [14] * 900 + [13] * 1100
        m = performance_metrics(outcomes("clean", 200, 169, 10) + outcomes("noisy", 2000, 1384, noisy_turns))
        assert m.avg_turns["noisy"] == pytest.approx(13.45)
        assert m.delta_turns_pct == pytest.approx(34.5)
        assert m.delta_acc == pytest.approx(-15.3)

    def test_empty(self):
        with pytest.raises(ValueError):
            performance_metrics([])

    def test_delta_needs_both(self):
        with pytest.raises(ValueError):
            performance_metrics(outcomes("clean", 3, 1, 2)).delta_acc

    def test_significance_attached(self):
        m = performance_metrics(outcomes("clean", 50, 45, 5) + outcomes("noisy", 50, 20, 8))
        assert m.significance is not None and m.significance.t < 0
        assert m.significance.p_two_tailed < 0.001

    def test_outcome_validation(self):
        with pytest.raises(ValueError):
            Outcome("c", "m", "muddy", True, 3)
        with pytest.raises(ValueError):
            Outcome("c", "m", "clean", True, 0)

    def test_from_transcripts_skips_errors(self, p042):
        good = run_conversation(p042, make_gateway(doctor=["Final Diagnosis: MI"]))
        bad = run_conversation(p042, make_gateway(doctor=[{"error": "backend"}]))
        assert [o.correct for o in outcomes_from_transcripts([good, bad])] == [False]


def verdicts(n, positives, item="a1"):
    return [JudgeScores(case_id=f"c{i}", **{"a1": False, "a2": False, "a3": False, item: i < positives})
            for i in range(n)]


class TestTruthRates:
    def test_zero(self):
        assert truth_preservation_rates(verdicts(10, 0)).hallucination_rate_pct == 0.0

    def test_93_of_1000(self):
        rates = truth_preservation_rates(verdicts(1000, 93))
        assert rates.hallucination_rate_pct == 9.3 and rates.consistency_rate_pct == 90.7

    def test_consistency_needs_all_three(self):
        rates = truth_preservation_rates(verdicts(4, 1, item="a3"))
        assert rates.hallucination_rate_pct == 0.0 and rates.consistency_rate_pct == 75.0

    def test_all_clean(self):
        assert truth_preservation_rates(verdicts(5, 0)).consistency_rate_pct == 100.0

    def test_empty_and_incomplete(self):
        with pytest.raises(ValueError):
            truth_preservation_rates([])
        with pytest.raises(ValueError):
            truth_preservation_rates([JudgeScores(a1=True)])


class TestJudgeParsing:
    def test_binary(self):
        score, why = parse_judge_output('{"reasoning": "fine", "score": "No"}', CRITERIA_BY_ID["a1"])
        assert score is False and why == "fine"

    def test_likert_string(self):
        assert parse_judge_output('```json\n{"score": "4"}\n```', CRITERIA_BY_ID["b1"])[0] == 4

    @pytest.mark.parametrize("raw", ['{"score": 7}', '{"score": 0}'])
    def test_out_of_range(self, raw):
        with pytest.raises(JudgeRangeError) as err:
            parse_judge_output(raw, CRITERIA_BY_ID["c2"])
        assert err.value.criterion == "c2" and err.value.raw == raw

    @pytest.mark.parametrize("raw", ["four", '{"reasoning": "x"}', '{"score": "great"}', '{"score": 3.5}'])
    def test_unparseable(self, raw):
        with pytest.raises(JudgeParseError):
            parse_judge_output(raw, CRITERIA_BY_ID["b3"])

    def test_binary_rejects_numbers(self):
        with pytest.raises(JudgeRangeError):
            parse_judge_output('{"score": 1}', CRITERIA_BY_ID["a2"])

    def test_scores_validate(self):
        with pytest.raises(JudgeRangeError):
            JudgeScores(b1=6)
        with pytest.raises(JudgeRangeError):
            JudgeScores(a1="yes")

    def test_eleven_criteria(self):
        assert [c.id for c in CRITERIA] == ["a1", "a2", "a3", "b1", "b2", "b3", "b4", "b5", "c1", "c2", "c3"]


class TestJudging:
    def test_prompt_carries_profile_and_symptoms(self, p042):
        t = run_conversation(p042, make_gateway(doctor=["Where?", "Final Diagnosis: MI"], cycle=False))
        prompt = judge_prompt(CRITERIA_BY_ID["b2"], t, p042)
        assert "Health Literacy L3 + Emotional State L2" in prompt
        assert "Chest pain radiating to left arm" in prompt and "[1] Patient:" in prompt

    def test_batch_counts_calls(self, p042):
        t = run_conversation(p042, make_gateway(doctor=["Where?", "When?", "Final Diagnosis: MI"], cycle=False,
                                                patient=["a", "b"], verifier=['{"verdict": "PASS"}'] * 2))
        answers = ['{"score": "no"}'] * 3 + ['{"score": 3}'] * 8 + ['{"score": "no"}'] * 6
        gateways = []

        def gateway_for(_t):
            gw = make_gateway(judge=answers, cycle=False)
            gateways.append(gw)
            return gw

        out = judge_batch([t], {"P042": p042}, gateway_for)
        assert [j.unit for j in out] == ["conversation", "response", "response"]
        assert [j.turn_index for j in out[1:]] == [1, 2]
        assert out[0].c3 == 3 and out[1].a1 is False and out[1].b1 is None

    def test_jsonl_round_trip(self, tmp_path):
        js = [JudgeScores(case_id="x", a1=True, b1=3, reasoning={"a1": "made up"}), JudgeScores(rater="h1")]
        write_judgments(tmp_path / "j.jsonl", js)
        assert read_judgments(tmp_path / "j.jsonl") == js

    def test_jsonl_accepts_yes_no(self, tmp_path):
        (tmp_path / "j.jsonl").write_text(json.dumps({"rater": "h1", "a1": "yes"}) + "\n")
        assert read_judgments(tmp_path / "j.jsonl")[0].a1 is True


class TestStatsAnchors:
    def test_kappa_table(self):
        a = ["y"] * 20 + ["y"] * 5 + ["n"] * 10 + ["n"] * 15
        b = ["y"] * 20 + ["n"] * 5 + ["y"] * 10 + ["n"] * 15
        assert cohens_kappa(a, b) == pytest.approx(0.4, abs=1e-12)

    def test_kappa_degenerate(self):
        assert cohens_kappa(["x"] * 4, ["x"] * 4) == 1.0
        assert cohens_kappa([1, 2, 1], [1, 2, 1]) == 1.0
        with pytest.raises(StatisticsError):
            cohens_kappa([1], [1])
        with pytest.raises(StatisticsError):
            cohens_kappa([1, 2], [1])

    def test_pearson(self):
        assert pearson_r([1, 2, 3], [3, 2, 1]) == -1.0
        assert pearson_r([1, 5, 2], [1, 5, 2]) == 1.0
        with pytest.raises(StatisticsError):
            pearson_r([1, 1, 1], [1, 2, 3])

    def test_paired_t(self):
        s = paired_t_test([2, 4, 5], [1, 2, 3])
        assert s.t == pytest.approx(-5.0, abs=1e-3) and s.df == 2
        assert s.cohens_d == pytest.approx(-2.887, abs=1e-3)
        with pytest.raises(StatisticsError):
            paired_t_test([1, 2], [1, 2])

    def test_p_values(self):
        assert t_two_tailed_p(0.0, 5) == 1.0
        assert t_two_tailed_p(2.228138851986274, 10) == pytest.approx(0.05, abs=1e-9)

    @pytest.mark.parametrize("p, stars", [(0.0005, "***"), (0.005, "**"), (0.04, "*"), (0.2, ""), (None, "")])
    def test_stars(self, p, stars):
        assert significance_stars(p) == stars


class TestStatsOracle:
    def test_kappa(self):
        for rng, n in random_instances(300, seed=1):
            k = rng.randint(2, 4)
            a = [rng.randrange(k) for _ in range(n)]
            b = [x if rng.random() < 0.5 else rng.randrange(k) for x in a]
            try:
                got = cohens_kappa(a, b)
            except StatisticsError:
                continue
            assert abs(got - oracle_kappa(a, b)) < 1e-9

    def test_pearson(self):
        for rng, n in random_instances(300, seed=2):
            x = [rng.uniform(-10, 10) for _ in range(n)]
            y = [v * rng.uniform(-2, 2) + rng.gauss(0, 3) for v in x]
            assert abs(pearson_r(x, y) - oracle_pearson(x, y)) < 1e-9

    def test_paired_t(self):
        for rng, n in random_instances(100, seed=3):
            clean = [rng.randint(0, 5) + rng.random() for _ in range(n)]
            noisy = [v + rng.gauss(-0.3, 1) for v in clean]
            s = paired_t_test(clean, noisy)
            t, df, p, d = oracle_t(clean, noisy)
            assert df == s.df
            for got, want in ((s.t, t), (s.p_two_tailed, p), (s.cohens_d, d)):
                assert abs(got - want) < 1e-9 * max(1.0, abs(want))


ratings = st.lists(st.sampled_from("abc"), min_size=2, max_size=30)
reals = st.floats(-1e3, 1e3, allow_nan=False).map(lambda v: round(v, 3))


class TestStatsProperties:
    @given(st.data())
    def test_kappa_symmetric_bounded(self, data):
        a = data.draw(ratings)
        b = data.draw(st.lists(st.sampled_from("abc"), min_size=len(a), max_size=len(a)))
        try:
            k = cohens_kappa(a, b)
        except StatisticsError:
            return
        assert -1.0 <= k <= 1.0
        assert k == pytest.approx(cohens_kappa(b, a), abs=1e-12)

    @given(ratings)
    def test_kappa_self(self, a):
        assert cohens_kappa(a, list(a)) == 1.0

    @given(st.lists(st.tuples(reals, reals), min_size=3, max_size=30),
           st.floats(0.1, 100), st.floats(-100, 100))
    def test_pearson_affine(self, pairs, scale, shift):
        x, y = [p[0] for p in pairs], [p[1] for p in pairs]
        assume(len(set(x)) > 1 and len(set(y)) > 1)
        r = pearson_r(x, y)
        assert -1.0 <= r <= 1.0 and r == pytest.approx(pearson_r(y, x), abs=1e-12)
        x2 = [v * scale + shift for v in x]
        assume(len(set(x2)) > 1)
        assert r == pytest.approx(pearson_r(x2, y), abs=1e-6)

    @settings(max_examples=50)
    @given(st.lists(st.tuples(reals, reals), min_size=2, max_size=20))
    def test_t_swap(self, pairs):
        a, b = [p[0] for p in pairs], [p[1] for p in pairs]
        try:
            s = paired_t_test(a, b)
        except StatisticsError:
            return
        r = paired_t_test(b, a)
        assert r.t == pytest.approx(-s.t) and r.p_two_tailed == pytest.approx(s.p_two_tailed)
        assert 0.0 <= s.p_two_tailed <= 1.0


def perf_row(clean_correct=169, noisy_correct=1384):
    noisy_turns = [14] * 900 + [13] * 1100
    m = performance_metrics(outcomes("clean", 200, clean_correct, 10) + outcomes("noisy", 2000, noisy_correct, noisy_turns))
    return PerformanceRow("Qwen", m, "72B", "General")


class TestReport:
    def test_performance_row(self):
        report = render_report([perf_row()], "performance")
        assert report.header == ("Model", "Size", "Type", "Clean", "Noisy", "ΔAcc", "ΔTurns")
        row = report.rows[0]
        assert row[3:5] == ("84.5", "69.2")
        assert row[5].startswith("-15.3") and row[6] == "+34.5%"

    def test_markdown_and_csv(self):
        report = render_report([perf_row()], "performance")
        assert report.markdown.splitlines()[0] == "| Model | Size | Type | Clean | Noisy | ΔAcc | ΔTurns |"
        assert report.csv.splitlines()[1].startswith("Qwen,72B,General,84.5,69.2,-15.3")

    def test_missing_condition(self):
        m = performance_metrics(outcomes("clean", 4, 2, 3))
        with pytest.raises(LayoutError):
            render_report([PerformanceRow("x", m)], "performance")

    def test_empty_is_header_only(self):
        assert render_report([], "performance").rows == ()
        assert render_report({}, "ablation").markdown.count("\n") == 2

    def test_ablation_columns(self):
        cols = {"no_controller": AblationColumn(24.2, 70.0, 3.1), "hybrid": AblationColumn(9.3, 88.5, 3.9)}
        report = render_report(cols, "ablation")
        assert report.header == ("Metric", "No Ctrl", "Prompt", "Ours")
        assert report.rows[0] == ("Halluc. Rate", "24.2%", "n/a", "9.3%")
        assert report.rows[2] == ("Realism (1-5)", "3.10", "n/a", "3.90")

    def test_wrong_bundle(self):
        with pytest.raises(LayoutError):
            render_report([perf_row()], "agreement")
        with pytest.raises(LayoutError):
            render_report([], "radar")

    def test_pure(self):
        assert render_report([perf_row()], "performance") == render_report([perf_row()], "performance")


def rater_set(rater, rng, n=12):
    out = []
    for i in range(n):
        out.append(JudgeScores(
            case_id=f"c{i}", rater=rater, a1=rng.random() < 0.3, a2=rng.random() < 0.2, a3=False,
            **{k: rng.randint(1, 5) for k in ("b1", "b2", "b3", "b4", "b5", "c1", "c2", "c3")},
        ))
    return out


class TestAgreement:
    def test_rows(self):
        rng = random.Random(5)
        h1 = rater_set("h1", rng)
        judgments = h1 + [JudgeScores(**{**j.__dict__, "rater": "h2"}) for j in h1] + rater_set("llm", rng)
        rows = agreement_rows(judgments)
        assert [r.dimension for r in rows] == ["Truth Preservation", "Realism Assessment",
                                               "Clinical Utility", "Noise Fidelity"]
        assert [r.metric for r in rows] == ["κ", "r", "r", "κ"]
        assert all(r.human_human.value == 1.0 for r in rows)
        report = render_report(rows, "agreement")
        assert report.rows[0][:2] == ("Truth Preservation", "1.00")

    def test_missing_rater(self):
        with pytest.raises(ValueError):
            agreement_rows(rater_set("h1", random.Random(0)))

    def test_ablation_prefers_responses(self):
        js = [JudgeScores(mode="hybrid", unit="response", turn_index=i, a1=i == 0, a2=False, a3=False)
              for i in range(4)]
        js.append(JudgeScores(mode="hybrid", a1=False, a2=False, a3=False, b1=4, b2=4, b3=4, b4=3))
        col = ablation_columns(js)["hybrid"]
        assert col.hallucination_rate_pct == 25.0 and col.unit == "response" and col.realism == 3.75
