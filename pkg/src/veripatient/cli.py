"""``veripatient`` command line.

Exit codes: 0 success, 1 processing failure, 2 configuration error,
3 partial completion (some conversations ended in error).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from veripatient import __version__
from veripatient.cases import SchemaError, corpus_fingerprint, load_case, load_corpus
from veripatient.engine import EngineConfig, Mode
from veripatient.evaluation.judge import JudgeError, judge_batch, read_judgments, write_judgments
from veripatient.evaluation.metrics import (
    ablation_columns,
    agreement_rows,
    outcomes_from_transcripts,
    performance_metrics,
)
from veripatient.evaluation.report import LayoutError, PerformanceRow, render_report
from veripatient.evaluation.stats import StatisticsError
from veripatient.llm import Gateway, LLMError, Role
from veripatient.runner import (
    ConfigError,
    OutputCollision,
    RunConfig,
    load_transcripts,
    run_batch,
    run_chat,
    transcript_filename,
    write_atomic,
)
from veripatient.taxonomy import BEHAVIORS, NoisePillar, behavior_text
from veripatient.umls.client import (
    API_KEY_ENV,
    LiveClient,
    RecordingClient,
    ReplayClient,
    TerminologyError,
)
from veripatient.umls.extract import CacheBuildError, ContextCache, build_cache

logger = logging.getLogger("veripatient")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_PARTIAL = 3

MANIFEST = "manifest.json"


class UsageError(Exception):
    """Bad configuration or arguments; maps to exit code 2."""


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    corpus_fingerprint: str
    cache_fingerprint: str | None
    tool_version: str
    modes: list[str]
    conditions: list[str]
    width: int
    doctors: dict[str, dict[str, str]]
    started_at: str
    finished_at: str = ""
    succeeded: int = 0
    failed: int = 0
    skipped: int = 0
    failures: list[dict[str, str]] = field(default_factory=list)

    def write(self, directory: Path) -> None:
        write_atomic(directory / MANIFEST, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, directory: Path) -> RunManifest | None:
        path = directory / MANIFEST
        if not path.exists():
            return None
        return cls(**json.loads(path.read_text(encoding="utf-8")))


# --- taxonomy -------------------------------------------------------------------

def cmd_taxonomy(args: argparse.Namespace) -> int:
    if args.level is not None and args.pillar is None:
        raise UsageError("--level needs --pillar")
    if args.pillar is not None:
        pillar = NoisePillar(args.pillar)
        levels = [args.level] if args.level is not None else range(len(BEHAVIORS[pillar]))
        for level in levels:
            print(f"{pillar.display_name} (Level {level}): {behavior_text(pillar, level)}")
        return EXIT_OK
    if args.json:
        doc = {p.value: {"name": p.display_name, "levels": list(BEHAVIORS[p])} for p in NoisePillar}
        print(json.dumps(doc, indent=2, ensure_ascii=False))
        return EXIT_OK
    for pillar in NoisePillar:
        print(f"{pillar.display_name} ({pillar.value})")
        for level, text in enumerate(BEHAVIORS[pillar]):
            print(f"  {level}: {text}")
    return EXIT_OK


# --- preprocess -----------------------------------------------------------------

def cmd_preprocess(args: argparse.Namespace) -> int:
    corpus = load_corpus(args.corpus)
    if args.live:
        if not os.environ.get(API_KEY_ENV):
            raise UsageError(f"--live needs ${API_KEY_ENV} to be set")
        client = LiveClient()
        if args.record:
            client = RecordingClient(client, args.record, recorded_at=_now())
    else:
        if args.record:
            raise UsageError("--record only makes sense with --live")
        if not args.fixtures or not Path(args.fixtures).is_dir():
            raise UsageError("pass --fixtures <dir> or --live")
        client = ReplayClient(args.fixtures)
    try:
        cache = build_cache(corpus, client, width=args.width)
    except CacheBuildError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    Path(args.cache).parent.mkdir(parents=True, exist_ok=True)
    cache.write(args.cache)
    for key in sorted(cache.timings):
        print(f"{key}\t{cache.timings[key] * 1000:.1f} ms")
    print(f"wrote {len(cache.entries)} symptom contexts to {args.cache}")
    return EXIT_OK


# --- simulate -------------------------------------------------------------------

def _load_run_config(path: str) -> tuple[RunConfig, bytes]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"run config {path} not found")
    return RunConfig.read(p), p.read_bytes()


def cmd_simulate(args: argparse.Namespace) -> int:
    config, raw = _load_run_config(args.config)
    overrides: dict = {}
    if args.mode:
        overrides["modes"] = (Mode.parse(args.mode),)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.width is not None:
        overrides["width"] = args.width
    config = replace(config, **overrides)

    if Mode.HYBRID in config.modes and (config.cache is None or not config.cache.is_file()):
        raise UsageError("hybrid mode needs a preprocessed context cache (config field 'cache')")

    cases = load_corpus(config.corpus)
    cache = ContextCache.read(config.cache) if config.cache and config.cache.is_file() else None
    hashed = {"config": raw.decode("utf-8"), "overrides": {k: str(v) for k, v in sorted(overrides.items())}}
    manifest = RunManifest(
        config_hash=hashlib.sha256(json.dumps(hashed, sort_keys=True).encode("utf-8")).hexdigest(),
        seed=config.seed,
        corpus_fingerprint=corpus_fingerprint(cases),
        cache_fingerprint=_sha256_file(config.cache) if cache is not None else None,
        tool_version=__version__,
        modes=[m.value for m in config.modes],
        conditions=list(config.conditions),
        width=config.width,
        doctors={k: {"model": v.model, "size": v.size, "type": v.type} for k, v in sorted(config.doctors.items())},
        started_at=_now(),
    )
    try:
        summary = run_batch(config, resume=args.resume, cases=cases, cache=cache)
    except OutputCollision as exc:
        raise UsageError(str(exc)) from None

    manifest.finished_at = _now()
    manifest.succeeded = len(summary.succeeded)
    manifest.failed = len(summary.failed)
    manifest.skipped = len(summary.skipped)
    manifest.failures = [{"file": p.name, "error": msg} for p, msg in summary.failed]
    manifest.write(config.output)

    print(f"{manifest.succeeded} succeeded, {manifest.failed} failed, {manifest.skipped} skipped "
          f"-> {config.output}")
    for path, msg in summary.failed:
        print(f"  error: {path.name}: {msg}", file=sys.stderr)
    if summary.failed:
        return EXIT_PARTIAL if summary.succeeded or summary.skipped else EXIT_FAILURE
    return EXIT_OK


# --- chat -----------------------------------------------------------------------

def cmd_chat(args: argparse.Namespace) -> int:
    config, _ = _load_run_config(args.config)
    path = Path(args.case)
    if not path.is_file():
        raise UsageError(f"case file {args.case} not found")
    case = load_case(path.read_text(encoding="utf-8"))
    mode = Mode.parse(args.mode)
    if mode is Mode.HYBRID and not case.umls_context:
        cache_path = Path(args.cache) if args.cache else config.cache
        if cache_path is None or not cache_path.is_file():
            raise UsageError("hybrid chat needs a case with context or a --cache")
        case = ContextCache.read(cache_path).attach(case)
    backends = {role: ep.make(case.patient_id, role.value)
                for role, ep in config.endpoints.items() if role is not Role.DOCTOR}
    gateway = Gateway(backends=backends, retries=config.retries, backoff=config.backoff, seed=case.seed)
    engine = EngineConfig(max_attempts=config.max_attempts, mode=mode)

    transcript = run_chat(case, gateway, engine, read_line=_read_line, write=print)
    out = Path(args.out)
    target = out / transcript_filename(case.patient_id, "human", mode, transcript.condition)
    write_atomic(target, transcript.to_json())
    if transcript.final_diagnosis is not None:
        verdict = "correct" if transcript.correct else f"incorrect (gold: {case.diagnosis})"
        print(f"Final diagnosis: {transcript.final_diagnosis} -> {verdict}")
    print(f"transcript saved to {target}")
    return EXIT_OK


def _read_line(prompt: str) -> str:
    if sys.stdin.isatty():
        return input(prompt)
    line = sys.stdin.readline()
    if not line:
        raise EOFError
    return line


# --- judge ----------------------------------------------------------------------

def cmd_judge(args: argparse.Namespace) -> int:
    config, _ = _load_run_config(args.config)
    if Role.JUDGE not in config.endpoints:
        raise UsageError("run config has no endpoints.judge")
    transcripts = load_transcripts(args.inp)
    if not transcripts:
        raise UsageError(f"no transcripts in {args.inp}")
    cases = {c.patient_id: c for c in load_corpus(config.corpus)}
    missing = sorted({t.case_id for t in transcripts} - set(cases))
    if missing:
        raise UsageError(f"transcripts reference cases missing from the corpus: {missing}")
    endpoint = config.endpoints[Role.JUDGE]
    shared = endpoint.make("", "judge") if endpoint.kind == "http" else None

    def gateway_for(transcript) -> Gateway:
        backend = shared or endpoint.make(transcript.case_id, "judge")
        return Gateway(backends={Role.JUDGE: backend}, retries=config.retries,
                       backoff=config.backoff, seed=transcript.run_seed)

    try:
        judgments = judge_batch(transcripts, cases, gateway_for,
                                per_response=not args.conversation_only, width=args.width)
    except JudgeError as exc:
        print(f"error: judge output for {exc.criterion or '?'} unusable: {exc}\nraw: {exc.raw[:500]}",
              file=sys.stderr)
        return EXIT_FAILURE
    write_judgments(args.out, judgments)
    print(f"wrote {len(judgments)} judgments to {args.out}")
    return EXIT_OK


# --- report ---------------------------------------------------------------------

def _performance_bundle(directory: Path) -> list[PerformanceRow]:
    transcripts = load_transcripts(directory)
    manifest = RunManifest.read(directory)
    meta = manifest.doctors if manifest else {}
    by_doctor: dict[str, list] = {}
    for outcome in outcomes_from_transcripts(transcripts):
        by_doctor.setdefault(outcome.doctor_id, []).append(outcome)
    rows = []
    for doctor in sorted(by_doctor):
        info = meta.get(doctor, {})
        rows.append(PerformanceRow(
            model=info.get("model") or doctor,
            metrics=performance_metrics(by_doctor[doctor]),
            size=info.get("size", ""),
            type=info.get("type", ""),
        ))
    return rows


def cmd_report(args: argparse.Namespace) -> int:
    directory = Path(args.inp)
    if not directory.is_dir():
        raise UsageError(f"{args.inp} is not a directory")
    if args.layout == "performance":
        bundle = _performance_bundle(directory)
    else:
        if not args.judgments:
            raise UsageError(f"the {args.layout} layout needs --judgments")
        if not Path(args.judgments).is_file():
            raise UsageError(f"judgments file {args.judgments} not found")
        judgments = read_judgments(args.judgments)
        if args.layout == "ablation":
            bundle = ablation_columns(judgments)
        else:
            try:
                bundle = agreement_rows(judgments)
            except (ValueError, StatisticsError) as exc:
                raise UsageError(f"cannot compute agreement: {exc}") from None
    report = render_report(bundle, args.layout)
    sys.stdout.write(report.markdown)
    csv_path = Path(args.csv) if args.csv else directory / f"{args.layout}.csv"
    write_atomic(csv_path, report.csv)
    return EXIT_OK


# --- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="veripatient", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("taxonomy", help="print the noise pillars and severity levels")
    p.add_argument("--pillar", choices=[x.value for x in NoisePillar])
    p.add_argument("--level", type=int, choices=range(5))
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_taxonomy)

    p = sub.add_parser("preprocess", help="build the per-symptom context cache")
    p.add_argument("--corpus", required=True, help="case file or directory of case files")
    p.add_argument("--cache", required=True, help="output cache JSON path")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--fixtures", help="replay recorded terminology responses from this directory")
    src.add_argument("--live", action="store_true", help=f"query the terminology service (needs ${API_KEY_ENV})")
    p.add_argument("--record", metavar="DIR", help="with --live, save responses as fixtures in DIR")
    p.add_argument("--width", type=int, default=4)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("simulate", help="run a batch of conversations from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=["hybrid", "prompt-only", "no-controller",
                                      "prompt_only", "no_controller"])
    p.add_argument("--seed", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--resume", action="store_true", help="skip cells with valid transcripts")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("chat", help="interview a simulated patient from the terminal")
    p.add_argument("--case", required=True, help="case JSON file")
    p.add_argument("--config", required=True, help="run config providing patient/verifier endpoints")
    p.add_argument("--mode", default="hybrid", choices=["hybrid", "prompt-only", "no-controller",
                                                        "prompt_only", "no_controller"])
    p.add_argument("--cache", help="context cache, if the case has no context")
    p.add_argument("--out", default=".", help="directory for the session transcript")
    p.set_defaults(func=cmd_chat)

    p = sub.add_parser("judge", help="score transcripts with the LLM judge")
    p.add_argument("--in", dest="inp", required=True, help="transcript directory")
    p.add_argument("--config", required=True, help="run config with endpoints.judge and the corpus")
    p.add_argument("--out", required=True, help="output JSON-lines judgments file")
    p.add_argument("--conversation-only", action="store_true", help="skip per-response Section A judging")
    p.add_argument("--width", type=int, default=1)
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("report", help="render result tables")
    p.add_argument("--in", dest="inp", required=True, help="transcript directory")
    p.add_argument("--judgments", help="JSON-lines judgments file")
    p.add_argument("--layout", required=True, choices=["performance", "agreement", "ablation"])
    p.add_argument("--csv", help="CSV output path (default: <in>/<layout>.csv)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ConfigError, SchemaError, LayoutError, OutputCollision) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TerminologyError, LLMError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
