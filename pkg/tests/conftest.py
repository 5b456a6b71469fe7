from __future__ import annotations

import random
import shutil
import socket
from pathlib import Path

import pytest

from veripatient.cases import Demographics, PatientCase, load_case, load_corpus
from veripatient.llm import Gateway, ReplayBackend, Role
from veripatient.taxonomy import sample_profile
from veripatient.umls.client import ReplayClient
from veripatient.umls.extract import build_cache

FIXTURES = Path(__file__).parent / "fixtures"
UMLS_FIXTURES = FIXTURES / "umls"
SMOKE = FIXTURES / "smoke"

PASS_JSON = '{"verdict": "PASS", "reasoning": "grounded", "issue": null}'
REGEN_JSON = '{"verdict": "REGENERATE", "reasoning": "not grounded", "issue": "unsupported symptom"}'


# --- network guard -------------------------------------------------------------

_real_connect = socket.socket.connect


def _guarded_connect(self, address):
    if self.family in (socket.AF_INET, socket.AF_INET6):
        raise RuntimeError(f"network access attempted during tests: {address!r}")
    return _real_connect(self, address)


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    monkeypatch.setattr(socket.socket, "connect", _guarded_connect)
    monkeypatch.delenv("VERIPATIENT_LLM_API_KEY", raising=False)
    monkeypatch.delenv("VERIPATIENT_UMLS_API_KEY", raising=False)


# --- shared data ---------------------------------------------------------------

@pytest.fixture
def p042() -> PatientCase:
    return load_case((FIXTURES / "cases" / "p042.json").read_text())


@pytest.fixture
def umls_client() -> ReplayClient:
    return ReplayClient(UMLS_FIXTURES)


@pytest.fixture
def smoke_dir(tmp_path) -> Path:
    """Copy of the smoke run with a freshly built context cache."""
    target = tmp_path / "smoke"
    shutil.copytree(SMOKE, target)
    cache = build_cache(load_corpus(target / "cases.json"), ReplayClient(UMLS_FIXTURES))
    cache.write(target / "cache.json")
    return target


_SYNTH_DX = [
    ("Myocardial Infarction", "I21.9", ["Chest pain", "Sweating", "Nausea"]),
    ("Migraine", "G43.9", ["Headache", "Nausea", "Sensitivity to light"]),
    ("Community-acquired pneumonia", "J18.9", ["Cough", "Fever", "Shortness of breath"]),
    ("Appendicitis", "K35.80", ["Abdominal pain", "Fever", "Loss of appetite"]),
    ("Asthma", "J45.909", ["Wheezing", "Shortness of breath", "Chest tightness"]),
    ("Urinary tract infection", "N39.0", ["Burning urination", "Frequent urination"]),
    ("Gastroesophageal reflux disease", "K21.9", ["Heartburn", "Sour taste", "Cough"]),
    ("Pulmonary embolism", "I26.99", ["Shortness of breath", "Chest pain", "Leg swelling"]),
    ("Anemia", "D64.9", ["Fatigue", "Dizziness", "Pale skin"]),
    ("Acute sinusitis", "J01.90", ["Facial pressure", "Nasal congestion", "Headache"]),
]


def synthetic_corpus(n: int = 300, seed: int = 0) -> list[PatientCase]:
    rng = random.Random(seed)
    cases = []
    for i in range(n):
        dx, icd, symptoms = _SYNTH_DX[i % len(_SYNTH_DX)]
        cases.append(PatientCase(
            patient_id=f"SYN{i:04d}",
            demographics=Demographics(age=rng.randint(18, 90), sex=rng.choice("MF"),
                                      occupation=rng.choice(["", "Teacher", "Nurse", "Farmer"])),
            symptoms=tuple(rng.sample(symptoms, k=rng.randint(1, len(symptoms)))),
            diagnosis=dx,
            icd10_code=icd,
            seed=i,
            noise_profile=sample_profile(i),
        ))
    return cases


@pytest.fixture(scope="session")
def corpus300() -> list[PatientCase]:
    return synthetic_corpus()


def make_gateway(patient=("It hurts around here.",), verifier=(PASS_JSON,), doctor=None, judge=None,
                 cycle: bool = True) -> Gateway:
    backends = {
        Role.PATIENT_GENERATOR: ReplayBackend(script=list(patient), cycle=cycle, name="patient"),
        Role.VERIFIER: ReplayBackend(script=list(verifier), cycle=cycle, name="verifier"),
    }
    if doctor is not None:
        backends[Role.DOCTOR] = ReplayBackend(script=list(doctor), cycle=cycle, name="doctor")
    if judge is not None:
        backends[Role.JUDGE] = ReplayBackend(script=list(judge), cycle=cycle, name="judge")
    return Gateway(backends=backends, retries=0, backoff=0.0, sleep=lambda _: None)


@pytest.fixture
def gateway_factory():
    return make_gateway


# --- acceptance summary ----------------------------------------------------------

CRITERIA = {
    1: "verdict fixtures match the six reference decisions",
    2: "fail-closed loop emits the fallback after k=2 rejections",
    3: "generator prompts never contain the diagnosis or ICD code",
    4: "ablation modes wire verifier calls and context correctly",
    5: "extracted contexts match the reference figures with caps enforced",
    6: "kappa, r and the paired t-test agree with the oracle",
    7: "performance row renders 84.5 / 69.2 / -15.3 / +34.5%",
    8: "93 of 1000 A1 judgments give a 9.3% hallucination rate",
    9: "simulate is byte-identical across runs and widths",
    10: "the offline suite finishes in under 60 s without network",
}
_results: dict[int, list[bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _results.setdefault(marker.args[0], []).append(report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        runs = _results.get(number)
        if runs is None:
            continue
        status = "PASS" if all(runs) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {CRITERIA[number]}")
