from __future__ import annotations

import json

import httpx
import pytest

from veripatient.llm import (
    ROLE_PRESETS,
    BackendError,
    ChatMessage,
    EndpointConfig,
    Gateway,
    GenerationParams,
    HTTPBackend,
    LLMError,
    LLMTransportError,
    ReplayBackend,
    Role,
    TemplateError,
    TransientError,
    complete,
    fit_messages,
    placeholders,
    render_template,
)

PATIENT_VARS = {
    "age": "45",
    "sex": "F",
    "occupation_line": "\nOccupation: Teacher.",
    "symptoms_list": "Chest pain, Nausea",
    "noise_profile_block": "[NOISE PROFILE]\n- x",
}
USER = [ChatMessage("user", "hi")]


def no_sleep(_: float) -> None:
    pass


class TestMessagesAndParams:
    def test_defaults(self):
        p = GenerationParams(temperature=0.5)
        assert (p.top_p, p.max_input_tokens, p.max_output_tokens, p.frequency_penalty) == (0.95, 4096, 256, 0.0)

    def test_role_temperatures(self):
        temps = {role: ROLE_PRESETS[role].temperature for role in Role}
        assert temps == {Role.PATIENT_GENERATOR: 0.7, Role.DOCTOR: 0.3, Role.VERIFIER: 0.0, Role.JUDGE: 0.0}

    def test_temperature_range(self):
        with pytest.raises(ValueError):
            GenerationParams(temperature=2.5)

    @pytest.mark.parametrize("role", ["user", "assistant"])
    def test_empty_content_rejected(self, role):
        with pytest.raises(ValueError):
            ChatMessage(role, "  ")

    def test_bad_role(self):
        with pytest.raises(ValueError):
            ChatMessage("tool", "x")


class TestTemplates:
    def test_patient(self):
        text = render_template("patient", PATIENT_VARS)
        assert "Keep it under 50 words." in text
        assert "{{" not in text
        assert "45-year-old F" in text and "Occupation: Teacher." in text

    def test_patient_has_no_diagnosis_slot(self):
        assert not {"diagnosis", "diagnosis_label", "icd10_code"} & placeholders("patient")

    def test_doctor(self):
        text = render_template("doctor", {"conversation_history": "Doctor: hi"})
        assert "Final Diagnosis: [condition]" in text

    def test_missing_variable(self):
        vars_ = {k: v for k, v in PATIENT_VARS.items() if k != "age"}
        with pytest.raises(TemplateError) as err:
            render_template("patient", vars_)
        assert str(err.value) == "unbound placeholder: age"

    def test_extra_variable_warns(self, caplog):
        render_template("doctor", {"conversation_history": "", "mood": "x"})
        assert "mood" in caplog.text

    def test_values_not_rescanned(self):
        text = render_template("doctor", {"conversation_history": "{{conversation_history}}"})
        assert text.count("{{conversation_history}}") == 1

    def test_verifier_carries_constraints(self):
        names = placeholders("verifier")
        assert {"umls_context_json", "ground_truth_symptoms", "demographics", "noise_profile",
                "patient_history", "candidate_response"} <= names
        assert "diagnosis" not in names
        text = render_template("verifier", {n: "x" for n in names})
        for phrase in ("Justified Denial", "Demographic Invariance", "History Consistency"):
            assert phrase in text

    def test_deterministic(self):
        assert render_template("patient", PATIENT_VARS) == render_template("patient", PATIENT_VARS)


def openai_transport(responses: list, seen: list):
    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(json.loads(request.content))
        item = responses.pop(0)
        if isinstance(item, Exception):
            raise item
        status, body = item
        return httpx.Response(status, json=body)
    return httpx.MockTransport(handler)


def ok(text: str):
    return 200, {"choices": [{"message": {"role": "assistant", "content": text}}]}


class TestHTTPBackend:
    def test_request_body_carries_role_params(self):
        seen: list = []
        backend = HTTPBackend("http://llm.local/v1", "m", transport=openai_transport([ok("hello")], seen))
        out = complete(backend, USER, ROLE_PRESETS[Role.PATIENT_GENERATOR], seed=9)
        assert out == "hello"
        body = seen[0]
        assert body["temperature"] == 0.7
        assert (body["top_p"], body["max_tokens"], body["frequency_penalty"]) == (0.95, 256, 0.0)
        assert body["model"] == "m" and body["seed"] == 9
        assert body["messages"] == [{"role": "user", "content": "hi"}]

    def test_three_transient_failures_exhaust_retries(self):
        seen: list = []
        script = [(503, {}), httpx.ConnectError("boom"), (429, {})]
        backend = HTTPBackend("http://llm.local", "m", transport=openai_transport(script, seen))
        with pytest.raises(LLMTransportError):
            complete(backend, USER, ROLE_PRESETS[Role.DOCTOR], retries=2, sleep=no_sleep)
        assert len(seen) == 3

    def test_backend_error_keeps_body(self):
        backend = HTTPBackend("http://llm.local", "m",
                              transport=openai_transport([(400, {"error": "bad model"})], []))
        with pytest.raises(BackendError) as err:
            complete(backend, USER, ROLE_PRESETS[Role.DOCTOR], sleep=no_sleep)
        assert err.value.status == 400 and "bad model" in err.value.body

    def test_api_key_header(self, monkeypatch):
        monkeypatch.setenv("VERIPATIENT_LLM_API_KEY", "sk-test")
        headers = []
        status, body = ok("x")
        transport = httpx.MockTransport(lambda r: headers.append(r.headers) or httpx.Response(status, json=body))
        complete(HTTPBackend("http://llm.local", "m", transport=transport), USER, ROLE_PRESETS[Role.JUDGE])
        assert headers[0]["authorization"] == "Bearer sk-test"


class TestReplayAndComplete:
    def test_echo(self):
        assert complete(ReplayBackend(script=["hello"]), USER, ROLE_PRESETS[Role.DOCTOR]) == "hello"

    def test_order_and_exhaustion(self):
        backend = ReplayBackend(script=["a", "b"])
        params = ROLE_PRESETS[Role.DOCTOR]
        assert [complete(backend, USER, params) for _ in range(2)] == ["a", "b"]
        with pytest.raises(LLMError, match="exhausted"):
            complete(backend, USER, params)

    def test_cycle(self):
        backend = ReplayBackend(script=["a", "b"], cycle=True)
        assert [backend.complete(USER, ROLE_PRESETS[Role.DOCTOR]) for _ in range(3)] == ["a", "b", "a"]

    def test_transient_then_success(self):
        backend = ReplayBackend(script=[{"error": "transient"}, {"error": "transient"}, "ok"])
        sleeps: list[float] = []
        out = complete(backend, USER, ROLE_PRESETS[Role.DOCTOR], retries=2, backoff=0.5, sleep=sleeps.append)
        assert out == "ok"
        assert sleeps == [0.5, 1.0]

    def test_retry_arithmetic(self):
        backend = ReplayBackend(script=[TransientError("x")] * 3 + ["late"])
        with pytest.raises(LLMTransportError):
            complete(backend, USER, ROLE_PRESETS[Role.DOCTOR], retries=2, sleep=no_sleep)
        assert len(backend.requests) == 3

    def test_responder(self):
        backend = ReplayBackend(responder=lambda msgs: msgs[-1].content.upper())
        assert complete(backend, USER, ROLE_PRESETS[Role.DOCTOR]) == "HI"

    def test_audit_log(self, tmp_path):
        log = tmp_path / "audit.jsonl"
        backend = ReplayBackend(script=[{"error": "transient"}, "fine"])
        complete(backend, USER, ROLE_PRESETS[Role.VERIFIER], audit_log=log, sleep=no_sleep, role="verifier")
        records = [json.loads(line) for line in log.read_text().splitlines()]
        assert len(records) == 2
        assert records[0]["id"] == records[1]["id"]
        assert records[1]["response"] == "fine" and records[1]["temperature"] == 0.0

    def test_empty_messages(self):
        with pytest.raises(ValueError):
            complete(ReplayBackend(script=["x"]), [], ROLE_PRESETS[Role.DOCTOR])


class TestFitMessages:
    def test_drops_oldest_history_first(self):
        msgs = [ChatMessage("system", "s" * 8)] + [ChatMessage("user", f"{i}" * 8) for i in range(4)]
        kept = fit_messages(msgs, max_input_tokens=6)  # 24 chars
        assert [m.content[0] for m in kept] == ["s", "2", "3"]

    def test_within_budget_untouched(self):
        msgs = [ChatMessage("system", "a"), ChatMessage("user", "b")]
        assert fit_messages(msgs, 4096) == msgs

    def test_last_message_kept(self):
        msgs = [ChatMessage("user", "x" * 100)]
        assert fit_messages(msgs, 1) == msgs


class TestGateway:
    def test_routes_roles_with_presets(self):
        doctor = ReplayBackend(script=["q"])
        gw = Gateway(backends={Role.DOCTOR: doctor}, seed=5)
        assert gw.complete(Role.DOCTOR, USER) == "q"
        _, params, seed = doctor.requests[0]
        assert params.temperature == 0.3 and seed == 5
        assert gw.calls == {Role.DOCTOR: 1}

    def test_missing_role(self):
        with pytest.raises(LLMError):
            Gateway(backends={}).complete(Role.JUDGE, USER)


class TestEndpointConfig:
    def test_replay_per_case_script(self):
        cfg = EndpointConfig.from_dict({"kind": "replay", "script": ["a"], "per_case": {"X": ["b"]}})
        assert cfg.make("X").complete(USER, ROLE_PRESETS[Role.DOCTOR]) == "b"
        assert cfg.make("Y").complete(USER, ROLE_PRESETS[Role.DOCTOR]) == "a"

    @pytest.mark.parametrize(
        "data",
        [
            {"kind": "http", "model": "m"},
            {"kind": "replay"},
            {"kind": "grpc", "base_url": "x", "model": "m"},
            {"kind": "http", "base_url": "x", "model": "m", "temperature": 1},
        ],
    )
    def test_invalid(self, data):
        with pytest.raises(ValueError):
            EndpointConfig.from_dict(data)

    def test_http(self):
        backend = EndpointConfig.from_dict({"base_url": "http://h/v1", "model": "llama"}).make()
        assert isinstance(backend, HTTPBackend) and backend.model == "llama"
