import json
import os
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from scansim.errors import (BackendUnavailable, ContextCountMismatch,
                            EmptyStore, MissingField, ProtocolError,
                            UnknownApi, UnknownStage)
from scansim.policy import (BACKEND_URL_ENV, BackendConfig, OraclePolicy,
                            PolicyDecision, STAGE_API_MAP, assemble_prompt,
                            bundle_to_text, bundle_to_wire, parse_decision,
                            rag_only_policy, remote_vlm_policy,
                            render_decision, system_prompt)
from scansim.retrieval import ContextRecord, ContextStore
from scansim.volume import SliceImage
from scansim.workflow import DONE, ApiCommand, ScanStage, stage_explanation

GOLDEN = os.path.join(os.path.dirname(__file__), "golden", "prompt.txt")


def ctx(i, prev_stage, stage, volume_id="vol_a"):
    return ContextRecord(
        id=f"ctx_{i}", volume_id=volume_id,
        first_image_ref=f"{volume_id}/frame_{i:05d}.png",
        last_image_ref=f"{volume_id}/frame_{i + 4:05d}.png",
        prev_stage=prev_stage, stage=stage,
        explanation=stage_explanation(stage),
        next_api=STAGE_API_MAP[stage])


def blank_image():
    return SliceImage(8, 8, np.zeros((8, 8), dtype=np.uint8))


class TestPromptAssembly:
    def _bundle(self):
        contexts = [
            ctx(0, ScanStage.EXAMINE_CCA_PROXIMAL,
                ScanStage.EXAMINE_CCA_DISTAL, "vol_a"),
            ctx(10, ScanStage.EXAMINE_CCA_DISTAL,
                ScanStage.EXAMINE_CCA_DISTAL, "vol_b"),
        ]
        img = blank_image()
        return assemble_prompt(
            ScanStage.EXAMINE_CCA_PROXIMAL, contexts, [img, img], k=2,
            image_refs=["run/frame_00003.png", "run/frame_00007.png"])

    def test_matches_golden_fixture(self):
        with open(GOLDEN, encoding="utf-8") as f:
            expect = f.read()
        assert bundle_to_text(self._bundle()) == expect

    def test_system_prompt_covers_vocabularies(self):
        text = system_prompt()
        for cmd in ApiCommand:
            assert cmd.wire_name in text
        assert DONE in text
        for stage in ScanStage:
            assert stage.wire_name in text

    def test_context_count_enforced(self):
        img = blank_image()
        with pytest.raises(ContextCountMismatch):
            assemble_prompt(ScanStage.EXAMINE_CCA_PROXIMAL, [], [img, img],
                            k=2)

    def test_two_images_required(self):
        with pytest.raises(ValueError):
            assemble_prompt(ScanStage.EXAMINE_CCA_PROXIMAL, [],
                            [blank_image()], k=0)

    def test_byte_stable(self):
        assert bundle_to_text(self._bundle()) == bundle_to_text(self._bundle())

    def test_wire_body(self):
        body = bundle_to_wire(self._bundle())
        assert body["query"]["prev_stage"] == "Examine CCA proximal"
        assert len(body["contexts"]) == 2
        assert len(body["query"]["images"]) == 2
        json.dumps(body)   # serializable


class TestReplyGrammar:
    def test_round_trip_full_vocabulary(self):
        apis = list(ApiCommand) + [DONE]
        for stage in ScanStage:
            for api in apis:
                d = PolicyDecision(stage, stage_explanation(stage), api)
                parsed = parse_decision(render_decision(d))
                assert parsed == d

    def test_case_insensitive_markers(self):
        text = ("STAGE: Examine CCA distal\n"
                "Explanation: moving along\n"
                "Next_API: tracking forward")
        d = parse_decision(text)
        assert d.stage is ScanStage.EXAMINE_CCA_DISTAL
        assert d.next_api is ApiCommand.TRACKING_FORWARD

    def test_surrounding_chatter_ignored(self):
        text = ("Sure, here is my assessment.\n"
                "stage: Return completed\n"
                "explanation: back at the bulb\n"
                "next_API: rotation clockwise\n"
                "Let me know if you need more.")
        assert parse_decision(text).stage is ScanStage.RETURN_COMPLETED

    def test_done_api(self):
        text = ("stage: Longitudinal scan completed\n"
                "explanation: finished\n"
                "next_API: done")
        assert parse_decision(text).next_api == DONE

    def test_missing_field(self):
        with pytest.raises(MissingField):
            parse_decision("stage: Examine CCA distal\nexplanation: x")

    def test_unknown_stage(self):
        with pytest.raises(UnknownStage):
            parse_decision("stage: Examine femoral\nexplanation: x\n"
                           "next_API: tracking forward")

    def test_unknown_api(self):
        with pytest.raises(UnknownApi):
            parse_decision("stage: Examine CCA distal\nexplanation: x\n"
                           "next_API: teleport")

    def test_first_occurrence_wins(self):
        text = ("stage: Examine CCA distal\n"
                "explanation: first\n"
                "next_API: tracking forward\n"
                "stage: Return completed")
        assert parse_decision(text).stage is ScanStage.EXAMINE_CCA_DISTAL


class TestRagOnlyPolicy:
    def test_top1_stage_and_mapped_api(self):
        store = ContextStore(dim=4)
        e1, e2 = np.array([1.0, 0, 0, 0]), np.array([0, 1.0, 0, 0])
        store.add_context(ctx(0, ScanStage.EXAMINE_CCA_PROXIMAL,
                              ScanStage.EXAMINE_CCA_DISTAL), e1)
        store.add_context(ctx(1, ScanStage.RETURN_TO_CAROTID_BULB,
                              ScanStage.RETURN_COMPLETED), e2)
        d = rag_only_policy(store, np.array([0.9, 0.1, 0, 0]))
        assert d.stage is ScanStage.EXAMINE_CCA_DISTAL
        assert d.next_api is ApiCommand.TRACKING_FORWARD
        d = rag_only_policy(store, np.array([0.1, 0.9, 0, 0]))
        assert d.stage is ScanStage.RETURN_COMPLETED
        assert d.next_api is ApiCommand.ROTATION_CLOCKWISE

    def test_terminal_stage_maps_to_done(self):
        store = ContextStore(dim=2)
        store.add_context(ctx(0, ScanStage.ROTATE_TO_LONGITUDINAL_VIEW,
                              ScanStage.LONGITUDINAL_SCAN_COMPLETED),
                          np.ones(2))
        assert rag_only_policy(store, np.ones(2)).next_api == DONE

    def test_empty_store(self):
        with pytest.raises(EmptyStore):
            rag_only_policy(ContextStore(dim=2), np.ones(2))


class TestOraclePolicy:
    def test_replays_script_then_holds_last(self, phantom_gt):
        policy = OraclePolicy(phantom_gt["script"])
        for entry in phantom_gt["script"]:
            d = policy.decide()
            assert d.stage.wire_name == entry["stage"]
            assert d.api_name == entry["next_api"]
        # past the end, the final entry repeats
        tail = policy.decide()
        assert tail.api_name == phantom_gt["script"][-1]["next_api"]


class _StubHandler(BaseHTTPRequestHandler):
    responses = []    # list of (status, body_bytes); popped per request
    requests_seen = []

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        _StubHandler.requests_seen.append(
            json.loads(self.rfile.read(length)))
        status, body = _StubHandler.responses.pop(0)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_backend():
    server = HTTPServer(("127.0.0.1", 0), _StubHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _StubHandler.responses = []
    _StubHandler.requests_seen = []
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


def good_reply():
    text = ("stage: Examine CCA distal\n"
            "explanation: Thyroid is not visible\n"
            "next_API: tracking forward")
    return json.dumps({"text": text}).encode("utf-8")


def sample_bundle():
    img = blank_image()
    contexts = [ctx(0, ScanStage.EXAMINE_CCA_PROXIMAL,
                    ScanStage.EXAMINE_CCA_DISTAL)]
    return assemble_prompt(ScanStage.EXAMINE_CCA_PROXIMAL, contexts,
                           [img, img], k=1)


class TestRemoteBackend:
    def test_successful_decision(self, stub_backend):
        _StubHandler.responses = [(200, good_reply())]
        config = BackendConfig(endpoint=stub_backend)
        d = remote_vlm_policy(config, sample_bundle())
        assert d.stage is ScanStage.EXAMINE_CCA_DISTAL
        assert d.next_api is ApiCommand.TRACKING_FORWARD
        body = _StubHandler.requests_seen[0]
        assert body["query"]["prev_stage"] == "Examine CCA proximal"

    def test_retries_then_succeeds(self, stub_backend):
        _StubHandler.responses = [(500, b"{}"), (200, good_reply())]
        config = BackendConfig(endpoint=stub_backend, retries=2)
        d = remote_vlm_policy(config, sample_bundle())
        assert d.stage is ScanStage.EXAMINE_CCA_DISTAL
        assert len(_StubHandler.requests_seen) == 2

    def test_exhausted_retries(self, stub_backend):
        _StubHandler.responses = [(500, b"{}")] * 3
        config = BackendConfig(endpoint=stub_backend, retries=2, timeout=2)
        with pytest.raises(BackendUnavailable):
            remote_vlm_policy(config, sample_bundle())

    def test_unreachable_host(self):
        config = BackendConfig(endpoint="http://127.0.0.1:9",
                               retries=0, timeout=0.5)
        with pytest.raises(BackendUnavailable):
            remote_vlm_policy(config, sample_bundle())

    def test_bad_envelope(self, stub_backend):
        _StubHandler.responses = [(200, b'{"no_text": 1}')]
        config = BackendConfig(endpoint=stub_backend)
        with pytest.raises(ProtocolError):
            remote_vlm_policy(config, sample_bundle())

    def test_env_var_overrides_endpoint(self, stub_backend, monkeypatch):
        monkeypatch.setenv(BACKEND_URL_ENV, stub_backend)
        _StubHandler.responses = [(200, good_reply())]
        config = BackendConfig(endpoint="http://127.0.0.1:9")
        d = remote_vlm_policy(config, sample_bundle())
        assert d.stage is ScanStage.EXAMINE_CCA_DISTAL
