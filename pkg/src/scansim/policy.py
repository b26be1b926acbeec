"""Decision policies: prompt assembly for a vision-language backend,
reply parsing over the closed stage/API vocabularies, a retrieval-only
baseline, a scripted oracle for end-to-end validation, and an HTTP client
for a remote backend."""

from __future__ import annotations

import base64
import json
import os
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import requests

from .errors import (BackendUnavailable, ContextCountMismatch, EmptyStore,
                     MissingField, ProtocolError)
from .retrieval import ContextRecord, ContextStore
from .volume import SliceImage
from .workflow import (DONE, ApiCommand, ScanStage, STAGE_WIRE_NAMES,
                       stage_explanation)

BACKEND_URL_ENV = "SCANSIM_BACKEND_URL"


@dataclass(frozen=True)
class PolicyDecision:
    stage: ScanStage
    explanation: str
    next_api: Union[ApiCommand, str]      # ApiCommand or DONE

    @property
    def api_name(self) -> str:
        if isinstance(self.next_api, ApiCommand):
            return self.next_api.wire_name
        return str(self.next_api)


@dataclass
class PromptBundle:
    system_text: str
    context_examples: List[str]
    query_text: str
    image_refs: List[str]                 # [I_{t-delta}, I_t]
    context_images: List[List[bytes]] = field(default_factory=list)
    query_images: List[bytes] = field(default_factory=list)


@dataclass
class BackendConfig:
    endpoint: str = ""
    timeout: float = 30.0
    retries: int = 2
    mode: str = "remote"                  # remote | rag_only | oracle

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    def resolved_endpoint(self) -> str:
        return os.environ.get(BACKEND_URL_ENV, "") or self.endpoint


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------

_API_NAMES = [cmd.wire_name for cmd in ApiCommand]
_STAGE_NAMES = [STAGE_WIRE_NAMES[s] for s in ScanStage]

_QUESTIONS = [
    "What is the current scanning stage?",
    "What is the explanation for this stage?",
    "What is the next_API to execute?",
]


def system_prompt() -> str:
    lines = [
        "You are a robotic sonographer assistant performing a carotid "
        "artery ultrasound examination.",
        "At each step you receive two ultrasound frames (an earlier frame "
        "and the current frame) together with the previously predicted "
        "scanning stage, and you must answer three questions about the "
        "current state of the scan.",
        "",
        "Executable APIs:",
    ]
    lines += [f"- {name}" for name in _API_NAMES]
    lines += ["- Done (the examination is complete; halt motion)", "",
              "Scanning stages, in order:"]
    lines += [f"{i + 1}. {name}" for i, name in enumerate(_STAGE_NAMES)]
    lines += [
        "",
        "Answer each question on its own labeled line, exactly in the form:",
        "stage: <one of the scanning stages>",
        "explanation: <one short sentence>",
        "next_API: <one of the APIs or Done>",
    ]
    return "\n".join(lines)


def render_context_text(record: ContextRecord) -> str:
    """The VQA block shown for one retrieved context example."""
    api = record.next_api.wire_name if isinstance(record.next_api, ApiCommand) \
        else str(record.next_api)
    return "\n".join([
        f"Previous stage: {record.prev_stage.wire_name}",
        f"Q: {_QUESTIONS[0]}",
        f"A: stage: {record.stage.wire_name}",
        f"Q: {_QUESTIONS[1]}",
        f"A: explanation: {record.explanation}",
        f"Q: {_QUESTIONS[2]}",
        f"A: next_API: {api}",
    ])


def assemble_prompt(prev_stage: ScanStage,
                    contexts: Sequence[ContextRecord],
                    images: Sequence[SliceImage],
                    k: int,
                    image_refs: Optional[Sequence[str]] = None) -> PromptBundle:
    """Build the full prompt bundle: system text, k rendered context
    examples, and the three-question query. Deterministic and byte-stable
    for identical inputs."""
    if len(contexts) != k:
        raise ContextCountMismatch(
            f"expected {k} context examples, got {len(contexts)}")
    if len(images) != 2:
        raise ValueError("exactly two query images required")

    rendered = []
    for i, rec in enumerate(contexts):
        text = rec.vqa_text or render_context_text(rec)
        rendered.append(f"Context example {i + 1}:\n{text}")

    query_lines = [
        f"Previous stage: {prev_stage.wire_name}",
        "The two attached images are the earlier frame and the current frame.",
    ]
    for q in _QUESTIONS:
        query_lines.append(f"Q: {q}")
    refs = list(image_refs) if image_refs is not None \
        else ["I_t_minus_delta", "I_t"]

    return PromptBundle(
        system_text=system_prompt(),
        context_examples=rendered,
        query_text="\n".join(query_lines),
        image_refs=refs,
        context_images=[],
        query_images=[img.to_png_bytes() for img in images],
    )


def bundle_to_text(bundle: PromptBundle) -> str:
    """Flatten a bundle into the single prompt text sent over the wire."""
    parts = [bundle.system_text, ""]
    for ex in bundle.context_examples:
        parts.extend([ex, ""])
    parts.append(bundle.query_text)
    return "\n".join(parts)


# ---------------------------------------------------------------------------
# Reply grammar
# ---------------------------------------------------------------------------

def render_decision(decision: PolicyDecision) -> str:
    return (f"stage: {decision.stage.wire_name}\n"
            f"explanation: {decision.explanation}\n"
            f"next_API: {decision.api_name}")


def parse_decision(reply_text: str) -> PolicyDecision:
    """Extract (stage, explanation, next_API) from labeled reply lines.

    Markers are case-insensitive; stage and API values must exact-match
    the closed vocabularies after whitespace normalization.
    """
    fields = {}
    for line in reply_text.splitlines():
        if ":" not in line:
            continue
        key, _, value = line.partition(":")
        key = key.strip().lower()
        if key in ("stage", "explanation", "next_api") and key not in fields:
            fields[key] = value.strip()
    for required in ("stage", "explanation", "next_api"):
        if required not in fields:
            raise MissingField(f"reply is missing '{required}:' line")
    stage = ScanStage.from_wire(fields["stage"])
    api_text = fields["next_api"]
    if " ".join(api_text.split()).lower() == DONE.lower():
        api: Union[ApiCommand, str] = DONE
    else:
        api = ApiCommand.from_wire(api_text)
    return PolicyDecision(stage=stage, explanation=fields["explanation"],
                          next_api=api)


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------

#: Default stage -> API map used by the retrieval-only baseline to close
#: the loop: forward until the transverse scan completes, backward until
#: the return completes, then rotate; Done at the terminal stage.
STAGE_API_MAP = {
    ScanStage.EXAMINE_CCA_PROXIMAL: ApiCommand.TRACKING_FORWARD,
    ScanStage.EXAMINE_CCA_DISTAL: ApiCommand.TRACKING_FORWARD,
    ScanStage.EXAMINE_BIFURCATION: ApiCommand.TRACKING_FORWARD,
    ScanStage.TRANSVERSE_SCAN_COMPLETED: ApiCommand.TRACKING_BACKWARD,
    ScanStage.RETURN_TO_CAROTID_BULB: ApiCommand.TRACKING_BACKWARD,
    ScanStage.RETURN_COMPLETED: ApiCommand.ROTATION_CLOCKWISE,
    ScanStage.ROTATE_TO_LONGITUDINAL_VIEW: ApiCommand.ROTATION_CLOCKWISE,
    ScanStage.LONGITUDINAL_SCAN_COMPLETED: DONE,
}


def rag_only_policy(store: ContextStore, query_embedding,
                    exclude_volume: Optional[str] = None) -> PolicyDecision:
    """Stage of the top-1 retrieved context, with the canonical explanation
    and the default stage-to-API map."""
    if len(store) == 0:
        raise EmptyStore("rag_only_policy needs a non-empty store")
    result = store.query_topk(query_embedding, 1, exclude_volume=exclude_volume)
    stage = store.records[result.ranked[0][0]].stage
    return PolicyDecision(stage=stage,
                          explanation=stage_explanation(stage),
                          next_api=STAGE_API_MAP[stage])


class OraclePolicy:
    """Scripted test backend replaying ground-truth labels step by step."""

    def __init__(self, script: Sequence[dict]):
        self.script = list(script)
        self.cursor = 0

    def decide(self) -> PolicyDecision:
        entry = self.script[min(self.cursor, len(self.script) - 1)]
        self.cursor += 1
        stage = ScanStage.from_wire(entry["stage"])
        api_name = entry["next_api"]
        api: Union[ApiCommand, str] = DONE if api_name == DONE \
            else ApiCommand.from_wire(api_name)
        return PolicyDecision(stage=stage,
                              explanation=stage_explanation(stage),
                              next_api=api)


def bundle_to_wire(bundle: PromptBundle) -> dict:
    """Wire request body for POST /v1/decide."""
    return {
        "system": bundle.system_text,
        "contexts": [{"text": text, "images": []}
                     for text in bundle.context_examples],
        "query": {
            "prev_stage": bundle.query_text.splitlines()[0]
                          .partition(":")[2].strip(),
            "questions": list(_QUESTIONS),
            "images": [base64.b64encode(b).decode("ascii")
                       for b in bundle.query_images],
            "text": bundle.query_text,
        },
    }


def remote_vlm_policy(config: BackendConfig,
                      bundle: PromptBundle) -> PolicyDecision:
    """POST the bundle to the remote backend and parse its labeled-line
    reply; retries transient failures up to config.retries."""
    if config.mode != "remote":
        raise ValueError("remote_vlm_policy requires mode='remote'")
    url = config.resolved_endpoint().rstrip("/") + "/v1/decide"
    body = bundle_to_wire(bundle)
    last_error = None
    for _ in range(config.retries + 1):
        try:
            resp = requests.post(url, json=body, timeout=config.timeout)
        except requests.RequestException as e:
            last_error = e
            time.sleep(0.05)
            continue
        if resp.status_code != 200:
            last_error = ProtocolError(f"HTTP {resp.status_code}")
            time.sleep(0.05)
            continue
        try:
            payload = resp.json()
        except (json.JSONDecodeError, ValueError):
            raise ProtocolError("reply is not valid JSON") from None
        if not isinstance(payload, dict) or "text" not in payload:
            raise ProtocolError("reply envelope missing 'text'")
        return parse_decision(payload["text"])
    raise BackendUnavailable(f"backend unreachable after retries: {last_error}")
