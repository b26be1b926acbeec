"""Exact cosine-similarity context store and Top@k retrieval accuracy.

Stores stay small (order 10k records), so ranking is an exact brute-force
scan; ties break by insertion order for determinism.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DuplicateId, EmptyStore, ZeroEmbedding, ZeroQuery
from .workflow import DONE, ApiCommand, ScanStage

EMBED_DIM = 256


@dataclass
class ContextRecord:
    """One historical scanning context: two frame references, the previous
    and ground-truth stages, annotations, and the rendered VQA text block."""

    id: str
    volume_id: str
    first_image_ref: str
    last_image_ref: str
    prev_stage: ScanStage
    stage: ScanStage
    explanation: str
    next_api: Union[ApiCommand, str]     # ApiCommand or DONE
    vqa_text: str = ""

    def to_json(self) -> dict:
        api = self.next_api.wire_name if isinstance(self.next_api, ApiCommand) \
            else str(self.next_api)
        return {
            "id": self.id,
            "volume_id": self.volume_id,
            "first_image_ref": self.first_image_ref,
            "last_image_ref": self.last_image_ref,
            "prev_stage": self.prev_stage.wire_name,
            "stage": self.stage.wire_name,
            "explanation": self.explanation,
            "next_api": api,
            "vqa_text": self.vqa_text,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ContextRecord":
        api = d["next_api"]
        if api != DONE:
            api = ApiCommand.from_wire(api)
        return cls(
            id=d["id"], volume_id=d["volume_id"],
            first_image_ref=d["first_image_ref"],
            last_image_ref=d["last_image_ref"],
            prev_stage=ScanStage.from_wire(d["prev_stage"]),
            stage=ScanStage.from_wire(d["stage"]),
            explanation=d["explanation"], next_api=api,
            vqa_text=d.get("vqa_text", ""),
        )


@dataclass
class RetrievalResult:
    """Ranked (id, cosine score) pairs; scores are non-increasing."""

    ranked: List[Tuple[str, float]]
    k: int


class ContextStore:
    """Id-indexed context records with parallel 256-dim embeddings."""

    def __init__(self, dim: int = EMBED_DIM):
        self.dim = dim
        self.records: Dict[str, ContextRecord] = {}
        self.insertion_order: List[str] = []
        self._embeddings: List[np.ndarray] = []
        self._matrix: Optional[np.ndarray] = None    # cached unit rows

    def __len__(self) -> int:
        return len(self.insertion_order)

    def add_context(self, record: ContextRecord, embedding) -> None:
        emb = np.asarray(embedding, dtype=np.float64)
        if record.id in self.records:
            raise DuplicateId(record.id)
        if emb.shape != (self.dim,):
            raise ValueError(f"embedding must be {self.dim}-dim")
        if not np.all(np.isfinite(emb)) or np.linalg.norm(emb) == 0:
            raise ZeroEmbedding("embedding must be finite and non-zero")
        self.records[record.id] = record
        self.insertion_order.append(record.id)
        self._embeddings.append(emb)
        self._matrix = None

    def _unit_matrix(self) -> np.ndarray:
        if self._matrix is None:
            M = np.stack(self._embeddings)
            self._matrix = M / np.linalg.norm(M, axis=1, keepdims=True)
        return self._matrix

    def query_topk(self, q, k: int,
                   exclude_volume: Optional[str] = None) -> RetrievalResult:
        """Exact top-k cosine ranking; ties break by earlier insertion."""
        if len(self) == 0:
            raise EmptyStore("cannot query an empty store")
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(q, dtype=np.float64)
        qn = np.linalg.norm(q)
        if qn == 0 or not np.all(np.isfinite(q)):
            raise ZeroQuery("query must be finite and non-zero")
        scores = self._unit_matrix() @ (q / qn)
        indices = np.arange(len(scores))
        if exclude_volume is not None:
            keep = np.array([self.records[self.insertion_order[i]].volume_id
                             != exclude_volume for i in indices])
            indices = indices[keep]
            scores = scores[keep]
            if indices.size == 0:
                raise EmptyStore("all records excluded from query")
        # stable sort on -score preserves insertion order among ties
        order = np.argsort(-scores, kind="stable")
        top = order[:k]
        ranked = [(self.insertion_order[int(indices[i])], float(scores[i]))
                  for i in top]
        return RetrievalResult(ranked=ranked, k=k)

    def embedding_of(self, record_id: str) -> np.ndarray:
        return self._embeddings[self.insertion_order.index(record_id)]

    # -- persistence: JSON manifest line + little-endian float64 blob --

    def save(self, path: str) -> None:
        manifest = {
            "dim": self.dim,
            "count": len(self),
            "dtype": "<f8",
            "records": [self.records[i].to_json() for i in self.insertion_order],
        }
        with open(path, "wb") as f:
            f.write(json.dumps(manifest, separators=(",", ":")).encode("utf-8"))
            f.write(b"\n")
            for emb in self._embeddings:
                f.write(np.ascontiguousarray(emb, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "ContextStore":
        with open(path, "rb") as f:
            manifest = json.loads(f.readline().decode("utf-8"))
            blob = f.read()
        store = cls(dim=manifest["dim"])
        dt = np.dtype(manifest["dtype"])
        for i, rec_json in enumerate(manifest["records"]):
            emb = np.frombuffer(blob, dtype=dt, count=store.dim,
                                offset=i * store.dim * dt.itemsize)
            store.add_context(ContextRecord.from_json(rec_json),
                              emb.astype(np.float64))
        return store


def topk_accuracy(store: ContextStore,
                  queries: Sequence[Tuple[np.ndarray, ScanStage]],
                  k: int,
                  exclude_volumes: Optional[Sequence[Optional[str]]] = None) -> dict:
    """Top@k stage-retrieval accuracy.

    A query scores 1 if any of its top-k retrieved records carries the true
    stage. Returns per-stage means and the overall mean.
    """
    if len(store) == 0:
        raise EmptyStore("empty store")
    if not queries:
        raise ValueError("no queries")
    per_stage_hits: Dict[ScanStage, List[int]] = {}
    hits = []
    for i, (emb, true_stage) in enumerate(queries):
        excl = exclude_volumes[i] if exclude_volumes is not None else None
        result = store.query_topk(emb, k, exclude_volume=excl)
        hit = int(any(store.records[rid].stage == true_stage
                      for rid, _ in result.ranked))
        hits.append(hit)
        per_stage_hits.setdefault(ScanStage(true_stage), []).append(hit)
    return {
        "k": k,
        "per_stage": {s.wire_name: float(np.mean(v))
                      for s, v in sorted(per_stage_hits.items())},
        "average": float(np.mean(hits)),
        "count": len(hits),
    }
