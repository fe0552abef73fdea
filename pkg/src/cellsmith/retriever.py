"""Retrieval-augmented prompting support.

A corpus of library docs, tutorials, and worked solutions is embedded
once at ingest; queries do an exact exhaustive cosine scan (corpora here
are desk-scale), optionally restricted by library metadata.  Retrieval
only happens at all when the step mentions a known library — by hint or
by whole-token match in the instruction.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from typing import Iterable, Optional, Protocol, Sequence

from .model import StepSpec

__all__ = [
    "CorpusDoc",
    "EmbeddingVector",
    "RetrievedItem",
    "EmbeddingIndex",
    "Embedder",
    "HashingEmbedder",
    "IngestError",
    "QueryError",
    "cosine",
    "ingest",
    "query",
    "should_retrieve",
    "load_corpus",
    "save_index",
    "load_index",
]

DOC_KINDS = ("library_doc", "tutorial", "solution")


class IngestError(ValueError):
    pass


class QueryError(RuntimeError):
    pass


@dataclass(frozen=True)
class CorpusDoc:
    doc_id: str
    library: str
    kind: str
    text: str
    function_name: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in DOC_KINDS:
            raise IngestError(f"doc {self.doc_id}: unknown kind {self.kind!r}")
        if not self.text or not self.text.strip():
            raise IngestError(f"doc {self.doc_id}: text must be non-empty")


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise ValueError("embedding vector must be non-empty")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("embedding vector entries must be finite")

    @property
    def dim(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class RetrievedItem:
    function_name: str
    usage: str
    library: str
    score: float


class Embedder(Protocol):
    name: str

    def embed(self, text: str) -> EmbeddingVector: ...


class HashingEmbedder:
    """Deterministic bag-of-tokens embedder for offline use and tests.

    Tokens are hashed into a fixed number of buckets with a stable hash
    (no process randomization), so identical texts always embed
    identically on any machine.
    """

    def __init__(self, dim: int = 64) -> None:
        self.dim = dim
        self.name = f"hashing-{dim}"

    def embed(self, text: str) -> EmbeddingVector:
        values = [0.0] * self.dim
        for token in re.findall(r"[A-Za-z0-9_]+", text.lower()):
            h = 2166136261
            for ch in token.encode("utf-8"):  # FNV-1a, stable across runs
                h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
            values[h % self.dim] += 1.0 if (h >> 16) & 1 else -1.0
        if not any(values):
            values[0] = 1.0  # degenerate text still gets a usable vector
        return EmbeddingVector(tuple(values))


@dataclass(frozen=True)
class EmbeddingIndex:
    docs: tuple[CorpusDoc, ...]
    vectors: tuple[EmbeddingVector, ...]
    by_library: dict[str, tuple[int, ...]]
    provider_name: str
    dim: int


def cosine(a: EmbeddingVector | Sequence[float],
           b: EmbeddingVector | Sequence[float]) -> float:
    """Cosine similarity; rejects zero vectors and mismatched dims."""
    va = a.values if isinstance(a, EmbeddingVector) else tuple(a)
    vb = b.values if isinstance(b, EmbeddingVector) else tuple(b)
    if len(va) != len(vb):
        raise ValueError(f"dim mismatch: {len(va)} vs {len(vb)}")
    dot = sum(x * y for x, y in zip(va, vb))
    norm_a = math.sqrt(sum(x * x for x in va))
    norm_b = math.sqrt(sum(y * y for y in vb))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ValueError("cosine undefined for zero vectors")
    return dot / (norm_a * norm_b)


def ingest(docs: Sequence[CorpusDoc], embedder: Embedder) -> EmbeddingIndex:
    """Embed every doc exactly once and build the library lookup."""
    vectors: list[EmbeddingVector] = []
    dim: Optional[int] = None
    for doc in docs:
        try:
            vector = embedder.embed(doc.text)
        except Exception as exc:
            raise IngestError(f"embedding failed for doc {doc.doc_id}: {exc}") from exc
        if dim is None:
            dim = vector.dim
        elif vector.dim != dim:
            raise IngestError(
                f"doc {doc.doc_id}: vector dim {vector.dim} != index dim {dim}")
        vectors.append(vector)
    by_library: dict[str, list[int]] = {}
    for i, doc in enumerate(docs):
        by_library.setdefault(doc.library, []).append(i)
    return EmbeddingIndex(
        docs=tuple(docs),
        vectors=tuple(vectors),
        by_library={lib: tuple(ids) for lib, ids in by_library.items()},
        provider_name=getattr(embedder, "name", "unknown"),
        dim=dim or 0,
    )


def query(index: EmbeddingIndex, task_text: str,
          library_filter: Optional[set[str]] = None, k: int = 3,
          embedder: Optional[Embedder] = None) -> list[RetrievedItem]:
    """Top-k most similar docs, exact scan, ties broken by doc_id."""
    if not index.docs or k <= 0:
        return []
    if embedder is None:
        raise QueryError("query requires the embedder that built the index")
    try:
        query_vec = embedder.embed(task_text)
    except Exception as exc:
        raise QueryError(f"embedding query failed: {exc}") from exc
    if library_filter is not None:
        candidate_ids: Iterable[int] = sorted(
            i for lib in library_filter for i in index.by_library.get(lib, ()))
    else:
        candidate_ids = range(len(index.docs))
    scored = []
    for i in candidate_ids:
        doc = index.docs[i]
        score = cosine(query_vec, index.vectors[i])
        scored.append((-score, doc.doc_id, doc, score))
    scored.sort(key=lambda item: (item[0], item[1]))
    return [
        RetrievedItem(
            function_name=doc.function_name or doc.doc_id,
            usage=doc.text,
            library=doc.library,
            score=score,
        )
        for _, _, doc, score in scored[:k]
    ]


def should_retrieve(step: StepSpec, known_libraries: Iterable[str] = ()) -> bool:
    """Retrieve only when the step mentions a library: a hint is present,
    or a known library name appears as a whole token in the instruction."""
    if step.library_hints:
        return True
    instruction = step.instruction.lower()
    for library in known_libraries:
        name = library.lower().strip()
        if not name:
            continue
        pattern = r"(?<![A-Za-z0-9_-])" + re.escape(name) + r"(?![A-Za-z0-9_-])"
        if re.search(pattern, instruction):
            return True
    return False


# ---------------------------------------------------------------------------
# Corpus / index files
# ---------------------------------------------------------------------------


def load_corpus(data: str | bytes) -> list[CorpusDoc]:
    """Parse a corpus file: a JSON array of doc records."""
    doc = json.loads(data)
    if not isinstance(doc, list):
        raise IngestError("corpus file must be a JSON array of docs")
    out = []
    for i, raw in enumerate(doc):
        if not isinstance(raw, dict):
            raise IngestError(f"corpus[{i}]: expected an object")
        unknown = set(raw) - {"doc_id", "library", "kind", "text", "function_name"}
        if unknown:
            raise IngestError(f"corpus[{i}]: unknown fields {sorted(unknown)}")
        try:
            out.append(CorpusDoc(
                doc_id=raw["doc_id"], library=raw["library"], kind=raw["kind"],
                text=raw["text"], function_name=raw.get("function_name")))
        except KeyError as exc:
            raise IngestError(f"corpus[{i}]: missing field {exc}") from None
    return out


def save_index(index: EmbeddingIndex, path: str) -> None:
    payload = {
        "provider": index.provider_name,
        "dim": index.dim,
        "docs": [
            {
                "doc_id": d.doc_id, "library": d.library, "kind": d.kind,
                "text": d.text, "function_name": d.function_name,
            }
            for d in index.docs
        ],
        "vectors": [list(v.values) for v in index.vectors],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)


def load_index(path: str) -> EmbeddingIndex:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        docs = tuple(
            CorpusDoc(doc_id=d["doc_id"], library=d["library"], kind=d["kind"],
                      text=d["text"], function_name=d.get("function_name"))
            for d in payload["docs"])
        vectors = tuple(EmbeddingVector(tuple(v)) for v in payload["vectors"])
    except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
        raise IngestError(f"malformed index file {path}: {exc}") from exc
    by_library: dict[str, list[int]] = {}
    for i, doc in enumerate(docs):
        by_library.setdefault(doc.library, []).append(i)
    return EmbeddingIndex(
        docs=docs, vectors=vectors,
        by_library={lib: tuple(ids) for lib, ids in by_library.items()},
        provider_name=payload.get("provider", "unknown"),
        dim=int(payload.get("dim", 0)),
    )
