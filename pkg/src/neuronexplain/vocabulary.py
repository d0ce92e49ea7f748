"""Concept vocabulary built by asking an LLM, one class at a time, for distinguishing features.

Replies are parsed as lists, normalized, and merged into one deduplicated
vocabulary. ``LLMClient`` runs live (HTTP chat-completion), from recorded
fixture files, or live while recording fixtures.
"""

from __future__ import annotations

import logging
import os
import re
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import httpx

from ._io import canonical_json, hash_obj, read_json, slugify, write_json

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "What are useful features for distinguishing a {class_name} in an image? "
    "Please give me a list of short phrases."
)
SCHEMA_VERSION = 1
MAX_CONCEPT_CHARS = 120
MAX_PER_CLASS = 20

ENDPOINT_ENV = "NEURONEXPLAIN_LLM_ENDPOINT"
TOKEN_ENV = "NEURONEXPLAIN_LLM_TOKEN"
MODEL_ENV = "NEURONEXPLAIN_LLM_MODEL"


class VocabularyError(ValueError):
    pass


class FixtureMissingError(VocabularyError):
    def __init__(self, class_name: str, path: Path):
        super().__init__(f"no fixture for class {class_name!r} (expected {path})")
        self.class_name = class_name


class UnparseableReplyError(VocabularyError):
    def __init__(self, class_name: str, raw: str):
        super().__init__(f"reply for class {class_name!r} contains no list items: {raw!r}")
        self.raw = raw


class LLMTimeoutError(RuntimeError):
    pass


class SchemaVersionError(VocabularyError):
    pass


_TRAILING_PUNCT = re.compile(r"[\s.,;:!?]+$")
_MARKER = re.compile(r"^\s*(?:[-*•]|\(?\d+[.)])\s+")


def normalize_key(text: str) -> str:
    """Lowercase, collapse whitespace, strip trailing punctuation."""
    return _TRAILING_PUNCT.sub("", " ".join(text.split()).lower())


def build_prompt(class_name: str) -> str:
    name = class_name.strip()
    if not name:
        raise VocabularyError("empty class name")
    return PROMPT_TEMPLATE.format(class_name=name)


def parse_reply(text: str) -> list[str]:
    """List items of an LLM reply.

    Lines with ``-``, ``*``, bullet or ``1.``/``1)`` markers win; if no line
    carries a marker, every non-empty line is an item.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    marked = [_MARKER.sub("", ln, count=1) for ln in lines if _MARKER.match(ln)]
    items = marked if marked else [ln for ln in lines if not ln.rstrip().endswith(":")]
    out = []
    for item in items:
        item = item.strip().strip("*_\"'`").strip()
        if item:
            out.append(item)
    return out


@dataclass
class Concept:
    text: str
    source_classes: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.text = self.text.strip()
        if not self.text:
            raise VocabularyError("empty concept text")
        if len(self.text) > MAX_CONCEPT_CHARS:
            raise VocabularyError(f"concept longer than {MAX_CONCEPT_CHARS} chars: {self.text[:40]}...")

    @property
    def key(self) -> str:
        return normalize_key(self.text)

    def to_dict(self) -> dict:
        return {"text": self.text, "source_classes": list(self.source_classes)}


@dataclass
class Vocabulary:
    concepts: list[Concept]
    dataset_tag: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        keys = [c.key for c in self.concepts]
        if len(set(keys)) != len(keys):
            raise VocabularyError("duplicate normalized keys in vocabulary")

    def __len__(self) -> int:
        return len(self.concepts)

    def __iter__(self):
        return iter(self.concepts)

    @property
    def texts(self) -> list[str]:
        return [c.text for c in self.concepts]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset_tag": self.dataset_tag,
            "provenance": dict(self.provenance),
            "concepts": [c.to_dict() for c in self.concepts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise SchemaVersionError(f"unsupported vocabulary schema version {version} (expected {SCHEMA_VERSION})")
        concepts = [Concept(c["text"], list(c.get("source_classes", []))) for c in d["concepts"]]
        return cls(concepts, d.get("dataset_tag", ""), dict(d.get("provenance", {})))

    def content_hash(self) -> str:
        return hash_obj([c.to_dict() for c in self.concepts])

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_texts(cls, texts: Iterable[str], source: str = "manual", dataset_tag: str = "") -> "Vocabulary":
        return merge_vocabulary([[Concept(t, [source]) for t in texts]], dataset_tag=dataset_tag)


def save_vocabulary(vocab: Vocabulary, path: str | os.PathLike) -> Path:
    return write_json(path, vocab.to_dict())


def load_vocabulary(path: str | os.PathLike) -> Vocabulary:
    return Vocabulary.from_dict(read_json(path))


def merge_vocabulary(
    per_class: Sequence[Sequence[Concept]],
    dataset_tag: str = "",
    provenance: dict | None = None,
) -> Vocabulary:
    """Union of per-class lists, deduplicated by normalized key in first-seen order."""
    if not any(per_class):
        raise VocabularyError("all descriptor lists are empty")
    merged: dict[str, Concept] = {}
    for concepts in per_class:
        for c in concepts:
            existing = merged.get(c.key)
            if existing is None:
                merged[c.key] = Concept(c.text, list(c.source_classes))
            else:
                for src in c.source_classes:
                    if src not in existing.source_classes:
                        existing.source_classes.append(src)
    return Vocabulary(list(merged.values()), dataset_tag, dict(provenance or {}))


@dataclass
class LLMClient:
    """Chat-completion client with ``live``, ``fixture`` and ``record`` modes.

    Fixture mode reads ``<fixture_dir>/<class-slug>.txt`` and never touches the
    network. Record mode calls the endpoint and saves each raw reply there.
    """

    mode: str = "fixture"
    endpoint: str | None = None
    fixture_dir: str | None = None
    model_id: str = "gpt-3.5-turbo"
    request_timeout: float = 60.0
    retry_budget: int = 3
    backoff: float = 1.0
    token: str | None = None
    transport: httpx.BaseTransport | None = None

    def __post_init__(self):
        if self.mode not in ("live", "fixture", "record"):
            raise VocabularyError(f"unknown LLM client mode {self.mode!r}")
        if self.mode in ("fixture", "record") and not self.fixture_dir:
            raise VocabularyError(f"{self.mode} mode needs a fixture directory")
        if self.mode in ("live", "record"):
            self.endpoint = self.endpoint or os.environ.get(ENDPOINT_ENV)
            self.token = self.token or os.environ.get(TOKEN_ENV)
            self.model_id = os.environ.get(MODEL_ENV, self.model_id)
            if not self.endpoint:
                raise VocabularyError(f"live mode needs an endpoint (set {ENDPOINT_ENV})")

    def fixture_path(self, class_name: str) -> Path:
        return Path(self.fixture_dir or ".") / f"{slugify(class_name)}.txt"

    def complete(self, prompt: str, class_name: str) -> str:
        if self.mode == "fixture":
            path = self.fixture_path(class_name)
            if not path.exists():
                raise FixtureMissingError(class_name, path)
            return path.read_text(encoding="utf-8")
        reply = self._post(prompt)
        if self.mode == "record":
            path = self.fixture_path(class_name)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(reply, encoding="utf-8")
        return reply

    def _post(self, prompt: str) -> str:
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        body = {"model": self.model_id, "messages": [{"role": "user", "content": prompt}]}
        last_exc: Exception | None = None
        with httpx.Client(timeout=self.request_timeout, transport=self.transport) as client:
            for attempt in range(self.retry_budget + 1):
                try:
                    resp = client.post(self.endpoint, json=body, headers=headers)
                    resp.raise_for_status()
                    return resp.json()["choices"][0]["message"]["content"]
                except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                    last_exc = exc
                    log.warning("LLM request failed (attempt %d): %s", attempt + 1, exc)
                    if attempt < self.retry_budget and self.backoff > 0:
                        time.sleep(self.backoff * 2**attempt)
        raise LLMTimeoutError(f"LLM request failed after {self.retry_budget + 1} attempts: {last_exc}")


def query_descriptors(client: LLMClient, class_name: str, max_per_class: int = MAX_PER_CLASS) -> list[Concept]:
    prompt = build_prompt(class_name)
    raw = client.complete(prompt, class_name.strip())
    items = parse_reply(raw)
    concepts = []
    for item in items:
        if len(item) > MAX_CONCEPT_CHARS:
            log.warning("dropping over-long descriptor for %s: %.40s...", class_name, item)
            continue
        concepts.append(Concept(item, [class_name.strip()]))
    if not concepts:
        raise UnparseableReplyError(class_name, raw)
    return concepts[:max_per_class]


def build_vocabulary(
    client: LLMClient,
    class_names: Sequence[str],
    dataset_tag: str = "",
    max_per_class: int = MAX_PER_CLASS,
    add_class_names: bool = False,
) -> Vocabulary:
    per_class = []
    for name in class_names:
        concepts = query_descriptors(client, name, max_per_class)
        if add_class_names:
            concepts = [Concept(name.strip(), [name.strip()])] + concepts
        per_class.append(concepts)
    provenance = {
        "llm_model_id": "fixture" if client.mode == "fixture" else client.model_id,
        "prompt_template": PROMPT_TEMPLATE,
        # fixture builds carry no wall-clock time so they stay byte-reproducible
        "created_at": None if client.mode == "fixture" else datetime.now(timezone.utc).isoformat(),
    }
    return merge_vocabulary(per_class, dataset_tag, provenance)
