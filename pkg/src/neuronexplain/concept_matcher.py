"""Score vocabulary concepts against a neuron's patches and rank them.

The score of concept ``v`` is the mean, over the neuron's patches, of the
cosine similarity between patch and text embeddings. The explanation is the
vocabulary sorted by that score (ties by normalized key), truncated to top-m.
"""

from __future__ import annotations

import os
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import read_json, write_json
from .model_adapter import NeuronRef
from .patch_extraction import PatchSet, apply_mask
from .vocabulary import Concept, Vocabulary, normalize_key

CHECKPOINT_ENV = "NEURONEXPLAIN_EMBEDDER_DIR"


class Embedder(ABC):
    model_id: str
    dim: int
    kind: str = "pretrained-vlm"

    @abstractmethod
    def embed_text(self, text: str) -> np.ndarray: ...

    @abstractmethod
    def embed_image(self, pixels: np.ndarray) -> np.ndarray: ...

    def embed_images(self, images: Sequence[np.ndarray]) -> np.ndarray:
        return np.stack([self.embed_image(p) for p in images])


class ClipEmbedder(Embedder):
    """CLIP-family embedder loaded from a local Hugging Face checkpoint directory."""

    kind = "pretrained-vlm"

    def __init__(self, checkpoint: str | None = None, device: str = "cpu"):
        import torch
        from transformers import CLIPModel, CLIPProcessor

        checkpoint = checkpoint or os.environ.get(CHECKPOINT_ENV) or "openai/clip-vit-base-patch32"
        self._torch = torch
        self.model = CLIPModel.from_pretrained(checkpoint).eval().to(device)
        self.processor = CLIPProcessor.from_pretrained(checkpoint)
        self.device = device
        self.model_id = str(checkpoint)
        self.dim = int(self.model.config.projection_dim)

    def embed_text(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("empty concept text")
        inputs = self.processor(text=[text], return_tensors="pt", padding=True).to(self.device)
        with self._torch.no_grad():
            vec = self.model.get_text_features(**inputs)[0].double().cpu().numpy()
        return vec / np.linalg.norm(vec)

    def embed_image(self, pixels: np.ndarray) -> np.ndarray:
        return self.embed_images([pixels])[0]

    def embed_images(self, images: Sequence[np.ndarray]) -> np.ndarray:
        arrs = []
        for p in images:
            p = np.asarray(p, dtype=np.float64)
            if not np.all(np.isfinite(p)):
                raise ValueError("non-finite pixels")
            arrs.append(np.clip(np.rint(p * 255), 0, 255).astype(np.uint8))
        inputs = self.processor(images=arrs, return_tensors="pt").to(self.device)
        with self._torch.no_grad():
            vecs = self.model.get_image_features(**inputs).double().cpu().numpy()
        return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


class TextEmbeddingCache:
    """Thread-safe memo of text embeddings keyed by (embedder, wrapper, text)."""

    def __init__(self):
        self._store: dict[tuple[str, str, str], np.ndarray] = {}
        self._lock = threading.Lock()

    def get(self, embedder: Embedder, text: str, wrapper: str = "{}") -> np.ndarray:
        key = (embedder.model_id, wrapper, text)
        vec = self._store.get(key)
        if vec is None:
            vec = embedder.embed_text(wrapper.format(text))
            with self._lock:
                self._store.setdefault(key, vec)
        return vec

    def __len__(self) -> int:
        return len(self._store)


_default_cache = TextEmbeddingCache()


def embed_text(embedder: Embedder, concept: Concept | str, wrapper: str = "{}") -> np.ndarray:
    text = concept.text if isinstance(concept, Concept) else concept
    if not text or not text.strip():
        raise ValueError("empty concept text")
    return _default_cache.get(embedder, text, wrapper)


def embed_image(embedder: Embedder, pixels: np.ndarray) -> np.ndarray:
    return embedder.embed_image(pixels)


def similarity(embedder: Embedder, pixels: np.ndarray, concept: Concept | str, wrapper: str = "{}") -> float:
    return float(embed_image(embedder, pixels) @ embed_text(embedder, concept, wrapper))


@dataclass
class ConceptScore:
    concept: Concept
    score: float
    per_patch_scores: list[float]

    def to_dict(self) -> dict:
        return {"text": self.concept.text, "score": self.score, "per_patch_scores": list(self.per_patch_scores)}


@dataclass
class Explanation:
    neuron: NeuronRef
    ranked: list[ConceptScore]
    top_m: int
    vocabulary_hash: str = ""
    model_hash: str = ""
    params: dict = field(default_factory=dict)

    @property
    def top(self) -> list[ConceptScore]:
        return self.ranked[: self.top_m]

    @property
    def texts(self) -> list[str]:
        return [cs.concept.text for cs in self.top]

    def to_dict(self) -> dict:
        return {
            "neuron": self.neuron.to_dict(),
            "model_hash": self.model_hash,
            "vocabulary_hash": self.vocabulary_hash,
            "params": self.params,
            "ranked": [cs.to_dict() for cs in self.ranked],
            "top_m": self.top_m,
        }

    @classmethod
    def from_dict(cls, d: dict, neuron: NeuronRef, vocabulary: Vocabulary | None = None) -> "Explanation":
        by_key = {c.key: c for c in vocabulary} if vocabulary is not None else {}
        ranked = [
            ConceptScore(by_key.get(normalize_key(r["text"]), Concept(r["text"])), r["score"], list(r["per_patch_scores"]))
            for r in d["ranked"]
        ]
        return cls(neuron, ranked, d["top_m"], d.get("vocabulary_hash", ""), d.get("model_hash", ""), d.get("params", {}))


def render_patches(patches: PatchSet, mode: str = "fill") -> list[np.ndarray]:
    """Pixels handed to the embedder: stored gray-filled patches, or crops to the mask box."""
    if mode == "fill":
        return [p.pixels for p in patches.patches]
    if mode == "crop":
        return [apply_mask(p.pixels, p.mask, crop=True) for p in patches.patches]
    raise ValueError(f"unknown render mode {mode!r}")


def similarity_matrix(
    embedder: Embedder,
    patch_pixels: Sequence[np.ndarray],
    concepts: Sequence[Concept],
    wrapper: str = "{}",
    cache: TextEmbeddingCache | None = None,
) -> np.ndarray:
    """(n_patches, n_concepts) matrix of cosine similarities."""
    cache = cache if cache is not None else _default_cache
    img = embedder.embed_images(list(patch_pixels))
    txt = np.stack([cache.get(embedder, c.text, wrapper) for c in concepts])
    return img @ txt.T


def score_concept(embedder: Embedder, patches: PatchSet, concept: Concept, wrapper: str = "{}") -> ConceptScore:
    if len(patches) == 0:
        raise ValueError("empty patch set")
    phi = similarity_matrix(embedder, render_patches(patches), [concept], wrapper)[:, 0]
    return ConceptScore(concept, float(np.mean(phi)), [float(v) for v in phi])


def rank_concepts(phi: np.ndarray, concepts: Sequence[Concept]) -> list[ConceptScore]:
    """Mean each column of the patch-by-concept similarity matrix and sort descending."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim != 2 or phi.shape[0] == 0:
        raise ValueError("need at least one patch")
    scores = [
        ConceptScore(c, float(np.mean(phi[:, j])), [float(v) for v in phi[:, j]]) for j, c in enumerate(concepts)
    ]
    scores.sort(key=lambda cs: (-cs.score, cs.concept.key))
    return scores


def explain_neuron(
    embedder: Embedder,
    patches: PatchSet,
    vocabulary: Vocabulary,
    top_m: int = 5,
    wrapper: str = "{}",
    render_mode: str = "fill",
    cache: TextEmbeddingCache | None = None,
) -> Explanation:
    if len(vocabulary) == 0:
        raise ValueError("empty vocabulary")
    if top_m < 1:
        raise ValueError("top_m must be >= 1")
    if len(patches) == 0:
        raise ValueError("empty patch set")
    phi = similarity_matrix(embedder, render_patches(patches, render_mode), vocabulary.concepts, wrapper, cache)
    ranked = rank_concepts(phi, vocabulary.concepts)
    params = {"top_m": top_m, "embedder": embedder.model_id, "prompt_wrapper": wrapper, "render_mode": render_mode}
    return Explanation(patches.neuron, ranked, top_m, vocabulary.content_hash(), patches.model_hash, params)


def explanation_path(root: str | os.PathLike, model_name: str, neuron: NeuronRef) -> Path:
    return Path(root) / "explanations" / model_name / neuron.layer.name / f"{neuron.unit}.json"


def save_explanation(expl: Explanation, root: str | os.PathLike, model_name: str) -> Path:
    return write_json(explanation_path(root, model_name, expl.neuron), expl.to_dict())


def load_explanation(path: str | os.PathLike, neuron: NeuronRef, vocabulary: Vocabulary | None = None) -> Explanation:
    return Explanation.from_dict(read_json(path), neuron, vocabulary)
