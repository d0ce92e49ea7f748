"""Hand-built ground truth for every stage of the pipeline.

The planted model is a single conv layer, ReLU, global max pool, and a linear
head. Each planted unit is a color detector: its filter gives exactly 1.0 when
its window is filled with the trigger color and is negative for gray or
uniform-noise windows. The head routes each planted unit to its class, and a
trailing "background" class wins whenever no planted unit fires.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from ._io import hash_obj, read_json, slugify, write_json
from .concept_matcher import Embedder
from .data_ingest import Corpus, Image, ManifestRecord, quantize, write_manifest, write_png
from .model_adapter import ModelHandle, ModelSpec, NeuronRef, load_model
from .patch_extraction import DiscrepancyMap, OcclusionGrid
from .vocabulary import normalize_key

PLANTED_CLASS_WEIGHT = 0.9
CROSS_CLASS_WEIGHT = 0.1
BACKGROUND_BIAS = 0.05
BACKGROUND_LEVEL = 0.5

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
}


class PlantedNet(nn.Module):
    def __init__(self, n_units: int = 4, kernel_size: int = 4, n_classes: int = 3, in_channels: int = 3):
        super().__init__()
        self.features = nn.Conv2d(in_channels, n_units, kernel_size)
        self.relu = nn.ReLU()
        self.pool = nn.AdaptiveMaxPool2d(1)
        self.head = nn.Linear(n_units, n_classes)

    def forward(self, x):
        return self.head(self.pool(self.relu(self.features(x))).flatten(1))


@dataclass(frozen=True)
class Trigger:
    color: tuple[float, float, float]
    class_index: int
    concept: str


@dataclass
class PlantedSpec:
    image_size: tuple[int, int] = (16, 16)
    triggers: list[Trigger] = field(
        default_factory=lambda: [
            Trigger(COLORS["red"], 0, "red square"),
            Trigger(COLORS["green"], 1, "green square"),
        ]
    )
    trigger_size: int = 4
    n_units: int = 4
    noise_level: float = 0.0
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if self.trigger_size > min(h, w):
            raise ValueError("trigger larger than image")
        if len(self.triggers) > self.n_units:
            raise ValueError("need one unit per planted trigger")
        classes = [t.class_index for t in self.triggers]
        if sorted(classes) != list(range(len(classes))):
            raise ValueError("trigger classes must be 0..n_triggers-1, each used once")
        if len({normalize_key(t.concept) for t in self.triggers}) != len(self.triggers):
            raise ValueError("trigger concepts must be distinct")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")

    @property
    def n_classes(self) -> int:
        return len(self.triggers) + 1

    @property
    def class_names(self) -> list[str]:
        names = [f"{t.concept.split()[0]} object" for t in self.triggers]
        return names + ["background"]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["triggers"] = [{**asdict(t), "color": list(t.color)} for t in self.triggers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PlantedSpec":
        d = dict(d)
        d["image_size"] = tuple(d["image_size"])
        d["triggers"] = [Trigger(tuple(t["color"]), t["class_index"], t["concept"]) for t in d["triggers"]]
        return cls(**d)


@dataclass
class GroundTruth:
    unit_concepts: dict[int, str]
    unit_classes: dict[int, int]
    noise_units: list[int]
    regions: dict[str, tuple[int, int, int, int]] = field(default_factory=dict)  # id -> (row, col, h, w)
    image_classes: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "unit_concepts": {str(k): v for k, v in self.unit_concepts.items()},
            "unit_classes": {str(k): v for k, v in self.unit_classes.items()},
            "noise_units": list(self.noise_units),
            "regions": {k: list(v) for k, v in self.regions.items()},
            "image_classes": dict(self.image_classes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        return cls(
            unit_concepts={int(k): v for k, v in d["unit_concepts"].items()},
            unit_classes={int(k): v for k, v in d["unit_classes"].items()},
            noise_units=list(d["noise_units"]),
            regions={k: tuple(v) for k, v in d["regions"].items()},
            image_classes=dict(d["image_classes"]),
        )

    def save(self, path: str | os.PathLike) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GroundTruth":
        return cls.from_dict(read_json(path))

    def region_mask(self, image_id: str, shape: tuple[int, int]) -> np.ndarray:
        r, c, h, w = self.regions[image_id]
        m = np.zeros(shape, dtype=bool)
        m[r : r + h, c : c + w] = True
        return m


def planted_state_dict(spec: PlantedSpec) -> dict[str, torch.Tensor]:
    s = spec.trigger_size
    n_pix = s * s
    weight = torch.zeros(spec.n_units, 3, s, s, dtype=torch.float64)
    bias = torch.zeros(spec.n_units, dtype=torch.float64)
    for u, trig in enumerate(spec.triggers):
        # per-pixel direction +1 on channels the color saturates, -1 elsewhere;
        # scaled so a full trigger window gives 1 and a mid-gray window gives -2
        direction = torch.tensor([1.0 if ch > 0.5 else -1.0 for ch in trig.color], dtype=torch.float64)
        on = float(sum(ch for ch, d in zip(trig.color, direction) if d > 0) - sum(
            ch for ch, d in zip(trig.color, direction) if d < 0
        ))
        gray = float(direction.sum()) * 0.5
        alpha = 3.0 / (on - gray)
        weight[u] = (alpha / n_pix) * direction.view(3, 1, 1).expand(3, s, s)
        bias[u] = 1.0 - alpha * on
    gen = torch.Generator().manual_seed(spec.seed)
    for u in range(len(spec.triggers), spec.n_units):
        w = torch.randn(3, s, s, generator=gen, dtype=torch.float64) / n_pix
        w -= w.mean(dim=(1, 2), keepdim=True)  # zero response on any constant region
        weight[u] = w
    head_w = torch.zeros(spec.n_classes, spec.n_units, dtype=torch.float64)
    head_b = torch.zeros(spec.n_classes, dtype=torch.float64)
    n_trig = len(spec.triggers)
    for u, trig in enumerate(spec.triggers):
        head_w[trig.class_index, u] = PLANTED_CLASS_WEIGHT
        if n_trig > 1:
            head_w[trig.class_index, (u + 1) % n_trig] = CROSS_CLASS_WEIGHT
    head_b[-1] = BACKGROUND_BIAS
    return {"features.weight": weight, "features.bias": bias, "head.weight": head_w, "head.bias": head_b}


def planted_model_spec(spec: PlantedSpec, weight_source: str | None = None) -> ModelSpec:
    h, w = spec.image_size
    return ModelSpec(
        architecture="synthetic",
        builder="planted",
        builder_args={"n_units": spec.n_units, "kernel_size": spec.trigger_size, "n_classes": spec.n_classes},
        weight_source=weight_source,
        input_shape=(h, w, 3),
        preprocessing={},
        head_layer_name="head",
        final_layer="features",
        layer_aliases={"last_conv": "features"},
        dtype="float64",
        class_names=spec.class_names,
        name=f"planted_s{spec.seed}",
    )


def ground_truth_for(spec: PlantedSpec) -> GroundTruth:
    n_trig = len(spec.triggers)
    return GroundTruth(
        unit_concepts={u: t.concept for u, t in enumerate(spec.triggers)},
        unit_classes={u: t.class_index for u, t in enumerate(spec.triggers)},
        noise_units=list(range(n_trig, spec.n_units)),
    )


def make_planted_model(spec: PlantedSpec) -> tuple[ModelHandle, GroundTruth]:
    mspec = planted_model_spec(spec)
    module = PlantedNet(spec.n_units, spec.trigger_size, spec.n_classes).to(torch.float64)
    module.load_state_dict(planted_state_dict(spec))
    return ModelHandle(module, mspec), ground_truth_for(spec)


def write_planted_model(spec: PlantedSpec, out_dir: str | os.PathLike) -> Path:
    """Write weights and a model-spec JSON that ``load_model`` reads with no special path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(planted_state_dict(spec), out_dir / "planted_weights.pt")
    spec_path = out_dir / "model_spec.json"
    write_json(spec_path, planted_model_spec(spec, "planted_weights.pt").to_dict())
    return spec_path


def _background(rng: np.random.Generator, spec: PlantedSpec) -> np.ndarray:
    h, w = spec.image_size
    noise = rng.uniform(0.0, 1.0, size=(h, w, 3))
    return BACKGROUND_LEVEL + spec.noise_level * (noise - BACKGROUND_LEVEL)


def make_synthetic_corpus(
    spec: PlantedSpec,
    n_per_class: int,
    out_dir: str | os.PathLike | None = None,
    include_background: bool = False,
) -> tuple[Corpus, GroundTruth]:
    """Noise-background images, each carrying its class's trigger patch at a random location."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(spec.seed)
    gt = ground_truth_for(spec)
    h, w = spec.image_size
    s = spec.trigger_size
    images: list[Image] = []
    for trig in spec.triggers:
        for i in range(n_per_class):
            pixels = _background(rng, spec)
            r = int(rng.integers(0, h - s + 1))
            c = int(rng.integers(0, w - s + 1))
            pixels[r : r + s, c : c + s] = trig.color
            image_id = f"c{trig.class_index}_{i:04d}"
            images.append(Image(image_id, quantize(pixels), trig.class_index))
            gt.regions[image_id] = (r, c, s, s)
            gt.image_classes[image_id] = trig.class_index
    if include_background:
        bg_class = spec.n_classes - 1
        for i in range(n_per_class):
            image_id = f"c{bg_class}_{i:04d}"
            images.append(Image(image_id, quantize(_background(rng, spec)), bg_class))
            gt.image_classes[image_id] = bg_class
    corpus = Corpus.from_images(images, spec.class_names)
    if out_dir is not None:
        out_dir = Path(out_dir)
        records = []
        for im in images:
            rel = f"images/{im.image_id}.png"
            write_png(out_dir / rel, im.pixels)
            records.append(ManifestRecord(im.image_id, rel, im.label))
        manifest = out_dir / "manifest.jsonl"
        write_manifest(manifest, records, spec.class_names)
        gt.save(out_dir / "ground_truth.json")
        corpus.manifest_path = str(manifest)
    return corpus, gt


# -- mock embedder ---------------------------------------------------------


def color_detector(color: Sequence[float]) -> Callable[[np.ndarray], float]:
    """Linear detector: mean over pixels of (pixel - gray) . (color - gray). Zero on gray."""
    direction = np.asarray(color, dtype=np.float64) - BACKGROUND_LEVEL

    def detect(pixels: np.ndarray) -> float:
        centered = np.asarray(pixels, dtype=np.float64) - BACKGROUND_LEVEL
        return float((centered @ direction).mean())

    return detect


class MockEmbedder(Embedder):
    """Table-driven embedder with closed-form similarities.

    Dimension ``i`` belongs to table concept ``i``; the last dimension is the
    shared "unknown" direction. Text for a table concept embeds to its basis
    vector, any other text to the unknown vector. An image embeds to its
    normalized vector of detector responses, with a tiny unknown component so
    a featureless image still has unit norm.
    """

    kind = "mock"
    UNKNOWN_EPS = 1e-9

    def __init__(self, table: Mapping[str, Callable[[np.ndarray], float]], model_id: str | None = None):
        if not table:
            raise ValueError("mock embedder table must be non-empty")
        self.keys = [normalize_key(k) for k in table]
        self.detectors = list(table.values())
        self._index = {k: i for i, k in enumerate(self.keys)}
        # text embeddings are cached per model_id, so the id must pin the table layout
        self.model_id = model_id or f"mock-{hash_obj(self.keys)[:12]}"
        self.dim = len(self.keys) + 1

    @classmethod
    def colors(cls, suffix: str = "square") -> "MockEmbedder":
        return cls({f"{name} {suffix}": color_detector(rgb) for name, rgb in COLORS.items()})

    def embed_text(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("empty concept text")
        vec = np.zeros(self.dim)
        vec[self._index.get(normalize_key(text), self.dim - 1)] = 1.0
        return vec

    def embed_image(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=np.float64)
        if not np.all(np.isfinite(pixels)):
            raise ValueError("non-finite pixels")
        vec = np.array([d(pixels) for d in self.detectors] + [self.UNKNOWN_EPS])
        return vec / np.linalg.norm(vec)


def mock_embedder(table: Mapping[str, Callable[[np.ndarray], float]] | None = None) -> MockEmbedder:
    return MockEmbedder(table) if table else MockEmbedder.colors()


def planted_vocabulary_texts() -> list[str]:
    """Twelve concepts: all eight color-square table entries plus four off-table distractors."""
    return [f"{name} square" for name in COLORS] + [
        "striped texture",
        "a clock face with numbers or markings",
        "beak",
        "a structure made of glass or transparent material",
    ]


def fixture_replies(spec: PlantedSpec) -> dict[str, str]:
    """Recorded LLM replies, one per class name, used for offline vocabulary builds."""
    replies = {}
    for trig, name in zip(spec.triggers, spec.class_names):
        color = trig.concept.split()[0]
        replies[name] = (
            f"Here are some useful features:\n- {trig.concept.capitalize()}\n- bright {color} color\n"
            f"- sharp edges\n- small compact shape\n"
        )
    replies["background"] = "1. gray noise\n2. striped texture\n3. no distinct object\n"
    return replies


def write_fixtures(spec: PlantedSpec, fixture_dir: str | os.PathLike) -> Path:
    fixture_dir = Path(fixture_dir)
    fixture_dir.mkdir(parents=True, exist_ok=True)
    for name, text in fixture_replies(spec).items():
        (fixture_dir / f"{slugify(name)}.txt").write_text(text, encoding="utf-8")
    return fixture_dir


def write_testbed(out_dir: str | os.PathLike, spec: PlantedSpec, n_per_class: int = 8) -> dict[str, str]:
    """Materialize model spec, corpus, ground truth, and LLM fixtures under ``out_dir``."""
    out_dir = Path(out_dir)
    model_spec = write_planted_model(spec, out_dir / "model")
    corpus, _ = make_synthetic_corpus(spec, n_per_class, out_dir / "corpus")
    fixtures = write_fixtures(spec, out_dir / "fixtures")
    write_json(out_dir / "planted_spec.json", spec.to_dict())
    return {
        "model_spec": str(model_spec),
        "corpus": str(corpus.manifest_path),
        "fixtures": str(fixtures),
        "ground_truth": str(out_dir / "corpus" / "ground_truth.json"),
    }


# -- brute-force oracles ---------------------------------------------------


def brute_force_discrepancy(
    model: ModelHandle, neuron: NeuronRef, image: Image, grid: OcclusionGrid
) -> DiscrepancyMap:
    """Position-by-position loop: one occluded copy, one forward pass, no batching or caching."""
    original = model.neuron_activation(image, neuron).scalar
    h, w, c = image.pixels.shape
    scores = []
    for r0, c0 in grid.positions:
        occluded = image.pixels.copy()
        for r in range(r0, r0 + grid.size):
            for col in range(c0, c0 + grid.size):
                for ch in range(c):
                    occluded[r, col, ch] = grid.fill_value[ch]
        scores.append(abs(model.neuron_activation(occluded, neuron).scalar - original))
    return DiscrepancyMap(neuron, image.image_id, np.array(scores), grid)


def brute_force_field(scores: Sequence[float], grid: OcclusionGrid) -> np.ndarray:
    h, w = grid.image_hw
    m = len(grid.positions)
    field_ = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            total = 0.0
            for (r0, c0), s in zip(grid.positions, scores):
                if r0 <= r < r0 + grid.size and c0 <= c < c0 + grid.size:
                    total += s
            field_[r, c] = total / m
    return field_


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0
