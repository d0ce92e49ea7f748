"""Unit importance by ablation: per-class accuracy before and after silencing one unit."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_text, read_json, write_json
from .data_ingest import Corpus, Image
from .model_adapter import LayerId, ModelHandle, NeuronRef

log = logging.getLogger(__name__)


def _nan_to_none(values) -> list:
    return [None if (v is None or (isinstance(v, float) and math.isnan(v))) else float(v) for v in values]


def _none_to_nan(values) -> np.ndarray:
    return np.array([np.nan if v is None else v for v in values], dtype=np.float64)


@dataclass
class CategoryAccuracy:
    """Per-class top-1 accuracy; classes with no evaluation images hold NaN."""

    per_class: np.ndarray
    n_per_class: np.ndarray
    model_hash: str = ""

    @property
    def evaluated(self) -> np.ndarray:
        return self.n_per_class > 0

    def to_dict(self) -> dict:
        return {
            "per_class": _nan_to_none(self.per_class),
            "n_per_class": [int(n) for n in self.n_per_class],
            "model_hash": self.model_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CategoryAccuracy":
        return cls(_none_to_nan(d["per_class"]), np.array(d["n_per_class"], dtype=np.int64), d.get("model_hash", ""))

    def __eq__(self, other) -> bool:
        if not isinstance(other, CategoryAccuracy):
            return NotImplemented
        return (
            np.array_equal(self.per_class, other.per_class, equal_nan=True)
            and np.array_equal(self.n_per_class, other.n_per_class)
            and self.model_hash == other.model_hash
        )


def _images_of(data: Corpus | Sequence[Image]) -> list[Image]:
    return data.images() if isinstance(data, Corpus) else list(data)


def category_accuracy(model: ModelHandle, data: Corpus | Sequence[Image], batch_size: int = 64) -> CategoryAccuracy:
    images = _images_of(data)
    if any(im.label is None for im in images):
        raise ValueError("category accuracy needs a fully labeled corpus")
    labels = np.array([im.label for im in images], dtype=np.int64)
    preds = model.predict_batch(images, batch_size=batch_size).argmax(axis=1)
    c = model.class_count
    n = np.bincount(labels, minlength=c)
    correct = np.bincount(labels[preds == labels], minlength=c)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(n > 0, correct / np.maximum(n, 1), np.nan)
    return CategoryAccuracy(acc, n, model.content_hash)


def stratified_sample(data: Corpus | Sequence[Image], per_class: int = 50, seed: int = 0) -> list[Image]:
    """Fixed-seed sample of up to ``per_class`` images per label, in original order."""
    images = _images_of(data)
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, im in enumerate(images):
        by_class.setdefault(im.label, []).append(i)
    keep: list[int] = []
    for label in sorted(by_class):
        idx = by_class[label]
        if len(idx) > per_class:
            idx = sorted(rng.choice(idx, size=per_class, replace=False).tolist())
        keep.extend(idx)
    return [images[i] for i in sorted(keep)]


@dataclass
class AblationReport:
    neuron: NeuronRef
    baseline: CategoryAccuracy
    ablated: CategoryAccuracy

    @property
    def drops(self) -> np.ndarray:
        """Signed drop per class (baseline - ablated); NaN for classes not evaluated."""
        return self.baseline.per_class - self.ablated.per_class

    @property
    def max_drop(self) -> tuple[int, float]:
        d = self.drops
        if np.all(np.isnan(d)):
            return -1, float("nan")
        cls = int(np.nanargmax(d))
        return cls, float(d[cls])

    def to_dict(self) -> dict:
        cls, value = self.max_drop
        return {
            "neuron": self.neuron.to_dict(),
            "baseline": self.baseline.to_dict(),
            "ablated": self.ablated.to_dict(),
            "drops": _nan_to_none(self.drops),
            "max_drop": {"class": cls, "value": value},
        }

    @classmethod
    def from_dict(cls, d: dict, neuron: NeuronRef) -> "AblationReport":
        return cls(neuron, CategoryAccuracy.from_dict(d["baseline"]), CategoryAccuracy.from_dict(d["ablated"]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, AblationReport):
            return NotImplemented
        return self.neuron == other.neuron and self.baseline == other.baseline and self.ablated == other.ablated


def ablation_report(
    model: ModelHandle,
    neuron: NeuronRef,
    data: Corpus | Sequence[Image],
    baseline: CategoryAccuracy | None = None,
    batch_size: int = 64,
) -> AblationReport:
    images = _images_of(data)
    if baseline is None:
        baseline = category_accuracy(model, images, batch_size)
    token = model.ablate_unit(neuron)
    try:
        ablated = category_accuracy(model, images, batch_size)
    finally:
        model.restore(token)
    return AblationReport(neuron, baseline, ablated)


@dataclass
class RankingEntry:
    unit: int
    max_drop: float
    argmax_class: int


@dataclass
class LayerDropRanking:
    layer: LayerId
    entries: list[RankingEntry]
    reports: dict[int, AblationReport] = field(default_factory=dict, repr=False)

    def top(self, n: int = 256) -> list[RankingEntry]:
        return self.entries[:n]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["unit", "max_drop", "argmax_class"])
        for e in self.entries:
            writer.writerow([e.unit, repr(e.max_drop), e.argmax_class])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "layer": {"name": self.layer.name, "kind": self.layer.kind, "unit_count": self.layer.unit_count},
            "entries": [{"unit": e.unit, "max_drop": e.max_drop, "argmax_class": e.argmax_class} for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerDropRanking":
        layer = LayerId(d["layer"]["name"], d["layer"]["kind"], d["layer"]["unit_count"])
        entries = [RankingEntry(e["unit"], e["max_drop"], e["argmax_class"]) for e in d["entries"]]
        return cls(layer, entries)


def _sort_key(e: RankingEntry):
    v = e.max_drop
    return (math.inf if math.isnan(v) else -v, e.unit)


def layer_drop_ranking(
    model: ModelHandle,
    layer: LayerId,
    data: Corpus | Sequence[Image],
    units: Sequence[int] | None = None,
    workers: int = 1,
    batch_size: int = 64,
) -> LayerDropRanking:
    """Max per-class accuracy drop for each unit, sorted descending (unit index breaks ties).

    The baseline is measured once. With ``workers > 1`` each worker ablates on
    its own cloned handle.
    """
    images = _images_of(data)
    units = sorted(set(range(layer.unit_count) if units is None else units))
    baseline = category_accuracy(model, images, batch_size)

    def run(handle: ModelHandle, chunk: list[int]) -> list[AblationReport]:
        return [ablation_report(handle, NeuronRef(layer, u), images, baseline, batch_size) for u in chunk]

    if workers <= 1 or len(units) <= 1:
        reports = run(model, units)
    else:
        chunks = [units[i::workers] for i in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run, model.clone(), chunk) for chunk in chunks if chunk]
            reports = [r for f in futures for r in f.result()]
    by_unit = {r.neuron.unit: r for r in reports}
    entries = []
    for u in units:
        cls, value = by_unit[u].max_drop
        entries.append(RankingEntry(u, value, cls))
    entries.sort(key=_sort_key)
    return LayerDropRanking(layer, entries, by_unit)


def category_units(model: ModelHandle, cls: int, top_n: int) -> list[tuple[int, float]]:
    """Final-layer units with the largest classifier-head weight for ``cls``; ties by unit index."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    weights = model.classifier_head_weights(cls)
    if top_n > len(weights):
        warnings.warn(f"top_n={top_n} exceeds layer width {len(weights)}; clamping", stacklevel=2)
        top_n = len(weights)
    order = sorted(range(len(weights)), key=lambda u: (-weights[u], u))
    return [(u, float(weights[u])) for u in order[:top_n]]


def importance_explanation_join(
    ranking: LayerDropRanking,
    explanations_dir: str | os.PathLike,
    model_name: str,
    top_m: int | None = None,
) -> list[dict]:
    """Annotate each ranking entry with the top concepts from its saved explanation record."""
    base = Path(explanations_dir) / "explanations" / model_name / ranking.layer.name
    joined = []
    missing = []
    for e in ranking.entries:
        path = base / f"{e.unit}.json"
        entry = {"unit": e.unit, "max_drop": e.max_drop, "argmax_class": e.argmax_class}
        if path.exists():
            rec = read_json(path)
            m = top_m or rec.get("top_m", 5)
            entry["concepts"] = [r["text"] for r in rec["ranked"][:m]]
        else:
            entry["concepts"] = []
            entry["note"] = "no explanation"
            missing.append(e.unit)
        joined.append(entry)
    if missing:
        warnings.warn(f"no explanation for units {missing} in {base}", stacklevel=2)
    return joined


def save_report(report: AblationReport, path: str | os.PathLike) -> Path:
    return write_json(path, report.to_dict())


def save_ranking(ranking: LayerDropRanking, out_dir: str | os.PathLike) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    csv_path = atomic_write_text(out_dir / f"{ranking.layer.name}_ranking.csv", ranking.to_csv())
    json_path = write_json(out_dir / f"{ranking.layer.name}_ranking.json", ranking.to_dict())
    return csv_path, json_path
