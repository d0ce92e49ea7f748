"""Activated image patches for one neuron via occlusion sweeps.

Chain per neuron: rank the corpus by activation and keep the top K images;
slide a square occluder over each kept image; score every position by the
absolute change in the unit's activation; average the occluder footprints
weighted by those scores into a per-pixel field; threshold the field into a
mask; and keep ``image * mask`` (gray elsewhere) as the patch.
"""

from __future__ import annotations

import io
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import read_json, write_json
from .data_ingest import ArtifactCache, Corpus, Image, read_image, write_png
from .model_adapter import ModelHandle, NeuronRef

log = logging.getLogger(__name__)

FILL_MODES = ("gray", "mean-pixel", "zero")
DEFAULT_BACKGROUND = 0.5


def default_occluder_size(height: int, width: int) -> int:
    """11 px at 224 px, scaled with the shorter side."""
    return max(1, int(round(11 * min(height, width) / 224)))


def _axis_positions(length: int, size: int, stride: int) -> list[int]:
    pos = list(range(0, length - size + 1, stride))
    if pos[-1] != length - size:
        pos.append(length - size)  # keep the trailing edge covered
    return pos


@dataclass(frozen=True)
class OcclusionGrid:
    size: int
    stride: int
    fill: str
    fill_value: tuple[float, ...]
    image_hw: tuple[int, int]
    positions: tuple[tuple[int, int], ...]

    @classmethod
    def for_image(
        cls,
        height: int,
        width: int,
        size: int,
        stride: int = 3,
        fill: str = "gray",
        mean_pixel: Sequence[float] | None = None,
        channels: int = 3,
    ) -> "OcclusionGrid":
        if stride < 1:
            raise ValueError("stride must be >= 1")
        if size < 1 or size > min(height, width):
            raise ValueError(f"occluder size {size} larger than image {height}x{width}")
        if stride > size:
            raise ValueError(f"stride {stride} > occluder size {size} leaves pixels never occluded")
        if fill == "gray":
            value = (DEFAULT_BACKGROUND,) * channels
        elif fill == "zero":
            value = (0.0,) * channels
        elif fill == "mean-pixel":
            if mean_pixel is None:
                raise ValueError("mean-pixel fill needs the dataset mean pixel")
            value = tuple(float(v) for v in mean_pixel)
        else:
            raise ValueError(f"unknown fill {fill!r}; expected one of {FILL_MODES}")
        rows = _axis_positions(height, size, stride)
        cols = _axis_positions(width, size, stride)
        return cls(size, stride, fill, value, (height, width), tuple((r, c) for r in rows for c in cols))

    @property
    def count(self) -> int:
        return len(self.positions)

    def occlusion_masks(self) -> np.ndarray:
        """(M, H, W) binary indicators of the occluded window at each position."""
        h, w = self.image_hw
        masks = np.zeros((self.count, h, w), dtype=bool)
        for m, (r, c) in enumerate(self.positions):
            masks[m, r : r + self.size, c : c + self.size] = True
        return masks

    def to_dict(self) -> dict:
        return {
            "size": self.size,
            "stride": self.stride,
            "fill": self.fill,
            "fill_value": list(self.fill_value),
            "image_hw": list(self.image_hw),
            "count": self.count,
        }


def expected_position_count(height: int, width: int, size: int, stride: int) -> int:
    return math.ceil((height - size) / stride + 1) * math.ceil((width - size) / stride + 1)


@dataclass
class DiscrepancyMap:
    neuron: NeuronRef
    image_id: str
    scores: np.ndarray
    grid: OcclusionGrid


@dataclass
class ReceptiveField:
    field: np.ndarray
    neuron: NeuronRef
    image_id: str


@dataclass
class ActivationMask:
    mask: np.ndarray
    threshold_percentile: float
    threshold: float
    degenerate: bool = False
    soft: bool = False

    @property
    def coverage(self) -> float:
        return float(np.mean(self.mask > 0))


def select_top_images(activations: np.ndarray, unit: int, k: int, image_ids: Sequence[str]) -> list[str]:
    """Ids of the ``k`` highest-activating images; ties go to the smaller id."""
    if k < 1:
        raise ValueError("K must be >= 1")
    column = np.asarray(activations)[:, unit]
    if k > len(image_ids):
        warnings.warn(f"K={k} exceeds corpus size {len(image_ids)}; using the full corpus", stacklevel=2)
        k = len(image_ids)
    order = sorted(range(len(image_ids)), key=lambda i: (-column[i], image_ids[i]))
    return [image_ids[i] for i in order[:k]]


def generate_occlusions(pixels: np.ndarray, grid: OcclusionGrid) -> np.ndarray:
    """(M, H, W, C) stack of occluded copies; ``pixels`` is left untouched."""
    pixels = np.asarray(pixels)
    if tuple(pixels.shape[:2]) != tuple(grid.image_hw):
        raise ValueError(f"grid built for {grid.image_hw}, image is {pixels.shape[:2]}")
    out = np.repeat(pixels[None], grid.count, axis=0)
    fill = np.asarray(grid.fill_value, dtype=pixels.dtype)
    for m, (r, c) in enumerate(grid.positions):
        out[m, r : r + grid.size, c : c + grid.size] = fill
    return out


def discrepancy_scores(
    model: ModelHandle,
    neuron: NeuronRef,
    image: Image,
    grid: OcclusionGrid,
    batch_size: int = 64,
) -> DiscrepancyMap:
    base = model.neuron_activation(image, neuron).scalar
    occluded = generate_occlusions(image.pixels, grid)
    acts = []
    for start in range(0, len(occluded), batch_size):
        acts.append(model.batch_activations(occluded[start : start + batch_size], neuron.layer)[:, neuron.unit])
    scores = np.abs(np.concatenate(acts) - base)
    return DiscrepancyMap(neuron, image.image_id, scores, grid)


def synthesize_receptive_field(dmap: DiscrepancyMap) -> ReceptiveField:
    """Score-weighted average of occluder footprints, divided by the position count M."""
    grid = dmap.grid
    h, w = grid.image_hw
    acc = np.zeros((h, w), dtype=np.float64)
    for (r, c), s in zip(grid.positions, dmap.scores):
        acc[r : r + grid.size, c : c + grid.size] += s
    return ReceptiveField(acc / grid.count, dmap.neuron, dmap.image_id)


def binarize_mask(rf: ReceptiveField, threshold_percentile: float = 95.0, soft: bool = False) -> ActivationMask:
    """Keep pixels whose field value reaches the given percentile.

    A constant field keeps the whole image and sets ``degenerate``. With
    ``soft=True`` kept pixels carry their field value scaled to [0, 1].
    """
    if not 0 < threshold_percentile < 100:
        raise ValueError("threshold percentile must be in (0, 100)")
    f = rf.field
    if f.max() == f.min():
        return ActivationMask(np.ones_like(f), threshold_percentile, float(f.max()), degenerate=True, soft=soft)
    threshold = float(np.percentile(f, threshold_percentile))
    keep = f >= threshold
    if soft:
        mask = np.where(keep, f / f.max(), 0.0)
    else:
        mask = keep.astype(np.float64)
    return ActivationMask(mask, threshold_percentile, threshold, soft=soft)


def apply_mask(
    pixels: np.ndarray,
    mask: ActivationMask | np.ndarray,
    background: float = DEFAULT_BACKGROUND,
    crop: bool = False,
) -> np.ndarray:
    """``pixels * mask`` with ``background`` outside the mask; ``crop`` trims to the mask's bounding box."""
    m = mask.mask if isinstance(mask, ActivationMask) else np.asarray(mask, dtype=np.float64)
    pixels = np.asarray(pixels)
    if m.shape != pixels.shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match image {pixels.shape[:2]}")
    m3 = m[..., None]
    out = pixels * m3 + background * (1.0 - m3)
    if crop:
        rows = np.flatnonzero(m.any(axis=1))
        cols = np.flatnonzero(m.any(axis=0))
        out = out[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    return out


@dataclass
class PatchParams:
    k: int = 10
    occluder_size: int | None = None
    stride: int = 3
    percentile: float = 95.0
    fill: str = "mean-pixel"
    soft_mask: bool = False
    background: float = DEFAULT_BACKGROUND
    batch_size: int = 64

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0 < self.percentile < 100:
            raise ValueError("percentile must be in (0, 100)")
        if self.fill not in FILL_MODES:
            raise ValueError(f"fill must be one of {FILL_MODES}")

    def resolved_occluder(self, height: int, width: int) -> int:
        return self.occluder_size or max(default_occluder_size(height, width), self.stride)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "occluder_size": self.occluder_size,
            "stride": self.stride,
            "percentile": self.percentile,
            "fill": self.fill,
            "soft_mask": self.soft_mask,
            "background": self.background,
        }


@dataclass
class Patch:
    image_id: str
    pixels: np.ndarray
    mask: np.ndarray
    activation: float
    degenerate: bool = False


@dataclass
class PatchSet:
    neuron: NeuronRef
    patches: list[Patch]
    k: int
    params: dict = field(default_factory=dict)
    model_hash: str = ""
    from_cache: bool = False

    def __len__(self) -> int:
        return len(self.patches)

    def meta(self) -> dict:
        return {
            "neuron": self.neuron.to_dict(),
            "k": self.k,
            "model_hash": self.model_hash,
            "params": self.params,
            "patches": [
                {
                    "image_id": p.image_id,
                    "activation": p.activation,
                    "mask_coverage": float(np.mean(p.mask > 0)),
                    "degenerate": p.degenerate,
                }
                for p in self.patches
            ],
        }


def layer_activations(
    model: ModelHandle, corpus: Corpus, neuron: NeuronRef, cache: ArtifactCache | None, batch_size: int = 64
) -> np.ndarray:
    key = ["batch_activations", neuron.layer.name, corpus.content_hash()]
    if cache is not None:
        hit = cache.get_arrays(model.content_hash, "activations", key)
        if hit is not None:
            return hit["activations"]
    acts = model.batch_activations(corpus.images(), neuron.layer, batch_size=batch_size)
    if cache is not None:
        cache.put_arrays(model.content_hash, "activations", key, activations=acts)
    return acts


def _cached_discrepancy(model, neuron, image, grid, cache, batch_size) -> DiscrepancyMap:
    key = [str(neuron), image.image_id, grid.to_dict()]
    if cache is not None:
        hit = cache.get_arrays(model.content_hash, "discrepancy", key)
        if hit is not None:
            return DiscrepancyMap(neuron, image.image_id, hit["scores"], grid)
    dmap = discrepancy_scores(model, neuron, image, grid, batch_size=batch_size)
    if cache is not None:
        cache.put_arrays(model.content_hash, "discrepancy", key, scores=dmap.scores)
    return dmap


def extract_patches(
    model: ModelHandle,
    neuron: NeuronRef,
    corpus: Corpus,
    params: PatchParams | None = None,
    cache: ArtifactCache | None = None,
    activations: np.ndarray | None = None,
) -> PatchSet:
    params = params or PatchParams()
    h, w, c = corpus.get(corpus.ids[0]).pixels.shape
    occ = params.resolved_occluder(h, w)
    resolved = {**params.to_dict(), "occluder_size": occ}
    mean_pixel = corpus.mean_pixel() if params.fill == "mean-pixel" else None
    set_key = [str(neuron), corpus.content_hash(), resolved]
    if cache is not None:
        hit = cache.get(model.content_hash, "patchset", set_key)
        if hit is not None:
            return _patchset_from_bytes(hit, neuron, model.content_hash)

    if activations is None:
        activations = layer_activations(model, corpus, neuron, cache, params.batch_size)
    top_ids = select_top_images(activations, neuron.unit, params.k, corpus.ids)
    act_of = dict(zip(corpus.ids, activations[:, neuron.unit]))
    grid = OcclusionGrid.for_image(h, w, occ, params.stride, params.fill, mean_pixel, channels=c)

    patches = []
    for image_id in top_ids:
        image = corpus.get(image_id)
        try:
            dmap = _cached_discrepancy(model, neuron, image, grid, cache, params.batch_size)
            rf = synthesize_receptive_field(dmap)
            mask = binarize_mask(rf, params.percentile, soft=params.soft_mask)
            pixels = apply_mask(image.pixels, mask, params.background)
        except Exception as exc:  # noqa: BLE001 - one bad image must not sink the neuron
            warnings.warn(f"skipping image {image_id} for {neuron}: {exc}", stacklevel=2)
            continue
        patches.append(Patch(image_id, pixels, mask.mask, float(act_of[image_id]), mask.degenerate))
    if not patches:
        raise RuntimeError(f"no patches could be extracted for {neuron}")
    patches.sort(key=lambda p: (-p.activation, p.image_id))
    pset = PatchSet(neuron, patches, len(patches), resolved, model.content_hash)
    if cache is not None:
        cache.put(model.content_hash, "patchset", set_key, _patchset_to_bytes(pset))
    return pset


def _patchset_to_bytes(pset: PatchSet) -> bytes:
    buf = io.BytesIO()
    arrays = {}
    for i, p in enumerate(pset.patches):
        arrays[f"pixels_{i}"] = p.pixels
        arrays[f"mask_{i}"] = p.mask
    arrays["meta"] = np.frombuffer(json.dumps(pset.meta()).encode(), dtype=np.uint8)
    np.savez(buf, **arrays)
    return buf.getvalue()


def _patchset_from_bytes(data: bytes, neuron: NeuronRef, model_hash: str) -> PatchSet:
    with np.load(io.BytesIO(data), allow_pickle=False) as npz:
        meta = json.loads(npz["meta"].tobytes().decode())
        patches = [
            Patch(rec["image_id"], npz[f"pixels_{i}"], npz[f"mask_{i}"], rec["activation"], rec["degenerate"])
            for i, rec in enumerate(meta["patches"])
        ]
    return PatchSet(neuron, patches, meta["k"], meta["params"], model_hash, from_cache=True)


def patchset_dir(root: str | os.PathLike, model_name: str, neuron: NeuronRef) -> Path:
    return Path(root) / "patches" / model_name / neuron.layer.name / str(neuron.unit)


def save_patchset(pset: PatchSet, root: str | os.PathLike, model_name: str) -> Path:
    """Write ``meta.json`` plus ``<id>_patch.png`` / ``<id>_mask.png`` per patch."""
    d = patchset_dir(root, model_name, pset.neuron)
    for p in pset.patches:
        write_png(d / f"{p.image_id}_patch.png", p.pixels)
        write_png(d / f"{p.image_id}_mask.png", p.mask)
    write_json(d / "meta.json", pset.meta())
    return d


def load_patchset(directory: str | os.PathLike, neuron: NeuronRef) -> PatchSet:
    """Read back a saved patch set; pixels come back on the 8-bit grid."""
    d = Path(directory)
    meta = read_json(d / "meta.json")
    patches = [
        Patch(
            rec["image_id"],
            read_image(d / f"{rec['image_id']}_patch.png"),
            read_image(d / f"{rec['image_id']}_mask.png")[..., 0],
            rec["activation"],
            rec["degenerate"],
        )
        for rec in meta["patches"]
    ]
    return PatchSet(neuron, patches, meta["k"], meta["params"], meta["model_hash"])
