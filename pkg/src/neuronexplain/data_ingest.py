"""Image corpora described by JSON-lines manifests, plus a content-addressed cache.

A manifest is a JSON-lines file. The optional first line is a header
``{"class_names": [...]}``; every other line is one image record
``{"id": ..., "path": ..., "label": ...}`` with ``label`` optional and
``path`` resolved relative to the manifest's directory.
"""

from __future__ import annotations

import io
import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

import numpy as np
from PIL import Image as PILImage

from ._io import atomic_write_bytes, atomic_write_text, hash_obj, sha256_bytes

log = logging.getLogger(__name__)


class CorpusError(ValueError):
    pass


@dataclass
class Image:
    image_id: str
    pixels: np.ndarray  # H x W x C, float in [0, 1]
    label: int | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3:
            raise CorpusError(f"image {self.image_id}: expected HxWxC pixels, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise CorpusError(f"image {self.image_id}: non-finite pixel values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape)  # type: ignore[return-value]


def read_image(path: str | os.PathLike) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_png(path: str | os.PathLike, pixels: np.ndarray) -> Path:
    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    buf = io.BytesIO()
    PILImage.fromarray(arr).save(buf, format="PNG")
    return atomic_write_bytes(path, buf.getvalue())


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Round pixels to the 8-bit grid so in-memory images equal their PNG copies."""
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255) / 255.0


@dataclass(frozen=True)
class ManifestRecord:
    image_id: str
    path: str
    label: int | None = None


class Corpus:
    """Ordered, optionally labeled image collection.

    Images are decoded lazily and memoized; iteration always follows manifest order.
    """

    def __init__(
        self,
        records: Sequence[ManifestRecord],
        class_names: Sequence[str],
        manifest_path: str | None = None,
        images: dict[str, Image] | None = None,
    ):
        if not records:
            raise CorpusError("corpus must contain at least one image")
        if len(set(class_names)) != len(class_names):
            raise CorpusError("class names must be unique")
        seen: set[str] = set()
        for rec in records:
            if rec.image_id in seen:
                raise CorpusError(f"duplicate image id: {rec.image_id}")
            seen.add(rec.image_id)
            if rec.label is not None and class_names and not 0 <= rec.label < len(class_names):
                raise CorpusError(
                    f"label {rec.label} of image {rec.image_id} out of range for {len(class_names)} classes"
                )
        self.records = list(records)
        self.class_names = list(class_names)
        self.manifest_path = manifest_path
        self._images: dict[str, Image] = dict(images or {})
        self._index = {rec.image_id: i for i, rec in enumerate(self.records)}
        self._mean_pixel: np.ndarray | None = None
        self._content_hash: str | None = None

    @classmethod
    def from_images(cls, images: Sequence[Image], class_names: Sequence[str]) -> "Corpus":
        records = [ManifestRecord(im.image_id, "", im.label) for im in images]
        return cls(records, class_names, images={im.image_id: im for im in images})

    def __len__(self) -> int:
        return len(self.records)

    @property
    def size(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> list[str]:
        return [rec.image_id for rec in self.records]

    @property
    def labeled(self) -> bool:
        return all(rec.label is not None for rec in self.records)

    def __iter__(self) -> Iterator[Image]:
        for rec in self.records:
            yield self.get(rec.image_id)

    def get(self, image_id: str) -> Image:
        if image_id not in self._images:
            rec = self.records[self._index[image_id]]
            base = Path(self.manifest_path).parent if self.manifest_path else Path(".")
            self._images[image_id] = Image(image_id, read_image(base / rec.path), rec.label)
        return self._images[image_id]

    def images(self) -> list[Image]:
        return list(self)

    def mean_pixel(self) -> np.ndarray:
        """Per-channel mean over every pixel of every image."""
        if self._mean_pixel is None:
            total = None
            count = 0
            for im in self:
                s = im.pixels.reshape(-1, im.pixels.shape[-1]).sum(axis=0)
                total = s if total is None else total + s
                count += im.pixels.shape[0] * im.pixels.shape[1]
            self._mean_pixel = total / count
        return self._mean_pixel

    def content_hash(self) -> str:
        """Hash of ids, labels, class names, and image bytes (file bytes, or pixels for in-memory images)."""
        if self._content_hash is None:
            base = Path(self.manifest_path).parent if self.manifest_path else Path(".")
            parts = []
            for r in self.records:
                if r.path:
                    digest = sha256_bytes((base / r.path).read_bytes())
                else:
                    digest = sha256_bytes(np.ascontiguousarray(self._images[r.image_id].pixels).tobytes())
                parts.append([r.image_id, r.label, digest])
            self._content_hash = hash_obj(parts + [self.class_names])
        return self._content_hash


def load_corpus(manifest_path: str | os.PathLike, check_files: bool = True) -> Corpus:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise CorpusError(f"manifest not found: {manifest_path}")
    class_names: list[str] = []
    records: list[ManifestRecord] = []
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{manifest_path}:{lineno}: invalid JSON ({exc})") from exc
            if "class_names" in obj and "id" not in obj:
                class_names = list(obj["class_names"])
                continue
            try:
                rec = ManifestRecord(str(obj["id"]), str(obj["path"]), obj.get("label"))
            except KeyError as exc:
                raise CorpusError(f"{manifest_path}:{lineno}: missing field {exc}") from exc
            if check_files and not (manifest_path.parent / rec.path).exists():
                raise CorpusError(f"missing image file: {rec.path} (id {rec.image_id})")
            records.append(rec)
    return Corpus(records, class_names, manifest_path=str(manifest_path))


def write_manifest(
    manifest_path: str | os.PathLike,
    records: Iterable[ManifestRecord],
    class_names: Sequence[str] = (),
) -> Path:
    lines = []
    if class_names:
        lines.append(json.dumps({"class_names": list(class_names)}))
    for rec in records:
        obj: dict[str, Any] = {"id": rec.image_id, "path": rec.path}
        if rec.label is not None:
            obj["label"] = rec.label
        lines.append(json.dumps(obj))
    return atomic_write_text(manifest_path, "\n".join(lines) + "\n")


@dataclass(frozen=True)
class CacheEntry:
    key: str
    payload_path: str
    created_at: str


@dataclass
class ArtifactCache:
    """Content-addressed store: ``<root>/<model-hash>/<op>/<key>.bin`` plus a ``.sha256`` sidecar.

    A payload whose checksum does not match its sidecar is logged and treated as a miss.
    """

    root: Path
    hits: int = field(default=0, init=False)
    misses: int = field(default=0, init=False)

    def __post_init__(self):
        self.root = Path(self.root)

    @staticmethod
    def make_key(key_parts: Any) -> str:
        return hash_obj(key_parts)

    def _paths(self, model_hash: str, op: str, key: str) -> tuple[Path, Path]:
        d = self.root / model_hash / op
        return d / f"{key}.bin", d / f"{key}.sha256"

    def get(self, model_hash: str, op: str, key_parts: Any) -> bytes | None:
        key = self.make_key(key_parts)
        payload_path, sum_path = self._paths(model_hash, op, key)
        if not payload_path.exists() or not sum_path.exists():
            self.misses += 1
            return None
        data = payload_path.read_bytes()
        if sha256_bytes(data) != sum_path.read_text().strip():
            log.warning("cache checksum mismatch for %s; treating as miss", payload_path)
            self.misses += 1
            return None
        self.hits += 1
        return data

    def put(self, model_hash: str, op: str, key_parts: Any, payload: bytes) -> CacheEntry:
        key = self.make_key(key_parts)
        payload_path, sum_path = self._paths(model_hash, op, key)
        atomic_write_bytes(payload_path, payload)
        atomic_write_text(sum_path, sha256_bytes(payload) + "\n")
        return CacheEntry(key, str(payload_path), datetime.now(timezone.utc).isoformat())

    def get_arrays(self, model_hash: str, op: str, key_parts: Any) -> dict[str, np.ndarray] | None:
        data = self.get(model_hash, op, key_parts)
        if data is None:
            return None
        with np.load(io.BytesIO(data), allow_pickle=False) as npz:
            return {k: npz[k] for k in npz.files}

    def put_arrays(self, model_hash: str, op: str, key_parts: Any, **arrays: np.ndarray) -> CacheEntry:
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        return self.put(model_hash, op, key_parts, buf.getvalue())
