"""Uniform access to vision classifiers: predictions, per-unit activations, head weights, ablation.

A model is described by a JSON model-spec record::

    {
      "architecture": "conv" | "transformer" | "synthetic",
      "builder": "resnet50",                  # torchvision name, "vit", or "planted"
      "builder_args": {...},                  # optional constructor kwargs
      "weight_source": "weights.pt" | "torchvision:DEFAULT" | "random:0",
      "input_shape": [224, 224, 3],
      "preprocessing": {"resize": [224, 224], "mean": [...], "std": [...]},
      "head_layer_name": "fc",
      "final_layer": "layer4",                # layer feeding the linear head
      "layers": [{"name": "layer4", "kind": "conv-feature-map", "units": 2048}],
      "layer_aliases": {"last_conv": "layer4"},
      "post_relu": true,
      "aggregator": "max",
      "dtype": "float32"
    }

Activations are read with forward hooks. A unit's scalar activation is the max
(or mean, if configured) of its feature map over spatial positions, or over
token positions for transformer MLP hidden units.
"""

from __future__ import annotations

import copy
import fnmatch
import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data_ingest import Image

log = logging.getLogger(__name__)

ARCHITECTURES = ("conv", "transformer", "synthetic")
LAYER_KINDS = ("conv-feature-map", "mlp-hidden")


class ModelError(Exception):
    pass


class UnsupportedArchitectureError(ModelError):
    pass


class ShapeMismatchError(ModelError, ValueError):
    pass


class InvalidNeuronError(ModelError, ValueError):
    pass


class AblationError(ModelError):
    pass


class NoLinearHeadError(ModelError):
    pass


@dataclass(frozen=True)
class LayerId:
    name: str
    kind: str
    unit_count: int

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.unit_count < 1:
            raise ValueError("unit_count must be >= 1")


@dataclass(frozen=True)
class NeuronRef:
    layer: LayerId
    unit: int

    def __post_init__(self):
        if not 0 <= self.unit < self.layer.unit_count:
            raise InvalidNeuronError(
                f"unit {self.unit} out of range for layer {self.layer.name} ({self.layer.unit_count} units)"
            )

    def to_dict(self) -> dict:
        return {"layer": self.layer.name, "unit": self.unit}

    def __str__(self) -> str:
        return f"{self.layer.name}:{self.unit}"


@dataclass(frozen=True)
class ActivationRecord:
    neuron: NeuronRef
    image_id: str
    scalar: float
    spatial_argmax: tuple[int, int] | int | None


@dataclass
class _LayerEntry:
    layer: LayerId
    probe: str  # module whose output is the feature map
    producer: str | None  # module whose weight[k]/bias[k] produce unit k; None -> output masking


@dataclass
class AblationToken:
    neuron: NeuronRef
    saved: dict[str, torch.Tensor] = field(default_factory=dict)
    hook: Any = None


class _StopForward(Exception):
    pass


@dataclass
class ModelSpec:
    architecture: str
    builder: str
    weight_source: str | None = None
    input_shape: tuple[int, int, int] = (224, 224, 3)
    preprocessing: dict = field(default_factory=dict)
    head_layer_name: str | None = None
    final_layer: str | None = None
    builder_args: dict = field(default_factory=dict)
    layers: list[dict] = field(default_factory=list)
    layer_aliases: dict[str, str] = field(default_factory=dict)
    post_relu: bool = True
    aggregator: str = "max"
    dtype: str = "float32"
    class_names: list[str] = field(default_factory=list)
    name: str | None = None
    base_dir: str | None = None

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | None = None) -> "ModelSpec":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown model-spec fields: {sorted(unknown)}")
        if "input_shape" in d:
            d["input_shape"] = tuple(d["input_shape"])
        d.setdefault("base_dir", base_dir)
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "ModelSpec":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        spec = cls.from_dict(d, base_dir=str(path.parent))
        if spec.name is None:
            spec.name = path.stem
        return spec

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "base_dir"}
        d["input_shape"] = list(self.input_shape)
        return d


def _build_module(spec: ModelSpec) -> nn.Module:
    if spec.architecture not in ARCHITECTURES:
        raise UnsupportedArchitectureError(f"unsupported architecture: {spec.architecture!r}")
    if spec.builder == "planted":
        from .testbed import PlantedNet

        return PlantedNet(**spec.builder_args)
    import torchvision

    if spec.builder == "vit":
        return torchvision.models.VisionTransformer(**spec.builder_args)
    src = spec.weight_source or ""
    weights = src.split(":", 1)[1] if src.startswith("torchvision:") else None
    try:
        return torchvision.models.get_model(spec.builder, weights=weights, **spec.builder_args)
    except ValueError as exc:
        raise UnsupportedArchitectureError(f"unknown builder {spec.builder!r}: {exc}") from exc


def _load_weights(module: nn.Module, spec: ModelSpec) -> None:
    src = spec.weight_source
    if not src or src.startswith("torchvision:"):
        return
    if src.startswith("random:"):
        gen = torch.Generator().manual_seed(int(src.split(":", 1)[1]))
        with torch.no_grad():
            for p in module.parameters():
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.1)
        return
    path = Path(src)
    if not path.is_absolute() and spec.base_dir:
        path = Path(spec.base_dir) / path
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # noqa: BLE001 - any read failure is the same contract error
        raise ModelError(f"unreadable weights {path}: {exc}") from exc
    module.load_state_dict(state)


def _introspect(module: nn.Module, spec: ModelSpec) -> list[_LayerEntry]:
    entries: list[_LayerEntry] = []
    modules = dict(module.named_modules())
    for name, mod in modules.items():
        if isinstance(mod, nn.Conv2d) and name:
            entries.append(_LayerEntry(LayerId(name, "conv-feature-map", mod.out_channels), name, name))
        elif (
            isinstance(mod, nn.Sequential)
            and len(mod) >= 2
            and isinstance(mod[0], nn.Linear)
            and not isinstance(mod[1], (nn.Linear, nn.Dropout))
            and name.endswith("mlp")
        ):
            act = mod[1]
            with torch.no_grad():
                zero = act(torch.zeros(1))
            if zero.item() != 0.0:
                raise ModelError(f"nonlinearity of {name} is not 0 at 0; incoming-weight ablation unsound")
            entries.append(
                _LayerEntry(LayerId(name, "mlp-hidden", mod[0].out_features), f"{name}.1", f"{name}.0")
            )
    for extra in spec.layers:
        name = extra["name"]
        if name not in modules:
            raise ModelError(f"declared layer {name!r} not found in model")
        producer = extra.get("producer")
        entries = [e for e in entries if e.layer.name != name]
        entries.append(
            _LayerEntry(
                LayerId(name, extra.get("kind", "conv-feature-map"), int(extra["units"])),
                extra.get("probe", name),
                producer,
            )
        )
    if not entries:
        raise ModelError("layer introspection found no conv or mlp layers")
    names = [e.layer.name for e in entries]
    if len(set(names)) != len(names):
        raise ModelError("duplicate layer names in catalog")
    return entries


class ModelHandle:
    """A loaded classifier with a layer catalog.

    Single writer: ``ablate_unit``/``restore`` must not race with inference.
    Use ``clone()`` for independent handles.
    """

    def __init__(self, module: nn.Module, spec: ModelSpec):
        self.module = module.eval()
        self.spec = spec
        self.architecture = spec.architecture
        self._entries = {e.layer.name: e for e in _introspect(module, spec)}
        self.layers: list[LayerId] = [e.layer for e in self._entries.values()]
        self.input_shape = tuple(spec.input_shape)
        self.dtype = next(module.parameters()).dtype
        self._ablated: dict[tuple[str, int], AblationToken] = {}
        self._lock = threading.Lock()
        self._base_hash = self._hash_parameters()
        h, w, c = self.input_shape
        with torch.no_grad():
            out = self.module(torch.zeros(1, c, *self._model_hw(), dtype=self.dtype))
        self.class_count = int(out.shape[-1])
        if self.class_count < 2:
            raise ModelError("classifier must have at least 2 classes")

    # -- catalog ---------------------------------------------------------

    @property
    def name(self) -> str:
        return self.spec.name or self.spec.builder

    def layer(self, name: str) -> LayerId:
        name = self.spec.layer_aliases.get(name, name)
        if name not in self._entries:
            raise InvalidNeuronError(f"unknown layer {name!r}")
        return self._entries[name].layer

    def select_layers(self, pattern: str) -> list[LayerId]:
        if pattern in self.spec.layer_aliases:
            return [self.layer(pattern)]
        return [l for l in self.layers if fnmatch.fnmatchcase(l.name, pattern)]

    def neuron(self, layer: str | LayerId, unit: int) -> NeuronRef:
        if isinstance(layer, str):
            layer = self.layer(layer)
        return NeuronRef(layer, unit)

    def _check_neuron(self, neuron: NeuronRef) -> _LayerEntry:
        entry = self._entries.get(neuron.layer.name)
        if entry is None or entry.layer != neuron.layer:
            raise InvalidNeuronError(f"neuron {neuron} not valid for this model")
        return entry

    @property
    def content_hash(self) -> str:
        if not self._ablated:
            return self._base_hash
        suffix = ",".join(f"{l}:{u}" for l, u in sorted(self._ablated))
        return hashlib.sha256(f"{self._base_hash}|ablated:{suffix}".encode()).hexdigest()

    def _hash_parameters(self) -> str:
        h = hashlib.sha256()
        for key, tensor in sorted(self.module.state_dict().items()):
            h.update(key.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        spec = self.spec.to_dict()
        for k in ("weight_source", "name", "class_names"):
            spec.pop(k, None)
        h.update(json.dumps(spec, sort_keys=True).encode())
        return h.hexdigest()

    def clone(self) -> "ModelHandle":
        if self._ablated:
            raise AblationError("cannot clone a handle with active ablations")
        other = copy.copy(self)
        other.module = copy.deepcopy(self.module)
        other._ablated = {}
        other._lock = threading.Lock()
        return other

    # -- preprocessing ---------------------------------------------------

    def _model_hw(self) -> tuple[int, int]:
        resize = self.spec.preprocessing.get("resize")
        if resize:
            return int(resize[0]), int(resize[1])
        return int(self.input_shape[0]), int(self.input_shape[1])

    def _to_tensor(self, images: Sequence[Image | np.ndarray] | np.ndarray) -> torch.Tensor:
        if isinstance(images, np.ndarray) and images.ndim == 4:
            arr = images
        else:
            arr = np.stack([im.pixels if isinstance(im, Image) else np.asarray(im) for im in images])
        h, w, c = self.input_shape
        resize = self.spec.preprocessing.get("resize")
        if arr.shape[-1] != c or (not resize and arr.shape[1:3] != (h, w)):
            raise ShapeMismatchError(f"image shape {arr.shape[1:]} does not match input shape {self.input_shape}")
        x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(self.dtype)
        if resize and tuple(x.shape[-2:]) != tuple(resize):
            x = F.interpolate(x, size=tuple(resize), mode="bilinear", align_corners=False, antialias=True)
        mean = self.spec.preprocessing.get("mean")
        std = self.spec.preprocessing.get("std")
        if mean is not None:
            x = x - torch.tensor(mean, dtype=self.dtype).view(1, -1, 1, 1)
        if std is not None:
            x = x / torch.tensor(std, dtype=self.dtype).view(1, -1, 1, 1)
        return x

    # -- inference -------------------------------------------------------

    def predict_batch(self, images, batch_size: int = 64) -> np.ndarray:
        """Class-probability matrix, one row per image."""
        outs = []
        for start in range(0, len(images), batch_size):
            x = self._to_tensor(images[start : start + batch_size])
            with torch.no_grad():
                logits = self.module(x)
            outs.append(torch.softmax(logits.double(), dim=-1).numpy())
        return np.concatenate(outs, axis=0)

    def predict(self, image: Image | np.ndarray) -> np.ndarray:
        return self.predict_batch([image])[0]

    def feature_maps(self, images, layer: LayerId) -> np.ndarray:
        """Raw feature maps of ``layer``: (n, units, H, W) for conv, (n, units, tokens) for mlp."""
        entry = self._entries[layer.name]
        captured: dict[str, torch.Tensor] = {}
        probe = self.module.get_submodule(entry.probe)

        # output-masking ablation hooks are registered earlier, so they run before this one
        def hook(_mod, _inp, out):
            captured["out"] = out.detach().clone()
            raise _StopForward

        handle = probe.register_forward_hook(hook)
        try:
            with torch.no_grad():
                try:
                    self.module(self._to_tensor(images))
                except _StopForward:
                    pass
        finally:
            handle.remove()
        out = captured["out"]
        if layer.kind == "conv-feature-map":
            if self.spec.post_relu:
                out = torch.relu(out)
        else:
            out = out.transpose(1, 2)  # (n, tokens, units) -> (n, units, tokens)
        return out.double().numpy()

    def _aggregate(self, maps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        flat = maps.reshape(maps.shape[0], maps.shape[1], -1)
        if self.spec.aggregator == "mean":
            return flat.mean(axis=-1), np.argmax(flat, axis=-1)
        if self.spec.aggregator != "max":
            raise ModelError(f"unknown aggregator {self.spec.aggregator!r}")
        idx = np.argmax(flat, axis=-1)  # first maximizer in row-major order
        return np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0], idx

    def batch_activations(self, images, layer: LayerId, batch_size: int = 64) -> np.ndarray:
        """(n_images, unit_count) matrix of scalar unit activations."""
        if len(images) == 0:
            raise ValueError("empty image list")
        rows = []
        for start in range(0, len(images), batch_size):
            scalars, _ = self._aggregate(self.feature_maps(images[start : start + batch_size], layer))
            rows.append(scalars)
        return np.concatenate(rows, axis=0)

    def neuron_activation(self, image: Image | np.ndarray, neuron: NeuronRef) -> ActivationRecord:
        self._check_neuron(neuron)
        maps = self.feature_maps([image], neuron.layer)
        scalars, idx = self._aggregate(maps)
        flat_idx = int(idx[0, neuron.unit])
        if neuron.layer.kind == "conv-feature-map":
            argmax: tuple[int, int] | int = divmod(flat_idx, maps.shape[-1])
        else:
            argmax = flat_idx
        image_id = image.image_id if isinstance(image, Image) else ""
        return ActivationRecord(neuron, image_id, float(scalars[0, neuron.unit]), argmax)

    # -- classifier head -------------------------------------------------

    def classifier_head_weights(self, cls: int) -> np.ndarray:
        if not self.spec.head_layer_name:
            raise NoLinearHeadError("model has no linear classifier head")
        head = self.module.get_submodule(self.spec.head_layer_name)
        if not isinstance(head, nn.Linear):
            raise NoLinearHeadError(f"head {self.spec.head_layer_name!r} is not a linear layer")
        if not 0 <= cls < self.class_count:
            raise ValueError(f"class {cls} out of range for {self.class_count} classes")
        weights = head.weight.detach()[cls].double().numpy().copy()
        final = self.final_layer()
        if final is not None and final.unit_count != weights.shape[0]:
            raise NoLinearHeadError(
                f"head input width {weights.shape[0]} != unit count of {final.name} ({final.unit_count})"
            )
        weights.setflags(write=False)
        return weights

    def final_layer(self) -> LayerId | None:
        name = self.spec.final_layer or self.spec.layer_aliases.get("last_conv")
        return self.layer(name) if name else None

    # -- ablation --------------------------------------------------------

    def ablate_unit(self, neuron: NeuronRef) -> AblationToken:
        """Silence one unit; its activation becomes exactly 0 until ``restore``."""
        entry = self._check_neuron(neuron)
        key = (neuron.layer.name, neuron.unit)
        with self._lock:
            if key in self._ablated:
                raise AblationError(f"unit {neuron} already ablated")
            token = AblationToken(neuron)
            k = neuron.unit
            if entry.producer is not None:
                producer = self.module.get_submodule(entry.producer)
                with torch.no_grad():
                    for pname in ("weight", "bias"):
                        param = getattr(producer, pname, None)
                        if param is None:
                            continue
                        token.saved[f"{entry.producer}.{pname}"] = param[k].detach().clone()
                        param[k] = 0
            else:
                # compound layer (e.g. residual block): zero the channel of its output
                probe = self.module.get_submodule(entry.probe)

                def mask_hook(_mod, _inp, out, k=k):
                    out = out.clone()
                    if neuron.layer.kind == "conv-feature-map":
                        out[:, k] = 0
                    else:
                        out[..., k] = 0
                    return out

                token.hook = probe.register_forward_hook(mask_hook)
            self._ablated[key] = token
        return token

    def restore(self, token: AblationToken) -> None:
        key = (token.neuron.layer.name, token.neuron.unit)
        with self._lock:
            if self._ablated.get(key) is not token:
                raise AblationError(f"token for {token.neuron} is not active")
            params = dict(self.module.named_parameters())
            with torch.no_grad():
                for pname, saved in token.saved.items():
                    params[pname][token.neuron.unit].copy_(saved)
            if token.hook is not None:
                token.hook.remove()
            del self._ablated[key]

    @property
    def ablated_units(self) -> list[tuple[str, int]]:
        return sorted(self._ablated)


def load_model(spec: ModelSpec | dict | str | Path) -> ModelHandle:
    """Build a handle from a model-spec record, a dict, or a path to a spec JSON file."""
    if isinstance(spec, (str, Path)):
        spec = ModelSpec.from_file(spec)
    elif isinstance(spec, dict):
        spec = ModelSpec.from_dict(spec)
    if spec.architecture not in ARCHITECTURES:
        raise UnsupportedArchitectureError(f"unsupported architecture: {spec.architecture!r}")
    module = _build_module(spec)
    # cast first so float64 weight files load without a float32 round trip
    module = module.to(getattr(torch, spec.dtype))
    _load_weights(module, spec)
    return ModelHandle(module, spec)


def neurons_for(model: ModelHandle, layer_pattern: str, units: Iterable[int] | None = None) -> list[NeuronRef]:
    out = []
    for layer in model.select_layers(layer_pattern):
        for u in units if units is not None else range(layer.unit_count):
            if 0 <= u < layer.unit_count:
                out.append(NeuronRef(layer, u))
    return out
