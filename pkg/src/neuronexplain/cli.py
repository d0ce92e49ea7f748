"""Command-line pipeline: build-vocab, explain, ablate, category-units, report, make-testbed.

Settings come from an optional ``--config`` file (YAML or JSON) overridden by
flags. Every command writes ``run_<command>.json`` into the output directory.
Exit code 0 means no per-item failures; 1 means some items failed; 2 means
bad configuration or input.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import __version__
from ._io import read_json, write_json
from .ablation import (
    category_units,
    importance_explanation_join,
    layer_drop_ranking,
    save_ranking,
    save_report,
    stratified_sample,
)
from .concept_matcher import (
    ClipEmbedder,
    Embedder,
    Explanation,
    TextEmbeddingCache,
    explain_neuron,
    save_explanation,
)
from .data_ingest import ArtifactCache, Corpus, CorpusError, load_corpus
from .model_adapter import ModelError, ModelHandle, NeuronRef, load_model
from .patch_extraction import PatchParams, extract_patches, layer_activations, load_patchset, patchset_dir, save_patchset
from .reports import ablation_report_html, explanation_report, plot_ablation_panels, plot_sorted_drops
from .vocabulary import LLMClient, LLMTimeoutError, VocabularyError, build_vocabulary, load_vocabulary, save_vocabulary

log = logging.getLogger("neuronexplain")


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    model_spec: str | None = None
    corpus: str | None = None
    vocab: str | None = None
    layer: str | None = None
    units: list[int] | None = None
    k: int = 10
    occluder_size: int | None = None
    stride: int = 3
    percentile: float = 95.0
    fill: str = "mean-pixel"
    soft_mask: bool = False
    top_m: int = 5
    embedder: str = "mock"
    prompt_wrapper: str = "{}"
    render_mode: str = "fill"
    subset_per_class: int = 50
    full_eval: bool = False
    seed: int = 0
    out: str = "out"
    cache: str | None = None
    no_cache: bool = False
    fixtures: str | None = None
    llm_mode: str = "fixture"
    dataset_tag: str = ""
    max_per_class: int = 20
    add_class_names: bool = False
    workers: int = 1
    canonical: bool = False

    @property
    def cache_dir(self) -> Path:
        return Path(self.cache) if self.cache else Path(self.out) / "cache"

    def patch_params(self) -> PatchParams:
        return PatchParams(
            k=self.k,
            occluder_size=self.occluder_size,
            stride=self.stride,
            percentile=self.percentile,
            fill=self.fill,
            soft_mask=self.soft_mask,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


CONFIG_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def parse_units(text: str | None) -> list[int] | None:
    if text is None or text == "all":
        return None
    units: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            units.extend(range(int(lo), int(hi) + 1))
        elif part:
            units.append(int(part))
    return units


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicitly given flags."""
    values: dict[str, Any] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        unknown = set(loaded) - CONFIG_FIELDS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    for name in CONFIG_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if isinstance(values.get("units"), str):
        values["units"] = parse_units(values["units"])
    cfg = RunConfig(**values)
    try:
        cfg.patch_params()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.top_m < 1:
        raise ConfigError("--top-m must be >= 1")
    return cfg


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        value = getattr(cfg, name)
        if value is None:
            raise ConfigError(f"--{name.replace('_', '-')} is required")
        if name in ("model_spec", "corpus", "vocab", "fixtures") and not Path(value).exists():
            raise ConfigError(f"{name.replace('_', '-')} path does not exist: {value}")


class RunRecorder:
    def __init__(self, command: str, cfg: RunConfig):
        self.command = command
        self.cfg = cfg
        self.stages: dict[str, dict] = {}
        self.hashes: dict[str, str] = {}
        self.failures: list[dict] = []
        self.extra: dict[str, Any] = {}

    def stage(self, name: str):
        recorder = self

        class _Stage:
            def __enter__(self_inner):
                self_inner.t0 = time.perf_counter()
                recorder.stages[name] = {}
                return recorder.stages[name]

            def __exit__(self_inner, *exc):
                recorder.stages[name]["seconds"] = round(time.perf_counter() - self_inner.t0, 6)
                return False

        return _Stage()

    def fail(self, item: str, exc: BaseException) -> None:
        log.error("%s failed: %s", item, exc)
        log.debug("".join(traceback.format_exception(exc)))
        self.failures.append({"item": item, "error": f"{type(exc).__name__}: {exc}"})

    def write(self, status: str) -> Path:
        record = {
            "command": self.command,
            "tool_version": __version__,
            "config": self.cfg.to_dict(),
            "artifact_hashes": self.hashes,
            "stages": self.stages,
            "seed": self.cfg.seed,
            "status": status,
            "failures": self.failures,
            **self.extra,
        }
        if not self.cfg.canonical:
            record["finished_at"] = datetime.now(timezone.utc).isoformat()
            for stage in record["stages"].values():
                stage.setdefault("seconds", 0.0)
        else:
            record["stages"] = {k: {kk: vv for kk, vv in v.items() if kk != "seconds"} for k, v in self.stages.items()}
        return write_json(Path(self.cfg.out) / f"run_{self.command}.json", record)


def make_embedder(spec: str) -> Embedder:
    if spec == "mock":
        from .testbed import MockEmbedder

        return MockEmbedder.colors()
    if spec == "clip" or spec.startswith("clip:"):
        return ClipEmbedder(spec.split(":", 1)[1] if ":" in spec else None)
    raise ConfigError(f"unknown embedder {spec!r} (expected 'mock', 'clip' or 'clip:<checkpoint>')")


def select_neurons(model: ModelHandle, cfg: RunConfig) -> list[NeuronRef]:
    pattern = cfg.layer or ("last_conv" if "last_conv" in model.spec.layer_aliases else None)
    if pattern is None:
        raise ConfigError("--layer is required (model spec defines no 'last_conv' alias)")
    layers = model.select_layers(pattern)
    neurons = []
    for layer in layers:
        units = range(layer.unit_count) if cfg.units is None else cfg.units
        neurons.extend(NeuronRef(layer, u) for u in units if 0 <= u < layer.unit_count)
    return neurons


# -- commands --------------------------------------------------------------


def cmd_build_vocab(cfg: RunConfig, rec: RunRecorder) -> int:
    _require(cfg, "corpus")
    if cfg.vocab is None:
        raise ConfigError("--vocab (output path) is required")
    corpus = load_corpus(cfg.corpus, check_files=False)
    if not corpus.class_names:
        raise ConfigError("corpus manifest lists no class names")
    if cfg.llm_mode in ("fixture", "record"):
        if cfg.fixtures is None:
            raise ConfigError("--fixtures is required in fixture/record mode")
    client = LLMClient(mode=cfg.llm_mode, fixture_dir=cfg.fixtures)
    with rec.stage("vocabulary") as st:
        vocab = build_vocabulary(
            client,
            corpus.class_names,
            dataset_tag=cfg.dataset_tag,
            max_per_class=cfg.max_per_class,
            add_class_names=cfg.add_class_names,
        )
        st["concepts"] = len(vocab)
    save_vocabulary(vocab, cfg.vocab)
    rec.hashes["vocabulary"] = vocab.content_hash()
    rec.hashes["corpus"] = corpus.content_hash()
    print(f"wrote {len(vocab)} concepts to {cfg.vocab}")
    return 0


def run_explain(
    cfg: RunConfig,
    rec: RunRecorder,
    model: ModelHandle,
    corpus: Corpus,
    neurons: list[NeuronRef],
) -> int:
    _require(cfg, "vocab")
    vocab = load_vocabulary(cfg.vocab)
    embedder = make_embedder(cfg.embedder)
    cache = None if cfg.no_cache else ArtifactCache(cfg.cache_dir)
    params = cfg.patch_params()
    rec.hashes.update(model=model.content_hash, vocabulary=vocab.content_hash(), corpus=corpus.content_hash())
    out = Path(cfg.out)

    activations: dict[str, np.ndarray] = {}
    with rec.stage("activations") as st:
        h0, m0 = (cache.hits, cache.misses) if cache else (0, 0)
        for n in neurons:
            if n.layer.name not in activations:
                activations[n.layer.name] = layer_activations(model, corpus, n, cache, params.batch_size)
        if cache:
            st.update(cache_hits=cache.hits - h0, cache_misses=cache.misses - m0)

    patchsets: dict[NeuronRef, Any] = {}
    with rec.stage("patches") as st:

        def one(n: NeuronRef):
            try:
                ps = extract_patches(model, n, corpus, params, cache, activations[n.layer.name])
                save_patchset(ps, out, model.name)
                return n, ps, None
            except Exception as exc:  # noqa: BLE001 - per-neuron failures are reported, not fatal
                return n, None, exc

        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(one, neurons))
        else:
            results = [one(n) for n in neurons]
        for n, ps, exc in results:
            if exc is not None:
                rec.fail(f"patches {n}", exc)
            else:
                patchsets[n] = ps
        from_cache = sum(1 for ps in patchsets.values() if ps.from_cache)
        st.update(neurons=len(patchsets), from_cache=from_cache, skipped=bool(patchsets) and from_cache == len(patchsets))

    explanations: list[tuple[Explanation, Any]] = []
    text_cache = TextEmbeddingCache()
    with rec.stage("matching") as st:
        for n in neurons:
            if n not in patchsets:
                continue
            try:
                expl = explain_neuron(
                    embedder, patchsets[n], vocab, cfg.top_m, cfg.prompt_wrapper, cfg.render_mode, text_cache
                )
                save_explanation(expl, out, model.name)
                explanations.append((expl, patchsets[n]))
                print(f"{n}\t" + " | ".join(expl.texts))
            except Exception as exc:  # noqa: BLE001
                rec.fail(f"explain {n}", exc)
        st["explanations"] = len(explanations)

    with rec.stage("report"):
        if explanations:
            explanation_report(explanations, out / "reports" / f"explain_{model.name}.html", f"Neuron explanations: {model.name}")
    return 1 if rec.failures else 0


def cmd_explain(cfg: RunConfig, rec: RunRecorder) -> int:
    _require(cfg, "model_spec", "corpus", "vocab")
    model = load_model(cfg.model_spec)
    corpus = load_corpus(cfg.corpus)
    neurons = select_neurons(model, cfg)
    if not neurons:
        raise ConfigError("no neurons selected")
    return run_explain(cfg, rec, model, corpus, neurons)


def cmd_ablate(cfg: RunConfig, rec: RunRecorder) -> int:
    _require(cfg, "model_spec", "corpus")
    model = load_model(cfg.model_spec)
    corpus = load_corpus(cfg.corpus)
    if not corpus.labeled:
        raise ConfigError("ablation needs a labeled corpus")
    neurons = select_neurons(model, cfg)
    if not neurons:
        raise ConfigError("no neurons selected")
    images = corpus.images() if cfg.full_eval else stratified_sample(corpus, cfg.subset_per_class, cfg.seed)
    rec.hashes.update(model=model.content_hash, corpus=corpus.content_hash())
    rec.extra["evaluation_images"] = len(images)
    out = Path(cfg.out)
    class_names = corpus.class_names or model.spec.class_names
    by_layer: dict[str, list[NeuronRef]] = {}
    for n in neurons:
        by_layer.setdefault(n.layer.name, []).append(n)
    for layer_name, layer_neurons in by_layer.items():
        layer = layer_neurons[0].layer
        units = [n.unit for n in layer_neurons]
        base = out / "ablation" / model.name
        try:
            with rec.stage(f"ablate:{layer_name}") as st:
                ranking = layer_drop_ranking(model, layer, images, units, workers=cfg.workers)
                st["units"] = len(units)
        except Exception as exc:  # noqa: BLE001
            rec.fail(f"ablate {layer_name}", exc)
            continue
        for unit, report in ranking.reports.items():
            save_report(report, base / layer_name / f"{unit}.json")
        save_ranking(ranking, base)
        with rec.stage(f"report:{layer_name}"):
            curve = plot_sorted_drops(ranking, base / f"{layer_name}_sorted_drops.png")
            joined = importance_explanation_join(ranking, out, model.name)
            write_json(base / f"{layer_name}_joined.json", joined)
            figures = [curve]
            explained = [j["unit"] for j in joined if j.get("concepts")]
            if explained:
                top_units = explained[:6]
                panels = plot_ablation_panels(
                    [ranking.reports[u] for u in top_units], joined, class_names, base / f"{layer_name}_panels.png"
                )
                figures.append(panels)
            ablation_report_html(ranking, joined, class_names, figures, out / "reports" / f"ablate_{model.name}_{layer_name}.html")
        for e in ranking.top(10):
            cname = class_names[e.argmax_class] if 0 <= e.argmax_class < len(class_names) else e.argmax_class
            print(f"{layer_name}:{e.unit}\tmax_drop={e.max_drop:.3f}\tclass={cname}")
    return 1 if rec.failures else 0


def cmd_category_units(cfg: RunConfig, rec: RunRecorder, cls: str, top_n: int, explain: bool) -> int:
    _require(cfg, "model_spec")
    model = load_model(cfg.model_spec)
    class_names = model.spec.class_names
    corpus = None
    if cfg.corpus:
        corpus = load_corpus(cfg.corpus)
        class_names = corpus.class_names or class_names
    if cls.isdigit():
        class_index = int(cls)
    elif cls in class_names:
        class_index = class_names.index(cls)
    else:
        raise ConfigError(f"unknown class {cls!r}")
    final = model.final_layer()
    if final is None:
        raise ConfigError("model spec names no final layer (final_layer or 'last_conv' alias)")
    if top_n > final.unit_count:
        log.warning("top-n %d exceeds layer width %d; clamping", top_n, final.unit_count)
        top_n = final.unit_count
    units = category_units(model, class_index, top_n)
    result = {"class": class_index, "class_name": class_names[class_index] if class_index < len(class_names) else None,
              "layer": final.name, "units": [{"unit": u, "weight": w} for u, w in units]}
    write_json(Path(cfg.out) / "category_units" / f"{model.name}_class{class_index}.json", result)
    for u, w in units:
        print(f"{final.name}:{u}\tweight={w:.6g}")
    rec.extra["category_units"] = result
    if explain:
        if corpus is None:
            raise ConfigError("--explain needs --corpus")
        neurons = [NeuronRef(final, u) for u, _ in units]
        return run_explain(cfg, rec, model, corpus, neurons)
    return 0


def cmd_report(cfg: RunConfig, rec: RunRecorder) -> int:
    """Rebuild HTML reports from explanation records and patch directories already in ``--out``."""
    out = Path(cfg.out)
    root = out / "explanations"
    if not root.exists():
        raise ConfigError(f"no explanations under {root}")
    written = 0
    from .model_adapter import LayerId

    for model_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        items = []
        for path in sorted(model_dir.rglob("*.json"), key=lambda p: (p.parent.name, int(p.stem) if p.stem.isdigit() else 0)):
            layer_name = str(path.parent.relative_to(model_dir))
            data = read_json(path)
            unit = int(data["neuron"]["unit"])
            neuron = NeuronRef(LayerId(layer_name, "conv-feature-map", unit + 1), unit)
            expl = Explanation.from_dict(data, neuron)
            pdir = patchset_dir(out, model_dir.name, neuron)
            pset = load_patchset(pdir, neuron) if (pdir / "meta.json").exists() else None
            items.append((expl, pset))
        if items:
            explanation_report(items, out / "reports" / f"explain_{model_dir.name}.html", f"Neuron explanations: {model_dir.name}")
            written += 1
            print(f"report for {model_dir.name}: {len(items)} neurons")
    rec.extra["reports_written"] = written
    return 0


def cmd_make_testbed(args: argparse.Namespace) -> int:
    from .testbed import PlantedSpec, write_testbed

    spec = PlantedSpec(
        image_size=(args.image_size, args.image_size),
        trigger_size=args.trigger_size,
        n_units=args.n_units,
        noise_level=args.noise_level,
        seed=args.seed if args.seed is not None else 0,
    )
    paths = write_testbed(args.out, spec, args.n_per_class)
    for k, v in paths.items():
        print(f"{k}: {v}")
    return 0


# -- argument parsing ------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON config file; flags override its values")
    p.add_argument("--model-spec", dest="model_spec")
    p.add_argument("--corpus", help="manifest (JSON lines)")
    p.add_argument("--vocab", help="vocabulary JSON path")
    p.add_argument("--layer", help="layer name, alias, or glob")
    p.add_argument("--units", help="comma list / ranges, e.g. 0,3,5-7, or 'all'")
    p.add_argument("--k", type=int)
    p.add_argument("--occluder-size", dest="occluder_size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--percentile", type=float)
    p.add_argument("--fill", choices=["gray", "mean-pixel", "zero"])
    p.add_argument("--soft-mask", dest="soft_mask", action="store_true", default=None)
    p.add_argument("--top-m", dest="top_m", type=int)
    p.add_argument("--embedder", help="'mock', 'clip', or 'clip:<checkpoint dir>'")
    p.add_argument("--prompt-wrapper", dest="prompt_wrapper", help="text template, e.g. 'a photo of {}'")
    p.add_argument("--render-mode", dest="render_mode", choices=["fill", "crop"])
    p.add_argument("--subset-per-class", dest="subset_per_class", type=int)
    p.add_argument("--full-eval", dest="full_eval", action="store_true", default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--cache")
    p.add_argument("--no-cache", dest="no_cache", action="store_true", default=None)
    p.add_argument("--fixtures", help="directory of recorded LLM replies")
    p.add_argument("--llm-mode", dest="llm_mode", choices=["live", "fixture", "record"])
    p.add_argument("--dataset-tag", dest="dataset_tag")
    p.add_argument("--max-per-class", dest="max_per_class", type=int)
    p.add_argument("--add-class-names", dest="add_class_names", action="store_true", default=None)
    p.add_argument("--workers", type=int)
    p.add_argument("--canonical", action="store_true", default=None, help="omit timestamps from run records")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="neuronexplain", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("build-vocab", "query the LLM (or fixtures) per class and write a vocabulary"),
        ("explain", "extract patches and explain the selected neurons"),
        ("ablate", "ablate units and rank them by max category-accuracy drop"),
        ("report", "rebuild HTML reports from an output directory"),
    ]:
        _add_common(sub.add_parser(name, help=help_))
    p = sub.add_parser("category-units", help="units with the largest head weight for a class")
    _add_common(p)
    p.add_argument("--class", dest="cls", required=True, help="class index or name")
    p.add_argument("--top-n", dest="top_n", type=int, default=2)
    p.add_argument("--explain", action="store_true", help="also explain the selected units")
    p = sub.add_parser("make-testbed", help="write a planted model, synthetic corpus and LLM fixtures")
    p.add_argument("--out", required=True)
    p.add_argument("--image-size", dest="image_size", type=int, default=16)
    p.add_argument("--trigger-size", dest="trigger_size", type=int, default=4)
    p.add_argument("--n-units", dest="n_units", type=int, default=4)
    p.add_argument("--noise-level", dest="noise_level", type=float, default=0.0)
    p.add_argument("--n-per-class", dest="n_per_class", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "make-testbed":
        return cmd_make_testbed(args)
    try:
        cfg = resolve_config(args)
    except (ConfigError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    rec = RunRecorder(args.command, cfg)
    try:
        if args.command == "build-vocab":
            code = cmd_build_vocab(cfg, rec)
        elif args.command == "explain":
            code = cmd_explain(cfg, rec)
        elif args.command == "ablate":
            code = cmd_ablate(cfg, rec)
        elif args.command == "category-units":
            code = cmd_category_units(cfg, rec, args.cls, args.top_n, args.explain)
        else:
            code = cmd_report(cfg, rec)
    except (ConfigError, CorpusError, ModelError, VocabularyError, LLMTimeoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        rec.write("error")
        return 2
    rec.write("ok" if code == 0 else "failed")
    if rec.failures:
        print(f"{len(rec.failures)} item(s) failed:", file=sys.stderr)
        for f in rec.failures:
            print(f"  {f['item']}: {f['error']}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
