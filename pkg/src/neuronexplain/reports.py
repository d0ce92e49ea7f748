"""Static reports: per-neuron patch/concept pages, sorted max-drop curves, ablation panels."""

from __future__ import annotations

import base64
import html
import io
import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image as PILImage  # noqa: E402

from ._io import atomic_write_bytes, atomic_write_text  # noqa: E402
from .ablation import AblationReport, LayerDropRanking  # noqa: E402
from .concept_matcher import Explanation  # noqa: E402
from .patch_extraction import PatchSet  # noqa: E402

STYLE = """
body { font-family: -apple-system, Helvetica, Arial, sans-serif; margin: 24px; color: #222; }
h1 { font-size: 22px; } h2 { font-size: 17px; margin-bottom: 6px; }
.neuron { border: 1px solid #ddd; border-radius: 6px; padding: 12px; margin-bottom: 16px; }
.patches img { width: 128px; height: 128px; image-rendering: pixelated; margin-right: 6px; border: 1px solid #ccc; }
table { border-collapse: collapse; font-size: 13px; }
td, th { padding: 3px 8px; border-bottom: 1px solid #eee; text-align: left; }
.score { font-family: monospace; }
.muted { color: #888; }
"""


def png_data_uri(pixels: np.ndarray, min_side: int = 128) -> str:
    arr = np.clip(np.rint(np.asarray(pixels) * 255), 0, 255).astype(np.uint8)
    im = PILImage.fromarray(arr)
    if min(im.size) < min_side:
        scale = max(1, min_side // min(im.size))
        im = im.resize((im.width * scale, im.height * scale), PILImage.NEAREST)
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode()


def _page(title: str, body: str) -> str:
    return (
        f"<!DOCTYPE html>\n<html><head><meta charset='utf-8'><title>{html.escape(title)}</title>"
        f"<style>{STYLE}</style></head><body><h1>{html.escape(title)}</h1>\n{body}\n</body></html>\n"
    )


def neuron_section(expl: Explanation, patches: PatchSet | None, n_show: int = 4) -> str:
    parts = [f"<div class='neuron'><h2>{html.escape(str(expl.neuron))}</h2>"]
    if patches is not None:
        imgs = "".join(
            f"<img src='{png_data_uri(p.pixels)}' title='{html.escape(p.image_id)} act={p.activation:.4g}'>"
            for p in patches.patches[:n_show]
        )
        parts.append(f"<div class='patches'>{imgs}</div>")
    rows = "".join(
        f"<tr><td>{i + 1}</td><td>{html.escape(cs.concept.text)}</td><td class='score'>{cs.score:.4f}</td></tr>"
        for i, cs in enumerate(expl.top)
    )
    parts.append(f"<table><tr><th>#</th><th>concept</th><th>score</th></tr>{rows}</table></div>")
    return "".join(parts)


def explanation_report(
    items: Sequence[tuple[Explanation, PatchSet | None]], path: str | os.PathLike, title: str = "Neuron explanations"
) -> Path:
    body = "\n".join(neuron_section(e, p) for e, p in items)
    return atomic_write_text(path, _page(title, body))


def _save_fig(fig, path: str | os.PathLike) -> Path:
    buf = io.BytesIO()
    fmt = Path(path).suffix.lstrip(".") or "png"
    fig.savefig(buf, format=fmt, dpi=120, bbox_inches="tight", metadata={"Software": None} if fmt == "png" else None)
    plt.close(fig)
    return atomic_write_bytes(path, buf.getvalue())


def plot_sorted_drops(ranking: LayerDropRanking, path: str | os.PathLike, top: int = 256) -> Path:
    """Max category-accuracy drop per unit, sorted descending; display clamped to [0, 1]."""
    entries = ranking.top(top)
    values = np.clip([e.max_drop for e in entries], 0, 1)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(np.arange(len(values)), values, marker="o" if len(values) <= 32 else None, lw=1.5)
    ax.set_xlabel("units (sorted)")
    ax.set_ylabel("max category accuracy drop")
    ax.set_ylim(0, 1.02)
    ax.set_title(f"{ranking.layer.name}: max drop after ablating a unit")
    ax.grid(alpha=0.3)
    return _save_fig(fig, path)


def plot_ablation_panels(
    reports: Sequence[AblationReport],
    joined: Sequence[dict],
    class_names: Sequence[str],
    path: str | os.PathLike,
    n_classes_shown: int = 5,
) -> Path:
    """One bar panel per unit: the classes it hurts most, titled with its top concept."""
    concept_of = {j["unit"]: (j.get("concepts") or ["(no explanation)"])[0] for j in joined}
    n = max(1, len(reports))
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3), squeeze=False)
    for ax, rep in zip(axes[0], reports):
        drops = np.nan_to_num(rep.drops, nan=-np.inf)
        order = np.argsort(-drops, kind="stable")[:n_classes_shown]
        order = [c for c in order if np.isfinite(drops[c])]
        labels = [class_names[c] if c < len(class_names) else str(c) for c in order]
        ax.bar(range(len(order)), np.clip([drops[c] for c in order], 0, 1), color="#c44")
        ax.set_xticks(range(len(order)), labels, rotation=45, ha="right", fontsize=8)
        ax.set_ylim(0, 1.02)
        ax.set_title(f"unit {rep.neuron.unit}\n{concept_of.get(rep.neuron.unit, '')}"[:60], fontsize=9)
    axes[0][0].set_ylabel("accuracy drop")
    return _save_fig(fig, path)


def ablation_report_html(
    ranking: LayerDropRanking,
    joined: Sequence[dict],
    class_names: Sequence[str],
    figures: Sequence[str | os.PathLike],
    path: str | os.PathLike,
    top: int = 50,
) -> Path:
    imgs = []
    for fig in figures:
        data = Path(fig).read_bytes()
        imgs.append(f"<img style='max-width:100%' src='data:image/png;base64,{base64.b64encode(data).decode()}'>")
    rows = []
    for j in joined[:top]:
        cls = j["argmax_class"]
        cname = class_names[cls] if 0 <= cls < len(class_names) else str(cls)
        concepts = ", ".join(html.escape(c) for c in j.get("concepts", [])) or "<span class='muted'>no explanation</span>"
        rows.append(
            f"<tr><td>{j['unit']}</td><td class='score'>{j['max_drop']:.3f}</td>"
            f"<td>{html.escape(cname)}</td><td>{concepts}</td></tr>"
        )
    table = (
        "<table><tr><th>unit</th><th>max drop</th><th>class</th><th>explanation</th></tr>"
        + "".join(rows)
        + "</table>"
    )
    body = "".join(f"<div>{i}</div>" for i in imgs) + table
    return atomic_write_text(path, _page(f"Ablation: {ranking.layer.name}", body))
