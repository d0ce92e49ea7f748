import numpy as np
import pytest

from neuronexplain.data_ingest import load_corpus, quantize
from neuronexplain.model_adapter import load_model
from neuronexplain.testbed import (
    BACKGROUND_LEVEL,
    GroundTruth,
    PlantedSpec,
    Trigger,
    color_detector,
    iou,
    make_planted_model,
    make_synthetic_corpus,
    write_testbed,
)


def test_trigger_response_is_exact(planted, planted_spec):
    model, gt = planted
    for trig in planted_spec.triggers:
        pixels = np.full((16, 16, 3), BACKGROUND_LEVEL)
        pixels[5:9, 2:6] = trig.color
        unit = {c: u for u, c in gt.unit_concepts.items()}[trig.concept]
        rec = model.neuron_activation(pixels, model.neuron("features", unit))
        assert rec.scalar == pytest.approx(1.0, abs=1e-12)
        assert rec.spatial_argmax == (5, 2)
        gray = model.neuron_activation(np.full((16, 16, 3), BACKGROUND_LEVEL), model.neuron("features", unit))
        assert gray.scalar == 0.0


def test_corpus_regions_match_pixels(planted_spec):
    corpus, gt = make_synthetic_corpus(planted_spec, 6)
    color_of = {t.class_index: np.asarray(t.color) for t in planted_spec.triggers}
    for im in corpus:
        r, c, h, w = gt.regions[im.image_id]
        assert np.all(im.pixels[r : r + h, c : c + w] == color_of[im.label])
        mask = gt.region_mask(im.image_id, (16, 16))
        assert mask.sum() == 16
        assert np.all(im.pixels[~mask] == quantize(BACKGROUND_LEVEL))


def test_noise_background_is_zero_mean_around_gray():
    spec = PlantedSpec(noise_level=0.4, seed=5)
    corpus, _ = make_synthetic_corpus(spec, 20, include_background=True)
    bg = [im.pixels for im in corpus if im.label == 2]
    assert abs(np.mean(bg) - BACKGROUND_LEVEL) < 0.01
    assert np.all(np.abs(np.stack(bg) - BACKGROUND_LEVEL) <= 0.2 + 1 / 255)


def test_seed_determinism():
    a, _ = make_synthetic_corpus(PlantedSpec(seed=3), 3)
    b, _ = make_synthetic_corpus(PlantedSpec(seed=3), 3)
    c, _ = make_synthetic_corpus(PlantedSpec(seed=4), 3)
    assert a.content_hash() == b.content_hash() != c.content_hash()


def test_ground_truth_round_trip(planted, tmp_path):
    _, gt = planted
    gt.regions["x"] = (1, 2, 3, 4)
    gt.save(tmp_path / "gt.json")
    assert GroundTruth.load(tmp_path / "gt.json") == gt


def test_color_detector_zero_on_gray():
    det = color_detector((1.0, 0.0, 0.0))
    assert det(np.full((3, 3, 3), 0.5)) == 0.0
    assert det(np.broadcast_to([1.0, 0.0, 0.0], (3, 3, 3))) == pytest.approx(0.75)


def test_iou():
    a = np.zeros((4, 4), bool)
    a[:2, :2] = True
    b = np.zeros((4, 4), bool)
    b[:2, :4] = True
    assert iou(a, b) == 0.5
    assert iou(np.zeros((2, 2)), np.zeros((2, 2))) == 1.0


def test_write_testbed_loads_back(tmp_path):
    spec = PlantedSpec(seed=2)
    paths = write_testbed(tmp_path, spec, n_per_class=3)
    model = load_model(paths["model_spec"])
    corpus = load_corpus(paths["corpus"])
    mem_model, _ = make_planted_model(spec)
    mem_corpus, _ = make_synthetic_corpus(spec, 3)
    assert model.content_hash == mem_model.content_hash
    for a, b in zip(corpus, mem_corpus):
        assert a.image_id == b.image_id
        assert np.array_equal(a.pixels, b.pixels)
    assert sorted(p.name for p in (tmp_path / "fixtures").iterdir()) == [
        "background.txt",
        "green_object.txt",
        "red_object.txt",
    ]


def test_spec_validation():
    with pytest.raises(ValueError):
        PlantedSpec(trigger_size=20)
    with pytest.raises(ValueError):
        PlantedSpec(n_units=1)
    with pytest.raises(ValueError):
        PlantedSpec(triggers=(Trigger("red", 0, "red square"), Trigger("red", 1, "red square")))
