import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuronexplain.data_ingest import ArtifactCache, Image
from neuronexplain.patch_extraction import (
    ActivationMask,
    DiscrepancyMap,
    OcclusionGrid,
    PatchParams,
    ReceptiveField,
    apply_mask,
    binarize_mask,
    default_occluder_size,
    discrepancy_scores,
    expected_position_count,
    extract_patches,
    generate_occlusions,
    load_patchset,
    save_patchset,
    select_top_images,
    synthesize_receptive_field,
)
from neuronexplain.testbed import brute_force_discrepancy, brute_force_field


def grid16(**kw):
    args = dict(size=4, stride=3, fill="gray")
    args.update(kw)
    return OcclusionGrid.for_image(16, 16, **args)


def test_position_count_example():
    grid = grid16()
    assert grid.count == 25
    assert expected_position_count(16, 16, 4, 3) == 25
    rows = sorted({r for r, _ in grid.positions})
    assert rows == [0, 3, 6, 9, 12]


@given(
    h=st.integers(4, 40),
    w=st.integers(4, 40),
    size=st.integers(1, 4),
    stride=st.integers(1, 4),
)
def test_position_count_formula_and_full_coverage(h, w, size, stride):
    if stride > size:
        with pytest.raises(ValueError):
            OcclusionGrid.for_image(h, w, size, stride)
        return
    grid = OcclusionGrid.for_image(h, w, size, stride)
    assert grid.count == expected_position_count(h, w, size, stride)
    assert grid.occlusion_masks().any(axis=0).all()


def test_grid_rejects_oversized_occluder():
    with pytest.raises(ValueError, match="larger than image"):
        OcclusionGrid.for_image(8, 8, 9, 3)


def test_default_occluder_scaling():
    assert default_occluder_size(224, 224) == 11
    assert default_occluder_size(448, 300) == 15
    assert PatchParams(stride=3).resolved_occluder(16, 16) == 3


def test_zero_fill_and_untouched_pixels(rng):
    pixels = rng.uniform(size=(16, 16, 3))
    original = pixels.copy()
    grid = grid16(fill="zero")
    occ = generate_occlusions(pixels, grid)
    assert np.array_equal(pixels, original)
    masks = grid.occlusion_masks()
    for m in range(grid.count):
        assert np.all(occ[m][masks[m]] == 0)
        assert np.array_equal(occ[m][~masks[m]], pixels[~masks[m]])


def test_mean_pixel_fill():
    grid = OcclusionGrid.for_image(8, 8, 4, 4, fill="mean-pixel", mean_pixel=[0.1, 0.2, 0.3])
    occ = generate_occlusions(np.ones((8, 8, 3)), grid)
    assert occ[0, 0, 0].tolist() == [0.1, 0.2, 0.3]
    with pytest.raises(ValueError):
        OcclusionGrid.for_image(8, 8, 4, 4, fill="mean-pixel")


def test_discrepancy_matches_brute_force(planted, planted_corpus):
    model, _ = planted
    corpus, _ = planted_corpus
    grid = grid16()
    for im in list(corpus)[:4]:
        for unit in (0, 1, 3):
            n = model.neuron("features", unit)
            fast = discrepancy_scores(model, n, im, grid, batch_size=7)
            slow = brute_force_discrepancy(model, n, im, grid)
            assert np.allclose(fast.scores, slow.scores, atol=1e-12, rtol=0)
            assert np.all(fast.scores >= 0)


def test_discrepancy_zero_when_occluding_gray(planted):
    model, _ = planted
    im = Image("g", np.full((16, 16, 3), 0.5))
    dmap = discrepancy_scores(model, model.neuron("features", 0), im, grid16())
    assert np.all(dmap.scores == 0)


def test_field_matches_pixel_loop_oracle(rng):
    grid = grid16()
    scores = rng.uniform(size=grid.count)
    dmap = DiscrepancyMap(None, "x", scores, grid)
    field = synthesize_receptive_field(dmap).field
    assert np.allclose(field, brute_force_field(scores, grid), atol=1e-12)


def test_field_single_position():
    grid = grid16()
    scores = np.zeros(grid.count)
    scores[0] = 2.5
    field = synthesize_receptive_field(DiscrepancyMap(None, "x", scores, grid)).field
    expected = np.zeros((16, 16))
    expected[:4, :4] = 2.5 / 25
    assert np.allclose(field, expected)


@settings(max_examples=30)
@given(seed=st.integers(0, 2**31 - 1))
def test_field_invariant_to_position_order(seed):
    rng = np.random.default_rng(seed)
    grid = grid16()
    scores = rng.uniform(size=grid.count)
    perm = rng.permutation(grid.count)
    shuffled = OcclusionGrid(
        grid.size, grid.stride, grid.fill, grid.fill_value, grid.image_hw, tuple(grid.positions[i] for i in perm)
    )
    a = synthesize_receptive_field(DiscrepancyMap(None, "x", scores, grid)).field
    b = synthesize_receptive_field(DiscrepancyMap(None, "x", scores[perm], shuffled)).field
    assert np.allclose(a, b, atol=1e-12)


def test_mask_keeps_top_percentile(rng):
    f = rng.uniform(size=(20, 20))
    m = binarize_mask(ReceptiveField(f, None, "x"), 95)
    threshold = np.percentile(f, 95)
    assert np.array_equal(m.mask.astype(bool), f >= threshold)
    assert set(np.unique(m.mask)) <= {0.0, 1.0}
    assert m.mask.sum() == 20  # 5% of 400 distinct values
    assert not m.degenerate


def test_mask_degenerate_constant_field():
    m = binarize_mask(ReceptiveField(np.full((5, 5), 0.3), None, "x"), 95)
    assert m.degenerate
    assert np.all(m.mask == 1)


def test_soft_mask(rng):
    f = rng.uniform(size=(10, 10))
    m = binarize_mask(ReceptiveField(f, None, "x"), 90, soft=True)
    keep = f >= np.percentile(f, 90)
    assert np.allclose(m.mask[keep], f[keep] / f.max())
    assert np.all(m.mask[~keep] == 0)


@pytest.mark.parametrize("pct", [0, 100, -1])
def test_mask_percentile_range(pct):
    with pytest.raises(ValueError):
        binarize_mask(ReceptiveField(np.eye(3), None, "x"), pct)


def test_apply_mask(rng):
    pixels = rng.uniform(size=(6, 6, 3))
    mask = np.zeros((6, 6))
    mask[1:3, 2:5] = 1
    out = apply_mask(pixels, mask)
    assert np.array_equal(out[1:3, 2:5], pixels[1:3, 2:5])
    outside = ~mask.astype(bool)
    assert np.all(out[outside] == 0.5)
    cropped = apply_mask(pixels, mask, crop=True)
    assert np.array_equal(cropped, pixels[1:3, 2:5])
    with pytest.raises(ValueError):
        apply_mask(pixels, np.ones((5, 6)))


def test_select_top_images_ties_and_warning():
    acts = np.array([[1.0], [3.0], [3.0], [2.0]])
    ids = ["d", "c", "b", "a"]
    assert select_top_images(acts, 0, 3, ids) == ["b", "c", "a"]
    with pytest.warns(UserWarning, match="exceeds corpus size"):
        assert select_top_images(acts, 0, 9, ids) == ["b", "c", "a", "d"]
    with pytest.raises(ValueError):
        select_top_images(acts, 0, 0, ids)


def test_extract_patches_planted(planted, planted_corpus):
    model, _ = planted
    corpus, gt = planted_corpus
    n = model.neuron("features", 0)
    pset = extract_patches(model, n, corpus, PatchParams(k=3, occluder_size=4, stride=3, fill="gray"))
    assert len(pset) == 3
    assert all(p.image_id.startswith("c0_") for p in pset.patches)
    acts = [p.activation for p in pset.patches]
    assert acts == sorted(acts, reverse=True)
    for p in pset.patches:
        # every kept pixel must fall inside the occluder footprints touching the trigger
        r, c, s, _ = gt.regions[p.image_id]
        assert p.mask.shape == (16, 16)
        kept = np.argwhere(p.mask > 0)
        assert kept[:, 0].min() >= r - 3 and kept[:, 0].max() < r + s + 3
        assert kept[:, 1].min() >= c - 3 and kept[:, 1].max() < c + s + 3


def test_extract_patches_k_exceeds_corpus(planted, planted_corpus):
    model, _ = planted
    corpus, _ = planted_corpus
    with pytest.warns(UserWarning, match="exceeds corpus size"):
        pset = extract_patches(model, model.neuron("features", 1), corpus, PatchParams(k=50, fill="gray"))
    assert len(pset) == len(corpus)


def test_cache_warm_equals_cold(planted, planted_corpus, tmp_path):
    model, _ = planted
    corpus, _ = planted_corpus
    cache = ArtifactCache(tmp_path / "cache")
    n = model.neuron("features", 0)
    params = PatchParams(k=4)
    cold = extract_patches(model, n, corpus, params, cache)
    warm = extract_patches(model, n, corpus, params, cache)
    nocache = extract_patches(model, n, corpus, params)
    assert not cold.from_cache and warm.from_cache
    for a, b, c in zip(cold.patches, warm.patches, nocache.patches):
        assert a.image_id == b.image_id == c.image_id
        assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.pixels, c.pixels)
        assert np.array_equal(a.mask, b.mask)
    assert cold.meta() == warm.meta()


def test_cache_key_tracks_ablation(planted, planted_corpus, tmp_path):
    model, _ = planted
    corpus, _ = planted_corpus
    cache = ArtifactCache(tmp_path / "cache")
    n = model.neuron("features", 0)
    extract_patches(model, n, corpus, PatchParams(k=2), cache)
    token = model.ablate_unit(model.neuron("features", 1))
    try:
        assert not extract_patches(model, n, corpus, PatchParams(k=2), cache).from_cache
    finally:
        model.restore(token)


def test_save_load_round_trip(planted, planted_corpus, tmp_path):
    model, _ = planted
    corpus, _ = planted_corpus
    n = model.neuron("features", 1)
    pset = extract_patches(model, n, corpus, PatchParams(k=3, fill="gray"))
    d = save_patchset(pset, tmp_path, "planted")
    assert d == tmp_path / "patches" / "planted" / "features" / "1"
    back = load_patchset(d, n)
    assert back.meta() == pset.meta()
    for a, b in zip(pset.patches, back.patches):
        assert np.abs(a.pixels - b.pixels).max() <= 0.5 / 255 + 1e-12
        assert np.array_equal(a.mask, b.mask)


def test_bad_image_is_skipped(planted, planted_corpus, monkeypatch):
    import neuronexplain.patch_extraction as pe

    model, _ = planted
    corpus, _ = planted_corpus
    real = pe.binarize_mask
    calls = {"n": 0}

    def flaky(rf, *a, **kw):
        calls["n"] += 1
        if calls["n"] == 1:
            raise FloatingPointError("boom")
        return real(rf, *a, **kw)

    monkeypatch.setattr(pe, "binarize_mask", flaky)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pset = extract_patches(model, model.neuron("features", 0), corpus, PatchParams(k=3, fill="gray"))
    assert len(pset) == 2
    assert any("skipping image" in str(w.message) for w in caught)


def test_activation_mask_coverage():
    assert ActivationMask(np.array([[1.0, 0.0], [0.0, 0.0]]), 95, 1.0).coverage == 0.25
