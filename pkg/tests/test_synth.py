import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from octa.errors import ValidationError
from octa.io import load_mask, load_volume, read_manifest
from octa.synth import AnomalyRecipe, PhantomConfig, class_config, generate_dataset, generate_volume


def test_healthy_mask_is_empty():
    ph = generate_volume(class_config("healthy", seed=3))
    assert not ph.mask.labels.any()
    assert ph.label == "healthy"


def test_same_seed_same_volume():
    a = generate_volume(class_config("late", seed=11))
    b = generate_volume(class_config("late", seed=11))
    assert all(np.array_equal(x, y) for x, y in zip(a.volume.bscans, b.volume.bscans))
    assert np.array_equal(a.mask.labels, b.mask.labels)


def test_single_fluid_pocket_within_size_range():
    cfg = PhantomConfig(label="late", seed=7, anomalies=(AnomalyRecipe("dark-fluid", (250, 700), (1, 1)),))
    ph = generate_volume(cfg)
    n = int((ph.mask.labels == 2).sum())
    assert 250 <= n <= 700


def test_healthy_rejects_recipes_and_unknown_kind():
    with pytest.raises(ValidationError):
        PhantomConfig(label="healthy", anomalies=(AnomalyRecipe("dark-fluid"),))
    with pytest.raises(ValidationError):
        AnomalyRecipe("glitter")


def test_oversized_recipe_raises():
    cfg = PhantomConfig(label="late", seed=1, anomalies=(AnomalyRecipe("dark-fluid", (40000, 41000), (1, 1)),))
    with pytest.raises(ValidationError):
        generate_volume(cfg)


@settings(max_examples=15)
@given(st.sampled_from(["healthy", "early", "late"]), st.integers(0, 2 ** 31))
def test_truth_surfaces_valid_and_masks_inside_retina(label, seed):
    ph = generate_volume(class_config(label, seed=seed))
    h = ph.volume.height
    for s, surf in enumerate(ph.surfaces):
        surf.validate(h, 2)
        anomalous = ph.mask.labels[s] > 0
        if label != "early":
            # blobs and fluid lie strictly inside the retina
            assert not (anomalous & ~surf.region(h)).any()


def test_masks_match_rendered_footprint():
    ph = generate_volume(class_config("late", seed=21, speckle_shape=0))
    for s in range(len(ph.volume)):
        fluid = ph.mask.labels[s] == 2
        blob = ph.mask.labels[s] == 1
        assert np.allclose(ph.intensity[s][fluid], 0.03)
        assert np.allclose(ph.intensity[s][blob], 1.0)


def test_dataset_counts_and_files(tmp_path):
    m = generate_dataset(tmp_path, {"healthy": 2, "early": 2, "late": 2}, seed=5)
    assert len(m.entries) == 6
    assert sorted(e.label for e in m.entries) == ["early"] * 2 + ["healthy"] * 2 + ["late"] * 2
    back = read_manifest(tmp_path / "manifest.csv")
    assert back.entries == m.entries
    assert len(list((tmp_path / "volumes").iterdir())) == len(list((tmp_path / "masks").iterdir())) == 6
    vol = load_volume(back.resolve(back.entries[0].volume))
    assert len(vol) == PhantomConfig().n_bscans


def test_early_and_late_differ_in_kind(tmp_path):
    m = generate_dataset(tmp_path, [("early", "test", 8), ("late", "test", 8)], seed=2)
    kinds, pocket = {}, {}
    for label in ("early", "late"):
        masks = [load_mask(m.resolve(e.mask)).labels for e in m.select(label=label)]
        kinds[label] = set(np.unique(np.concatenate([x.ravel() for x in masks])))
        sizes = []
        for vol in masks:
            for sl in vol:
                comp, n = ndimage.label(sl == 2)
                sizes += list(np.bincount(comp.ravel())[1:])
        pocket[label] = np.median(sizes)
    assert 3 in kinds["early"] and 3 not in kinds["late"]
    assert pocket["late"] > 3 * pocket["early"]


def test_counts_must_be_positive(tmp_path):
    with pytest.raises(ValidationError):
        generate_dataset(tmp_path, {"healthy": 0})
