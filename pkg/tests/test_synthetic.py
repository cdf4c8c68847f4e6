import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from lazyseg.data_model import InstanceMap, load_manifest, validate_lazy_consistency
from lazyseg.synthetic import (
    LabelPolicy,
    SceneSpec,
    build_corpus,
    generate_scene,
    lazy_labels_for_scene,
    scene_specs,
    synthesize_detection_label,
    synthesize_separation_label,
    touching_pairs,
)
from oracles import eroded_by_disk


def test_generation_is_deterministic():
    a_img, a_inst = generate_scene(SceneSpec(seed=11))
    b_img, b_inst = generate_scene(SceneSpec(seed=11))
    assert np.array_equal(a_img.pixels, b_img.pixels) and a_inst == b_inst
    c_img, _ = generate_scene(SceneSpec(seed=12))
    assert not np.array_equal(a_img.pixels, c_img.pixels)


def test_exact_instance_counts():
    _, inst = generate_scene(SceneSpec(seed=3, instances_per_class=((5, 5), (5, 5)), touching_fraction=0.0))
    assert len(inst.instance_ids()) == 10
    assert inst.counts() == {1: 5, 2: 5}


def _min_pair_distance(ids):
    pts = {k: np.argwhere(ids == k) for k in np.unique(ids) if k}
    best = np.inf
    keys = sorted(pts)
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            d = np.sqrt(((pts[a][:, None, :] - pts[b][None, :, :]) ** 2).sum(-1)).min()
            best = min(best, d)
    return best


@pytest.mark.parametrize("seed", range(5))
def test_no_touching_means_clear_gaps(seed):
    _, inst = generate_scene(SceneSpec(seed=seed, height=64, width=64, touching_fraction=0.0,
                                       instances_per_class=((2, 3), (2, 3)), radius_range=(4, 7)))
    assert _min_pair_distance(inst.ids) > 2.0
    assert touching_pairs(inst) == set()


def test_touching_pairs_present_when_requested():
    found = 0
    for seed in range(5):
        _, inst = generate_scene(SceneSpec(seed=seed, touching_fraction=1.0))
        found += len(touching_pairs(inst))
    assert found > 0


def test_image_contrast_marks_objects():
    img, inst = generate_scene(SceneSpec(seed=4))
    px = img.pixels[..., 0]
    assert 0 <= px.min() and px.max() <= 1
    assert px[inst.ids > 0].std() > 0.01


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.0, 1.0, 1.5, 2.0, 3.0]))
def test_detection_equals_disk_erosion_oracle(seed, radius):
    rng = np.random.default_rng(seed)
    ids = np.zeros((14, 14), int)
    ids[rng.integers(0, 4):rng.integers(8, 14), rng.integers(0, 4):rng.integers(8, 14)] = 1
    ids[0:3, 10:14] = 2
    inst = InstanceMap(ids, {1: 1, 2: 2})
    got = synthesize_detection_label(inst, radius).labels
    for k, c in ((1, 1), (2, 2)):
        ref = eroded_by_disk(ids == k, radius)
        if not ref.any():  # keep-one rule
            assert (got == c).sum() == 1 and ids[got == c][0] == k
        else:
            assert np.array_equal(got == c, ref)


def test_keep_one_rule_picks_innermost_first_pixel():
    ids = np.zeros((7, 9), int)
    ids[2:5, 2:7] = 1  # 3x5 bar; columns 3-5 of the centre row tie at depth 2
    det = synthesize_detection_label(InstanceMap(ids, {1: 2}), erosion_radius=5).labels
    assert np.argwhere(det == 2).tolist() == [[3, 3]]


def _separation_oracle(ids, gap):
    H, W = ids.shape
    pts = {k: np.argwhere(ids == k) for k in np.unique(ids) if k}
    out = np.zeros((H, W), bool)
    for i in range(H):
        for j in range(W):
            near = sum(((p - (i, j)) ** 2).sum(1).min() <= gap * gap for p in pts.values())
            out[i, j] = near >= 2
    return out


@pytest.mark.parametrize("gap", [1.0, 2.0, 2.5])
def test_separation_label_on_rectangles(gap):
    ids = np.zeros((12, 16), int)
    ids[2:10, 1:7] = 1
    ids[2:10, 8:15] = 2  # one-pixel background column between them
    ids[11, 0:3] = 3
    inst = InstanceMap(ids, {1: 1, 2: 1, 3: 2})
    got = synthesize_separation_label(inst, gap).labels > 0
    assert np.array_equal(got, _separation_oracle(ids, gap))
    assert got[5, 7]


def test_separation_label_of_abutting_rectangles_hugs_the_shared_edge():
    ids = np.zeros((12, 14), int)
    ids[2:10, 1:7] = 1
    ids[2:10, 7:13] = 2
    got = synthesize_separation_label(InstanceMap(ids, {1: 1, 2: 2}), 1.0).labels > 0
    assert set(np.nonzero(got)[1].tolist()) == {6, 7}
    assert got[2:10, 6:8].all()


def test_separation_label_empty_for_distant_or_lone_instances():
    ids = np.zeros((12, 30), int)
    ids[2:10, 1:8] = 1
    ids[2:10, 18:25] = 2  # ten background columns between them
    assert not synthesize_separation_label(InstanceMap(ids, {1: 1, 2: 1}), 2.0).labels.any()
    lone = np.where(ids == 1, 1, 0)
    assert not synthesize_separation_label(InstanceMap(lone, {1: 1}), 3.0).labels.any()


def test_separation_drop_removes_whole_interfaces():
    ids = np.zeros((10, 30), int)
    ids[2:8, 1:9] = 1
    ids[2:8, 10:19] = 2
    ids[2:8, 20:29] = 3
    inst = InstanceMap(ids, {1: 1, 2: 1, 3: 1})
    full = synthesize_separation_label(inst, 2.0).labels > 0
    none = synthesize_separation_label(inst, 2.0, drop_fraction=1.0, rng=np.random.default_rng(0)).labels > 0
    assert full[:, 9].any() and full[:, 19].any()
    assert not none.any()


def test_labels_of_generated_scenes_are_consistent():
    policy = LabelPolicy(1, 1, 1)
    for spec in scene_specs(20, seed=9):
        _, inst = generate_scene(spec)
        labels = lazy_labels_for_scene(inst, ("detection", "separation", "segmentation"), policy)
        assert validate_lazy_consistency(labels) == []


def test_eroded_counts_match_generator_without_touching():
    for spec in scene_specs(20, seed=5, touching_fraction=0.0):
        _, inst = generate_scene(spec)
        det = synthesize_detection_label(inst, 3.0)
        for c, n in inst.counts().items():
            _, k = ndimage.label(det.labels == c, structure=np.ones((3, 3)))
            assert k == n


def test_build_corpus_counts_and_layout(tmp_path):
    policy = LabelPolicy(n_detection=6, n_separation=3, n_segmentation=2, n_test=2, seed=1)
    manifest = build_corpus(scene_specs(10, seed=2, height=48, width=48, instances_per_class=((1, 2), (1, 2)), radius_range=(3.0, 5.0)), policy, tmp_path)
    train = manifest.split("train")
    assert len(train) == 8 and len(manifest.split("test")) == 2
    assert [sum(e.membership[k] for e in train) for k in range(3)] == [6, 3, 2]
    assert all(all(e.membership) and e.instances for e in manifest.split("test"))
    for sub in ("images", "labels/task1", "labels/task2", "labels/task3"):
        assert (tmp_path / sub).is_dir()
    assert load_manifest(tmp_path / "manifest.json") == manifest


def test_policy_rejects_oversized_subsets(tmp_path):
    with pytest.raises(ValueError, match="n_segmentation"):
        build_corpus(scene_specs(4), LabelPolicy(1, 1, 5), tmp_path)


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(touching_fraction=1.5)
    with pytest.raises(ValueError):
        SceneSpec(instances_per_class=((3, 1),))
