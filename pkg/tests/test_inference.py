import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lazyseg.inference import (
    CoverageError,
    TilingPlan,
    aggregate,
    count_instances,
    decode,
    gaussian_weight,
    plan_tiles,
    predict_image,
)
from lazyseg.network import ArchitectureConfig, build_model, single_task_variant


@pytest.mark.parametrize("patch", [5, 9, 33])
def test_gaussian_odd_has_unique_central_max(patch):
    w = gaussian_weight(patch)
    c = patch // 2
    assert w[c, c] == 1.0
    assert (w < 1.0).sum() == patch * patch - 1
    assert (w > 0).all()


@pytest.mark.parametrize("patch", [4, 8, 64])
def test_gaussian_symmetry(patch):
    w = gaussian_weight(patch, sigma=patch / 3)
    np.testing.assert_array_equal(w, w[::-1])
    np.testing.assert_array_equal(w, w[:, ::-1])
    np.testing.assert_array_equal(w, w.T)
    assert w.max() == 1.0
    # radially decreasing from the midpoint
    assert w[patch // 2, patch // 2] > w[patch // 2, 0] > w[0, 0]


def test_gaussian_rejects_bad_sigma():
    with pytest.raises(ValueError):
        gaussian_weight(8, sigma=0)


def test_plan_for_large_image_covers_every_pixel():
    plan = plan_tiles(960, 1280, 256)
    cov = plan.coverage()
    assert cov.shape == (960, 1280) and cov.min() >= 1
    assert plan.stride == 128
    ys = sorted({y for y, _ in plan.offsets})
    assert ys[0] == 0 and ys[-1] == 960 - 256


def test_plan_pads_small_images():
    plan = plan_tiles(10, 30, 16)
    assert plan.padded == (16, 30)
    assert plan.coverage().min() >= 1


def test_single_patch_is_reproduced_exactly(rng):
    p = rng.random((8, 8, 3))
    plan = plan_tiles(8, 8, 8)
    (out,) = aggregate([(p,)], plan)
    assert np.array_equal(out, p)


def test_two_patch_overlap_matches_scalar_oracle(rng):
    plan = TilingPlan(patch=4, stride=2, height=4, width=6, padded=(4, 6), offsets=((0, 0), (0, 2)))
    a, b = rng.random((4, 4, 2)), rng.random((4, 4, 2))
    w = gaussian_weight(4)
    (out,) = aggregate([(a,), (b,)], plan, w)
    for i in range(4):
        for j in range(6):
            for c in range(2):
                num = den = 0.0
                if j < 4:
                    num += w[i, j] * a[i, j, c]
                    den += w[i, j]
                if j >= 2:
                    num += w[i, j - 2] * b[i, j - 2, c]
                    den += w[i, j - 2]
                assert abs(out[i, j, c] - num / den) <= 1e-10


def test_uniform_maps_are_fixed_points():
    plan = plan_tiles(16, 16, 8, 4)
    c = np.full((8, 8, 2), 0.25)
    (out,) = aggregate([(c,)] * len(plan.offsets), plan)
    np.testing.assert_allclose(out, 0.25, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_aggregated_probabilities_stay_normalised(seed):
    rng = np.random.default_rng(seed)
    plan = plan_tiles(20, 13, 8, 3)
    maps = []
    for _ in plan.offsets:
        p = rng.random((8, 8, 3))
        maps.append((p / p.sum(-1, keepdims=True),))
    (out,) = aggregate(maps, plan)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)


def test_aggregate_order_independent(rng):
    plan = plan_tiles(12, 12, 8, 4)
    maps = [(rng.random((8, 8, 2)),) for _ in plan.offsets]
    (ref,) = aggregate(maps, plan)
    order = rng.permutation(len(maps))
    shuffled = TilingPlan(plan.patch, plan.stride, plan.height, plan.width, plan.padded,
                          tuple(plan.offsets[i] for i in order))
    (out,) = aggregate([maps[i] for i in order], shuffled)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_missing_coverage_is_reported():
    plan = TilingPlan(4, 4, 4, 8, (4, 8), ((0, 0),))
    with pytest.raises(CoverageError, match=r"\(0, 4\)"):
        aggregate([(np.ones((4, 4, 1)),)], plan)


def test_decode_tie_goes_to_lowest_index():
    prob = np.array([[[0.4, 0.4, 0.2], [0.1, 0.45, 0.45]]])
    assert decode(prob, ("a", "b", "c"), "segmentation").labels.tolist() == [[0, 1]]


def test_predict_image_shapes_and_normalisation(rng):
    model = build_model(ArchitectureConfig(input_size=16, levels=3, base_width=4, num_multitask_blocks=2), 0)
    pred = predict_image(model, rng.random((23, 37)).astype(np.float32))
    det, sep, seg = pred.maps
    assert seg.shape == (23, 37, 3) and sep.shape == (23, 37, 2)
    for m in pred.maps:
        np.testing.assert_allclose(m.sum(-1), 1.0, atol=1e-5)
    assert pred.segmentation.shape == (23, 37)
    single = single_task_variant(model.config, 0)
    sp = predict_image(single, rng.random((16, 16)).astype(np.float32))
    assert sp.separation is None and sp.maps[2].shape == (16, 16, 3)


def test_predict_single_patch_equals_network_output(rng):
    model = build_model(ArchitectureConfig(input_size=16, levels=3, base_width=4, num_multitask_blocks=2), 3).eval()
    img = rng.random((16, 16)).astype(np.float32)
    pred = predict_image(model, img)
    with torch.no_grad():
        logits = model(torch.from_numpy(img)[None, None])
    seg = torch.softmax(logits[2], 1)[0].permute(1, 2, 0).double().numpy()
    np.testing.assert_allclose(pred.maps[2], seg, rtol=0, atol=1e-6)


def test_count_instances():
    prob = np.zeros((10, 10, 3))
    prob[..., 0] = 1
    prob[1:3, 1:3] = [0, 1, 0]
    prob[6:9, 6:9] = [0, 1, 0]
    prob[5, 0] = [0, 0.2, 0.8]
    assert count_instances(prob) == {1: 2, 2: 1}
    assert count_instances(prob, min_area=2) == {1: 2, 2: 0}
    with pytest.raises(ValueError):
        count_instances(prob, threshold=1.0)
