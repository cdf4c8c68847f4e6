import json

import numpy as np
import pytest
import torch

from lazyseg.data_model import DEFAULT_CLASS_SETS, ImageTensor, LazyLabelSet, onehot_encode
from lazyseg.network import ArchitectureConfig, build_model, single_task_variant
from lazyseg.objective import LossConfig, collate_labels, multitask_loss
from lazyseg.trainer import (
    AugmentationError,
    CheckpointError,
    GeometricTransform,
    TrainConfig,
    augment,
    load_checkpoint,
    random_transform,
    read_checkpoint_metadata,
    save_checkpoint,
    train,
)

CS = DEFAULT_CLASS_SETS


def _sample(rng, size=24, tasks=("detection", "separation", "segmentation")):
    img = ImageTensor(rng.random((size, size)).astype(np.float32), "s")
    masks = {t: onehot_encode(rng.integers(0, len(CS[t]), (size, size)), CS[t], t) for t in tasks}
    return img, LazyLabelSet(**masks)


def test_double_flip_is_identity(rng):
    img = rng.random((9, 9, 1))
    t = GeometricTransform(center=(4, 4), patch=9, flip_y=True, flip_x=True)
    once = t.apply_image(t.apply_image(img))
    np.testing.assert_allclose(once, img.astype(np.float32), atol=1e-6)
    lab = rng.integers(0, 3, (9, 9))
    assert np.array_equal(t.apply_labels(t.apply_labels(lab)), lab)


def test_identity_transform_crops_exactly(rng):
    img = rng.random((20, 20, 1)).astype(np.float32)
    t = GeometricTransform(center=(7.5, 9.5), patch=8)
    np.testing.assert_allclose(t.apply_image(img), img[4:12, 6:14], atol=1e-6)


def test_marker_lands_where_the_forward_map_predicts():
    # a single bright pixel must reappear at the analytically mapped position
    img = np.zeros((41, 41, 1))
    img[15, 24] = 1.0
    lab = np.zeros((41, 41), int)
    lab[15, 24] = 2
    for angle, flip_y in [(90.0, False), (180.0, True), (270.0, False)]:
        t = GeometricTransform(center=(20, 20), patch=41, angle=angle, flip_y=flip_y)
        q = t.to_patch((15, 24))
        qi = tuple(np.rint(q).astype(int))
        np.testing.assert_allclose(q, np.rint(q), atol=1e-9)
        assert t.apply_image(img)[qi + (0,)] == pytest.approx(1.0)
        out = t.apply_labels(lab)
        assert out[qi] == 2 and (out == 2).sum() == 1


def test_augment_keeps_image_and_labels_aligned(rng):
    cfg = TrainConfig(patch_size=16)
    img = np.zeros((32, 32), np.float32)
    img[8:20, 10:22] = 1.0
    seg = onehot_encode((img > 0).astype(int), CS["segmentation"], "segmentation")
    for seed in range(5):
        out_img, out_lab = augment(ImageTensor(img), LazyLabelSet(segmentation=seg), np.random.default_rng(seed), cfg)
        assert out_img.shape == (16, 16) and out_lab.segmentation.shape == (16, 16)
        fg = out_lab.segmentation.labels > 0
        # away from edges, nearest-neighbour labels agree with the interpolated image
        assert (out_img.pixels[..., 0][fg] > 0.0).all()
        assert (out_img.pixels[..., 0][~fg] < 1.0).all()


def test_augment_rejects_too_small_images(rng):
    cfg = TrainConfig(patch_size=64, scale_range=(0.5, 0.9), max_attempts=5)
    with pytest.raises(AugmentationError, match="smaller than patch"):
        random_transform((32, 32), cfg, rng)


def _model():
    return build_model(ArchitectureConfig(input_size=16, levels=3, base_width=4, num_multitask_blocks=2), 0)


def test_zero_iterations_leave_weights_untouched(rng):
    model = _model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    result = train(model, [_sample(rng)], TrainConfig(iterations=0, patch_size=16))
    assert result.step == 0
    for k, v in result.model.state_dict().items():
        assert torch.equal(v, before[k])


def test_training_reduces_loss_and_logs(tmp_path, rng):
    samples = [_sample(rng) for _ in range(2)]
    result = train(_model(), samples, TrainConfig(iterations=6, batch_size=2, patch_size=16, lr=1e-2, log_every=0),
                   out_dir=tmp_path)
    lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 6
    rec = json.loads(lines[0])
    assert {"step", "loss", "detection", "separation", "segmentation"} <= set(rec)


def test_resume_reproduces_uninterrupted_run(tmp_path, rng):
    samples = [_sample(rng) for _ in range(3)]
    cfg = TrainConfig(iterations=6, batch_size=2, patch_size=16, checkpoint_every=3, log_every=0)
    full = train(_model(), samples, cfg, out_dir=tmp_path / "a")
    resumed = train(_model(), samples, cfg, out_dir=tmp_path / "b",
                    resume_from=tmp_path / "a" / "checkpoints" / "step_000003")
    assert resumed.step == 6
    for (k, v), w in zip(full.model.state_dict().items(), resumed.model.state_dict().values()):
        assert torch.equal(v, w), k


def test_checkpoint_round_trip(tmp_path):
    model = _model()
    save_checkpoint(model, tmp_path / "ck", {"note": "x"}, step=7)
    loaded, meta = load_checkpoint(tmp_path / "ck")
    assert meta["step"] == 7 and meta["note"] == "x" and meta["kind"] == "multitask"
    assert meta["architecture"] == model.config.to_dict()
    for v, w in zip(model.state_dict().values(), loaded.state_dict().values()):
        assert torch.equal(v, w)
    single = single_task_variant(model.config, 1)
    save_checkpoint(single, tmp_path / "st")
    assert type(load_checkpoint(tmp_path / "st")[0]) is type(single)


def test_checkpoint_version_mismatch(tmp_path):
    save_checkpoint(_model(), tmp_path / "ck")
    meta = json.loads((tmp_path / "ck" / "metadata.json").read_text())
    meta["format_version"] = 999
    (tmp_path / "ck" / "metadata.json").write_text(json.dumps(meta))
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint_metadata(tmp_path / "ck")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


def test_detection_only_batch_gives_zero_gradient_to_separation_and_residual(rng):
    model = _model().train()
    img, labels = _sample(rng, size=16, tasks=("detection",))
    x = torch.from_numpy(img.pixels.copy()).permute(2, 0, 1)[None]
    from lazyseg.network import TaskProbabilityMaps

    preds = TaskProbabilityMaps.from_logits(model(x))
    loss, _ = multitask_loss(preds, collate_labels([labels], (3, 2, 3)))
    loss.backward()
    groups = model.parameter_groups()
    params = dict(model.named_parameters())
    for name in groups["separation"] + groups["residual"]:
        g = params[name].grad
        assert g is None or torch.count_nonzero(g) == 0, name
    assert any(params[n].grad is not None and torch.count_nonzero(params[n].grad) for n in groups["shared"])


def test_single_task_training_uses_only_segmentation(rng):
    model = single_task_variant(ArchitectureConfig(input_size=16, levels=3, base_width=4, num_multitask_blocks=2))
    samples = [_sample(rng, tasks=("detection",)), _sample(rng, tasks=("segmentation",))]
    result = train(model, samples, TrainConfig(iterations=2, batch_size=2, patch_size=16, log_every=0))
    assert all(r["detection"] == 0 and r["separation"] == 0 for r in result.log)


def test_patch_size_must_fit_the_network(rng):
    with pytest.raises(ValueError, match="divisible"):
        train(_model(), [_sample(rng)], TrainConfig(iterations=1, patch_size=18))
