import warnings

import numpy as np
import pytest

import lazyseg.data_model as dm
from lazyseg.baselines import (
    BaselineConfigError,
    BaselineSpec,
    EmptyDetectionWarning,
    RegionGrowConfig,
    baseline_samples,
    generate_pseudo_labels,
)
from lazyseg.data_model import DEFAULT_CLASS_SETS, ImageTensor, onehot_encode
from lazyseg.synthetic import LabelPolicy, build_corpus, generate_scene, scene_specs, synthesize_detection_label

DET = DEFAULT_CLASS_SETS["detection"]


def _disk_image(size=40, r=10, inside=0.8, outside=0.2):
    yy, xx = np.mgrid[:size, :size]
    obj = (yy - size // 2) ** 2 + (xx - size // 2) ** 2 <= r * r
    return ImageTensor(np.where(obj, inside, outside).astype(np.float32)), obj


def test_pseudo_label_contains_detection():
    for seed in range(3):
        img, inst = generate_scene(scene_specs(1, seed=seed)[0])
        det = synthesize_detection_label(inst, 3.0)
        pl = generate_pseudo_labels(img, det)
        d, p = det.labels, pl.labels
        assert np.array_equal(p[d > 0], d[d > 0])


def test_growth_stops_at_a_high_contrast_band():
    img, obj = _disk_image()
    seed = np.zeros(obj.shape, int)
    seed[18:23, 18:23] = 1
    pl = generate_pseudo_labels(img, onehot_encode(seed, DET, "detection"),
                                RegionGrowConfig(max_radius_ratio=10.0)).labels
    grown = pl == 1
    # fills the object interior, does not leak beyond the edge band
    yy, xx = np.mgrid[:40, :40]
    r2 = (yy - 20) ** 2 + (xx - 20) ** 2
    assert grown[r2 <= 7 ** 2].all()
    assert grown[obj].mean() > 0.85
    ring = r2 > 14 ** 2
    assert not grown[ring].any()


def test_radius_cap_limits_growth_without_edges():
    img = ImageTensor(np.full((40, 40), 0.5, np.float32))
    seed = np.zeros((40, 40), int)
    seed[19:21, 19:21] = 2
    pl = generate_pseudo_labels(img, onehot_encode(seed, DET, "detection"), RegionGrowConfig(max_radius_ratio=3.0))
    rounds = int((3.0 - 1.0) * np.sqrt(4 / np.pi))
    grown = np.argwhere(pl.labels == 2)
    # 4-neighbour growth for k rounds reaches at most k city-block steps from the seed
    dist = np.minimum(np.abs(grown - [19, 19]), np.abs(grown - [20, 20])).sum(1)
    assert dist.max() <= rounds + 1
    assert (pl.labels == 2).sum() > 4


def test_empty_detection_warns_and_returns_background():
    img = ImageTensor(np.zeros((8, 8), np.float32))
    with pytest.warns(EmptyDetectionWarning):
        pl = generate_pseudo_labels(img, onehot_encode(np.zeros((8, 8), int), DET, "detection"))
    assert (pl.labels == 0).all()


def test_spec_validation():
    with pytest.raises(BaselineConfigError):
        BaselineSpec("nonsense")
    with pytest.raises(BaselineConfigError):
        BaselineSpec("pseudo_label", pl_generator="magic")
    BaselineSpec("pseudo_label", pl_generator="external:/tmp")


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return build_corpus(scene_specs(8, seed=1, height=32, width=32, instances_per_class=((1, 2), (1, 2)),
                                    radius_range=(3, 5)),
                        LabelPolicy(n_detection=4, n_separation=2, n_segmentation=2, n_test=2, seed=3), root)


def test_sl_without_strong_labels_is_rejected(tmp_path):
    m = build_corpus(scene_specs(3, height=32, width=32, instances_per_class=((1, 1), (1, 1)), radius_range=(3, 4)),
                     LabelPolicy(2, 0, 0), tmp_path)
    with pytest.raises(BaselineConfigError, match=r"\|I_3\| = 0"):
        baseline_samples(BaselineSpec("single_task_SL"), m)


def _audit(monkeypatch):
    reads = []
    real = dm.read_label

    def spy(path, class_set, task):
        reads.append((str(path), task))
        return real(path, class_set, task)

    monkeypatch.setattr(dm, "read_label", spy)
    return reads


def test_sl_reads_only_strong_labels(corpus, monkeypatch):
    reads = _audit(monkeypatch)
    samples = baseline_samples(BaselineSpec("single_task_SL"), corpus)
    assert len(samples) == 2
    assert {t for _, t in reads} == {"segmentation"}
    strong = {str(corpus.resolve(e.labels["segmentation"])) for e in corpus.split("train") if e.membership[2]}
    assert {p for p, _ in reads} == strong


def test_wl_and_pl_never_read_unneeded_strong_labels(corpus, monkeypatch):
    reads = _audit(monkeypatch)
    wl = baseline_samples(BaselineSpec("single_task_WL"), corpus)
    assert len(wl) == 4 and {t for _, t in reads} == {"detection"}
    assert all(ls.membership == (False, False, True) for _, ls in wl)
    reads.clear()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        pl = baseline_samples(BaselineSpec("pseudo_label"), corpus)
    strong_ids = {e.id for e in corpus.split("train") if e.membership[2]}
    seg_reads = [p for p, t in reads if t == "segmentation"]
    assert len(seg_reads) == len(strong_ids)
    assert len(pl) == len([e for e in corpus.split("train") if e.membership[0] or e.membership[2]])


def test_external_pseudo_labels(corpus, tmp_path):
    spec = BaselineSpec("pseudo_label", pl_generator=f"external:{tmp_path}")
    with pytest.raises(BaselineConfigError, match="missing"):
        baseline_samples(spec, corpus)
    for e in corpus.split("train"):
        dm.write_label(onehot_encode(np.ones((32, 32), int), DEFAULT_CLASS_SETS["segmentation"], "segmentation"),
                       tmp_path / f"{e.id}.png")
    samples = baseline_samples(spec, corpus)
    assert samples
