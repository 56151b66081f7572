import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradosr.classifier import (
    BackboneSpec,
    ClassifierCheckpoint,
    ClassifierHyper,
    build_model,
    logits,
    parameter_sets,
    predict,
    train_classifier,
)
from gradosr.data import LabeledDataset, synthetic_blobs

SMALL_CNN_P = 8  # conv1, conv2, fc1, fc2; weight + bias each


@pytest.fixture(scope="module")
def blobs():
    return synthetic_blobs(classes=10, per_class=60, seed=0, image_size=16)


@pytest.fixture(scope="module")
def trained(blobs):
    spec = BackboneSpec("small_cnn", blobs.image_shape, 10, init_seed=1)
    return train_classifier(blobs, spec, ClassifierHyper(epochs=5, seed=1))


def test_blob_train_accuracy(trained, blobs):
    assert trained.training_meta["train_accuracy"] >= 0.95
    pred = predict(trained, blobs.images).argmax(1)
    assert (pred == blobs.labels).mean() >= 0.95


def test_zero_epochs_is_init_and_chance(blobs):
    spec = BackboneSpec("small_cnn", blobs.image_shape, 10, init_seed=4)
    ckpt = train_classifier(blobs, spec, ClassifierHyper(epochs=0))
    init = ClassifierCheckpoint.from_model(spec, build_model(spec))
    assert ckpt.fingerprint() == init.fingerprint()
    acc = (predict(ckpt, blobs.images).argmax(1) == blobs.labels).mean()
    assert abs(acc - 0.1) <= 0.1


def test_labels_outside_num_classes(blobs):
    spec = BackboneSpec("mlp", blobs.image_shape, 6)
    with pytest.raises(ValueError):
        train_classifier(blobs, spec, ClassifierHyper(epochs=1))


def test_unregistered_architecture():
    with pytest.raises(ValueError):
        BackboneSpec("vgg", (8, 8, 3), 4)


@given(seed=st.integers(0, 10_000), k=st.integers(1, 9))
@settings(max_examples=25, deadline=None)
def test_predict_rows_sum_to_one(seed, k):
    spec = BackboneSpec("mlp", (4, 4, 1), 5, init_seed=seed, hidden=(8,))
    ckpt = ClassifierCheckpoint.from_model(spec, build_model(spec))
    x = np.random.default_rng(seed).normal(size=(k, 4, 4, 1)).astype(np.float32)
    p = predict(ckpt, x)
    assert p.shape == (k, 5)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-5)
    # row order follows input order
    np.testing.assert_allclose(predict(ckpt, x[::-1]), p[::-1], atol=1e-12)


def test_mlp_parameter_count():
    spec = BackboneSpec("mlp", (8, 1, 1), 4, hidden=(16,))
    sets = parameter_sets(ClassifierCheckpoint.from_model(spec, build_model(spec)))
    assert len(sets) == 4
    assert [s for _, s in sets] == [(16, 8), (16,), (4, 16), (4,)]


def test_small_cnn_parameter_count(trained):
    assert len(parameter_sets(trained)) == SMALL_CNN_P
    assert trained.manifest()["P"] == SMALL_CNN_P


def test_save_load_roundtrip(trained, blobs, tmp_path):
    trained.save(tmp_path / "c")
    back = ClassifierCheckpoint.load(tmp_path / "c")
    assert parameter_sets(back) == parameter_sets(trained)
    assert back.fingerprint() == trained.fingerprint()
    a = logits(trained, blobs.images[:50])
    b = logits(back, blobs.images[:50])
    assert torch.max((a - b).abs()).item() <= 1e-6


def test_load_detects_tampering(trained, tmp_path):
    trained.save(tmp_path / "c")
    blob = torch.load(tmp_path / "c.pt", weights_only=True)
    next(iter(blob["parameters"].values())).add_(1.0)
    torch.save(blob, tmp_path / "c.pt")
    with pytest.raises(ValueError):
        ClassifierCheckpoint.load(tmp_path / "c")


def test_training_is_deterministic(blobs):
    small = blobs.subset(np.arange(0, len(blobs), 4))
    spec = BackboneSpec("mlp", small.image_shape, 10, init_seed=2)
    a = train_classifier(small, spec, ClassifierHyper(epochs=2, seed=3))
    b = train_classifier(small, spec, ClassifierHyper(epochs=2, seed=3))
    assert a.fingerprint() == b.fingerprint()


def test_image_shape_mismatch(trained):
    with pytest.raises(ValueError):
        predict(trained, np.zeros((2, 8, 8, 3), np.float32))


def test_missing_class_rejected():
    ds = LabeledDataset("d", np.zeros((4, 2, 2, 1)), np.array([0, 0, 1, 1]), (0, 1, 2), "train")
    with pytest.raises(ValueError):
        train_classifier(ds, BackboneSpec("mlp", (2, 2, 1), 3), ClassifierHyper(epochs=1))


def test_resnet18_builds():
    pytest.importorskip("torchvision")
    spec = BackboneSpec("resnet18", (8, 8, 3), 4, init_seed=0)
    ckpt = ClassifierCheckpoint.from_model(spec, build_model(spec))
    assert len(parameter_sets(ckpt)) == 62
    assert predict(ckpt, np.zeros((2, 8, 8, 3), np.float32)).shape == (2, 4)
