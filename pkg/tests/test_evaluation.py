import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradosr.classifier import BackboneSpec, ClassifierCheckpoint, build_model
from gradosr.evaluation import (
    ScoredSet,
    aggregate,
    auroc,
    auroc_bruteforce,
    emit_report,
    openset_accuracy,
    per_class_accuracy,
    plot_gradient_distributions,
    sentinel_confusion,
    separation_order,
    softmax_baseline_score,
)
from gradosr.gradients import FeatureTable
from gradosr.pipeline import ExperimentResult, OpenSetPrediction


def test_auroc_edge_cases():
    assert auroc(ScoredSet([1.0] * 5 + [0.0] * 5, [1] * 5 + [0] * 5)) == 1.0
    assert auroc(ScoredSet([0.3] * 8, [1, 0] * 4)) == 0.5
    assert auroc(ScoredSet([0.0, 1.0], [1, 0])) == 0.0
    with pytest.raises(ValueError):
        auroc(ScoredSet([0.1, 0.2], [1, 1]))


@given(
    scores=st.lists(st.integers(0, 6), min_size=2, max_size=60),
    data=st.data(),
)
@settings(max_examples=200)
def test_auroc_equals_bruteforce(scores, data):
    truth = data.draw(st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores)))
    truth[0], truth[1] = 1, 0
    s = ScoredSet(np.asarray(scores) / 7.0, truth)
    assert auroc(s) == auroc_bruteforce(s)


def test_auroc_order_invariant():
    rng = np.random.default_rng(0)
    s, t = rng.random(50).round(1), rng.integers(0, 2, 50)
    perm = rng.permutation(50)
    assert auroc(ScoredSet(s, t)) == auroc(ScoredSet(s[perm], t[perm]))


def test_openset_accuracy_counting():
    truth = np.arange(10) % 3
    pred = truth.copy()
    pred[[1, 4, 7]] = 9
    assert openset_accuracy(pred, truth) == 0.7
    objs = [OpenSetPrediction(int(p), int(p), 1.0, 0.5) for p in truth]
    assert openset_accuracy(objs, truth) == 1.0
    with pytest.raises(ValueError):
        openset_accuracy(pred[:3], truth)


def test_always_unknown_on_balanced_testbed():
    truth = np.r_[np.arange(50) % 6, np.full(50, 6)]
    assert openset_accuracy(np.full(100, 6), truth) == 0.5


def test_per_class_and_sentinel_row():
    truth = np.array([0, 0, 1, 2, 2, 2])
    final = np.array([0, 2, 1, 2, 0, 2])
    assert per_class_accuracy(final, truth, 2) == {"0": 0.5, "1": 1.0, "unknown": 2 / 3}
    assert sentinel_confusion(final, truth, 2) == {"0": 1, "unknown": 2}


def _ckpt_with_bias(bias):
    spec = BackboneSpec("mlp", (1, 1, 1), len(bias), hidden=(), bias=True)
    model = build_model(spec)
    with torch.no_grad():
        model.net[1].weight.zero_()
        model.net[1].bias.copy_(torch.tensor(bias))
    return ClassifierCheckpoint.from_model(spec, model)


def test_softmax_baseline_uniform_and_saturated():
    x = np.zeros((3, 1, 1, 1))
    np.testing.assert_allclose(softmax_baseline_score(_ckpt_with_bias([0.0] * 4), x), 0.25)
    assert softmax_baseline_score(_ckpt_with_bias([60.0, 0.0, 0.0]), x).min() > 1 - 1e-12


@pytest.fixture
def separable_table():
    rng = np.random.default_rng(0)
    known = np.exp(rng.normal(-3, 0.3, size=(100, 4)))
    unknown = np.exp(rng.normal(-3, 0.3, size=(100, 4)))
    unknown[:, 2] *= 50  # only dim 2 separates
    unknown[:, 0] *= 5
    feats = np.r_[known, unknown]
    roles = np.r_[np.ones(100, int), np.zeros(100, int)]
    return FeatureTable(np.arange(200), feats, roles, ("a.weight", "a.bias", "b.weight", "b.bias"), {})


def test_plot_file_count(separable_table, tmp_path):
    files = plot_gradient_distributions(separable_table, tmp_path, dims=[0, 1])
    assert len(files) == 2 and all(f.exists() and f.stat().st_size > 0 for f in files)


def test_plot_bad_dims(separable_table, tmp_path):
    with pytest.raises(IndexError):
        plot_gradient_distributions(separable_table, tmp_path, dims=[4])


def test_plot_without_roles(tmp_path):
    t = FeatureTable(np.arange(3), np.ones((3, 2)), None, ("a", "b"), {})
    with pytest.raises(ValueError):
        plot_gradient_distributions(t, tmp_path)


def test_auto_dims_pick_separated_and_known_left(separable_table, tmp_path):
    order = separation_order(separable_table.features, separable_table.role_labels)
    assert order[:2].tolist() == [2, 0]
    files = plot_gradient_distributions(separable_table, tmp_path)
    assert [f.name[:5] for f in files] == ["dim02", "dim00"]
    k = separable_table.select(separable_table.role_labels == 1).features
    u = separable_table.select(separable_table.role_labels == 0).features
    for d in order[:2]:
        assert np.log10(k[:, d]).mean() < np.log10(u[:, d]).mean()


def _result(per_seed, mode="identification"):
    return ExperimentResult(
        mode=mode,
        config={"mode": mode, "data": {"outlier_source": "uniform_noise"}},
        per_seed=per_seed,
        aggregate=aggregate(per_seed, ["auroc", "softmax_auroc", "openset_accuracy"]),
        flags={"tau": 0.5},
        provenance={"splits/seed0.json": "00"},
    )


def test_report_deterministic_and_structured(tmp_path):
    per_seed = [{"seed": s, "status": "ok", "auroc": 0.6 + 0.01 * s, "softmax_auroc": 0.7} for s in range(5)]
    r = _result(per_seed)
    a = emit_report(r, tmp_path / "a.json").read_bytes()
    b = emit_report(r, tmp_path / "b.json").read_bytes()
    assert a == b
    body = json.loads(a)
    assert [s["auroc"] for s in body["per_seed"]] == pytest.approx([0.6, 0.61, 0.62, 0.63, 0.64])
    assert body["aggregate"]["auroc"]["mean"] == pytest.approx(0.62)
    assert body["aggregate"]["auroc"]["std"] == pytest.approx(np.std([0.6, 0.61, 0.62, 0.63, 0.64]))
    assert body["partial"] is False
    text = emit_report(r, tmp_path / "a.txt", "text").read_text()
    assert "Softmax" in text and "Gradient" in text


def test_report_partial_marker(tmp_path):
    r = _result([{"seed": 0, "status": "ok", "auroc": 0.6}, {"seed": 1, "status": "failed", "error": "boom"}])
    assert json.loads(emit_report(r, tmp_path / "r.json").read_text())["partial"] is True
    assert "[PARTIAL]" in emit_report(r, tmp_path / "r.txt", "text").read_text()
    assert r.aggregate["auroc"]["count"] == 1


def test_report_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        emit_report(_result([]), tmp_path / "r.x", "xml")
