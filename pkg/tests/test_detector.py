import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradosr.detector import (
    DetectorCheckpoint,
    DetectorError,
    DetectorHyper,
    decide,
    fit_standardizer,
    score,
    score_features,
    train_detector,
)
from gradosr.evaluation import ScoredSet, auroc
from gradosr.gradients import FeatureTable, GradientRepresentation


def table(features, role=None):
    n, p = features.shape
    roles = None if role is None else np.full(n, role)
    return FeatureTable(np.arange(n), features, roles, tuple(f"w{i}" for i in range(p)), {})


def lognormal(rng, n, p, mu):
    return np.exp(rng.normal(mu, 0.5, size=(n, p)))


@pytest.fixture(scope="module")
def separable():
    rng = np.random.default_rng(0)
    return table(lognormal(rng, 300, 6, -2.0), 1), table(lognormal(rng, 300, 6, 0.0), 0)


def test_standardizer_constant_column():
    x = np.c_[np.full(10, 3.0), np.arange(10.0)]
    std = fit_standardizer(x)
    assert std.scale[0] == 1.0
    np.testing.assert_allclose(std.apply(x)[:, 0], 0.0, atol=1e-12)


def test_standardizer_zscore_on_fit_data():
    x = np.random.default_rng(1).gamma(2.0, size=(500, 4))
    for log in (True, False):
        z = fit_standardizer(x, log).apply(x)
        np.testing.assert_allclose(z.mean(0), 0.0, atol=1e-10)
        np.testing.assert_allclose(z.var(0), 1.0, atol=1e-10)


def test_standardizer_disjoint_table_same_distribution():
    rng = np.random.default_rng(2)
    a, b = lognormal(rng, 400, 5, -1.0), lognormal(rng, 400, 5, -1.0)
    z = fit_standardizer(a).apply(b)
    assert np.all(np.abs(z.mean(0)) <= 0.2)


def test_separable_fixture(separable):
    k, u = separable
    det = train_detector(k, u, DetectorHyper(epochs=30, seed=0))
    assert det.training_meta["val_accuracy"] >= 0.95
    assert det.input_width == 6 and det.hidden == 64
    s = score_features(det, np.r_[k.features, u.features])
    assert auroc(ScoredSet(s, np.r_[np.ones(300), np.zeros(300)])) > 0.98


def test_detector_deterministic(separable):
    k, u = separable
    a = train_detector(k, u, DetectorHyper(epochs=5, seed=4))
    b = train_detector(k, u, DetectorHyper(epochs=5, seed=4))
    assert a.training_meta["val_accuracy"] == b.training_meta["val_accuracy"]
    assert a.fingerprint() == b.fingerprint()


def test_empty_known_rows(separable):
    k, u = separable
    with pytest.raises(DetectorError):
        train_detector(k.select(np.zeros(len(k), bool)), u)


def test_p_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(DetectorError):
        train_detector(table(rng.random((5, 3)), 1), table(rng.random((5, 4)), 0))


def test_score_range_and_purity(separable):
    k, u = separable
    det = train_detector(k, u, DetectorHyper(epochs=3, seed=0))
    rep = GradientRepresentation(u.features[0])
    s = score(det, rep)
    assert 0.0 <= s <= 1.0
    assert score(det, rep) == s
    with pytest.raises(DetectorError):
        score(det, np.ones(5))


def test_save_load(separable, tmp_path):
    k, u = separable
    det = train_detector(k, u, DetectorHyper(epochs=3, seed=0), threshold=0.9, classifier_hash="abc")
    det.save(tmp_path / "d")
    back = DetectorCheckpoint.load(tmp_path / "d")
    assert back.fingerprint() == det.fingerprint()
    assert back.threshold == 0.9 and back.classifier_hash == "abc"
    np.testing.assert_array_equal(score_features(back, k.features), score_features(det, k.features))


@pytest.mark.parametrize("s, tau, want", [(0.99, 0.95, "known"), (0.95, 0.95, "known"), (0.5, 0.95, "unknown")])
def test_decide_examples(s, tau, want):
    assert decide(s, tau) == want


@given(s1=st.floats(0, 1), s2=st.floats(0, 1), tau=st.floats(0.001, 0.999))
def test_decide_monotone_in_score(s1, s2, tau):
    lo, hi = sorted((s1, s2))
    if decide(lo, tau) == "known":
        assert decide(hi, tau) == "known"


@given(tau=st.floats(0.01, 0.99))
def test_decide_boundary_is_known(tau):
    assert decide(tau, tau) == "known"


def test_decide_rejects_bad_threshold():
    for tau in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            decide(0.5, tau)


@given(
    seed=st.integers(0, 1000),
    scale=st.floats(0.1, 10),
    shift=st.floats(-5, 5),
)
@settings(max_examples=50)
def test_auroc_invariant_to_monotone_rescaling(seed, scale, shift):
    rng = np.random.default_rng(seed)
    s = rng.random(40)
    t = rng.integers(0, 2, 40)
    t[:2] = (0, 1)
    a = auroc(ScoredSet(s, t))
    assert auroc(ScoredSet(s * scale + shift, t)) == pytest.approx(a, abs=1e-12)
    # swapping the roles of known and unknown mirrors the area
    assert auroc(ScoredSet(-s, t)) == pytest.approx(1 - a, abs=1e-12)
