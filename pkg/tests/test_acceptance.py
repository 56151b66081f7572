"""Acceptance criteria 1-7, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
Criteria 4 and 5 train the full desk-scale pipeline on the shipped configs.
"""

from __future__ import annotations

import io
import json
import sys
import time
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from gradosr.classifier import BackboneSpec, ClassifierCheckpoint, build_model, predict
from gradosr.cli import main as cli_main
from gradosr.config import load_config
from gradosr.data import generate_class_split
from gradosr.evaluation import ScoredSet, auroc, auroc_bruteforce, openset_accuracy
from gradosr.gradients import extract_representation, finite_difference_oracle, make_confounding_label
from gradosr.pipeline import Experiment, open_set_predict, route

ROOT = Path(__file__).resolve().parents[1]
ID_CONFIG = ROOT / "configs" / "desk_identification.yaml"
CLS_CONFIG = ROOT / "configs" / "desk_classification.yaml"


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def run_all(config: Path, run_dir: Path) -> float:
    start = time.perf_counter()
    with redirect_stdout(io.StringIO()):
        code = cli_main(["run-all", "--config", str(config), "--run-dir", str(run_dir)])
    assert code == 0, f"run-all exited with {code}"
    return time.perf_counter() - start


@pytest.fixture(scope="module")
def id_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("acceptance") / "identification"
    seconds = run_all(ID_CONFIG, run_dir)
    return run_dir, seconds, json.loads((run_dir / "reports" / "report.json").read_text())


def test_criterion_1_extractor_matches_finite_differences():
    start = time.perf_counter()
    worst, models, params_max = 0.0, 0, 0
    rng = np.random.default_rng(20240601)
    for trial in range(60):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 3)))
        classes = int(rng.integers(2, 6))
        hidden = tuple(int(h) for h in rng.integers(2, 9, size=rng.integers(0, 3)))
        spec = BackboneSpec("mlp", shape, classes, init_seed=trial, hidden=hidden, activation=("tanh", "relu")[trial % 2])
        ckpt = ClassifierCheckpoint.from_model(spec, build_model(spec))
        n_params = sum(t.numel() for t in ckpt.parameters.values())
        assert n_params <= 500
        params_max = max(params_max, n_params)
        ones = [None, 0] + list(range(2, classes + 1))
        label = make_confounding_label(classes, ones[trial % len(ones)])
        x = rng.normal(size=shape)
        analytic = extract_representation(ckpt, x, label, dtype=torch.float64).features
        oracle = finite_difference_oracle(ckpt, x, label, epsilon=1e-4).features
        keep = np.maximum(analytic, oracle) > 1e-12
        if keep.any():
            worst = max(worst, float((np.abs(analytic - oracle)[keep] / oracle[keep]).max()))
        models += 1
    seconds = time.perf_counter() - start
    verdict(1, models >= 50 and worst < 1e-4 and seconds < 120,
            f"{models} models (<= {params_max} params), max rel err {worst:.2e} (< 1e-4), {seconds:.1f}s (< 120s)")


def test_criterion_2_auroc_exact():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    mismatches = 0
    for i in range(100):
        k = int(rng.integers(2, 201))
        truth = rng.integers(0, 2, size=k)
        truth[:2] = (1, 0)
        scores = rng.integers(0, 1 + int(rng.integers(1, 50)), size=k) / 7.0 if i % 2 else rng.random(k)
        s = ScoredSet(scores, truth)
        mismatches += auroc(s) != auroc_bruteforce(s)
    tied = auroc(ScoredSet(np.full(50, 0.4), np.r_[np.ones(25), np.zeros(25)]))
    separated = auroc(ScoredSet(np.r_[np.ones(30), np.zeros(20)], np.r_[np.ones(30), np.zeros(20)]))
    seconds = time.perf_counter() - start
    verdict(2, mismatches == 0 and tied == 0.5 and separated == 1.0 and seconds < 30,
            f"{mismatches} mismatches in 100 instances, tied={tied}, separated={separated}, {seconds:.2f}s (< 30s)")


def test_criterion_3_routing():
    grid = np.round(np.linspace(0.0, 1.0, 101), 12)
    wrong = 0
    for tau in grid[1:-1]:
        for s in np.r_[grid, tau, np.nextafter(tau, 0), np.nextafter(tau, 1)]:
            want = 2 if s >= tau else 5
            wrong += route(2, s, tau, 5) != want
    spec = BackboneSpec("mlp", (4, 4, 3), 5, init_seed=0, hidden=(8,))
    ckpt = ClassifierCheckpoint.from_model(spec, build_model(spec))
    rng = np.random.default_rng(0)
    images = rng.random((200, 4, 4, 3)).astype(np.float32)
    truth = np.r_[rng.integers(0, 5, 100), np.full(100, 5)]
    closed = predict(ckpt, images).argmax(1)
    known = open_set_predict(ckpt, lambda x: np.ones(len(x)), 0.95, images)
    unknown = open_set_predict(ckpt, lambda x: np.zeros(len(x)), 0.95, images)
    closed_acc = float((closed == truth).mean())
    ok_known = openset_accuracy(known, truth) == closed_acc and [p.final_class for p in known] == closed.tolist()
    acc_unknown = openset_accuracy(unknown, truth)
    verdict(3, wrong == 0 and ok_known and acc_unknown == 0.5,
            f"{wrong} routing errors on the (score, tau) grid; always-known = closed-set ({ok_known}); always-unknown acc {acc_unknown}")


def test_criterion_4_desk_identification(id_run):
    _, seconds, report = id_run
    agg = report["aggregate"]
    grad, soft = agg["auroc"]["mean"], agg["softmax_auroc"]["mean"]
    n = agg["auroc"]["count"]
    verdict(4, n == 5 and grad >= 0.75 and grad > soft and seconds < 600,
            f"gradient AUROC {grad:.3f} ± {agg['auroc']['std']:.3f} (>= 0.75), softmax {soft:.3f} (must be < gradient), {n} seeds, {seconds:.0f}s")


def test_criterion_5_desk_classification(tmp_path):
    seconds = run_all(CLS_CONFIG, tmp_path / "classification")
    report = json.loads((tmp_path / "classification" / "reports" / "report.json").read_text())
    agg = report["aggregate"]
    acc, base = agg["openset_accuracy"]["mean"], agg["always_known_accuracy"]["mean"]
    tau = {r["tau"] for r in report["per_seed"]}
    ratio = {(r["known_count"], r["unknown_count"]) for r in report["per_seed"]}
    balanced = all(k == u for k, u in ratio)
    verdict(5, acc >= base + 0.05 and tau == {0.95} and balanced and seconds < 600,
            f"N+1 accuracy {acc:.3f} vs always-known {base:.3f} + 0.05, tau {sorted(tau)}, 1:1 testbed {balanced}, {seconds:.0f}s")


def test_criterion_6_protocol_fidelity(id_run):
    run_dir, _, _ = id_run
    cfg = load_config(ID_CONFIG)
    exp = Experiment(cfg, run_dir)
    missing, role_problems = [], []
    for seed in cfg.seeds:
        missing += [exp.dirs.rel(p) for p in exp.dirs.seed_artifacts(seed) if not p.exists()]
        train = exp.load_features(seed, "train")
        if set(train.role_labels.tolist()) != {0, 1}:
            role_problems.append(seed)
    bad_splits = 0
    ids = list(range(10))
    for seed in range(1000):
        s = generate_class_split(ids, 6, 4, seed)
        ok = (
            s.known_classes | s.unknown_classes == set(ids)
            and not s.known_classes & s.unknown_classes
            and s.inner_known | s.inner_unknown == s.known_classes
            and not s.inner_known & s.inner_unknown
            and (len(s.known_classes), len(s.inner_known)) == (6, 4)
        )
        bad_splits += not ok
    verdict(6, not missing and not role_problems and bad_splits == 0,
            f"missing artifacts {missing or 'none'}, single-role tables {role_problems or 'none'}, split violations {bad_splits}/1000")


def test_criterion_7_determinism(id_run, tmp_path):
    first, _, _ = id_run
    second = tmp_path / "again"
    run_all(ID_CONFIG, second)
    files = sorted(
        str(p.relative_to(first))
        for sub in ("splits", "features", "reports")
        for p in (first / sub).rglob("*")
        if p.is_file() and p.suffix in (".json", ".csv", ".txt")
    )
    differ = [f for f in files if (first / f).read_bytes() != (second / f).read_bytes()]
    verdict(7, bool(files) and not differ, f"{len(files)} manifest/feature/report files compared, differing: {differ or 'none'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
