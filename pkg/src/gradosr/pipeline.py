"""End-to-end open-set recognition: routing plus the two-stage training protocol.

Per seed, the identification protocol is

1. draw K/U and the inner K_K/K_U split of K;
2. train an inner classifier on K_K and collect gradient features for K_K and K_U
   training samples (the detector's training set);
3. train the full classifier on all of K;
4. extract test features from the full classifier on K_test and U_test;
5. train the detector and score the test features.

Classification mode is the same with U drawn from an outlier dataset and the
test bed balanced to a fixed known:unknown ratio.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Sequence, Union

import numpy as np

from .classifier import BackboneSpec, ClassifierCheckpoint, parameter_sets, predict
from .config import ExperimentConfig
from .data import (
    ClassSplit,
    LabeledDataset,
    OpenSetTestBed,
    generate_class_split,
    load_dataset,
    make_openset_testbed,
    partition_dataset,
    split_manifest,
    write_json,
)
from .classifier import train_classifier
from .detector import DetectorCheckpoint, score_features, train_detector
from .evaluation import (
    ScoredSet,
    aggregate,
    auroc,
    emit_report,
    openset_accuracy,
    per_class_accuracy,
    plot_gradient_distributions,
    sentinel_confusion,
    softmax_baseline_score,
)
from .gradients import FeatureTable, extract_batch, gradient_features, make_confounding_label

log = logging.getLogger(__name__)

# Stage seed = experiment seed + offset.
SEED_OFFSETS = {"split": 0, "inner_classifier": 101, "full_classifier": 202, "detector": 303, "testbed": 404}

Scorer = Callable[[np.ndarray], np.ndarray]


class ProvenanceError(RuntimeError):
    pass


class MissingArtifactError(RuntimeError):
    pass


class ConfigMismatchError(RuntimeError):
    pass


@dataclass(frozen=True)
class OpenSetPrediction:
    final_class: int
    closed_set_class: int
    known_score: float
    threshold_used: float


def route(closed_set_class: int, known_score: float, tau: float, num_classes: int) -> int:
    """Keep the closed-set class when the detector accepts, else the sentinel N."""
    return int(closed_set_class) if known_score >= tau else int(num_classes)


def open_set_predict(
    classifier_ckpt: ClassifierCheckpoint,
    detector: Union[DetectorCheckpoint, Scorer],
    tau: float,
    images: np.ndarray,
    ones_count: int | None = None,
    gradient_cfg=None,
) -> list[OpenSetPrediction]:
    """N+1 predictions for ``images``.

    ``detector`` is a trained checkpoint (scored on gradient features of
    ``classifier_ckpt``) or any callable mapping images to known-scores.
    """
    if not 0 < tau < 1:
        raise ValueError(f"threshold {tau} must be in (0, 1)")
    images = np.asarray(images, np.float32)
    probs = predict(classifier_ckpt, images)
    closed = probs.argmax(1)
    if isinstance(detector, DetectorCheckpoint):
        if detector.classifier_hash is not None and detector.classifier_hash != classifier_ckpt.fingerprint():
            raise ProvenanceError("detector was trained for a different classifier checkpoint")
        shapes = dict(parameter_sets(classifier_ckpt))
        if any(n not in shapes for n in detector.feature_names):
            raise ProvenanceError("detector features are not parameter sets of this classifier")
        label = make_confounding_label(classifier_ckpt.num_classes, ones_count)
        feats = gradient_features(classifier_ckpt, images, label, gradient_cfg)
        idx = [list(shapes).index(n) for n in detector.feature_names]
        scores = score_features(detector, feats[:, idx])
    else:
        scores = np.asarray(detector(images), np.float64)
    n = classifier_ckpt.num_classes
    return [
        OpenSetPrediction(route(c, s, tau, n), int(c), float(s), float(tau))
        for c, s in zip(closed, scores)
    ]


def shared_parameter_sets(a: ClassifierCheckpoint, b: ClassifierCheckpoint, policy: str = "exclude") -> list[str]:
    """Parameter sets usable as detector input for both, in ``b``'s order.

    ``exclude`` requires equal name and shape; ``keep`` matches on name, which
    is enough because every set contributes one scalar norm.
    """
    if policy not in ("exclude", "keep"):
        raise ValueError(f"unknown head policy {policy!r}")
    sa = dict(parameter_sets(a))
    return [n for n, s in parameter_sets(b) if n in sa and (policy == "keep" or sa[n] == s)]


# ---------------------------------------------------------------- run layout


class RunDirectory:
    SUBDIRS = ("splits", "classifiers", "features", "detectors", "reports", "plots")

    def __init__(self, root: str | Path, config: ExperimentConfig):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        for sub in self.SUBDIRS:
            (self.root / sub).mkdir(exist_ok=True)
        lock = self.root / "run.lock"
        digest = config.fingerprint()
        if lock.exists():
            recorded = json.loads(lock.read_text())["config_hash"]
            if recorded != digest:
                raise ConfigMismatchError(f"{self.root} was created with a different config ({recorded[:12]} != {digest[:12]})")
        else:
            lock.write_text(json.dumps({"config_hash": digest}) + "\n")

    def split(self, seed: int) -> Path:
        return self.root / "splits" / f"seed{seed}.json"

    def testbed(self, seed: int) -> Path:
        return self.root / "splits" / f"seed{seed}_testbed.json"

    def classifier(self, seed: int, which: str) -> Path:
        return self.root / "classifiers" / f"seed{seed}_{which}"

    def features(self, seed: int, which: str) -> Path:
        return self.root / "features" / f"seed{seed}_{which}.csv"

    def detector(self, seed: int) -> Path:
        return self.root / "detectors" / f"seed{seed}"

    def seed_report(self, seed: int) -> Path:
        return self.root / "reports" / f"seed{seed}.json"

    def plots(self, seed: int) -> Path:
        return self.root / "plots" / f"seed{seed}"

    def seed_artifacts(self, seed: int) -> list[Path]:
        return [
            self.split(seed),
            self.testbed(seed),
            self.classifier(seed, "inner").with_suffix(".pt"),
            self.classifier(seed, "inner").with_suffix(".json"),
            self.classifier(seed, "full").with_suffix(".pt"),
            self.classifier(seed, "full").with_suffix(".json"),
            self.features(seed, "train"),
            self.features(seed, "test"),
            self.detector(seed).with_suffix(".pt"),
            self.detector(seed).with_suffix(".json"),
            self.seed_report(seed),
        ]

    def rel(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()


def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ------------------------------------------------------------------ stages


@dataclass
class ExperimentResult:
    mode: str
    config: dict[str, Any]
    per_seed: list[dict[str, Any]]
    aggregate: dict[str, dict[str, float]] = field(default_factory=dict)
    flags: dict[str, Any] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return any(r.get("status") != "ok" for r in self.per_seed)


class Experiment:
    """Per-seed stages over one run directory; each ``ensure_*`` is idempotent.

    ``load_*`` raise :class:`MissingArtifactError` when an upstream artifact
    has not been produced yet.
    """

    def __init__(self, config: ExperimentConfig, run_dir: str | Path):
        self.config = config
        self.dirs = RunDirectory(run_dir, config)

    # -- data
    def _known_source(self, split_tag: str) -> LabeledDataset:
        d = self.config.data
        if d.source == "synthetic":
            per = d.train_per_class if split_tag == "train" else d.test_per_class
            return load_dataset(
                "synthetic",
                split_tag,
                classes=d.num_classes,
                per_class=per,
                seed=d.data_seed,
                image_size=d.image_size,
                channels=d.channels,
                noise=d.noise,
                mean_grid=d.mean_grid,
                mean_spread=d.mean_spread,
            )
        if d.source == "spots":
            per = d.train_per_class if split_tag == "train" else d.test_per_class
            return load_dataset(
                "spots", split_tag, classes=d.num_classes, per_class=per, seed=d.data_seed,
                image_size=d.image_size, channels=d.channels, noise=d.noise,
            )
        if d.source == "image_folder":
            return load_dataset("image_folder", split_tag, path=str(Path(d.path) / split_tag), image_size=d.image_size)
        return load_dataset(d.source, split_tag, path=d.path)

    @cached_property
    def train_data(self) -> LabeledDataset:
        return self._known_source("train")

    @cached_property
    def test_data(self) -> LabeledDataset:
        return self._known_source("test")

    @cached_property
    def outlier_data(self) -> LabeledDataset:
        d = self.config.data
        h, w, c = self.test_data.image_shape
        if d.outlier_source == "uniform_noise":
            count = d.outlier_count or len(self.test_data)
            return load_dataset("uniform_noise", "test", count=count, image_size=h, channels=c, seed=d.data_seed)
        if d.outlier_source == "synthetic":
            # Blobs from an unrelated mean seed act as a "different dataset".
            per = max(1, (d.outlier_count or len(self.test_data)) // d.num_classes)
            return load_dataset("synthetic", "test", classes=d.num_classes, per_class=per, seed=d.data_seed + 9973, image_size=h, channels=c, noise=d.noise)
        ds = load_dataset(d.outlier_source, "test", path=d.outlier_path, image_size=h)
        if ds.image_shape != (h, w, c):
            raise ValueError(f"outlier resolution {ds.image_shape} differs from known data {(h, w, c)}")
        return ds

    def _seed(self, seed: int, stage: str) -> int:
        return seed + SEED_OFFSETS[stage]

    # -- split
    def build_split(self, seed: int) -> ClassSplit:
        s = self.config.split
        split = generate_class_split(self.train_data.class_ids, s.num_known, s.num_inner_known, self._seed(seed, "split"))
        if self.config.mode == "identification" and not split.unknown_classes:
            raise ValueError("identification mode needs a non-empty unknown class set")
        parts = {r: partition_dataset(self.train_data, split, r) for r in ("closed_train", "detector_train_known", "detector_train_unknown")}
        parts["known_test"] = partition_dataset(self.test_data, split, "known_test")
        if split.unknown_classes:
            parts["unknown_test"] = partition_dataset(self.test_data, split, "unknown_test")
        write_json(self.dirs.split(seed), split_manifest(split, parts))
        return split

    def load_split(self, seed: int) -> ClassSplit:
        path = self.dirs.split(seed)
        if not path.exists():
            raise MissingArtifactError(f"missing split manifest {path}; run `split` first")
        return ClassSplit.from_dict(json.loads(path.read_text()))

    def ensure_split(self, seed: int) -> ClassSplit:
        if self.dirs.split(seed).exists():
            log.info("split seed %d up to date", seed)
            return self.load_split(seed)
        return self.build_split(seed)

    # -- classifiers
    def _train(self, seed: int, which: str) -> ClassifierCheckpoint:
        split = self.load_split(seed)
        role = "detector_train_known" if which == "inner" else "closed_train"
        data = partition_dataset(self.train_data, split, role)
        stage = f"{which}_classifier"
        c = self.config.classifier
        spec = BackboneSpec(
            architecture=c.architecture,
            input_shape=data.image_shape,
            num_classes=len(data.class_ids),
            init_seed=self._seed(seed, stage),
            hidden=tuple(c.hidden),
        )
        ckpt = train_classifier(data, spec, c.hyper(self._seed(seed, stage)))
        ckpt.training_meta["split_hash"] = split.fingerprint()
        ckpt.training_meta["role"] = role
        ckpt.save(self.dirs.classifier(seed, which))
        return ckpt

    def load_classifier(self, seed: int, which: str) -> ClassifierCheckpoint:
        path = self.dirs.classifier(seed, which)
        if not path.with_suffix(".pt").exists():
            raise MissingArtifactError(f"missing {which} classifier checkpoint {path.with_suffix('.pt')}; run `train-classifier` first")
        ckpt = ClassifierCheckpoint.load(path)
        if ckpt.training_meta.get("split_hash") != self.load_split(seed).fingerprint():
            raise ProvenanceError(f"classifier {path} was trained on a different split")
        return ckpt

    def ensure_classifier(self, seed: int, which: str) -> ClassifierCheckpoint:
        if self.dirs.classifier(seed, which).with_suffix(".pt").exists():
            log.info("%s classifier seed %d up to date", which, seed)
            return self.load_classifier(seed, which)
        return self._train(seed, which)

    # -- test bed
    def testbed(self, seed: int) -> OpenSetTestBed:
        split = self.load_split(seed)
        known = partition_dataset(self.test_data, split, "known_test")
        ratio = self.config.data.testbed_ratio
        if self.config.mode == "identification":
            unknown = partition_dataset(self.test_data, split, "unknown_test")
        else:
            unknown = self.outlier_data
            ratio = ratio or [1, 1]
        bed = make_openset_testbed(
            known, unknown, len(split.known_classes), tuple(ratio) if ratio else None, self._seed(seed, "testbed")
        )
        path = self.dirs.testbed(seed)
        manifest = {
            "seed": seed,
            "sentinel": bed.sentinel,
            "known_count": len(bed.known_part),
            "unknown_count": len(bed.unknown_part),
            "unknown_source": bed.unknown_part.name,
            "known_sample_ids": bed.known_part.sample_ids.tolist(),
            "unknown_sample_ids": bed.unknown_part.sample_ids.tolist(),
        }
        if not path.exists():
            write_json(path, manifest)
        return bed

    # -- features
    def _label(self, ckpt: ClassifierCheckpoint):
        return make_confounding_label(ckpt.num_classes, self.config.gradients.ones_count)

    def build_features(self, seed: int) -> tuple[FeatureTable, FeatureTable]:
        split = self.load_split(seed)
        inner = self.load_classifier(seed, "inner")
        full = self.load_classifier(seed, "full")
        k = partition_dataset(self.train_data, split, "detector_train_known")
        u = partition_dataset(self.train_data, split, "detector_train_unknown")
        both = LabeledDataset(
            name=f"{self.train_data.name}/detector_train",
            images=np.concatenate([k.images, u.images]),
            labels=np.concatenate([k.original_labels, u.original_labels]),
            class_ids=self.train_data.class_ids,
            split_tag="train",
            sample_ids=np.concatenate([k.sample_ids, u.sample_ids]),
        )
        roles = np.r_[np.ones(len(k), np.int64), np.zeros(len(u), np.int64)]
        cfg = self.config.gradients
        train = extract_batch(inner, both, self._label(inner), self.dirs.features(seed, "train"), roles, cfg)

        bed = self.testbed(seed)
        images, truth, is_known = bed.combined()
        test_ds = LabeledDataset(
            name="testbed",
            images=images,
            labels=truth,
            class_ids=tuple(range(bed.sentinel + 1)),
            split_tag="test",
            sample_ids=np.concatenate([bed.known_part.sample_ids, bed.unknown_part.sample_ids]),
        )
        test = extract_batch(full, test_ds, self._label(full), self.dirs.features(seed, "test"), is_known, cfg)
        return train, test

    def load_features(self, seed: int, which: str) -> FeatureTable:
        path = self.dirs.features(seed, which)
        if not path.exists():
            raise MissingArtifactError(f"missing {which} feature table {path}; run `extract` first")
        return FeatureTable.load(path)

    # -- detector
    def build_detector(self, seed: int) -> DetectorCheckpoint:
        inner = self.load_classifier(seed, "inner")
        full = self.load_classifier(seed, "full")
        train = self.load_features(seed, "train")
        if train.provenance["checkpoint"] != inner.fingerprint():
            raise ProvenanceError("train features were not extracted from the inner classifier")
        names = shared_parameter_sets(inner, full, self.config.detector.head_policy)
        table = train.columns(names)
        det = train_detector(
            table.select(table.role_labels == 1),
            table.select(table.role_labels == 0),
            self.config.detector.hyper(self._seed(seed, "detector")),
            threshold=self.config.tau,
            classifier_hash=full.fingerprint(),
        )
        det.training_meta["excluded_parameter_sets"] = [n for n, _ in parameter_sets(full) if n not in names]
        det.training_meta["feature_source"] = inner.fingerprint()
        det.save(self.dirs.detector(seed))
        return det

    def load_detector(self, seed: int) -> DetectorCheckpoint:
        path = self.dirs.detector(seed)
        if not path.with_suffix(".pt").exists():
            raise MissingArtifactError(f"missing detector {path.with_suffix('.pt')}; run `train-detector` first")
        return DetectorCheckpoint.load(path)

    def ensure_detector(self, seed: int) -> DetectorCheckpoint:
        if self.dirs.detector(seed).with_suffix(".pt").exists():
            log.info("detector seed %d up to date", seed)
            return self.load_detector(seed)
        return self.build_detector(seed)

    def ensure_features(self, seed: int) -> tuple[FeatureTable, FeatureTable]:
        return self.build_features(seed)  # cache reuse happens inside extract_batch

    # -- evaluation
    def evaluate_seed(self, seed: int, tau: float | None = None, baselines: Sequence[str] | None = None) -> dict[str, Any]:
        tau = self.config.tau if tau is None else tau
        baselines = self.config.eval.baselines if baselines is None else baselines
        split = self.load_split(seed)
        full = self.load_classifier(seed, "full")
        det = self.load_detector(seed)
        test = self.load_features(seed, "test")
        if test.provenance["checkpoint"] != full.fingerprint() or det.classifier_hash != full.fingerprint():
            raise ProvenanceError("test features / detector do not belong to the full classifier")
        bed = self.testbed(seed)
        images, truth, is_known = bed.combined()
        n = bed.sentinel

        scores = score_features(det, test.columns(det.feature_names).features)
        closed = predict(full, images).argmax(1)
        final = np.where(scores >= tau, closed, n)
        known_mask = is_known == 1
        out: dict[str, Any] = {
            "seed": seed,
            "status": "ok",
            "split": split.to_dict(),
            "N": n,
            "P_detector": det.input_width,
            "tau": float(tau),
            "known_count": int(known_mask.sum()),
            "unknown_count": int((~known_mask).sum()),
            "auroc": auroc(ScoredSet(scores, is_known)),
            "openset_accuracy": openset_accuracy(final, truth),
            "closed_set_accuracy": float((closed[known_mask] == truth[known_mask]).mean()),
            "always_known_accuracy": openset_accuracy(closed, truth),
            "unknown_recall": float((final[~known_mask] == n).mean()),
            "per_class_accuracy": per_class_accuracy(final, truth, n),
            "sentinel_row": sentinel_confusion(final, truth, n),
            "detector_val_accuracy": det.training_meta.get("val_accuracy"),
            "detector_val_auroc": det.training_meta.get("val_auroc"),
            "inner_classifier_train_accuracy": self.load_classifier(seed, "inner").training_meta.get("train_accuracy"),
            "full_classifier_train_accuracy": full.training_meta.get("train_accuracy"),
        }
        if "softmax" in baselines:
            msp = softmax_baseline_score(full, images)
            out["softmax_auroc"] = auroc(ScoredSet(msp, is_known))
            out["softmax_accuracy"] = openset_accuracy(np.where(msp >= tau, closed, n), truth)
        write_json(self.dirs.seed_report(seed), _clean(out))
        return out

    def run_seed(self, seed: int) -> dict[str, Any]:
        self.ensure_split(seed)
        self.ensure_classifier(seed, "inner")
        self.ensure_classifier(seed, "full")
        self.ensure_features(seed)
        self.ensure_detector(seed)
        return self.evaluate_seed(seed)

    def plot_seed(self, seed: int, dims: Sequence[int] | None = None) -> list[Path]:
        files = []
        for which in ("train", "test"):
            table = self.load_features(seed, which)
            files += plot_gradient_distributions(table, self.dirs.plots(seed) / which, dims, title=f"seed {seed} {which}")
        return files

    # -- result
    def flags(self) -> dict[str, Any]:
        n = self.config.gradients.ones_count
        return {
            "confounding_ones": "N (all ones)" if n is None else n,
            "tau": self.config.tau,
            "polarity": "detector score = P(known); known iff score >= tau",
            "head_policy": self.config.detector.head_policy,
            "p_exclusion": (
                "parameter sets whose shapes differ between inner and full classifiers (output head) are dropped from detector input"
                if self.config.detector.head_policy == "exclude"
                else "parameter sets matched by name; output-head norms are kept although the head width differs"
            ),
            "test_features": "from the full-known classifier",
            "feature": "squared L2 norm" if self.config.gradients.squared else "L2 norm",
            "metric": "plain top-1 accuracy over N+1 labels",
        }

    def collect(self, per_seed: list[dict[str, Any]]) -> ExperimentResult:
        keys = ["auroc", "openset_accuracy", "closed_set_accuracy", "always_known_accuracy", "unknown_recall", "softmax_auroc", "softmax_accuracy"]
        prov = {}
        for r in per_seed:
            for p in self.dirs.seed_artifacts(r["seed"]):
                if p.exists():
                    prov[self.dirs.rel(p)] = file_hash(p)
        return ExperimentResult(
            mode=self.config.mode,
            config=self.config.to_dict(),
            per_seed=[_clean(r) for r in per_seed],
            aggregate=aggregate(per_seed, keys),
            flags=self.flags(),
            provenance=prov,
        )

    def write_reports(self, result: ExperimentResult) -> tuple[Path, Path]:
        reports = self.dirs.root / "reports"
        return emit_report(result, reports / "report.json", "json"), emit_report(result, reports / "report.txt", "text")


def _clean(d: dict[str, Any]) -> dict[str, Any]:
    return json.loads(json.dumps(d, default=lambda o: o.item() if isinstance(o, np.generic) else str(o)))


def _seed_worker(args) -> dict[str, Any]:
    config, run_dir, seed = args
    return _run_one(Experiment(config, run_dir), seed)


def _run_one(exp: Experiment, seed: int) -> dict[str, Any]:
    try:
        return exp.run_seed(seed)
    except Exception as exc:  # a failed seed is recorded, the rest continue
        log.exception("seed %d failed", seed)
        return {"seed": seed, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}


def run_experiment(config: ExperimentConfig, run_dir: str | Path, workers: int = 1) -> ExperimentResult:
    exp = Experiment(config, run_dir)
    # Fail fast on unreadable data instead of recording every seed as failed.
    exp.train_data, exp.test_data
    if config.mode == "classification":
        exp.outlier_data
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            per_seed = list(pool.map(_seed_worker, [(config, run_dir, s) for s in config.seeds]))
    else:
        per_seed = [_run_one(exp, s) for s in config.seeds]
    result = exp.collect(per_seed)
    exp.write_reports(result)
    return result


def run_identification(config: ExperimentConfig, run_dir: str | Path, workers: int = 1) -> ExperimentResult:
    if config.mode != "identification":
        raise ValueError("run_identification needs mode=identification")
    return run_experiment(config, run_dir, workers)


def run_classification(config: ExperimentConfig, run_dir: str | Path, workers: int = 1) -> ExperimentResult:
    if config.mode != "classification":
        raise ValueError("run_classification needs mode=classification")
    return run_experiment(config, run_dir, workers)
