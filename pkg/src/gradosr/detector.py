"""Binary unknown detector over gradient representations."""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .gradients import FeatureTable, GradientRepresentation

KNOWN, UNKNOWN = "known", "unknown"


class DetectorError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class Standardizer:
    """``z = (f(x) - shift) / scale`` where ``f`` is ``log1p`` or identity."""

    shift: np.ndarray
    scale: np.ndarray
    transform_kind: str = "log1p+zscore"

    def __post_init__(self):
        if self.transform_kind not in ("log1p+zscore", "zscore"):
            raise ValueError(f"unknown transform {self.transform_kind!r}")
        scale = np.asarray(self.scale, np.float64)
        if (scale <= 0).any():
            raise ValueError("standardizer scales must be positive")
        object.__setattr__(self, "shift", np.asarray(self.shift, np.float64))
        object.__setattr__(self, "scale", scale)

    def _pre(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, np.float64)
        return np.log1p(x) if self.transform_kind == "log1p+zscore" else x

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (self._pre(x) - self.shift) / self.scale

    def to_dict(self) -> dict[str, Any]:
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist(), "transform_kind": self.transform_kind}


def fit_standardizer(table: FeatureTable | np.ndarray, log_transform: bool = True) -> Standardizer:
    feats = table.features if isinstance(table, FeatureTable) else np.asarray(table, np.float64)
    if len(feats) == 0:
        raise DetectorError("cannot fit a standardizer on an empty table")
    kind = "log1p+zscore" if log_transform else "zscore"
    z = np.log1p(feats) if log_transform else feats
    shift = z.mean(0)
    scale = z.std(0)
    # Near-constant columns keep unit scale.
    scale = np.where(scale > 1e-12 * np.maximum(1.0, np.abs(shift)), scale, 1.0)
    return Standardizer(shift, scale, kind)


@dataclass
class DetectorHyper:
    hidden: int = 64
    epochs: int = 60
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 128
    val_fraction: float = 0.1
    log_transform: bool = True
    seed: int = 0


def _build(p: int, hidden: int, seed: int) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return nn.Sequential(nn.Linear(p, hidden), nn.ReLU(), nn.Linear(hidden, 1)).double()


@dataclass(eq=False)
class DetectorCheckpoint:
    standardizer: Standardizer
    layers: "OrderedDict[str, torch.Tensor]"
    feature_names: tuple[str, ...]
    threshold: float = 0.5
    classifier_hash: str | None = None
    training_meta: dict[str, Any] = field(default_factory=dict)
    _net: nn.Module | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        self.feature_names = tuple(self.feature_names)

    @property
    def input_width(self) -> int:
        return len(self.feature_names)

    @property
    def hidden(self) -> int:
        return self.layers["0.weight"].shape[0]

    def net(self) -> nn.Module:
        if self._net is None:
            net = _build(self.input_width, self.hidden, 0)
            net.load_state_dict(self.layers)
            self._net = net.eval()
        return self._net

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.manifest(with_hash=False), sort_keys=True).encode())
        for name, t in self.layers.items():
            h.update(name.encode())
            h.update(t.numpy().tobytes())
        return h.hexdigest()

    def manifest(self, with_hash: bool = True) -> dict[str, Any]:
        m = {
            "P": self.input_width,
            "hidden": self.hidden,
            "feature_names": list(self.feature_names),
            "standardizer": self.standardizer.to_dict(),
            "threshold": self.threshold,
            "classifier_hash": self.classifier_hash,
            "polarity": "score = P(known)",
            "training_meta": self.training_meta,
        }
        if with_hash:
            m["hash"] = self.fingerprint()
        return m

    def save(self, path: str | Path) -> Path:
        path = Path(path).with_suffix("")
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.layers, path.with_suffix(".pt"))
        path.with_suffix(".json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return path.with_suffix(".pt")

    @classmethod
    def load(cls, path: str | Path) -> "DetectorCheckpoint":
        path = Path(path).with_suffix("")
        m = json.loads(path.with_suffix(".json").read_text())
        st = m["standardizer"]
        det = cls(
            standardizer=Standardizer(np.array(st["shift"]), np.array(st["scale"]), st["transform_kind"]),
            layers=OrderedDict(torch.load(path.with_suffix(".pt"), weights_only=True)),
            feature_names=tuple(m["feature_names"]),
            threshold=m["threshold"],
            classifier_hash=m["classifier_hash"],
            training_meta=m["training_meta"],
        )
        if det.fingerprint() != m["hash"]:
            raise ValueError(f"detector {path} does not match its manifest hash")
        return det

    def with_threshold(self, tau: float) -> "DetectorCheckpoint":
        return DetectorCheckpoint(self.standardizer, self.layers, self.feature_names, tau, self.classifier_hash, self.training_meta)


def _auroc(scores: np.ndarray, truth: np.ndarray) -> float:
    from .evaluation import ScoredSet, auroc

    return auroc(ScoredSet(scores, truth))


def _stratified_holdout(n_known: int, n_unknown: int, fraction: float, rng: np.random.Generator):
    """Indices into the stacked [known; unknown] array: (train, val)."""
    train, val = [], []
    for offset, n in ((0, n_known), (n_known, n_unknown)):
        perm = rng.permutation(n) + offset
        k = int(round(fraction * n)) if n > 1 else 0
        k = min(k, n - 1)
        val.append(perm[:k])
        train.append(perm[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def train_detector(
    known_rows: FeatureTable,
    unknown_rows: FeatureTable,
    hyper: DetectorHyper | None = None,
    threshold: float = 0.5,
    classifier_hash: str | None = None,
) -> DetectorCheckpoint:
    """Train ``P -> hidden -> 1`` with BCE; positive class is "known".

    Mini-batches are drawn class-balanced (with replacement from the smaller
    side). A stratified ``val_fraction`` holdout is scored after training.
    """
    hyper = hyper or DetectorHyper()
    if len(known_rows) == 0 or len(unknown_rows) == 0:
        raise DetectorError("both known and unknown rows are required")
    if known_rows.feature_names != unknown_rows.feature_names:
        raise DetectorError(f"P mismatch: {known_rows.P} vs {unknown_rows.P}")
    feats = np.concatenate([known_rows.features, unknown_rows.features])
    truth = np.concatenate([np.ones(len(known_rows)), np.zeros(len(unknown_rows))])
    rng = np.random.default_rng(hyper.seed)
    train_idx, val_idx = _stratified_holdout(len(known_rows), len(unknown_rows), hyper.val_fraction, rng)

    std = fit_standardizer(feats[train_idx], hyper.log_transform)
    x = torch.from_numpy(std.apply(feats))
    y = torch.from_numpy(truth)
    net = _build(x.shape[1], hyper.hidden, hyper.seed)
    opt = torch.optim.Adam(net.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    loss_fn = nn.BCEWithLogitsLoss()

    pos = train_idx[truth[train_idx] == 1]
    neg = train_idx[truth[train_idx] == 0]
    per_class = max(len(pos), len(neg))
    half = max(1, hyper.batch_size // 2)
    history = []
    for epoch in range(hyper.epochs):
        net.train()
        bp = rng.choice(pos, per_class, replace=len(pos) < per_class)
        bn = rng.choice(neg, per_class, replace=len(neg) < per_class)
        total = 0.0
        for i in range(0, per_class, half):
            idx = torch.from_numpy(np.concatenate([bp[i : i + half], bn[i : i + half]]))
            loss = loss_fn(net(x[idx]).squeeze(1), y[idx])
            if not torch.isfinite(loss):
                raise DetectorError(f"detector training diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / (2 * per_class))
    net.eval()

    with torch.no_grad():
        s = torch.sigmoid(net(x).squeeze(1)).numpy()
    meta: dict[str, Any] = {"hyper": asdict(hyper), "loss_history": history, "n_known": len(known_rows), "n_unknown": len(unknown_rows)}
    for tag, idx in (("train", train_idx), ("val", val_idx)):
        if len(idx):
            meta[f"{tag}_accuracy"] = float(((s[idx] >= 0.5) == (truth[idx] == 1)).mean())
            if 0 < truth[idx].sum() < len(idx):
                meta[f"{tag}_auroc"] = _auroc(s[idx], truth[idx])
    layers = OrderedDict((k, v.detach().clone()) for k, v in net.state_dict().items())
    return DetectorCheckpoint(std, layers, known_rows.feature_names, threshold, classifier_hash, meta)


def score_features(det: DetectorCheckpoint, features: np.ndarray) -> np.ndarray:
    feats = np.atleast_2d(np.asarray(features, np.float64))
    if feats.shape[1] != det.input_width:
        raise DetectorError(f"representation length {feats.shape[1]} != detector width {det.input_width}")
    with torch.no_grad():
        return torch.sigmoid(det.net()(torch.from_numpy(det.standardizer.apply(feats))).squeeze(1)).numpy()


def score(det: DetectorCheckpoint, rep: GradientRepresentation | np.ndarray) -> float:
    """Known-score in [0, 1] for one representation."""
    feats = rep.features if isinstance(rep, GradientRepresentation) else rep
    return float(score_features(det, np.asarray(feats)[None])[0])


def decide(known_score: float, tau: float) -> str:
    """``known`` iff ``known_score >= tau`` (ties go to known)."""
    if not 0 < tau < 1:
        raise ValueError(f"threshold {tau} must be in (0, 1)")
    return KNOWN if known_score >= tau else UNKNOWN
