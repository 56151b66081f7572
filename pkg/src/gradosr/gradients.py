"""Gradient-magnitude representations elicited with confounding labels.

A confounding label is a length-N binary target with ``n`` ones (``n != 1``)
that no training sample carries. The representation of an input is the
vector of per-parameter-set squared L2 norms of the gradient of the mean
sigmoid binary cross-entropy between the logits and that label.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
from torch.func import functional_call, grad, vmap

from .classifier import ClassifierCheckpoint, parameter_sets, to_tensor
from .data import LabeledDataset

PROB_FLOOR = 1e-7


class GradientError(RuntimeError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConfoundingLabel:
    values: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(int(v) for v in self.values))
        if any(v not in (0, 1) for v in self.values):
            raise ValueError("confounding label entries must be 0 or 1")
        if self.ones_count == 1:
            raise ValueError("a single 1 is an ordinary one-hot label, not a confounding label")

    @property
    def ones_count(self) -> int:
        return sum(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.values, dtype=dtype)


def make_confounding_label(num_classes: int, ones_count: int | None = None) -> ConfoundingLabel:
    """Ones in the lowest-index positions; ``ones_count=None`` means all ones."""
    n = num_classes if ones_count is None else ones_count
    if num_classes < 1:
        raise ValueError("num_classes must be positive")
    if not 0 <= n <= num_classes:
        raise ValueError(f"ones_count {n} outside 0..{num_classes}")
    if n == 1:
        raise ValueError("ones_count = 1 is excluded")
    return ConfoundingLabel(tuple([1] * n + [0] * (num_classes - n)))


def confounding_loss(logits: torch.Tensor, target: torch.Tensor, floor: float | None = PROB_FLOOR) -> torch.Tensor:
    """Mean BCE between ``sigmoid(logits)`` and ``target`` over the last axis.

    With ``floor=None`` the log-sigmoid form is used (no clamping).
    """
    if floor is None:
        ls = torch.nn.functional.logsigmoid
        per = -(target * ls(logits) + (1 - target) * ls(-logits))
    else:
        p = torch.sigmoid(logits).clamp(floor, 1 - floor)
        per = -(target * torch.log(p) + (1 - target) * torch.log1p(-p))
    return per.mean(-1)


@dataclass(frozen=True, eq=False)
class GradientRepresentation:
    features: np.ndarray
    sample_ref: Any = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.features)


@dataclass
class GradientConfig:
    ones_count: int | None = None
    squared: bool = True
    prob_floor: float | None = PROB_FLOOR
    chunk_size: int = 128


def _check_inputs(ckpt: ClassifierCheckpoint, images: np.ndarray, label: ConfoundingLabel) -> None:
    if len(label) != ckpt.num_classes:
        raise ValueError(f"label length {len(label)} != N={ckpt.num_classes}")
    if tuple(images.shape[1:]) != ckpt.spec.input_shape:
        raise ValueError(f"image shape {tuple(images.shape[1:])} does not match {ckpt.spec.input_shape}")


def _per_sample_sq_norms(
    ckpt: ClassifierCheckpoint,
    images: np.ndarray,
    label: ConfoundingLabel,
    dtype: torch.dtype,
    cfg: GradientConfig,
) -> np.ndarray:
    model = ckpt.model(dtype)
    names = [n for n, _ in parameter_sets(ckpt)]
    params = {k: v.detach().to(dtype) for k, v in ckpt.parameters.items()}
    buffers = {k: v.detach().to(dtype) if v.is_floating_point() else v for k, v in ckpt.buffers.items()}
    target = label.tensor(dtype)
    floor = cfg.prob_floor

    def loss(p, x):
        out = functional_call(model, (p, buffers), (x.unsqueeze(0),))
        return confounding_loss(out[0], target, floor)

    # vmap over the sample axis keeps every backward pass independent (batch size 1 semantics).
    per_sample = vmap(grad(loss), in_dims=(None, 0))
    rows = []
    x_all = to_tensor(images, dtype)
    for i in range(0, len(x_all), cfg.chunk_size):
        g = per_sample(params, x_all[i : i + cfg.chunk_size])
        cols = [g[n].reshape(g[n].shape[0], -1).pow(2).sum(1) for n in names]
        rows.append(torch.stack(cols, dim=1))
    feats = torch.cat(rows).double().numpy() if rows else np.zeros((0, len(names)))
    bad = ~np.isfinite(feats)
    if bad.any():
        col = int(np.argwhere(bad)[0][1])
        raise GradientError(f"non-finite gradient in parameter set {names[col]!r}")
    return feats if cfg.squared else np.sqrt(feats)


def gradient_features(
    ckpt: ClassifierCheckpoint,
    images: np.ndarray,
    label: ConfoundingLabel,
    cfg: GradientConfig | None = None,
    dtype: torch.dtype = torch.float32,
) -> np.ndarray:
    """``(len(images), P)`` feature matrix without table bookkeeping."""
    cfg = cfg or GradientConfig()
    images = np.asarray(images)
    _check_inputs(ckpt, images, label)
    return _per_sample_sq_norms(ckpt, images, label, dtype, cfg)


def extract_representation(
    ckpt: ClassifierCheckpoint,
    image: np.ndarray,
    label: ConfoundingLabel,
    cfg: GradientConfig | None = None,
    dtype: torch.dtype = torch.float32,
    sample_ref: Any = None,
) -> GradientRepresentation:
    cfg = cfg or GradientConfig()
    images = np.asarray(image, dtype=np.float64)[None]
    _check_inputs(ckpt, images, label)
    feats = _per_sample_sq_norms(ckpt, images, label, dtype, cfg)[0]
    return GradientRepresentation(
        features=feats,
        sample_ref=sample_ref,
        meta={"n": label.ones_count, "N": len(label), "checkpoint": ckpt.fingerprint(), "squared": cfg.squared},
    )


def finite_difference_oracle(
    ckpt: ClassifierCheckpoint,
    image: np.ndarray,
    label: ConfoundingLabel,
    epsilon: float = 1e-4,
    cfg: GradientConfig | None = None,
) -> GradientRepresentation:
    """Central differences of the loss in float64, one parameter entry at a time."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    cfg = cfg or GradientConfig()
    images = np.asarray(image, dtype=np.float64)[None]
    _check_inputs(ckpt, images, label)
    model = ckpt.model(torch.float64)
    x = to_tensor(images, torch.float64)
    target = label.tensor(torch.float64)
    feats = []
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            total = 0.0
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + epsilon
                up = confounding_loss(model(x)[0], target, cfg.prob_floor).item()
                flat[j] = orig - epsilon
                down = confounding_loss(model(x)[0], target, cfg.prob_floor).item()
                flat[j] = orig
                total += ((up - down) / (2 * epsilon)) ** 2
            feats.append(total)
    feats = np.asarray(feats)
    return GradientRepresentation(
        features=feats if cfg.squared else np.sqrt(feats),
        meta={"n": label.ones_count, "N": len(label), "oracle": "central-difference", "epsilon": epsilon},
    )


# --------------------------------------------------------------- feature table


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Rows of gradient features in dataset order.

    ``role_labels`` is 1 for known and 0 for unknown rows, or ``None``.
    """

    sample_ids: np.ndarray
    features: np.ndarray
    role_labels: np.ndarray | None
    feature_names: tuple[str, ...]
    provenance: dict[str, Any]

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != len(self.feature_names):
            raise ValueError("feature matrix must be (rows, P)")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "sample_ids", np.asarray(self.sample_ids, dtype=np.int64))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if self.role_labels is not None:
            roles = np.asarray(self.role_labels, dtype=np.int64)
            if len(roles) != len(feats) or not np.isin(roles, (0, 1)).all():
                raise ValueError("role labels must be 0/1 per row")
            object.__setattr__(self, "role_labels", roles)

    def __len__(self) -> int:
        return len(self.features)

    @property
    def P(self) -> int:
        return self.features.shape[1]

    def rows(self) -> list[GradientRepresentation]:
        return [GradientRepresentation(f, int(s), dict(self.provenance)) for s, f in zip(self.sample_ids, self.features)]

    def select(self, mask: np.ndarray) -> "FeatureTable":
        roles = None if self.role_labels is None else self.role_labels[mask]
        return FeatureTable(self.sample_ids[mask], self.features[mask], roles, self.feature_names, dict(self.provenance))

    def columns(self, names: Sequence[str]) -> "FeatureTable":
        """Restrict to the named parameter sets, in the given order."""
        missing = [n for n in names if n not in self.feature_names]
        if missing:
            raise KeyError(f"feature columns not in table: {missing}")
        idx = [self.feature_names.index(n) for n in names]
        return FeatureTable(self.sample_ids, self.features[:, idx], self.role_labels, tuple(names), dict(self.provenance))

    @staticmethod
    def concat(tables: Sequence["FeatureTable"]) -> "FeatureTable":
        first = tables[0]
        for t in tables[1:]:
            if t.feature_names != first.feature_names or t.provenance.get("checkpoint") != first.provenance.get("checkpoint"):
                raise ValueError("tables differ in P or checkpoint")
        roles = None
        if all(t.role_labels is not None for t in tables):
            roles = np.concatenate([t.role_labels for t in tables])
        prov = dict(first.provenance)
        prov["dataset"] = hashlib.sha256("".join(t.provenance.get("dataset", "") for t in tables).encode()).hexdigest()
        return FeatureTable(
            np.concatenate([t.sample_ids for t in tables]),
            np.concatenate([t.features for t in tables]),
            roles,
            first.feature_names,
            prov,
        )

    # -- persistence: CSV text is the contract, .npz is a faster binary twin
    def to_csv_text(self) -> str:
        buf = io.StringIO()
        for key in sorted(self.provenance):
            buf.write(f"# {key}={json.dumps(self.provenance[key])}\n")
        buf.write(f"# feature_names={json.dumps(list(self.feature_names))}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "role_label"] + [f"f_{i}" for i in range(self.P)])
        for i in range(len(self)):
            role = "" if self.role_labels is None else int(self.role_labels[i])
            w.writerow([int(self.sample_ids[i]), role] + [repr(float(v)) for v in self.features[i]])
        return buf.getvalue()

    def save(self, path: str | Path) -> Path:
        path = Path(path).with_suffix(".csv")
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv_text())
        np.savez(
            path.with_suffix(".npz"),
            sample_ids=self.sample_ids,
            features=self.features,
            role_labels=np.array([]) if self.role_labels is None else self.role_labels,
            has_roles=self.role_labels is not None,
            header=json.dumps({"provenance": self.provenance, "feature_names": list(self.feature_names)}, sort_keys=True),
        )
        return path

    @classmethod
    def load(cls, path: str | Path, prefer_binary: bool = True) -> "FeatureTable":
        path = Path(path).with_suffix(".csv")
        npz = path.with_suffix(".npz")
        if prefer_binary and npz.exists():
            with np.load(npz) as z:
                header = json.loads(str(z["header"]))
                roles = z["role_labels"] if bool(z["has_roles"]) else None
                return cls(z["sample_ids"], z["features"], roles, header["feature_names"], header["provenance"])
        return cls.read_csv(path)

    @classmethod
    def read_csv(cls, path: str | Path) -> "FeatureTable":
        meta: dict[str, Any] = {}
        with open(path, newline="") as fh:
            lines = fh.read().splitlines()
        body_start = 0
        for body_start, line in enumerate(lines):
            if not line.startswith("# "):
                break
            key, _, value = line[2:].partition("=")
            meta[key] = json.loads(value)
        names = meta.pop("feature_names")
        reader = csv.reader(lines[body_start + 1 :])
        ids, roles, feats = [], [], []
        for row in reader:
            ids.append(int(row[0]))
            roles.append(row[1])
            feats.append([float(v) for v in row[2:]])
        role_arr = None if any(r == "" for r in roles) or not roles else np.array([int(r) for r in roles])
        return cls(np.array(ids, np.int64), np.array(feats, np.float64).reshape(len(ids), len(names)), role_arr, names, meta)


def table_provenance(ckpt: ClassifierCheckpoint, dataset: LabeledDataset, label: ConfoundingLabel, cfg: GradientConfig) -> dict[str, Any]:
    return {
        "checkpoint": ckpt.fingerprint(),
        "dataset": dataset.fingerprint(),
        "n": label.ones_count,
        "N": len(label),
        "P": len(ckpt.parameters),
        "squared": cfg.squared,
        "prob_floor": cfg.prob_floor,
    }


def extract_batch(
    ckpt: ClassifierCheckpoint,
    dataset: LabeledDataset,
    label: ConfoundingLabel,
    cache_path: str | Path | None = None,
    role_labels: np.ndarray | None = None,
    cfg: GradientConfig | None = None,
) -> FeatureTable:
    """One row per sample of ``dataset``, in order.

    A cache at ``cache_path`` is reused only when its provenance matches;
    otherwise :class:`StaleCacheError` is raised rather than overwriting it.
    """
    cfg = cfg or GradientConfig()
    _check_inputs(ckpt, dataset.images, label)
    prov = table_provenance(ckpt, dataset, label, cfg)
    if cache_path is not None and Path(cache_path).with_suffix(".csv").exists():
        cached = FeatureTable.load(cache_path)
        if cached.provenance != prov:
            diff = sorted(k for k in set(prov) | set(cached.provenance) if prov.get(k) != cached.provenance.get(k))
            raise StaleCacheError(f"feature cache {cache_path} is stale (differs in {diff})")
        return cached
    feats = _per_sample_sq_norms(ckpt, dataset.images, label, torch.float32, cfg)
    names = tuple(n for n, _ in parameter_sets(ckpt))
    table = FeatureTable(dataset.sample_ids, feats, role_labels, names, prov)
    if cache_path is not None:
        table.save(cache_path)
    return table
