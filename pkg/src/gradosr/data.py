"""Dataset loading and the seeded known/unknown class-split protocol."""

from __future__ import annotations

import hashlib
import json
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

DATA_ROOT_ENV = "GRADOSR_DATA_ROOT"

ROLES = (
    "closed_train",
    "detector_train_known",
    "detector_train_unknown",
    "known_test",
    "unknown_test",
)
# Roles whose labels are remapped to contiguous ids because a classifier consumes them.
CLASSIFIER_ROLES = ("closed_train", "detector_train_known", "known_test")


class DatasetError(ValueError):
    pass


class SplitError(ValueError):
    pass


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Images in ``(M, H, W, C)`` float32 layout with values in ``[0, 1]``.

    ``original_labels`` keeps the source class ids when ``labels`` have been
    remapped; ``sample_ids`` index into the source dataset and are stable.
    """

    name: str
    images: np.ndarray
    labels: np.ndarray
    class_ids: tuple[int, ...]
    split_tag: str
    original_labels: np.ndarray | None = None
    sample_ids: np.ndarray | None = None
    class_mapping: Mapping[int, int] = field(default_factory=dict)

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise DatasetError(f"images must be (M, H, W, C), got shape {images.shape}")
        if len(images) != len(labels):
            raise DatasetError("images and labels differ in length")
        if self.split_tag not in ("train", "test"):
            raise DatasetError(f"split_tag must be train or test, got {self.split_tag!r}")
        orig = labels if self.original_labels is None else np.asarray(self.original_labels, dtype=np.int64)
        ids = np.arange(len(labels)) if self.sample_ids is None else np.asarray(self.sample_ids, dtype=np.int64)
        if len(orig) != len(labels) or len(ids) != len(labels):
            raise DatasetError("metadata arrays differ in length")
        object.__setattr__(self, "images", _frozen(images))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "original_labels", _frozen(orig))
        object.__setattr__(self, "sample_ids", _frozen(ids))
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        object.__setattr__(self, "class_mapping", dict(self.class_mapping))
        if len(labels) and not np.isin(labels, self.class_ids).all():
            missing = sorted(set(labels.tolist()) - set(self.class_ids))
            raise DatasetError(f"labels {missing[:5]} are not among class_ids")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def fingerprint(self) -> str:
        """Content hash over pixels, labels and sample ids."""
        h = hashlib.sha256()
        h.update(self.name.encode())
        h.update(str(self.images.shape).encode())
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        h.update(self.sample_ids.tobytes())
        return h.hexdigest()

    def subset(self, index: np.ndarray) -> "LabeledDataset":
        index = np.asarray(index, dtype=np.int64)
        return LabeledDataset(
            name=self.name,
            images=self.images[index],
            labels=self.labels[index],
            class_ids=self.class_ids,
            split_tag=self.split_tag,
            original_labels=self.original_labels[index],
            sample_ids=self.sample_ids[index],
            class_mapping=self.class_mapping,
        )


@dataclass(frozen=True)
class ClassSplit:
    known_classes: frozenset[int]
    unknown_classes: frozenset[int]
    inner_known: frozenset[int]
    inner_unknown: frozenset[int]
    seed: int

    def __post_init__(self):
        for name in ("known_classes", "unknown_classes", "inner_known", "inner_unknown"):
            object.__setattr__(self, name, frozenset(int(c) for c in getattr(self, name)))
        if self.known_classes & self.unknown_classes:
            raise SplitError("known and unknown classes overlap")
        if self.inner_known | self.inner_unknown != self.known_classes:
            raise SplitError("inner split does not cover the known classes")
        if self.inner_known & self.inner_unknown:
            raise SplitError("inner known and inner unknown classes overlap")

    def classes_for(self, role: str) -> frozenset[int]:
        return {
            "closed_train": self.known_classes,
            "detector_train_known": self.inner_known,
            "detector_train_unknown": self.inner_unknown,
            "known_test": self.known_classes,
            "unknown_test": self.unknown_classes,
        }[role]

    def mapping_for(self, role: str) -> dict[int, int]:
        """Original id -> contiguous id, ascending original-id order."""
        if role == "detector_train_known":
            classes = self.inner_known
        elif role in ("closed_train", "known_test"):
            classes = self.known_classes
        else:
            return {}
        return {c: i for i, c in enumerate(sorted(classes))}

    def to_dict(self) -> dict[str, Any]:
        return {
            "seed": self.seed,
            "known_classes": sorted(self.known_classes),
            "unknown_classes": sorted(self.unknown_classes),
            "inner_known": sorted(self.inner_known),
            "inner_unknown": sorted(self.inner_unknown),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ClassSplit":
        return cls(
            known_classes=d["known_classes"],
            unknown_classes=d["unknown_classes"],
            inner_known=d["inner_known"],
            inner_unknown=d["inner_unknown"],
            seed=int(d["seed"]),
        )

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class OpenSetTestBed:
    known_part: LabeledDataset
    unknown_part: LabeledDataset
    num_known_classes: int

    @property
    def sentinel(self) -> int:
        return self.num_known_classes

    @property
    def ratio(self) -> tuple[int, int]:
        return len(self.known_part), len(self.unknown_part)

    def combined(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked images, N+1 truth labels, and binary known flags."""
        images = np.concatenate([self.known_part.images, self.unknown_part.images])
        truth = np.concatenate([self.known_part.labels, self.unknown_part.labels])
        is_known = np.concatenate([np.ones(len(self.known_part), np.int64), np.zeros(len(self.unknown_part), np.int64)])
        return images, truth, is_known


# --------------------------------------------------------------------- loaders


def _data_root() -> Path | None:
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else None


def _resolve(path: str | os.PathLike) -> Path:
    p = Path(path).expanduser()
    if not p.is_absolute() and not p.exists() and _data_root() is not None:
        p = _data_root() / p
    return p


def synthetic_blobs(
    classes: int = 10,
    per_class: int = 100,
    seed: int = 0,
    image_size: int = 16,
    channels: int = 3,
    noise: float = 0.15,
    mean_grid: int = 4,
    mean_spread: float = 0.35,
    split_tag: str = "train",
) -> LabeledDataset:
    """Gaussian clusters in pixel space.

    Class means are smooth random patterns (a ``mean_grid`` x ``mean_grid``
    grid upsampled to the image size), shared between the train and test
    splits of one ``seed``. Per-sample noise is drawn from a stream keyed on
    ``(seed, split_tag)`` so the two splits are disjoint draws.
    """
    if classes < 1 or per_class < 1:
        raise DatasetError("synthetic dataset would be empty")
    if image_size % mean_grid:
        raise DatasetError("image_size must be a multiple of mean_grid")
    mean_rng = np.random.default_rng([seed, 0])
    coarse = mean_rng.uniform(0.5 - mean_spread, 0.5 + mean_spread, size=(classes, mean_grid, mean_grid, channels))
    rep = image_size // mean_grid
    means = coarse.repeat(rep, axis=1).repeat(rep, axis=2)

    tag = {"train": 1, "test": 2}[split_tag]
    rng = np.random.default_rng([seed, tag])
    labels = np.repeat(np.arange(classes), per_class)
    eps = rng.normal(0.0, noise, size=(len(labels), image_size, image_size, channels))
    images = np.clip(means[labels] + eps, 0.0, 1.0).astype(np.float32)
    return LabeledDataset(
        name=f"synthetic-{seed}",
        images=images,
        labels=labels,
        class_ids=tuple(range(classes)),
        split_tag=split_tag,
    )


def synthetic_spots(
    classes: int = 10,
    per_class: int = 100,
    seed: int = 0,
    image_size: int = 16,
    channels: int = 3,
    noise: float = 0.1,
    jitter: float = 1.0,
    width: float = 2.0,
    split_tag: str = "train",
) -> LabeledDataset:
    """A Gaussian spot per image whose seeded class mean sets centre and colour.

    Samples jitter the centre by ``jitter`` pixels (std), scale the brightness
    by a factor in [0.7, 1.3], and add pixel noise on a mid-grey background.
    """
    if classes < 1 or per_class < 1:
        raise DatasetError("synthetic dataset would be empty")
    mean_rng = np.random.default_rng([seed, 0])
    centres = mean_rng.uniform(0.2 * image_size, 0.8 * image_size, size=(classes, 2))
    colours = mean_rng.uniform(-1.0, 1.0, size=(classes, channels))
    colours /= np.abs(colours).max(axis=1, keepdims=True)

    tag = {"train": 1, "test": 2}[split_tag]
    rng = np.random.default_rng([seed, tag])
    labels = np.repeat(np.arange(classes), per_class)
    m = len(labels)
    c = centres[labels] + rng.normal(0.0, jitter, size=(m, 2))
    amp = rng.uniform(0.7, 1.3, size=(m, 1, 1, 1))
    yy, xx = np.mgrid[0:image_size, 0:image_size]
    d2 = (yy[None] - c[:, 0, None, None]) ** 2 + (xx[None] - c[:, 1, None, None]) ** 2
    spot = np.exp(-d2 / (2 * width**2))[..., None]
    images = 0.5 + 0.4 * amp * spot * colours[labels][:, None, None, :]
    images = images + rng.normal(0.0, noise, size=images.shape)
    return LabeledDataset(
        name=f"spots-{seed}",
        images=np.clip(images, 0.0, 1.0).astype(np.float32),
        labels=labels,
        class_ids=tuple(range(classes)),
        split_tag=split_tag,
    )


def uniform_noise(count: int, image_size: int = 16, channels: int = 3, seed: int = 0, split_tag: str = "test") -> LabeledDataset:
    """Outlier images with iid uniform pixels; all carry class id 0."""
    if count < 1:
        raise DatasetError("uniform noise dataset would be empty")
    rng = np.random.default_rng([seed, 7])
    images = rng.uniform(0.0, 1.0, size=(count, image_size, image_size, channels)).astype(np.float32)
    return LabeledDataset(
        name=f"uniform-noise-{seed}",
        images=images,
        labels=np.zeros(count, np.int64),
        class_ids=(0,),
        split_tag=split_tag,
    )


def _cifar10(path: Path, split_tag: str) -> LabeledDataset:
    """CIFAR-10 binary layout: ``data_batch_{1..5}.bin`` / ``test_batch.bin``.

    The python-pickle layout (``data_batch_1`` without extension) is read too.
    """
    if not path.is_dir():
        raise DatasetError(f"CIFAR-10 directory not found: {path}")
    stems = [f"data_batch_{i}" for i in range(1, 6)] if split_tag == "train" else ["test_batch"]
    chunks, labels = [], []
    for stem in stems:
        binfile, pyfile = path / f"{stem}.bin", path / stem
        if binfile.exists():
            raw = np.fromfile(binfile, dtype=np.uint8)
            if raw.size % 3073:
                raise DatasetError(f"corrupt CIFAR-10 batch {binfile}")
            raw = raw.reshape(-1, 3073)
            labels.append(raw[:, 0].astype(np.int64))
            chunks.append(raw[:, 1:].reshape(-1, 3, 32, 32))
        elif pyfile.exists():
            with open(pyfile, "rb") as fh:
                d = pickle.load(fh, encoding="bytes")
            labels.append(np.asarray(d[b"labels"], np.int64))
            chunks.append(np.asarray(d[b"data"], np.uint8).reshape(-1, 3, 32, 32))
        else:
            raise DatasetError(f"missing CIFAR-10 batch {stem} under {path}")
    images = np.concatenate(chunks).transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return LabeledDataset(
        name="cifar10",
        images=images,
        labels=np.concatenate(labels),
        class_ids=tuple(range(10)),
        split_tag=split_tag,
    )


_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".ppm"}


def _image_folder(path: Path, split_tag: str, image_size: int | None) -> LabeledDataset:
    """``root/<class_name>/*.png``; a flat directory of images is one class."""
    from PIL import Image

    if not path.is_dir():
        raise DatasetError(f"image directory not found: {path}")
    subdirs = sorted(p for p in path.iterdir() if p.is_dir())
    groups = [(p, sorted(q for q in p.iterdir() if q.suffix.lower() in _IMAGE_SUFFIXES)) for p in subdirs]
    if not groups:
        groups = [(path, sorted(q for q in path.iterdir() if q.suffix.lower() in _IMAGE_SUFFIXES))]
    images, labels = [], []
    for label, (_, files) in enumerate(groups):
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB")
                    if image_size is not None and im.size != (image_size, image_size):
                        im = im.resize((image_size, image_size), Image.BILINEAR)
                    images.append(np.asarray(im, dtype=np.float32) / 255.0)
            except OSError as exc:
                raise DatasetError(f"unreadable image {f}: {exc}") from exc
            labels.append(label)
    if not images:
        raise DatasetError(f"no images under {path}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DatasetError(f"images under {path} differ in resolution: {sorted(shapes)[:3]}")
    return LabeledDataset(
        name=path.name,
        images=np.stack(images),
        labels=np.asarray(labels),
        class_ids=tuple(range(len(groups))),
        split_tag=split_tag,
    )


def load_dataset(source: str, split_tag: str = "train", **options: Any) -> LabeledDataset:
    """Load ``source``: ``synthetic``, ``uniform_noise``, ``cifar10`` or ``image_folder``.

    Path-backed sources take ``path=``; relative paths are also looked up
    under ``$GRADOSR_DATA_ROOT``. ``image_size`` resizes folder images.
    """
    if source == "synthetic":
        ds = synthetic_blobs(split_tag=split_tag, **options)
    elif source == "spots":
        ds = synthetic_spots(split_tag=split_tag, **options)
    elif source == "uniform_noise":
        ds = uniform_noise(split_tag=split_tag, **options)
    elif source in ("cifar10", "image_folder"):
        if "path" not in options or options["path"] is None:
            raise DatasetError(f"source {source!r} requires a path")
        path = _resolve(options["path"])
        if source == "cifar10":
            ds = _cifar10(path, split_tag)
        else:
            ds = _image_folder(path, split_tag, options.get("image_size"))
    else:
        raise DatasetError(f"unknown dataset source {source!r}")
    if len(ds) == 0:
        raise DatasetError(f"dataset {source!r} is empty")
    return ds


# ------------------------------------------------------------------ protocol


def generate_class_split(class_ids: Sequence[int], num_known: int, num_inner_known: int, seed: int) -> ClassSplit:
    """Draw K from ``class_ids`` then K_K from K, uniformly, driven only by ``seed``."""
    class_ids = sorted(int(c) for c in class_ids)
    if len(set(class_ids)) != len(class_ids):
        raise SplitError("duplicate class ids")
    if not (1 <= num_inner_known < num_known <= len(class_ids)):
        raise SplitError(
            f"need 1 <= num_inner_known ({num_inner_known}) < num_known ({num_known}) <= {len(class_ids)}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(class_ids)
    known = order[:num_known]
    inner_order = rng.permutation(np.sort(known))
    return ClassSplit(
        known_classes=known.tolist(),
        unknown_classes=order[num_known:].tolist(),
        inner_known=inner_order[:num_inner_known].tolist(),
        inner_unknown=inner_order[num_inner_known:].tolist(),
        seed=seed,
    )


def partition_dataset(dataset: LabeledDataset, split: ClassSplit, role: str) -> LabeledDataset:
    """Filter ``dataset`` to the classes of ``role``.

    Classifier-facing roles get contiguous labels; the unknown roles get the
    sentinel label (the size of the matching known set) as truth.
    """
    if role not in ROLES:
        raise SplitError(f"unknown role {role!r}")
    if role in ("closed_train", "detector_train_known", "detector_train_unknown") and dataset.split_tag != "train":
        raise SplitError(f"role {role} needs a train split, got {dataset.split_tag}")
    if role in ("known_test", "unknown_test") and dataset.split_tag != "test":
        raise SplitError(f"role {role} needs a test split, got {dataset.split_tag}")
    classes = split.classes_for(role)
    if not classes:
        raise SplitError(f"role {role} has no classes in this split")
    mask = np.isin(dataset.original_labels, sorted(classes))
    index = np.flatnonzero(mask)
    if len(index) == 0:
        raise SplitError(f"role {role} selects no samples from {dataset.name}")
    orig = dataset.original_labels[index]
    mapping = split.mapping_for(role)
    if mapping:
        labels = np.array([mapping[int(c)] for c in orig], dtype=np.int64)
        class_ids = tuple(range(len(mapping)))
    else:
        sentinel = len(split.inner_known) if role == "detector_train_unknown" else len(split.known_classes)
        labels = np.full(len(index), sentinel, np.int64)
        class_ids = (sentinel,)
    return LabeledDataset(
        name=f"{dataset.name}/{role}",
        images=dataset.images[index],
        labels=labels,
        class_ids=class_ids,
        split_tag=dataset.split_tag,
        original_labels=orig,
        sample_ids=dataset.sample_ids[index],
        class_mapping=mapping,
    )


def as_sentinel(dataset: LabeledDataset, sentinel: int) -> LabeledDataset:
    """Relabel every sample of an outlier dataset with ``sentinel``."""
    return LabeledDataset(
        name=dataset.name,
        images=dataset.images,
        labels=np.full(len(dataset), sentinel, np.int64),
        class_ids=(sentinel,),
        split_tag=dataset.split_tag,
        original_labels=dataset.original_labels,
        sample_ids=dataset.sample_ids,
    )


def make_openset_testbed(
    known_test: LabeledDataset,
    unknown_test: LabeledDataset,
    num_known_classes: int | None = None,
    target_ratio: tuple[int, int] | None = None,
    seed: int = 0,
) -> OpenSetTestBed:
    """Combine knowns (contiguous labels) with unknowns relabelled to sentinel N.

    With ``target_ratio`` the larger side is subsampled without replacement,
    keeping the selected samples in their original order.
    """
    if len(known_test) == 0 or len(unknown_test) == 0:
        raise DatasetError("open-set testbed needs non-empty known and unknown parts")
    if known_test.image_shape != unknown_test.image_shape:
        raise DatasetError(f"resolution mismatch: {known_test.image_shape} vs {unknown_test.image_shape}")
    n = num_known_classes if num_known_classes is not None else len(known_test.class_ids)
    if known_test.labels.max() >= n:
        raise DatasetError("known labels must be contiguous ids below the sentinel")
    known, unknown = known_test, as_sentinel(unknown_test, n)
    if target_ratio is not None:
        a, b = target_ratio
        if a <= 0 or b <= 0:
            raise DatasetError("ratio terms must be positive")
        rng = np.random.default_rng([seed, 11])
        # Largest (k, u) with k:u == a:b, k <= |known|, u <= |unknown|.
        units = min(len(known) // a, len(unknown) // b)
        if units == 0:
            raise DatasetError(f"ratio {a}:{b} unattainable without upsampling")
        k, u = units * a, units * b
        if k < len(known):
            known = known.subset(np.sort(rng.choice(len(known), size=k, replace=False)))
        if u < len(unknown):
            unknown = unknown.subset(np.sort(rng.choice(len(unknown), size=u, replace=False)))
    return OpenSetTestBed(known_part=known, unknown_part=unknown, num_known_classes=n)


def split_manifest(split: ClassSplit, partitions: Mapping[str, LabeledDataset] | None = None) -> dict[str, Any]:
    manifest = split.to_dict()
    manifest["remapping"] = {
        role: {str(k): v for k, v in split.mapping_for(role).items()} for role in CLASSIFIER_ROLES
    }
    if partitions is not None:
        manifest["counts"] = {role: len(ds) for role, ds in sorted(partitions.items())}
    return manifest


def write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    path.write_text(text)

