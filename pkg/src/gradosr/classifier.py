"""Closed-set classifier backbones, training, prediction and checkpointing."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .data import LabeledDataset

log = logging.getLogger(__name__)

ARCHITECTURES = ("small_cnn", "mlp", "resnet18")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    architecture: str
    input_shape: tuple[int, int, int]  # H, W, C
    num_classes: int
    init_seed: int = 0
    hidden: tuple[int, ...] = (64,)
    bias: bool = True
    activation: str = "relu"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unregistered architecture {self.architecture!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BackboneSpec":
        return cls(**{**d, "input_shape": tuple(d["input_shape"]), "hidden": tuple(d["hidden"])})


@dataclass
class ClassifierHyper:
    epochs: int = 5
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    step_size: int = 30
    gamma: float = 0.1
    seed: int = 0


def _act(name: str) -> nn.Module:
    return nn.ReLU() if name == "relu" else nn.Tanh()


class MLP(nn.Module):
    def __init__(self, in_features: int, hidden: Sequence[int], num_classes: int, bias: bool = True, activation: str = "relu"):
        super().__init__()
        widths = [in_features, *hidden]
        layers: list[nn.Module] = [nn.Flatten()]
        for a, b in zip(widths[:-1], widths[1:]):
            layers += [nn.Linear(a, b, bias=bias), _act(activation)]
        layers.append(nn.Linear(widths[-1], num_classes, bias=bias))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class SmallCNN(nn.Module):
    """Two conv/pool blocks followed by two dense layers (P = 8)."""

    def __init__(self, channels: int, height: int, width: int, num_classes: int, hidden: int = 64):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(channels, 16, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        flat = 32 * (height // 4) * (width // 4)
        self.classifier = nn.Sequential(nn.Flatten(), nn.Linear(flat, hidden), nn.ReLU(), nn.Linear(hidden, num_classes))

    def forward(self, x):
        return self.classifier(self.features(x))


def _resnet18(channels: int, num_classes: int) -> nn.Module:
    from torchvision.models import resnet18

    # Small-image stem: 3x3 stride-1 first conv, no max-pool.
    model = resnet18(weights=None, num_classes=num_classes)
    model.conv1 = nn.Conv2d(channels, 64, 3, stride=1, padding=1, bias=False)
    model.maxpool = nn.Identity()
    return model


def build_model(spec: BackboneSpec) -> nn.Module:
    """Instantiate ``spec`` with weights drawn from ``spec.init_seed``; expects NCHW input."""
    h, w, c = spec.input_shape
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.init_seed)
        if spec.architecture == "mlp":
            model = MLP(h * w * c, spec.hidden, spec.num_classes, spec.bias, spec.activation)
        elif spec.architecture == "small_cnn":
            model = SmallCNN(c, h, w, spec.num_classes, hidden=spec.hidden[0] if spec.hidden else 64)
        else:
            model = _resnet18(c, spec.num_classes)
    return model.eval()


def to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """NHWC numpy (or a single HWC image) -> NCHW tensor."""
    x = torch.as_tensor(np.array(images), dtype=dtype)  # copy: inputs may be read-only views
    if x.ndim == 3:
        x = x.unsqueeze(0)
    return x.permute(0, 3, 1, 2).contiguous()


@dataclass(eq=False)
class ClassifierCheckpoint:
    spec: BackboneSpec
    parameters: "OrderedDict[str, torch.Tensor]"
    class_mapping: dict[int, int] = field(default_factory=dict)
    training_meta: dict[str, Any] = field(default_factory=dict)
    buffers: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)
    _model: nn.Module | None = field(default=None, repr=False)

    @classmethod
    def from_model(cls, spec: BackboneSpec, model: nn.Module, class_mapping=None, training_meta=None) -> "ClassifierCheckpoint":
        params = OrderedDict((k, v.detach().clone()) for k, v in model.named_parameters())
        buffers = OrderedDict((k, v.detach().clone()) for k, v in model.named_buffers())
        return cls(spec, params, dict(class_mapping or {}), dict(training_meta or {}), buffers)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def model(self, dtype: torch.dtype = torch.float32) -> nn.Module:
        """A fresh-enough module holding copies of the parameters (eval mode)."""
        if dtype == torch.float32 and self._model is not None:
            return self._model
        model = build_model(self.spec)
        state = {**self.parameters, **self.buffers}
        model.load_state_dict(state, strict=True)
        model = model.to(dtype).eval()
        for p in model.parameters():
            p.requires_grad_(False)
        if dtype == torch.float32:
            self._model = model
        return model

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        for store in (self.parameters, self.buffers):
            for name, t in store.items():
                h.update(name.encode())
                h.update(str(tuple(t.shape)).encode())
                h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def manifest(self) -> dict[str, Any]:
        sets = parameter_sets(self)
        return {
            "architecture": self.spec.architecture,
            "spec": self.spec.to_dict(),
            "input_shape": list(self.spec.input_shape),
            "num_classes": self.spec.num_classes,
            "P": len(sets),
            "parameter_sets": [[n, list(s)] for n, s in sets],
            "class_mapping": {str(k): v for k, v in sorted(self.class_mapping.items())},
            "training_meta": self.training_meta,
            "hash": self.fingerprint(),
        }

    def save(self, path: str | Path) -> Path:
        """Write ``<path>.pt`` (tensors) and ``<path>.json`` (manifest)."""
        path = Path(path).with_suffix("")
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"parameters": self.parameters, "buffers": self.buffers}, path.with_suffix(".pt"))
        path.with_suffix(".json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return path.with_suffix(".pt")

    @classmethod
    def load(cls, path: str | Path) -> "ClassifierCheckpoint":
        path = Path(path).with_suffix("")
        blob = torch.load(path.with_suffix(".pt"), weights_only=True)
        manifest = json.loads(path.with_suffix(".json").read_text())
        ckpt = cls(
            spec=BackboneSpec.from_dict(manifest["spec"]),
            parameters=OrderedDict(blob["parameters"]),
            class_mapping={int(k): v for k, v in manifest["class_mapping"].items()},
            training_meta=manifest["training_meta"],
            buffers=OrderedDict(blob["buffers"]),
        )
        if ckpt.fingerprint() != manifest["hash"]:
            raise ValueError(f"checkpoint {path} does not match its manifest hash")
        return ckpt


def parameter_sets(ckpt: ClassifierCheckpoint) -> list[tuple[str, tuple[int, ...]]]:
    """Named trainable tensors in module definition order; one entry per set."""
    return [(name, tuple(t.shape)) for name, t in ckpt.parameters.items()]


def _accuracy(model: nn.Module, x: torch.Tensor, y: torch.Tensor, batch_size: int = 512) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            correct += (model(x[i : i + batch_size]).argmax(1) == y[i : i + batch_size]).sum().item()
    return correct / max(len(x), 1)


def train_classifier(
    train_data: LabeledDataset,
    spec: BackboneSpec,
    hyper: ClassifierHyper | None = None,
    val_data: LabeledDataset | None = None,
) -> ClassifierCheckpoint:
    """Momentum SGD with step decay on cross-entropy; deterministic given seeds."""
    hyper = hyper or ClassifierHyper()
    labels = train_data.labels
    if len(labels) == 0:
        raise ValueError("empty training set")
    if labels.min() < 0 or labels.max() >= spec.num_classes or len(np.unique(labels)) != spec.num_classes:
        raise ValueError(
            f"labels must be contiguous 0..{spec.num_classes - 1}; got classes {sorted(np.unique(labels).tolist())}"
        )
    if tuple(train_data.image_shape) != spec.input_shape:
        raise ValueError(f"image shape {train_data.image_shape} does not match spec {spec.input_shape}")

    model = build_model(spec)
    x = to_tensor(train_data.images)
    y = torch.as_tensor(np.array(labels, dtype=np.int64))
    opt = torch.optim.SGD(model.parameters(), lr=hyper.lr, momentum=hyper.momentum, weight_decay=hyper.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=hyper.step_size, gamma=hyper.gamma)
    loss_fn = nn.CrossEntropyLoss()
    rng = np.random.default_rng(hyper.seed)
    history = []
    for epoch in range(hyper.epochs):
        model.train()
        order = torch.as_tensor(rng.permutation(len(x)))
        total = 0.0
        for i in range(0, len(x), hyper.batch_size):
            idx = order[i : i + hyper.batch_size]
            loss = loss_fn(model(x[idx]), y[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss {loss.item()} at epoch {epoch}, batch {i // hyper.batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        sched.step()
        history.append(total / len(x))
        log.debug("epoch %d loss %.4f", epoch, history[-1])

    model.eval()
    meta: dict[str, Any] = {
        "epochs": hyper.epochs,
        "seed": hyper.seed,
        "init_seed": spec.init_seed,
        "hyper": asdict(hyper),
        "optimizer": "sgd-momentum/step-decay",
        "loss_history": history,
        "train_accuracy": _accuracy(model, x, y),
    }
    if val_data is not None:
        meta["val_accuracy"] = _accuracy(model, to_tensor(val_data.images), torch.as_tensor(np.array(val_data.labels, dtype=np.int64)))
    return ClassifierCheckpoint.from_model(spec, model, train_data.class_mapping, meta)


def logits(ckpt: ClassifierCheckpoint, images, batch_size: int = 512) -> torch.Tensor:
    x = to_tensor(images)
    h, w, c = ckpt.spec.input_shape
    if tuple(x.shape[1:]) != (c, h, w):
        raise ValueError(f"image shape {tuple(x.shape[2:]) + (x.shape[1],)} does not match {ckpt.spec.input_shape}")
    model = ckpt.model()
    with torch.no_grad():
        return torch.cat([model(x[i : i + batch_size]) for i in range(0, len(x), batch_size)])


def predict(ckpt: ClassifierCheckpoint, images, batch_size: int = 512) -> np.ndarray:
    """Softmax probabilities, one row per image in input order."""
    return torch.softmax(logits(ckpt, images, batch_size).double(), dim=1).numpy()
