"""Open-set metrics, the max-softmax baseline, distribution plots and reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .classifier import ClassifierCheckpoint, predict


@dataclass(frozen=True, eq=False)
class ScoredSet:
    scores: np.ndarray
    truth: np.ndarray  # 1 = known

    def __post_init__(self):
        scores = np.asarray(self.scores, np.float64).ravel()
        truth = np.asarray(self.truth).ravel().astype(np.int64)
        if scores.shape != truth.shape:
            raise ValueError("scores and truth differ in length")
        if not np.isin(truth, (0, 1)).all():
            raise ValueError("truth must be binary")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "truth", truth)


def _auroc_fraction(scores: np.ndarray, truth: np.ndarray) -> Fraction:
    n_pos = int(truth.sum())
    n_neg = len(truth) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both known and unknown samples")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    # Doubled mid-ranks stay integral: a tie block covering 1-based ranks a..b gets a + b.
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    doubled = np.empty(len(s), np.int64)
    for a, b in zip(starts, ends):
        doubled[a:b] = (a + 1) + b
    rank2_pos = int(doubled[truth[order] == 1].sum())
    u2 = rank2_pos - n_pos * (n_pos + 1)
    return Fraction(u2, 2 * n_pos * n_neg)


def auroc(scored: ScoredSet) -> float:
    """P(random known outscores random unknown), ties counting one half."""
    return float(_auroc_fraction(scored.scores, scored.truth))


def auroc_bruteforce(scored: ScoredSet) -> float:
    """Pairwise O(k^2) reference for :func:`auroc`."""
    pos = scored.scores[scored.truth == 1]
    neg = scored.scores[scored.truth == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUROC needs both known and unknown samples")
    wins2 = 0
    for p in pos:
        wins2 += 2 * int((p > neg).sum()) + int((p == neg).sum())
    return float(Fraction(wins2, 2 * len(pos) * len(neg)))


def openset_accuracy(predictions, truths) -> float:
    """Exact-match rate over N+1 labels; accepts predictions or raw class arrays."""
    pred = np.asarray([getattr(p, "final_class", p) for p in predictions], np.int64)
    truths = np.asarray(truths, np.int64)
    if pred.shape != truths.shape:
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(truths)} truths")
    if len(pred) == 0:
        raise ValueError("no predictions")
    return float((pred == truths).mean())


def softmax_baseline_score(ckpt: ClassifierCheckpoint, images) -> np.ndarray:
    """Maximum softmax probability per image; higher means more known."""
    return predict(ckpt, images).max(axis=1)


def per_class_accuracy(final: np.ndarray, truth: np.ndarray, num_known: int) -> dict[str, float]:
    out = {}
    for c in range(num_known + 1):
        mask = truth == c
        if mask.any():
            out["unknown" if c == num_known else str(c)] = float((final[mask] == c).mean())
    return out


def sentinel_confusion(final: np.ndarray, truth: np.ndarray, num_known: int) -> dict[str, int]:
    """How samples truly of the sentinel class were predicted."""
    mask = truth == num_known
    values, counts = np.unique(final[mask], return_counts=True)
    return {("unknown" if v == num_known else str(int(v))): int(c) for v, c in zip(values, counts)}


@dataclass
class EvalReport:
    auroc: float | None
    openset_accuracy: float | None
    per_class_accuracy: dict[str, float] = field(default_factory=dict)
    sentinel_row: dict[str, int] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("auroc", "openset_accuracy"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise ValueError(f"{name}={v} outside [0, 1]")


# ------------------------------------------------------------------ plotting


def _fd_bins(values: np.ndarray) -> int:
    q75, q25 = np.percentile(values, [75, 25])
    width = 2 * (q75 - q25) / len(values) ** (1 / 3)
    if width <= 0:
        return 10
    return int(np.clip(math.ceil((values.max() - values.min()) / width), 5, 200))


def separation_order(features: np.ndarray, role_labels: np.ndarray) -> np.ndarray:
    """Dimensions sorted by |mean log-feature gap| between roles, largest first."""
    z = np.log10(features + 1e-30)
    gap = np.abs(z[role_labels == 1].mean(0) - z[role_labels == 0].mean(0))
    return np.argsort(-gap, kind="mergesort")


def plot_gradient_distributions(table, out_path: str | Path, dims: Sequence[int] | None = None, title: str | None = None) -> list[Path]:
    """One known/unknown histogram overlay per dimension, log-scaled x axis.

    Default ``dims`` are the two parameter sets with the widest mean gap.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if table.role_labels is None:
        raise ValueError("plotting needs role labels")
    roles = table.role_labels
    if dims is None:
        dims = separation_order(table.features, roles)[:2].tolist()
    for d in dims:
        if not 0 <= d < table.P:
            raise IndexError(f"dimension {d} outside 0..{table.P - 1}")
    out = Path(out_path)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for d in dims:
        col = np.log10(table.features[:, d] + 1e-30)
        bins = np.histogram_bin_edges(col, bins=_fd_bins(col))
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.hist(col[roles == 1], bins=bins, alpha=0.6, density=True, label="known", color="tab:blue")
        ax.hist(col[roles == 0], bins=bins, alpha=0.6, density=True, label="unknown", color="tab:red")
        ax.set_xlabel(f"log10 ||grad {table.feature_names[d]}||^2")
        ax.set_ylabel("density")
        ax.set_title(title or table.feature_names[d])
        ax.legend()
        fig.tight_layout()
        path = out / f"dim{d:02d}_{table.feature_names[d].replace('.', '_')}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        files.append(path)
    return files


# ------------------------------------------------------------------- reports


def _round(obj: Any) -> Any:
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {str(k): _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, np.generic):
        return _round(obj.item())
    return obj


def aggregate(per_seed: Sequence[dict[str, Any]], keys: Sequence[str]) -> dict[str, dict[str, float]]:
    out = {}
    for k in keys:
        vals = [r[k] for r in per_seed if r.get("status") == "ok" and r.get(k) is not None]
        if vals:
            out[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "count": len(vals)}
    return out


def _text_table(result) -> str:
    agg = result.aggregate
    mode = result.mode
    lines = [f"mode: {mode}" + ("  [PARTIAL]" if result.partial else ""), ""]
    if mode == "identification":
        rows = [("Softmax", "softmax_auroc"), ("Gradient (ours)", "auroc")]
        header = f"{'':<18}{'AUROC':>16}"
        lines.append(header)
        lines.append("-" * len(header))
        for label, key in rows:
            if key in agg:
                lines.append(f"{label:<18}{agg[key]['mean']:>9.3f} ± {agg[key]['std']:.3f}")
    else:
        name = result.config.get("data", {}).get("outlier_source", "outliers")
        header = f"{'':<18}{name + ' acc':>20}"
        lines.append(header)
        lines.append("-" * len(header))
        for label, key in (("Always-known", "always_known_accuracy"), ("Softmax", "softmax_accuracy"), ("Gradient (ours)", "openset_accuracy")):
            if key in agg:
                lines.append(f"{label:<18}{agg[key]['mean']:>13.3f} ± {agg[key]['std']:.3f}")
    lines.append("")
    lines.append("per seed:")
    for r in result.per_seed:
        if r.get("status") != "ok":
            lines.append(f"  seed {r['seed']}: FAILED ({r.get('error')})")
            continue
        metrics = ", ".join(f"{k}={r[k]:.4f}" for k in sorted(r) if isinstance(r[k], float))
        lines.append(f"  seed {r['seed']}: {metrics}")
    lines.append("")
    lines.append("flags:")
    for k in sorted(result.flags):
        lines.append(f"  {k}: {result.flags[k]}")
    return "\n".join(lines) + "\n"


def emit_report(result, path: str | Path, format: str = "json") -> Path:
    """Deterministic report: ``json`` (machine-readable) or ``text`` (table)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if format == "json":
        body = {
            "mode": result.mode,
            "partial": result.partial,
            "config": result.config,
            "per_seed": result.per_seed,
            "aggregate": result.aggregate,
            "flags": result.flags,
            "provenance": result.provenance,
        }
        text = json.dumps(_round(body), indent=2, sort_keys=True) + "\n"
    elif format == "text":
        text = _text_table(result)
    else:
        raise ValueError(f"unknown report format {format!r}")
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"could not write report {path}: {exc}") from exc
    return path
