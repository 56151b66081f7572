"""Identification AUROC over the free design choices, one JSON line per setting.

Grid: dataset family x probability floor x head policy x confounding ones-count.
Every setting runs the full 5-seed protocol in a throwaway run directory.

    python scripts/sweep_design_choices.py > sweep.jsonl
"""

import itertools
import json
import logging
import tempfile
import time

from gradosr.config import ExperimentConfig, override
from gradosr.pipeline import run_experiment

DATASETS = {
    "blobs": {},
    "blobs_hard": {"data.noise": 0.3, "data.mean_spread": 0.1},
    "spots": {"data.source": "spots", "classifier.lr": 0.02, "classifier.epochs": 15},
}


def main() -> None:
    logging.basicConfig(level=logging.WARNING)
    base = ExperimentConfig.from_dict({"eval": {"baselines": ["softmax"]}})
    grid = itertools.product(DATASETS.items(), [1e-7, None], ["exclude", "keep"], [None, 0])
    for (name, data), floor, head, n in grid:
        cfg = override(base, **data, **{"gradients.prob_floor": floor, "detector.head_policy": head, "gradients.ones_count": n})
        start = time.perf_counter()
        with tempfile.TemporaryDirectory() as run_dir:
            agg = run_experiment(cfg, run_dir).aggregate
        row = {
            "data": name,
            "prob_floor": floor,
            "head_policy": head,
            "ones_count": n,
            "auroc": round(agg["auroc"]["mean"], 3),
            "auroc_std": round(agg["auroc"]["std"], 3),
            "softmax_auroc": round(agg["softmax_auroc"]["mean"], 3),
            "seconds": round(time.perf_counter() - start),
        }
        print(json.dumps(row), flush=True)


if __name__ == "__main__":
    main()
