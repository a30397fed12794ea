"""AUROC computation, score/embedding exports, and report emission.

AUROC follows the Mann-Whitney formulation (probability that a random
abnormal sample outscores a random normal one, ties counted half) computed
through midranks in O(n log n). Score histograms are written as CSV plus a
rendered PNG; reports are JSON without timestamps so identical runs emit
identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import matplotlib
import numpy as np
from scipy.stats import rankdata

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from .data import FewShotSplit, load_image
from .density import (
    DensityModel,
    ScoreRecord,
    knn_score,
    load_scorer,
    percentile_normalize,
    score_images,
)
from .encoder import OnlineNetwork, TargetNetwork, embed, load_checkpoint
from .errors import ConfigError, DataError


def auroc(scores_abnormal: Sequence[float], scores_normal: Sequence[float]) -> float:
    """Probability a random abnormal sample outscores a random normal one."""
    ab = np.asarray(list(scores_abnormal), dtype=np.float64)
    nm = np.asarray(list(scores_normal), dtype=np.float64)
    if ab.size == 0 or nm.size == 0:
        raise DataError("auroc requires at least one score in each class")
    ranks = rankdata(np.concatenate([ab, nm]))
    u = ranks[: ab.size].sum() - ab.size * (ab.size + 1) / 2.0
    return float(u / (ab.size * nm.size))


@dataclass
class EvalReport:
    auroc: float
    n_normal: int
    n_abnormal: int
    score_stats: dict
    split_hash: str
    config_echo: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        return EvalReport(**json.loads(text))


def _class_stats(scores: np.ndarray) -> dict:
    return {
        "mean": float(scores.mean()),
        "std": float(scores.std()),
        "min": float(scores.min()),
        "max": float(scores.max()),
        "median": float(np.median(scores)),
    }


def split_hash(split: FewShotSplit) -> str:
    payload = {
        "protocol": split.protocol,
        "seed": split.seed,
        "train_ids": split.train_ids,
        "test_normal_ids": split.test_normal_ids,
        "test_abnormal_ids": split.test_abnormal_ids,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def export_score_distribution(
    records: Sequence[ScoreRecord],
    labels: Sequence[str],
    out_csv: str | Path,
    out_png: str | Path,
    bins: int = 30,
) -> tuple[Path, Path]:
    """Per-class histograms over shared bin edges, as CSV and a rendered figure."""
    scores = np.array([r.raw_score for r in records], dtype=np.float64)
    labels = list(labels)
    normal = scores[[l == "normal" for l in labels]]
    abnormal = scores[[l == "abnormal" for l in labels]]
    if normal.size == 0 or abnormal.size == 0:
        raise DataError("score distribution export needs at least one record per class")

    edges = np.histogram_bin_edges(scores, bins=bins)
    counts_n, _ = np.histogram(normal, bins=edges)
    counts_a, _ = np.histogram(abnormal, bins=edges)

    out_csv, out_png = Path(out_csv), Path(out_png)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count_normal", "count_abnormal"])
        for left, right, cn, ca in zip(edges[:-1], edges[1:], counts_n, counts_a):
            writer.writerow([repr(float(left)), repr(float(right)), int(cn), int(ca)])

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.stairs(counts_n, edges, fill=True, alpha=0.55, label="normal")
    ax.stairs(counts_a, edges, fill=True, alpha=0.55, label="abnormal")
    ax.set_xlabel("anomaly score")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return out_csv, out_png


def export_embeddings(
    net: OnlineNetwork | TargetNetwork,
    images: Sequence[torch.Tensor],
    labels: Sequence[str],
    out_csv: str | Path,
) -> Path:
    """Backbone embeddings with labels, one row per image, D+1 columns."""
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    vectors = embed(net, torch.stack(list(images)), depth="backbone").vectors.double().numpy()
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(vectors.shape[1])] + ["label"])
        for row, label in zip(vectors, labels):
            writer.writerow([repr(float(v)) for v in row] + [label])
    return out_csv


def _resolve(split_root: str | None, data_root: str | Path | None, sample_id: str) -> Path:
    path = Path(sample_id)
    if path.is_absolute():
        return path
    root = Path(data_root) if data_root is not None else Path(split_root or ".")
    return root / path


def write_scores_csv(records: Sequence[ScoreRecord], labels: Sequence[str] | None, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if labels is None:
            writer.writerow(["id", "raw_score", "percentile"])
            for r in records:
                writer.writerow([r.sample_id, repr(r.raw_score), repr(r.percentile)])
        else:
            writer.writerow(["id", "label", "raw_score", "percentile"])
            for r, label in zip(records, labels):
                writer.writerow([r.sample_id, label, repr(r.raw_score), repr(r.percentile)])
    return path


def evaluate(
    checkpoint_path: str | Path,
    density_path: str | Path,
    split: FewShotSplit,
    out_dir: str | Path,
    data_root: str | Path | None = None,
    bins: int = 30,
    write_embeddings: bool = True,
) -> EvalReport:
    """Score the test split and emit report.json, scores.csv, hist.csv/png.

    The density model must match the checkpoint's feature width; test images
    are scored without augmentation.
    """
    online, meta = load_checkpoint(checkpoint_path)
    scorer = load_scorer(density_path)
    feature_dim = online.config.feature_dim
    if isinstance(scorer, DensityModel):
        if scorer.dim != feature_dim:
            raise ConfigError(f"density model dim {scorer.dim} incompatible with encoder feature_dim {feature_dim}")
    else:
        reference, k_nn = scorer
        if reference.shape[1] != feature_dim:
            raise ConfigError(
                f"knn reference dim {reference.shape[1]} incompatible with encoder feature_dim {feature_dim}"
            )

    ids = list(split.test_normal_ids) + list(split.test_abnormal_ids)
    labels = ["normal"] * len(split.test_normal_ids) + ["abnormal"] * len(split.test_abnormal_ids)
    if not split.test_normal_ids or not split.test_abnormal_ids:
        raise DataError("evaluation requires both normal and abnormal test samples")
    images = [load_image(_resolve(split.root, data_root, i), online.config.input_size) for i in ids]

    if isinstance(scorer, DensityModel):
        records = score_images(scorer, online, images, ids)
    else:
        matrix = embed(online, torch.stack(images), depth="backbone").vectors.double().numpy()
        records = [ScoreRecord(sample_id=i, raw_score=knn_score(reference, row, k_nn)) for i, row in zip(ids, matrix)]

    for record, pct in zip(records, percentile_normalize([r.raw_score for r in records])):
        record.percentile = float(pct)

    scores = np.array([r.raw_score for r in records])
    normal_scores = scores[: len(split.test_normal_ids)]
    abnormal_scores = scores[len(split.test_normal_ids) :]
    report = EvalReport(
        auroc=auroc(abnormal_scores, normal_scores),
        n_normal=int(normal_scores.size),
        n_abnormal=int(abnormal_scores.size),
        score_stats={"normal": _class_stats(normal_scores), "abnormal": _class_stats(abnormal_scores)},
        split_hash=split_hash(split),
        config_echo={
            "checkpoint_config_hash": meta.get("config_hash", ""),
            "scorer": "gaussian" if isinstance(scorer, DensityModel) else "knn",
        },
    )

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    write_scores_csv(records, labels, out_dir / "scores.csv")
    export_score_distribution(records, labels, out_dir / "hist.csv", out_dir / "hist.png", bins=bins)
    if write_embeddings:
        export_embeddings(online, images, labels, out_dir / "embeddings.csv")
    return report
