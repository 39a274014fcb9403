"""Accuracy reports and the clustering pipeline that turns embeddings into confounder strata."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError

REPORT_VERSION = 1


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows = truth, columns = prediction
    per_class_acc: np.ndarray
    mean_acc: float
    empty_classes: list[int] = field(default_factory=list)
    fold_id: int | None = None
    split: str = "test"
    meta: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.confusion.shape[0]

    def validate(self) -> None:
        cm = np.asarray(self.confusion)
        if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or (cm < 0).any():
            raise FormatError("confusion must be a square non-negative count matrix")
        rows = cm.sum(axis=1)
        expect = np.where(rows > 0, np.diag(cm) / np.maximum(rows, 1), 0.0)
        if not np.allclose(self.per_class_acc, expect, rtol=0, atol=1e-12):
            raise FormatError("per-class accuracy disagrees with the confusion matrix")
        nonempty = rows > 0
        mean = float(expect[nonempty].mean()) if nonempty.any() else 0.0
        if abs(mean - self.mean_acc) > 1e-12:
            raise FormatError("mean accuracy is not the unweighted per-class mean")
        if sorted(self.empty_classes) != np.flatnonzero(~nonempty).tolist():
            raise FormatError("empty-class flags disagree with the confusion matrix")

    def to_dict(self) -> dict:
        return {
            "format": "iernlab-report",
            "format_version": REPORT_VERSION,
            "confusion": np.asarray(self.confusion).tolist(),
            "per_class_acc": np.asarray(self.per_class_acc).tolist(),
            "mean_acc": self.mean_acc,
            "empty_classes": list(self.empty_classes),
            "fold_id": self.fold_id,
            "split": self.split,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("format") != "iernlab-report" or d.get("format_version") != REPORT_VERSION:
            raise FormatError("unsupported report format")
        r = cls(
            np.asarray(d["confusion"], dtype=np.int64),
            np.asarray(d["per_class_acc"], dtype=np.float64),
            float(d["mean_acc"]),
            list(d.get("empty_classes", [])),
            d.get("fold_id"),
            d.get("split", "test"),
            d.get("meta", {}),
        )
        r.validate()
        return r

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc


def confusion(preds: Sequence[int], labels: Sequence[int], n_classes: int, fold_id: int | None = None, split: str = "test") -> EvalReport:
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise ContractError(f"{len(preds)} predictions for {len(labels)} labels")
    for name, arr in (("label", labels), ("prediction", preds)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ContractError(f"{name} out of range [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    rows = cm.sum(axis=1)
    nonempty = rows > 0
    per_class = np.where(nonempty, np.diag(cm) / np.maximum(rows, 1), 0.0)
    mean = float(per_class[nonempty].mean()) if nonempty.any() else 0.0
    return EvalReport(cm, per_class, mean, np.flatnonzero(~nonempty).tolist(), fold_id, split)


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    objective_trace: list[float]

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def kmeans(points, k: int, seed: int = 0, max_iters: int = 100) -> KMeansResult:
    """Lloyd's algorithm seeded with ``k`` distinct points drawn without replacement.

    ``objective_trace[0]`` is the objective of the initial assignment; one entry
    follows per center update.  A center that loses all its points stays put.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    distinct = np.unique(pts, axis=0)
    if k < 1 or k > len(distinct):
        raise ConfigurationError(f"k={k} but only {len(distinct)} distinct points")
    rng = np.random.default_rng(seed)
    centers = distinct[np.sort(rng.choice(len(distinct), size=k, replace=False))].copy()
    d = _sq_dists(pts, centers)
    labels = np.argmin(d, axis=1)
    trace = [float(d[np.arange(len(pts)), labels].sum())]
    for _ in range(max_iters):
        for j in range(k):
            members = pts[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
        d = _sq_dists(pts, centers)
        new = np.argmin(d, axis=1)
        trace.append(float(d[np.arange(len(pts)), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(labels, centers, trace)


# ---------------------------------------------------------------------------
# Cluster importance and strata


def importance_score(cluster_counts) -> np.ndarray:
    """I(c) = P(c) * sum_e P(e|c) log P(e|c), natural log, 0 log 0 = 0.

    ``cluster_counts`` is a (clusters x emotions) count matrix.
    """
    counts = np.asarray(cluster_counts, dtype=np.float64)
    if counts.ndim != 2 or (counts < 0).any():
        raise ContractError("cluster_counts must be a non-negative (clusters x emotions) matrix")
    totals = counts.sum(axis=1)
    grand = totals.sum()
    if grand <= 0:
        raise ContractError("no items to score")
    prior = totals / grand
    scores = np.zeros(len(counts))
    for c in range(len(counts)):
        if totals[c] == 0:
            continue
        s = 0.0
        for n in counts[c]:
            if n > 0:
                p = n / totals[c]
                s += p * math.log(p)
        scores[c] = prior[c] * s
    return scores


@dataclass
class StratumAssignment:
    cluster_labels: np.ndarray
    importance: np.ndarray
    selected: list[int]  # important clusters, in rank order
    fallback_groups: list[str]
    strata: np.ndarray  # final stratum per item
    stratum_names: list[str]

    @property
    def n_strata(self) -> int:
        return len(self.stratum_names)


def build_strata(
    embeddings,
    emotion_labels,
    k: int,
    M: int,
    fallback_classifier: Callable[[np.ndarray], str],
    fallback_groups: Sequence[str] | None = None,
    seed: int = 0,
    descending: bool = True,
    n_emotions: int | None = None,
) -> StratumAssignment:
    """Cluster, rank clusters by importance, keep the top ``M`` and pool the rest into fallback groups.

    ``fallback_classifier`` maps a cluster center to a group name.  When
    ``fallback_groups`` is given, those groups are always emitted (possibly
    empty) so the stratum count is fixed; otherwise groups appear as used.
    ``descending`` ranks by I(c) from high to low.
    """
    if M > k:
        raise ConfigurationError(f"M={M} exceeds k={k}")
    emb = np.asarray(embeddings, dtype=np.float64)
    labels_e = np.asarray(emotion_labels, dtype=np.int64)
    if len(emb) != len(labels_e):
        raise ContractError("one emotion label per embedding required")
    km = kmeans(emb, k, seed=seed)
    n_e = n_emotions or int(labels_e.max()) + 1
    counts = np.zeros((k, n_e))
    np.add.at(counts, (km.labels, labels_e), 1)
    scores = importance_score(counts)
    order = sorted(range(k), key=lambda c: (-scores[c] if descending else scores[c], c))
    selected = order[:M]
    rest = order[M:]
    groups = {c: str(fallback_classifier(km.centers[c])) for c in rest}
    names = list(fallback_groups) if fallback_groups is not None else sorted(set(groups.values()))
    unknown = set(groups.values()) - set(names)
    if unknown:
        raise ConfigurationError(f"fallback classifier produced undeclared groups {sorted(unknown)}")
    stratum_names = [f"cluster{c}" for c in selected] + names if rest else [f"cluster{c}" for c in selected]
    stratum_of = {c: i for i, c in enumerate(selected)}
    for c, g in groups.items():
        stratum_of[c] = M + names.index(g)
    strata = np.array([stratum_of[c] for c in km.labels], dtype=np.int64)
    return StratumAssignment(km.labels, scores, selected, names if rest else [], strata, stratum_names)


def fold_average(reports: Sequence[EvalReport]) -> dict:
    """Across-report mean and standard deviation of per-class and mean accuracy."""
    if not reports:
        raise ContractError("no reports to average")
    per = np.stack([r.per_class_acc for r in reports])
    means = np.array([r.mean_acc for r in reports])
    return {
        "per_class_mean": per.mean(axis=0).tolist(),
        "per_class_std": per.std(axis=0).tolist(),
        "mean_acc": float(means.mean()),
        "mean_acc_std": float(means.std()),
        "n": len(reports),
    }
