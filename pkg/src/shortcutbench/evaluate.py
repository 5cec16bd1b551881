"""Metrics and the evaluation protocol over the three test distributions."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .data import Dataset, SplitBundle
from .model import Model

DISTRIBUTIONS = ("validation", "inverted", "balanced")


class UndefinedMetricError(ValueError):
    pass


def accuracy(pred, true) -> float:
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    if true.size == 0:
        raise UndefinedMetricError("accuracy of an empty set")
    return 100.0 * float(np.mean(pred == true))


def auroc(scores, labels) -> float:
    """P(score of a random positive > score of a random negative), ties count 1/2.

    Computed from midranks (Mann-Whitney U), which equals trapezoidal
    integration of the ROC curve.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        ranks[i:j + 1] = 0.5 * (i + j) + 1.0
        i = j + 1
    r = np.empty_like(ranks)
    r[order] = ranks
    u = r[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_bruteforce(scores, labels) -> float:
    """Pair-counting reference for :func:`auroc`."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    wins = 0.0
    for p in pos:
        for q in neg:
            wins += 1.0 if p > q else 0.5 if p == q else 0.0
    return wins / (pos.size * neg.size)


def knn_predict(ref: np.ndarray, ref_labels: np.ndarray, query: np.ndarray, k: int = 30) -> np.ndarray:
    """Majority vote of the ``k`` Euclidean-nearest reference points.

    Neighbour ranks are resolved by (distance, reference label, reference
    coordinates) so the vote does not depend on the order of the reference
    set. Tied votes go to label 0.
    """
    ref = np.asarray(ref, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    ref_labels = np.asarray(ref_labels).astype(int)
    if ref.ndim == 1:
        ref, query = ref[:, None], query[:, None]
    if k > len(ref):
        raise ValueError(f"k={k} exceeds the reference set size {len(ref)}")
    # canonical reference order makes distance ties order-independent
    canon = np.lexsort((*ref.T[::-1], ref_labels))
    ref, ref_labels = ref[canon], ref_labels[canon]
    d2 = ((query[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    votes = ref_labels[nearest].sum(axis=1)
    return (votes * 2 > k).astype(int)


def knn_confusion(ref_z1, ref_z2, ref_y1, ref_y2, test_z1, test_z2, test_y1, test_y2,
                  k: int = 30) -> np.ndarray:
    """2 x 2 kNN accuracies: rows are labels (y1, y2), columns subspaces (z1, z2).

    ``ref_z2``/``test_z2`` may be None (shared latent); that column is NaN.
    """
    out = np.full((2, 2), np.nan)
    refs = (ref_z1, ref_z2)
    tests = (test_z1, test_z2)
    ref_y = (ref_y1, ref_y2)
    test_y = (test_y1, test_y2)
    for col in range(2):
        if refs[col] is None:
            continue
        for row in range(2):
            pred = knn_predict(refs[col], ref_y[row], tests[col], k)
            out[row, col] = accuracy(pred, np.asarray(test_y[row]).astype(int))
    return out


@dataclass
class Latents:
    z1: np.ndarray
    z2: np.ndarray | None
    p1: np.ndarray  # softmax probability of class 1 for each head
    p2: np.ndarray | None


def _softmax1(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def embed(model: Model, ds: Dataset) -> Latents:
    """Latents and head probabilities for a dataset (no tape recorded)."""
    x = nx.Tensor(ds.flat)
    if model.spec.mode == "shared":
        z = model.latent(x)
        return Latents(z.data.copy(), None, _softmax1(model.head_logits(1, z).data), None)
    code = model.encode(x)
    return Latents(code.z1.data.copy(), code.z2.data.copy(),
                   _softmax1(model.head_logits(1, code.z1).data),
                   _softmax1(model.head_logits(2, code.z2).data))


@dataclass
class MetricRow:
    method: str
    fold: int
    distribution: str
    target: str  # "y1" or "y2"
    accuracy: float
    auroc: float


@dataclass
class FoldEvaluation:
    rows: list[MetricRow]
    knn: np.ndarray


def evaluate_method(model: Model, bundle: SplitBundle, reference: Dataset, method: str, fold: int,
                    knn_k: int = 30, with_auroc: bool = True) -> FoldEvaluation:
    """Head accuracy/AUROC on each distribution plus the balanced kNN matrix.

    Shared-latent (adversarial) models yield y1 rows only and a kNN matrix
    whose z2 column is NaN.
    """
    rows = []
    for dist in DISTRIBUTIONS:
        ds = getattr(bundle, dist)
        lat = embed(model, ds)
        heads = [("y1", lat.p1, ds.y1)]
        if lat.p2 is not None:
            heads.append(("y2", lat.p2, ds.y2))
        for target, prob, y in heads:
            try:
                acc = accuracy((prob > 0.5).astype(int), y.astype(int))
                auc = auroc(prob, y) if with_auroc else float("nan")
            except ValueError as exc:
                raise type(exc)(f"{dist}/{target}: {exc}") from None
            rows.append(MetricRow(method, fold, dist, target, acc, auc))
    ref = embed(model, reference)
    bal = embed(model, bundle.balanced)
    knn = knn_confusion(ref.z1, ref.z2, reference.y1, reference.y2,
                        bal.z1, bal.z2, bundle.balanced.y1, bundle.balanced.y2, knn_k)
    return FoldEvaluation(rows, knn)


@dataclass
class MetricsReport:
    rows: list[MetricRow] = field(default_factory=list)
    knn: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)
    methods: list[str] = field(default_factory=list)

    def add(self, ev: FoldEvaluation, method: str, fold: int) -> None:
        if method not in self.methods:
            self.methods.append(method)
        self.rows.extend(ev.rows)
        self.knn[(method, fold)] = ev.knn

    def folds(self, method: str) -> list[int]:
        return sorted({f for (m, f) in self.knn if m == method})

    def mean(self, method: str, distribution: str, target: str, metric: str = "accuracy") -> float:
        vals = [getattr(r, metric) for r in self.rows
                if r.method == method and r.distribution == distribution and r.target == target]
        if not vals:
            return float("nan")
        return float(np.mean(np.asarray(vals, dtype=np.float64)))

    def knn_mean(self, method: str) -> np.ndarray:
        mats = [m for (name, _), m in sorted(self.knn.items()) if name == method]
        return np.mean(mats, axis=0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "fold", "distribution", "target", "accuracy", "auroc"])
        for r in self.rows:
            w.writerow([r.method, r.fold, r.distribution, r.target, repr(r.accuracy), repr(r.auroc)])
        for (method, fold), mat in sorted(self.knn.items()):
            for i, label in enumerate(("y1", "y2")):
                for j, sub in enumerate(("z1", "z2")):
                    if not np.isnan(mat[i, j]):
                        w.writerow([method, fold, f"knn_{sub}", label, repr(float(mat[i, j])), ""])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        rep = cls()
        for rec in csv.DictReader(io.StringIO(text)):
            method, fold = rec["method"], int(rec["fold"])
            if method not in rep.methods:
                rep.methods.append(method)
            if rec["distribution"].startswith("knn_"):
                mat = rep.knn.setdefault((method, fold), np.full((2, 2), np.nan))
                col = 0 if rec["distribution"] == "knn_z1" else 1
                mat[0 if rec["target"] == "y1" else 1, col] = float(rec["accuracy"])
            else:
                rep.rows.append(MetricRow(method, fold, rec["distribution"], rec["target"],
                                          float(rec["accuracy"]), float(rec["auroc"])))
        return rep

    def summary(self) -> dict:
        out = {}
        for method in self.methods:
            entry = {"folds": self.folds(method), "accuracy": {}, "auroc": {}, "knn": {}}
            for dist in DISTRIBUTIONS:
                for target in ("y1", "y2"):
                    acc = self.mean(method, dist, target)
                    if not np.isnan(acc):
                        entry["accuracy"][f"{dist}/{target}"] = acc
                        entry["auroc"][f"{dist}/{target}"] = self.mean(method, dist, target, "auroc")
            mat = self.knn_mean(method)
            for i, label in enumerate(("y1", "y2")):
                for j, sub in enumerate(("z1", "z2")):
                    if not np.isnan(mat[i, j]):
                        entry["knn"][f"{label}/{sub}"] = float(mat[i, j])
            out[method] = entry
        return out


def export_embeddings(model: Model, ds: Dataset, path, split: str | None = None) -> int:
    """Write id, latent coordinates, labels and split tag as CSV; returns the row count."""
    x = nx.Tensor(ds.flat)
    code = model.encode(x)
    z1, z2 = code.z1.data, code.z2.data
    header = (["id"] + [f"z1_{i}" for i in range(z1.shape[1])]
              + [f"z2_{i}" for i in range(z2.shape[1])] + ["y1", "y2", "split"])
    tag = split or ds.name
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(ds)):
            w.writerow([int(ds.ids[i]), *(repr(float(v)) for v in z1[i]), *(repr(float(v)) for v in z2[i]),
                        int(ds.y1[i]), int(ds.y2[i]), tag])
    return len(ds)
