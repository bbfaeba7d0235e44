"""Open-set inference and evaluation metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .errors import InvalidParameterError, UndefinedMetricError

UNKNOWN = -1
REPORT_KEYS = ("accuracy", "auc_seed", "auc_architecture", "auc_dataset", "auc_all", "oscr_all")


@dataclass(frozen=True)
class PredictionRecord:
    scores: np.ndarray
    true_label: int = UNKNOWN
    unseen_type: str = "none"

    @property
    def confidence(self) -> float:
        return float(np.max(self.scores))

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.scores))

    @property
    def is_open(self) -> bool:
        return self.true_label == UNKNOWN


def softmax_scores(task, images, batch_size=256) -> np.ndarray:
    """Softmax outputs of the classification head, model in eval mode."""
    task.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.as_tensor(images[i : i + batch_size], dtype=torch.float32)
            out.append(torch.softmax(task.logits(x).double(), -1).numpy())
    return np.concatenate(out) if out else np.zeros((0, task.num_classes))


def make_records(scores, true_labels, unseen_types=None) -> list[PredictionRecord]:
    unseen_types = unseen_types if unseen_types is not None else ["none"] * len(scores)
    return [PredictionRecord(np.asarray(s), int(t), u) for s, t, u in zip(scores, true_labels, unseen_types)]


def decide(scores, theta: float) -> int:
    """Known class index if the top score reaches theta, else UNKNOWN."""
    if not 0.0 <= theta <= 1.0:
        raise InvalidParameterError(f"theta must lie in [0, 1], got {theta}")
    scores = np.asarray(scores)
    return int(np.argmax(scores)) if np.max(scores) >= theta else UNKNOWN


def predict(task, x, theta: float) -> int:
    if not 0.0 <= theta <= 1.0:
        raise InvalidParameterError(f"theta must lie in [0, 1], got {theta}")
    x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    return decide(softmax_scores(task, x[None] if x.dim() == 3 else x)[0], theta)


def closed_set_accuracy(records) -> float:
    if not records:
        raise UndefinedMetricError("accuracy of an empty record set")
    if any(r.is_open for r in records):
        raise InvalidParameterError("closed-set accuracy needs known true labels")
    return float(np.mean([r.predicted == r.true_label for r in records]))


def auc_known_unknown(confidences_closed, confidences_open) -> float:
    """P(closed > open) + 0.5 P(tie), by rank sums."""
    c = np.asarray(confidences_closed, dtype=np.float64).ravel()
    o = np.asarray(confidences_open, dtype=np.float64).ravel()
    if len(c) == 0 or len(o) == 0:
        raise UndefinedMetricError("AUC needs non-empty closed and open sets")
    ranks = rankdata(np.concatenate([c, o]))
    n1, n2 = len(c), len(o)
    u = ranks[:n1].sum() - n1 * (n1 + 1) / 2
    return float(u / (n1 * n2))


def ccr_fpr_curve(records_closed, records_open):
    """(thresholds, ccr, fpr) at every observed confidence plus 0 and 1."""
    if not records_closed or not records_open:
        raise UndefinedMetricError("OSCR needs non-empty closed and open sets")
    cc = np.array([r.confidence for r in records_closed])
    ok = np.array([r.predicted == r.true_label for r in records_closed])
    oc = np.array([r.confidence for r in records_open])
    thresholds = np.unique(np.concatenate([cc, oc, [0.0, 1.0]]))
    # counts of scores >= t via sorted search
    cc_ok = np.sort(cc[ok])
    oc_s = np.sort(oc)
    ccr = (len(cc_ok) - np.searchsorted(cc_ok, thresholds, side="left")) / len(cc)
    fpr = (len(oc_s) - np.searchsorted(oc_s, thresholds, side="left")) / len(oc)
    return thresholds, ccr, fpr


def oscr(records_closed, records_open) -> float:
    """Area under CCR versus FPR as the rejection threshold sweeps upward."""
    _, ccr, fpr = ccr_fpr_curve(records_closed, records_open)
    ccr = np.append(ccr, 0.0)
    fpr = np.append(fpr, 0.0)
    return float(np.sum((fpr[:-1] - fpr[1:]) * (ccr[:-1] + ccr[1:]) / 2))


def embeddings(task, images, batch_size=256, normalized=True) -> np.ndarray:
    task.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            z = task.embed(torch.as_tensor(images[i : i + batch_size], dtype=torch.float32))
            out.append((torch.nn.functional.normalize(z, dim=-1) if normalized else z).double().numpy())
    return np.concatenate(out)


def pool_centroid_similarity(task, pool, images, quantize=True) -> float:
    """Mean pairwise cosine between the embedding centroids of each
    augmentation model's output corpus.

    Centroids are taken over the displacement of each augmented image's unit
    embedding from its source image's, so content shared by every corpus
    cancels and only the trace each model adds remains.
    """
    members = list(pool)
    if len(members) < 2:
        raise UndefinedMetricError("need at least two augmentation models")
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    ref = embeddings(task, x)
    cents = []
    for m in members:
        with torch.no_grad():
            y = m(x).clamp(0.0, 1.0)
        if quantize:
            y = torch.round(y * 255.0) / 255.0
        cents.append((embeddings(task, y) - ref).mean(0))
    c = np.array(cents)
    norms = np.linalg.norm(c, axis=1)
    if np.any(norms == 0):
        raise UndefinedMetricError("an augmentation model leaves every embedding unchanged")
    c = c / norms[:, None]
    sim = c @ c.T
    iu = np.triu_indices(len(c), 1)
    return float(sim[iu].mean())


# Clustering -----------------------------------------------------------------------


def kmeans(features, k: int, seed: int = 0, max_iter: int = 100):
    """Lloyd's algorithm from a seeded farthest-point initialization."""
    x = np.asarray(features, dtype=np.float64)
    if k < 2:
        raise InvalidParameterError("k must be at least 2")
    if k > len(x):
        raise InvalidParameterError(f"k={k} exceeds the number of samples {len(x)}")
    rng = np.random.default_rng(seed)
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        centers.append(x[int(np.argmax(d2))])
        d2 = np.minimum(d2, ((x - centers[-1]) ** 2).sum(1))
    centers = np.array(centers)
    labels = None
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        new = dist.argmin(1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(0)
    return labels, centers


def contingency_table(true_labels, clusters) -> np.ndarray:
    _, ti = np.unique(np.asarray(true_labels), return_inverse=True)
    _, ci = np.unique(np.asarray(clusters), return_inverse=True)
    table = np.zeros((ti.max() + 1, ci.max() + 1), dtype=np.int64)
    np.add.at(table, (ti, ci), 1)
    return table


def _comb2(a):
    a = np.asarray(a, dtype=np.float64)
    return a * (a - 1) / 2


def clustering_scores(true_labels, clusters):
    """(purity, NMI, ARI) of a clustering against reference labels.

    NMI uses the arithmetic mean of the two entropies.
    """
    t = contingency_table(true_labels, clusters)
    n = t.sum()
    purity = t.max(0).sum() / n
    pi = t.sum(1) / n
    pj = t.sum(0) / n
    nz = t > 0
    pij = t / n
    mi = np.sum(pij[nz] * np.log(pij[nz] / np.outer(pi, pj)[nz]))
    h_true = -np.sum(pi * np.log(pi))
    h_clus = -np.sum(pj * np.log(pj))
    denom = (h_true + h_clus) / 2
    nmi = 1.0 if denom == 0 else mi / denom
    index = _comb2(t).sum()
    a = _comb2(t.sum(1)).sum()
    b = _comb2(t.sum(0)).sum()
    expected = a * b / _comb2(n)
    max_index = (a + b) / 2
    ari = 1.0 if max_index == expected else (index - expected) / (max_index - expected)
    return float(purity), float(nmi), float(ari)


def cluster_metrics(features, true_labels, k: int, seed: int = 0):
    labels, _ = kmeans(features, k, seed=seed)
    return clustering_scores(true_labels, labels)


# Histograms and reports -------------------------------------------------------------


def confidence_histogram(records, bins: int = 10) -> dict:
    """Confidence counts per group: closed, open and each unseen type."""
    if bins < 2:
        raise InvalidParameterError("bins must be at least 2")
    edges = np.linspace(0.0, 1.0, bins + 1)
    groups = {"closed": [r for r in records if not r.is_open], "open": [r for r in records if r.is_open]}
    for t in sorted({r.unseen_type for r in records if r.is_open}):
        groups[t] = [r for r in records if r.is_open and r.unseen_type == t]
    out = {}
    for name, recs in groups.items():
        conf = np.clip([r.confidence for r in recs], 0.0, 1.0)
        counts, _ = np.histogram(conf, bins=edges)
        out[name] = counts.astype(int).tolist()
    return {"edges": edges.tolist(), "counts": out}


def write_histogram_csv(hist, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    edges = hist["edges"]
    for name, counts in hist["counts"].items():
        path = directory / f"confidence_hist_{name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_low", "bin_high", "count"])
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([f"{lo:.6g}", f"{hi:.6g}", c])
        paths.append(path)
    return paths


@dataclass
class MetricsReport:
    accuracy: float
    auc_by_type: dict
    auc_all: float
    oscr_all: float
    confusion: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "auc_seed": self.auc_by_type.get("seed"),
            "auc_architecture": self.auc_by_type.get("architecture"),
            "auc_dataset": self.auc_by_type.get("dataset"),
            "auc_all": self.auc_all,
            "oscr_all": self.oscr_all,
        }

    def to_json(self) -> str:
        return json.dumps({k: _round(v) for k, v in self.as_dict().items()}, indent=2, sort_keys=False) + "\n"


def _round(v):
    # fixed precision keeps the serialized report stable across platforms
    return None if v is None else round(float(v), 10)


def metrics_report(records, num_classes=None) -> MetricsReport:
    closed = [r for r in records if not r.is_open]
    opened = [r for r in records if r.is_open]
    cc = [r.confidence for r in closed]
    auc_by_type = {}
    for t in ("seed", "architecture", "dataset"):
        group = [r.confidence for r in opened if r.unseen_type == t]
        if group:
            auc_by_type[t] = auc_known_unknown(cc, group)
    k = num_classes or (max(r.true_label for r in closed) + 1)
    confusion = np.zeros((k, k), dtype=int)
    for r in closed:
        confusion[r.true_label, r.predicted] += 1
    return MetricsReport(
        accuracy=closed_set_accuracy(closed),
        auc_by_type=auc_by_type,
        auc_all=auc_known_unknown(cc, [r.confidence for r in opened]),
        oscr_all=oscr(closed, opened),
        confusion=confusion.tolist(),
    )


def accuracy_vs_theta(records, thetas) -> list[dict]:
    """Open-set decision quality over a grid of thresholds.

    ``closed_acc``: closed records accepted with the right class;
    ``open_reject``: open records rejected as unknown.
    """
    closed = [r for r in records if not r.is_open]
    opened = [r for r in records if r.is_open]
    rows = []
    for t in thetas:
        ca = np.mean([decide(r.scores, t) == r.true_label for r in closed]) if closed else float("nan")
        orj = np.mean([decide(r.scores, t) == UNKNOWN for r in opened]) if opened else float("nan")
        rows.append({"theta": float(t), "closed_acc": float(ca), "open_reject": float(orj)})
    return rows
