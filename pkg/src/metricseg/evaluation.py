"""Instance segmentation scoring: IoU, greedy matching and average precision.

AP at one IoU threshold follows the usual benchmark recipe: predictions of a
class are ranked by confidence, each takes the best still-unmatched ground
truth of the same class and scene if the IoU clears the threshold, and AP is
sum_n (R_n - R_{n-1}) * P_n over the ranked list. The summary AP averages ten
thresholds 0.50, 0.55, ..., 0.95; classes absent from the ground truth are
left out of every mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from metricseg.errors import ValidationError
from metricseg.geometry import PointCloud, write_point_cloud
from metricseg.loss import InstancePartition, instance_means

THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class Instance:
    """A set of point indices in one scene. Ground truth ignores ``confidence``."""

    points: np.ndarray
    semantic: int
    confidence: float = 1.0
    scene: str = ""

    def __post_init__(self):
        self.points = np.unique(np.asarray(self.points, dtype=np.int64))
        if len(self.points) == 0:
            raise ValidationError("instance with no points")
        if not np.isfinite(self.confidence):
            raise ValidationError("non-finite confidence")


PredictedInstance = Instance


def iou(a, b):
    a = np.unique(np.asarray(list(a) if isinstance(a, (set, frozenset)) else a))
    b = np.unique(np.asarray(list(b) if isinstance(b, (set, frozenset)) else b))
    inter = len(np.intersect1d(a, b, assume_unique=True))
    return inter / (len(a) + len(b) - inter)


def _iou_table(preds, gts):
    table = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            if p.scene == g.scene:
                inter = len(np.intersect1d(p.points, g.points, assume_unique=True))
                if inter:
                    table[i, j] = inter / (len(p.points) + len(g.points) - inter)
    return table


def _ap_from_table(pred_conf, table, tau):
    """AP for one class given confidences and the pred x gt IoU table."""
    n_gt = table.shape[1]
    if len(pred_conf) == 0:
        return 0.0, 0
    order = np.argsort(-np.asarray(pred_conf), kind="stable")
    taken = np.zeros(n_gt, dtype=bool)
    hits = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        row = np.where(taken, -1.0, table[i])
        j = int(np.argmax(row))  # first index wins ties
        if row[j] >= tau:
            taken[j] = True
            hits[rank] = True
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(order) + 1)
    recall = tp / n_gt
    ap = float(np.sum(np.diff(np.concatenate([[0.0], recall])) * precision))
    return ap, int(tp[-1])


def ap_at_threshold(preds, gts, cls, tau):
    """AP for class ``cls`` at IoU threshold ``tau``; None if the class has no ground truth."""
    if not 0.0 < tau <= 1.0:
        raise ValidationError(f"IoU threshold must be in (0, 1], got {tau}")
    p = [x for x in preds if x.semantic == cls]
    g = [x for x in gts if x.semantic == cls]
    if not g:
        return None
    return _ap_from_table([x.confidence for x in p], _iou_table(p, g), tau)[0]


@dataclass
class APReport:
    thresholds: tuple
    per_class: dict  # class -> array of AP per threshold
    n_gt: dict = field(default_factory=dict)
    n_pred: dict = field(default_factory=dict)
    n_matched: dict = field(default_factory=dict)  # at the first threshold

    @property
    def classes(self):
        return sorted(self.per_class)

    def class_mean(self, cls):
        return float(np.mean(self.per_class[cls]))

    def overall_at(self, tau):
        k = self.thresholds.index(round(tau, 2))
        if not self.per_class:
            return 0.0
        return float(np.mean([self.per_class[c][k] for c in self.classes]))

    @property
    def overall(self):
        if not self.per_class:
            return 0.0
        return float(np.mean([self.class_mean(c) for c in self.classes]))

    def table(self, class_names=None):
        """Fixed-width text: class, AP at each threshold, mean; last row 'overall'."""
        names = class_names or {}
        head = ["class"] + [f"AP@{t:.2f}" for t in self.thresholds] + ["mean"]
        lines = ["  ".join(f"{h:>9}" for h in head)]
        for c in self.classes:
            vals = [f"{v:9.4f}" for v in self.per_class[c]] + [f"{self.class_mean(c):9.4f}"]
            lines.append("  ".join([f"{names.get(c, str(c)):>9}"] + vals))
        vals = [f"{self.overall_at(t):9.4f}" for t in self.thresholds] + [f"{self.overall:9.4f}"]
        lines.append("  ".join([f"{'overall':>9}"] + vals))
        return "\n".join(lines) + "\n"

    def key_values(self):
        """Flat ``key=value`` lines, sorted keys."""
        kv = {"ap.overall": self.overall}
        for t in self.thresholds:
            kv[f"ap.overall.{t:.2f}"] = self.overall_at(t)
        for c in self.classes:
            kv[f"ap.class{c}.mean"] = self.class_mean(c)
            for t, v in zip(self.thresholds, self.per_class[c]):
                kv[f"ap.class{c}.{t:.2f}"] = float(v)
            kv[f"count.class{c}.gt"] = self.n_gt.get(c, 0)
            kv[f"count.class{c}.pred"] = self.n_pred.get(c, 0)
            kv[f"count.class{c}.matched"] = self.n_matched.get(c, 0)
        return "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(kv.items()))

    def write(self, stem, class_names=None):
        stem = Path(stem)
        Path(f"{stem}.txt").write_text(self.table(class_names))
        Path(f"{stem}.kv").write_text(self.key_values())


def _fmt(v):
    return str(v) if isinstance(v, (int, np.integer)) else f"{v:.10f}"


def ap_average(preds, gts, thresholds=THRESHOLDS):
    thresholds = tuple(round(t, 2) for t in thresholds)
    report = APReport(thresholds, {})
    for cls in sorted({g.semantic for g in gts}):
        p = [x for x in preds if x.semantic == cls]
        g = [x for x in gts if x.semantic == cls]
        table = _iou_table(p, g)
        conf = [x.confidence for x in p]
        aps = []
        for k, tau in enumerate(thresholds):
            ap, matched = _ap_from_table(conf, table, tau)
            aps.append(ap)
            if k == 0:
                report.n_matched[cls] = matched
        report.per_class[cls] = np.array(aps)
        report.n_gt[cls] = len(g)
        report.n_pred[cls] = len(p)
    return report


def instances_from_cloud(cloud, scene="", confidences=None):
    """Group points by instance id (> 0). The class is the majority semantic id
    (lowest wins ties); ``confidences`` maps instance id -> score."""
    if cloud.instance_ids is None or cloud.semantic_ids is None:
        raise ValidationError("cloud needs instance and semantic ids")
    out = []
    ids = cloud.instance_ids
    for inst in np.unique(ids[ids > 0]):
        pts = np.flatnonzero(ids == inst)
        sem = np.bincount(cloud.semantic_ids[pts]).argmax()
        conf = 1.0 if confidences is None else confidences.get(int(inst), 1.0)
        out.append(Instance(pts, int(sem), float(conf), scene))
    return out


def distances_to_means(embeddings, partition):
    part = partition if isinstance(partition, InstancePartition) else InstancePartition.from_labels(partition)
    emb = np.asarray(embeddings, dtype=np.float64)
    means = instance_means(emb, part)
    rows = np.flatnonzero(part.index >= 0)
    return rows, np.linalg.norm(emb[rows] - means[part.index[rows]], axis=1)


def export_distance_heatmap(embeddings, partition, path, positions):
    """Write labeled points with their distance to the instance mean as a gray level.

    Distances are min-max normalized into the color channels; points outside
    the partition are skipped. Returns the raw distances.
    """
    part = partition if isinstance(partition, InstancePartition) else InstancePartition.from_labels(partition)
    rows, dist = distances_to_means(embeddings, part)
    span = dist.max() - dist.min() if len(dist) else 0.0
    gray = (dist - dist.min()) / span if span > 0 else np.zeros_like(dist)
    cloud = PointCloud(
        np.asarray(positions, dtype=np.float64)[rows],
        np.repeat(gray[:, None], 3, axis=1),
        instance_ids=part.labels[rows],
    )
    write_point_cloud(cloud, path)
    return dist
