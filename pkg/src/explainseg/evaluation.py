"""Finding-level detection metrics and slice-level AUC.

A ground-truth region counts as found when any predicted cluster touches it;
a predicted cluster touching no region is a false positive.  Counts are
pooled over studies before rates are computed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clustering import ClusterSet, connected_components
from .errors import PreconditionError, ShapeError, StudyMismatchError, UndefinedMetricError
from .volume import Volume


@dataclass(frozen=True, eq=False)
class GroundTruthRegion:
    id: int
    voxels: np.ndarray  # (n, 3) int array of (x, y, z)

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.int64).reshape(-1, 3)
        if len(v) == 0:
            raise PreconditionError("ground-truth region must be nonempty")
        object.__setattr__(self, "voxels", v)

    @classmethod
    def from_box(cls, rid, lo, hi):
        """Region from an inclusive (x, y, z) box."""
        axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        return cls(rid, g)


def regions_from_mask(mask, connectivity=26):
    """One region per connected component of a binary mask."""
    return [GroundTruthRegion(c.id, c.voxels) for c in connected_components(mask, connectivity)]


@dataclass(frozen=True)
class Match:
    cluster_id: int
    region_id: int
    intersection: int
    iou: float


@dataclass(frozen=True)
class MatchResult:
    tp: int
    fp: int
    fn: int
    matches: tuple


def _label(items, dims):
    w, h, d = dims
    lab = np.zeros((d, h, w), np.int64)
    sizes = np.zeros(len(items) + 1, np.int64)
    for k, vox in enumerate(items, start=1):
        v = np.asarray(vox)
        if len(v) and ((v < 0).any() or (v >= (w, h, d)).any()):
            raise ShapeError("voxels outside the volume")
        lab[v[:, 2], v[:, 1], v[:, 0]] = k
        sizes[k] = len(v)
    return lab, sizes


def match_clusters(pred: ClusterSet, gt, dims=None, strict_iou=None) -> MatchResult:
    """Intersection matching; many-to-many.  ``strict_iou`` requires IoU above that value."""
    dims = tuple(pred.source_dims) if dims is None else tuple(dims)
    if tuple(pred.source_dims) != dims:
        raise ShapeError(f"prediction dims {pred.source_dims} differ from {dims}")
    clusters = list(pred)
    regions = list(gt)
    plab, psize = _label([c.voxels for c in clusters], dims)
    w, h, d = dims
    matches = []
    for r in regions:
        v = r.voxels
        if (v < 0).any() or (v >= (w, h, d)).any():
            raise ShapeError(f"ground-truth region {r.id} lies outside {dims}")
        hit = plab[v[:, 2], v[:, 1], v[:, 0]]
        ids, counts = np.unique(hit[hit > 0], return_counts=True)
        for pi, n in zip(ids, counts):
            iou = n / (psize[pi] + len(v) - n)
            if strict_iou is None or iou > strict_iou:
                matches.append(Match(clusters[pi - 1].id, r.id, int(n), float(iou)))
    hit_c = {m.cluster_id for m in matches}
    hit_r = {m.region_id for m in matches}
    tp = sum(r.id in hit_r for r in regions)
    fp = sum(c.id not in hit_c for c in clusters)
    return MatchResult(tp, fp, len(regions) - tp, tuple(matches))


@dataclass(frozen=True)
class PRF:
    sensitivity: float  # None when undefined
    ppv: float
    f1: float


def prf(tp, fp, fn) -> PRF:
    """Sensitivity, PPV and F1 as percentages; undefined rates are None and force F1 = 0."""
    if min(tp, fp, fn) < 0:
        raise PreconditionError("counts must be non-negative")
    sens = 100.0 * tp / (tp + fn) if tp + fn > 0 else None
    ppv = 100.0 * tp / (tp + fp) if tp + fp > 0 else None
    if sens is None or ppv is None or sens + ppv == 0:
        f1 = 0.0
    else:
        f1 = 2.0 * sens * ppv / (sens + ppv)
    return PRF(sens, ppv, f1)


def auc_roc(scores, labels):
    """P(score_pos > score_neg) + 0.5 P(tie), via average ranks."""
    s = np.asarray(scores, np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise PreconditionError("labels must be binary")
    y = y.astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    # average 1-based rank over each run of tied scores
    starts = np.flatnonzero(np.r_[True, sorted_s[1:] != sorted_s[:-1]])
    ends = np.r_[starts[1:], len(s)]
    ranks = np.empty(len(s), np.float64)
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    sensitivity: float
    ppv: float
    f1: float
    per_study: list = field(default_factory=list)
    auc_roc: float = None

    def to_dict(self):
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "sensitivity": self.sensitivity,
                "ppv": self.ppv, "f1": self.f1, "auc_roc": self.auc_roc, "per_study": self.per_study}

    @classmethod
    def from_dict(cls, d):
        return cls(d["tp"], d["fp"], d["fn"], d["sensitivity"], d["ppv"], d["f1"],
                   list(d.get("per_study", [])), d.get("auc_roc"))


def _regions(g):
    if isinstance(g, Volume) or isinstance(g, np.ndarray):
        return regions_from_mask(g)
    return list(g)


def evaluate_dataset(predictions, ground_truths, strict_iou=None) -> MetricsReport:
    """Micro-averaged metrics over studies.

    Both arguments map study id -> value: ClusterSet predictions and
    ground truth as a mask or a list of GroundTruthRegion.
    """
    pk, gk = set(predictions), set(ground_truths)
    if pk != gk:
        offenders = sorted(str(k) for k in pk ^ gk)
        raise StudyMismatchError(f"study ids differ: {', '.join(offenders)}", offenders)
    rows = []
    tp = fp = fn = 0
    for sid in sorted(predictions, key=str):
        pred = predictions[sid]
        r = match_clusters(pred, _regions(ground_truths[sid]), strict_iou=strict_iou)
        m = prf(r.tp, r.fp, r.fn)
        rows.append({"study_id": str(sid), "tp": r.tp, "fp": r.fp, "fn": r.fn,
                     "sensitivity": m.sensitivity, "ppv": m.ppv, "f1": m.f1})
        tp, fp, fn = tp + r.tp, fp + r.fp, fn + r.fn
    m = prf(tp, fp, fn)
    return MetricsReport(tp, fp, fn, m.sensitivity, m.ppv, m.f1, rows)


def format_row(label, report):
    """One table row to one decimal place; undefined rates print as '-'."""
    f = lambda v: "-" if v is None else f"{v:.1f}"
    return [label, f(report.sensitivity), f(report.ppv), f(report.f1)]
