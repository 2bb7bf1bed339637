"""Iterative explanation-and-masking, study-level aggregation and pseudo-label assembly.

Per mini-volume the loop alternates attribution, hysteresis segmentation and
masking until the classifier no longer sees a positive, the last segmentation
is small, or the iteration limit is reached.  Study masks are built from the
per-slice unions with a Gaussian sliding-window weighting, thresholded,
split into connected clusters and filtered.
"""
from __future__ import annotations

import hashlib
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import attribution, classifier
from .clustering import NEIGHBORHOOD, ClusterSet, connected_components, hysteresis_cluster
from .errors import ConfigError, PreconditionError, ShapeError
from .volume import MINI_DEPTH, MiniVolume, Volume, extract_minivolume, hu_window

STOP_PROB = "prob_below"
STOP_VOLUME = "volume_below"
STOP_LIMIT = "limit"
STOP_REASONS = (STOP_PROB, STOP_VOLUME, STOP_LIMIT)


@dataclass(frozen=True)
class PipelineConfig:
    clf_thresh: float = 0.5
    min_cluster_voxels_stop: int = 50
    iter_limit: int = 10
    t_high: float = None
    agg_sigma: float = 0.8
    filter_min_size: int = 100
    filter_max_center_dist_frac: float = 0.625
    filter_max_center_dist_px: float = None  # absolute radius; overrides the fraction when set
    final_heatmap_thresh: float = 0.5
    neighborhood: tuple = NEIGHBORHOOD
    apply_filter: bool = True

    def __post_init__(self):
        object.__setattr__(self, "neighborhood", tuple(int(n) for n in self.neighborhood))
        if self.iter_limit < 1:
            raise ConfigError("iter_limit must be >= 1")
        if not 0 < self.clf_thresh < 1:
            raise ConfigError("clf_thresh must be in (0, 1)")
        if self.min_cluster_voxels_stop <= 0:
            raise ConfigError("min_cluster_voxels_stop must be positive")
        if self.t_high is not None and not self.t_high > 0:
            raise ConfigError("t_high must be positive")
        if not self.agg_sigma > 0:
            raise ConfigError("agg_sigma must be positive")
        if self.filter_min_size < 0:
            raise ConfigError("filter_min_size must be non-negative")
        if not self.filter_max_center_dist_frac > 0:
            raise ConfigError("filter_max_center_dist_frac must be positive")
        if self.filter_max_center_dist_px is not None and not self.filter_max_center_dist_px > 0:
            raise ConfigError("filter_max_center_dist_px must be positive")
        if self.final_heatmap_thresh < 0:
            raise ConfigError("final_heatmap_thresh must be non-negative")
        if any(n < 1 or n % 2 == 0 for n in self.neighborhood) or len(self.neighborhood) != 3:
            raise ConfigError("neighborhood must be three odd positive sizes")

    def to_dict(self):
        d = asdict(self)
        d["neighborhood"] = list(self.neighborhood)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(eq=False)
class IterationStep:
    prob: float  # classifier probability on the input of this iteration
    seg: np.ndarray  # (7, H, W) uint8
    masked: int


@dataclass(eq=False)
class IterationTrace:
    center_slice: int
    steps: list = field(default_factory=list)
    stop_reason: str = None
    final_prob: float = None  # probability on the input left after the last mask

    def __len__(self):
        return len(self.steps)

    @property
    def entry_prob(self):
        return self.steps[0].prob if self.steps else self.final_prob

    @property
    def probs(self):
        return [s.prob for s in self.steps] + [self.final_prob]

    @property
    def masked_counts(self):
        return [s.masked for s in self.steps]

    def union(self, k=None):
        """Union of the first k segmentations (all when k is None); None if there are none."""
        steps = self.steps if k is None else self.steps[:k]
        if not steps:
            return None
        out = steps[0].seg.copy()
        for s in steps[1:]:
            out |= s.seg
        return out

    def summary(self):
        return {"center": self.center_slice, "iterations": len(self), "stop_reason": self.stop_reason,
                "masked_counts": self.masked_counts, "probs": [float(p) for p in self.probs]}


class _AttributionCache:
    """Memoises heatmaps by input content, so threshold sweeps reuse the first iteration."""

    def __init__(self, params, cfg):
        self.params, self.cfg = params, cfg
        self.store = {}

    def __call__(self, x):
        key = hashlib.sha256(np.ascontiguousarray(x).tobytes()).digest() + bytes(str(x.shape), "ascii")
        hit = self.store.get(key)
        if hit is None:
            hit = attribution.attribute(self.params, x, self.cfg).data
            self.store[key] = hit
        return hit


def _prob(params, x):
    return float(classifier.sigmoid(classifier.forward_logits(params, x[None])[0]))


def iexplain_minivolume(params, attrib_cfg, mini, cfg: PipelineConfig, entry_prob=None, heatmap_fn=None):
    """Run the explain-segment-mask loop on one windowed mini-volume.

    Returns (union segmentation as a mask Volume, IterationTrace).  Heatmap
    values on voxels already in the running union are zeroed before
    segmentation, so a later iteration can never re-detect them.
    """
    if cfg.t_high is None:
        raise ConfigError("t_high is not set")
    x0 = np.asarray(mini.data if isinstance(mini, (MiniVolume, Volume)) else mini, np.float32)
    if x0.ndim != 3 or x0.shape[0] != MINI_DEPTH:
        raise ShapeError(f"mini-volume must have shape (7, H, W), got {x0.shape}")
    center = mini.center_slice if isinstance(mini, MiniVolume) else 0
    heat = heatmap_fn or (lambda v: attribution.attribute(params, v, attrib_cfg).data)
    trace = IterationTrace(center)
    union = np.zeros(x0.shape, bool)
    curr = x0
    masked = math.inf
    prob = _prob(params, curr) if entry_prob is None else float(entry_prob)
    while True:
        if not prob > cfg.clf_thresh:
            trace.stop_reason = STOP_PROB
            break
        if len(trace) >= cfg.iter_limit:
            trace.stop_reason = STOP_LIMIT
            break
        if not masked > cfg.min_cluster_voxels_stop:
            trace.stop_reason = STOP_VOLUME
            break
        h = np.where(union, np.float32(0), heat(curr))
        seg = hysteresis_cluster(h, cfg.t_high, cfg.neighborhood).data
        masked = int(seg.sum())
        trace.steps.append(IterationStep(prob, seg, masked))
        union |= seg.astype(bool)
        curr = np.where(seg.astype(bool), np.float32(0), curr).astype(np.float32)
        prob = _prob(params, curr)
    trace.final_prob = prob
    spacing = mini.volume.spacing if isinstance(mini, MiniVolume) else (1.0, 1.0, 1.0)
    return Volume.mask(union, spacing), trace


def slice_weights(sigma=0.8, half=MINI_DEPTH // 2):
    d = np.arange(-half, half + 1, dtype=np.float64)
    return np.exp(-d ** 2 / (2.0 * sigma ** 2))


def aggregate_study(per_slice_segs, study_dims, agg_sigma=0.8):
    """Gaussian-weighted, weight-normalised sliding-window aggregation.

    ``per_slice_segs`` maps center slice -> (7, H, W) binary seg, or None for
    a processed slice with an empty seg.  Mini-volume slices that fall outside
    the study (edge replication) are dropped.
    """
    w_, h_, d_ = study_dims
    num = np.zeros((d_, h_, w_), np.float64)
    den = np.zeros(d_, np.float64)
    weights = slice_weights(agg_sigma)
    half = MINI_DEPTH // 2
    for c in sorted(per_slice_segs):
        if not 0 <= c < d_:
            raise IndexError(f"center slice {c} outside [0, {d_})")
        seg = per_slice_segs[c]
        if seg is not None:
            seg = seg.data if isinstance(seg, (Volume, MiniVolume)) else np.asarray(seg)
            if seg.shape != (MINI_DEPTH, h_, w_):
                raise ShapeError(f"seg for slice {c} has shape {seg.shape}")
        for k in range(MINI_DEPTH):
            s = c + k - half
            if 0 <= s < d_:
                den[s] += weights[k]
                if seg is not None and seg[k].any():
                    num[s] += weights[k] * seg[k]
    soft = np.divide(num, den[:, None, None], out=np.zeros_like(num), where=den[:, None, None] > 0)
    return Volume(np.clip(soft, 0.0, 1.0).astype(np.float32))


def finalize_mask(soft, final_heatmap_thresh=0.5):
    """Voxels with nonzero support and soft value >= threshold (threshold 0 gives the plain union)."""
    s = soft.data if isinstance(soft, Volume) else np.asarray(soft)
    return Volume.mask((s > 0) & (s >= final_heatmap_thresh))


def _center_radius(dims, cfg):
    w = dims[0]
    if cfg.filter_max_center_dist_px is not None:
        return float(cfg.filter_max_center_dist_px)
    return cfg.filter_max_center_dist_frac * w / 2.0


def filter_clusters(cs: ClusterSet, dims, cfg: PipelineConfig) -> ClusterSet:
    """Drop clusters below the size floor or with an in-plane centroid too far from the center."""
    w, h = dims[0], dims[1]
    radius = _center_radius(dims, cfg)

    def keep(c):
        if c.voxel_count < cfg.filter_min_size:
            return False
        cx, cy = c.centroid[0], c.centroid[1]
        return math.hypot(cx - w / 2.0, cy - h / 2.0) <= radius

    return cs.subset(keep)


def _window(study):
    vol = getattr(study, "volume", study)
    return hu_window(vol)


@dataclass(eq=False)
class PseudoLabelResult:
    mask: Volume
    clusters: ClusterSet
    unfiltered: ClusterSet
    traces: dict  # center slice -> IterationTrace
    report: dict


def assemble(traces, dims, cfg: PipelineConfig, max_iter=None, apply_filter=None):
    """(mask, filtered clusters, unfiltered clusters) from per-slice traces.

    ``max_iter`` truncates every trace, reproducing what a lower iteration
    limit would have produced.
    """
    segs = {c: t.union(max_iter) for c, t in traces.items()}
    soft = aggregate_study(segs, dims, cfg.agg_sigma)
    raw = connected_components(finalize_mask(soft, cfg.final_heatmap_thresh))
    do_filter = cfg.apply_filter if apply_filter is None else apply_filter
    kept = filter_clusters(raw, dims, cfg) if do_filter else raw
    return kept.to_mask(), kept, raw


def iteration_histogram(traces):
    """Count of slices per number of iterations used."""
    return dict(sorted(Counter(len(t) for t in traces.values()).items()))


def run_traces(study, params, attrib_cfg, cfg: PipelineConfig, heatmap_fn=None):
    """IterationTrace for every slice of a study (HU Volume or PhantomStudy)."""
    win = _window(study)
    depth = win.data.shape[0]
    minis = [extract_minivolume(win, z) for z in range(depth)]
    entry = classifier.predict_proba(params, np.stack([m.data for m in minis]))
    heat = heatmap_fn or _AttributionCache(params, attrib_cfg)
    traces = {}
    for z, m in enumerate(minis):
        _, tr = iexplain_minivolume(params, attrib_cfg, m, cfg, entry_prob=entry[z], heatmap_fn=heat)
        traces[z] = tr
    return traces


def generate_pseudolabels(study, params, attrib_cfg, cfg: PipelineConfig, study_id=None, heatmap_fn=None):
    """Full per-study pseudo-label generation with a JSON-ready report."""
    t0 = time.perf_counter()
    traces = run_traces(study, params, attrib_cfg, cfg, heatmap_fn)
    t1 = time.perf_counter()
    win_dims = _window(study).dims
    mask, kept, raw = assemble(traces, win_dims, cfg)
    t2 = time.perf_counter()
    sid = study_id if study_id is not None else getattr(study, "study_id", "")
    report = {
        "study_id": sid,
        "per_slice": [traces[z].summary() for z in sorted(traces)],
        "iteration_histogram": {str(k): v for k, v in iteration_histogram(traces).items()},
        "masked_voxels_total": int(sum(sum(t.masked_counts) for t in traces.values())),
        "clusters": {"before_filter": len(raw), "after_filter": len(kept),
                     "voxels": [c.voxel_count for c in kept]},
        "timing": {"traces_s": t1 - t0, "assemble_s": t2 - t1},
    }
    return PseudoLabelResult(mask, kept, raw, traces, report)


def sweep_high_threshold(eval_studies, grid, params, attrib_cfg, cfg: PipelineConfig, gt_regions_fn=None):
    """Score the full pipeline at each t_high; return (best t_high, [(t, f1, sens, ppv)]).

    Ties go to the smaller threshold.  Heatmaps are cached across grid points,
    so the iteration-1 attribution of every slice is computed once.
    """
    from .evaluation import evaluate_dataset, regions_from_mask

    grid = sorted(float(t) for t in grid)
    if not grid:
        raise PreconditionError("threshold grid is empty")
    regions = gt_regions_fn or (lambda s: regions_from_mask(s.gt_mask))
    gts = {i: regions(s) for i, s in enumerate(eval_studies)}
    cache = _AttributionCache(params, attrib_cfg)
    curve = []
    for t in grid:
        run_cfg = replace(cfg, t_high=t)
        preds = {i: generate_pseudolabels(s, params, attrib_cfg, run_cfg, study_id=str(i),
                                          heatmap_fn=cache).clusters
                 for i, s in enumerate(eval_studies)}
        rep = evaluate_dataset(preds, gts)
        curve.append((t, rep.f1, rep.sensitivity, rep.ppv))
    best = max(curve, key=lambda r: (r[1], -r[0]))[0]
    return best, curve
