"""Hysteresis thresholding of heatmaps and 3D connected-component analysis."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import PreconditionError, ShapeError
from .volume import Volume

NEIGHBORHOOD = (15, 15, 5)  # (x, y, z) window edge lengths


def _array(vol):
    return vol.data if isinstance(vol, Volume) else np.asarray(vol)


def hysteresis_cluster(heatmap, t_high, neighborhood=NEIGHBORHOOD, t_low=None):
    """Keep weak voxels (>= t_high/2) transitively linked to a strong voxel (>= t_high).

    Two voxels are linked when they fit in one neighborhood window, i.e.
    |dx| <= 7, |dy| <= 7, |dz| <= 2 for the default 15x15x5 window.

    The closure is computed by labeling rather than BFS: every weak voxel v is
    placed at 2v on a doubled grid and dilated to a box of half-width r per
    axis.  Two boxes overlap exactly when |dv| <= r on every axis, and since all
    box ends share parity, boxes that do not overlap never touch either.  The
    6-connected components of the dilated grid are therefore exactly the
    transitive-closure classes of the weak set.
    """
    if not t_high > 0:
        raise PreconditionError("t_high must be positive")
    h = _array(heatmap)
    if h.ndim != 3:
        raise ShapeError("heatmap must be 3D")
    low = t_high / 2.0 if t_low is None else t_low
    weak = h >= low
    strong = h >= t_high
    out = np.zeros(h.shape, np.uint8)
    if not strong.any():
        return Volume.mask(out, getattr(heatmap, "spacing", (1.0, 1.0, 1.0)))
    rx, ry, rz = (n // 2 for n in neighborhood)
    radius = np.array([rz, ry, rx])
    # work on the bounding box of the weak set only
    coords = np.argwhere(weak)
    lo = coords.min(axis=0)
    hi = coords.max(axis=0) + 1
    sub_weak = weak[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    sub_strong = strong[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    ext = np.array(sub_weak.shape)
    grid = np.zeros(tuple(2 * ext - 1 + 2 * radius), bool)
    wz, wy, wx = np.nonzero(sub_weak)
    grid[2 * wz + radius[0], 2 * wy + radius[1], 2 * wx + radius[2]] = True
    grid = ndimage.maximum_filter(grid, size=tuple(2 * radius + 1), mode="constant")
    labels, _ = ndimage.label(grid)
    sz, sy, sx = np.nonzero(sub_strong)
    keep = np.unique(labels[2 * sz + radius[0], 2 * sy + radius[1], 2 * sx + radius[2]])
    lab_weak = labels[2 * wz + radius[0], 2 * wy + radius[1], 2 * wx + radius[2]]
    sel = np.isin(lab_weak, keep)
    out[wz[sel] + lo[0], wy[sel] + lo[1], wx[sel] + lo[2]] = 1
    return Volume.mask(out, getattr(heatmap, "spacing", (1.0, 1.0, 1.0)))


@dataclass(frozen=True, eq=False)
class Cluster:
    id: int
    voxels: np.ndarray  # (n, 3) int array of (x, y, z), sorted by linear index
    voxel_count: int
    centroid: tuple
    bbox: tuple  # ((xmin, xmax), (ymin, ymax), (zmin, zmax)), inclusive

    def linear_indices(self, dims):
        w, h, _ = dims
        v = self.voxels
        return v[:, 0] + w * (v[:, 1] + h * v[:, 2])

    def __eq__(self, other):
        return (isinstance(other, Cluster) and self.id == other.id
                and np.array_equal(self.voxels, other.voxels))


@dataclass(frozen=True, eq=False)
class ClusterSet:
    clusters: tuple
    source_dims: tuple  # (width, height, depth)

    def __len__(self):
        return len(self.clusters)

    def __iter__(self):
        return iter(self.clusters)

    def __eq__(self, other):
        return (isinstance(other, ClusterSet) and tuple(self.source_dims) == tuple(other.source_dims)
                and len(self) == len(other)
                and all(a == b for a, b in zip(self.clusters, other.clusters)))

    def to_mask(self):
        w, h, d = self.source_dims
        out = np.zeros((d, h, w), np.uint8)
        for c in self.clusters:
            out[c.voxels[:, 2], c.voxels[:, 1], c.voxels[:, 0]] = 1
        return Volume.mask(out)

    def label_volume(self):
        """int32 array (D, H, W): 0 background, k+1 for the k-th cluster."""
        w, h, d = self.source_dims
        out = np.zeros((d, h, w), np.int32)
        for k, c in enumerate(self.clusters):
            out[c.voxels[:, 2], c.voxels[:, 1], c.voxels[:, 0]] = k + 1
        return out

    def subset(self, keep):
        return ClusterSet(tuple(c for c in self.clusters if keep(c)), self.source_dims)


def cluster_stats(voxels):
    """(voxel_count, centroid, bbox) for an (n, 3) array or iterable of (x, y, z)."""
    v = np.asarray(list(voxels) if not isinstance(voxels, np.ndarray) else voxels)
    if v.size == 0:
        raise PreconditionError("cluster_stats needs at least one voxel")
    v = v.reshape(-1, 3)
    centroid = tuple(float(c) for c in v.mean(axis=0))
    bbox = tuple((int(a), int(b)) for a, b in zip(v.min(axis=0), v.max(axis=0)))
    return int(len(v)), centroid, bbox


def make_cluster(cid, voxels):
    v = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    count, centroid, bbox = cluster_stats(v)
    return Cluster(int(cid), v, count, centroid, bbox)


def clusters_from_labels(labels, n=None, spacing_dims=None):
    """ClusterSet from a (D, H, W) label array; ids follow label order."""
    d, h, w = labels.shape
    flat = labels.ravel()
    idx = np.flatnonzero(flat)
    lab = flat[idx]
    order = np.argsort(lab, kind="stable")
    idx, lab = idx[order], lab[order]
    uniq, starts = np.unique(lab, return_index=True)
    clusters = []
    for k, (label, part) in enumerate(zip(uniq, np.split(idx, starts[1:]))):
        z, rem = np.divmod(part, h * w)
        y, x = np.divmod(rem, w)
        clusters.append(make_cluster(k, np.stack([x, y, z], axis=1)))
    return ClusterSet(tuple(clusters), (w, h, d))


_STRUCT26 = np.ones((3, 3, 3), bool)
_STRUCT6 = ndimage.generate_binary_structure(3, 1)


def connected_components(mask, connectivity=26):
    """Maximal connected components; ids follow raster (linear index) order."""
    m = _array(mask)
    if m.ndim != 3:
        raise ShapeError("mask must be 3D")
    if not np.isin(m, (0, 1)).all():
        raise PreconditionError("mask must be binary")
    if connectivity == 26:
        struct = _STRUCT26
    elif connectivity == 6:
        struct = _STRUCT6
    else:
        raise PreconditionError("connectivity must be 6 or 26")
    labels, n = ndimage.label(m.astype(bool), structure=struct)
    return clusters_from_labels(labels, n)
