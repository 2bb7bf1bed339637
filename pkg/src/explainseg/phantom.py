"""Synthetic CTPA-like studies with exact voxel ground truth.

Vessels are bright tubes around smoothed 3D random walks; lesions are darker
ellipsoidal filling defects placed fully inside a vessel.  Every study is a
pure function of its seed (counter-based Philox stream), so datasets can be
generated in any order or in parallel.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError, GenerationError, PreconditionError
from .volume import Volume

MAX_LESION_ATTEMPTS = 500


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (128, 128, 40)  # (width, height, depth)
    vessel_count: int = 6
    vessel_radius_range: tuple = (5.0, 7.0)
    vessel_region_frac: float = 0.55
    lesion_count_range: tuple = (1, 3)
    lesion_radius_range_voxels: tuple = (3.0, 5.0)
    background_noise_sigma: float = 20.0
    background_intensity: float = -800.0
    lesion_intensity: float = 60.0
    vessel_intensity: float = 350.0
    spacing: tuple = (0.7, 0.7, 2.5)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        for name in ("vessel_radius_range", "lesion_count_range", "lesion_radius_range_voxels", "spacing"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"invalid dims {self.dims}")
        lo, hi = self.lesion_count_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"invalid lesion_count_range {self.lesion_count_range}")
        rlo, rhi = self.lesion_radius_range_voxels
        if rlo < 2 or rhi < rlo:
            raise ConfigError("lesion radii must be >= 2 voxels and ordered")
        vlo, vhi = self.vessel_radius_range
        if vhi < vlo or vlo < rhi:
            raise ConfigError("vessel radius must be at least the largest lesion radius")
        if not self.background_intensity < self.lesion_intensity < self.vessel_intensity:
            raise ConfigError("intensities must satisfy background < lesion < vessel")
        if self.vessel_count < 1 and hi > 0:
            raise ConfigError("lesions need at least one vessel")
        if self.background_noise_sigma < 0:
            raise ConfigError("noise sigma must be non-negative")
        if not 0 < self.vessel_region_frac <= 1:
            raise ConfigError("vessel_region_frac must be in (0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True, eq=False)
class PhantomStudy:
    volume: Volume
    gt_mask: Volume
    slice_labels: np.ndarray
    seed: int = 0
    study_id: str = field(default="")
    lesion_count: int = 0
    vessel_mask: Volume = None  # audit only; not written by the CLI

    @property
    def positive(self):
        return bool(self.slice_labels.any())


def make_rng(seed):
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(master_seed, index):
    """Per-study seed; independent of how many studies are generated."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _random_walk(rng, dims, region_radius, n_steps=480, step=0.5):
    w, h, d = dims
    cx, cy = w / 2.0, h / 2.0
    ang = rng.uniform(0, 2 * np.pi)
    rad = region_radius * np.sqrt(rng.uniform(0, 1))
    pos = np.array([cx + rad * np.cos(ang), cy + rad * np.sin(ang), rng.uniform(0, d - 1)])
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    pts = np.empty((n_steps, 3))
    for i in range(n_steps):
        direction = direction + 0.15 * rng.normal(size=3)
        # steer back inside the cylindrical region and the slab
        off = pos[:2] - (cx, cy)
        r = np.hypot(*off)
        if r > region_radius:
            direction[:2] -= 0.5 * off / r
        if pos[2] < 1 or pos[2] > d - 2:
            direction[2] = abs(direction[2]) if pos[2] < 1 else -abs(direction[2])
        direction /= np.linalg.norm(direction)
        pos = pos + step * direction
        pos[2] = min(max(pos[2], 0.0), d - 1.0)
        pts[i] = pos
    return pts


def _rasterize_tube(pts, radius, dims):
    w, h, d = dims
    vox = np.rint(pts).astype(int)
    keep = ((vox[:, 0] >= 0) & (vox[:, 0] < w) & (vox[:, 1] >= 0) & (vox[:, 1] < h)
            & (vox[:, 2] >= 0) & (vox[:, 2] < d))
    vox = np.unique(vox[keep], axis=0)
    tube = np.zeros((d, h, w), bool)
    if len(vox) == 0:
        return tube, vox
    # distance transform restricted to the centerline bounding box plus radius
    pad = int(math.ceil(radius)) + 1
    lo = np.maximum(vox.min(axis=0) - pad, 0)
    hi = np.minimum(vox.max(axis=0) + pad + 1, (w, h, d))
    seeds = np.ones((hi[2] - lo[2], hi[1] - lo[1], hi[0] - lo[0]), bool)
    seeds[vox[:, 2] - lo[2], vox[:, 1] - lo[1], vox[:, 0] - lo[0]] = False
    dist = ndimage.distance_transform_edt(seeds)
    tube[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]] = dist <= radius
    return tube, vox


def _ellipsoid(center, semi_axes, dims):
    w, h, d = dims
    cx, cy, cz = center
    ax, ay, az = semi_axes
    x0, x1 = int(math.floor(cx - ax)), int(math.ceil(cx + ax))
    y0, y1 = int(math.floor(cy - ay)), int(math.ceil(cy + ay))
    z0, z1 = int(math.floor(cz - az)), int(math.ceil(cz + az))
    if x0 < 0 or y0 < 0 or z0 < 0 or x1 >= w or y1 >= h or z1 >= d:
        return None
    zz, yy, xx = np.mgrid[z0:z1 + 1, y0:y1 + 1, x0:x1 + 1]
    inside = ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 + ((zz - cz) / az) ** 2 <= 1.0
    mask = np.zeros((d, h, w), bool)
    mask[z0:z1 + 1, y0:y1 + 1, x0:x1 + 1] = inside
    return mask


def generate_phantom(config: PhantomConfig, lesion_count=None, study_id="") -> PhantomStudy:
    """Build one study. ``lesion_count`` overrides a draw from the config range."""
    rng = make_rng(config.seed)
    dims = config.dims
    w, h, d = dims
    region_radius = config.vessel_region_frac * w / 2.0

    vessels = np.zeros((d, h, w), bool)
    tubes = []
    for _ in range(config.vessel_count):
        radius = rng.uniform(*config.vessel_radius_range)
        tube, centerline = _rasterize_tube(_random_walk(rng, dims, region_radius), radius, dims)
        vessels |= tube
        tubes.append((radius, centerline))

    lo, hi = config.lesion_count_range
    n_lesions = int(rng.integers(lo, hi + 1)) if lesion_count is None else int(lesion_count)
    gt = np.zeros((d, h, w), bool)
    placed = 0
    attempts = 0
    while placed < n_lesions:
        attempts += 1
        if attempts > MAX_LESION_ATTEMPTS:
            raise GenerationError(
                f"could not place lesion {placed + 1}/{n_lesions} (seed={config.seed})")
        radius, centerline = tubes[int(rng.integers(len(tubes)))]
        if len(centerline) == 0:
            continue
        center = centerline[int(rng.integers(len(centerline)))].astype(float)
        semi = rng.uniform(*config.lesion_radius_range_voxels, size=3)
        semi = np.minimum(semi, radius)
        lesion = _ellipsoid(center, semi, dims)
        if lesion is None or not lesion.any():
            continue
        if not vessels[lesion].all():
            continue
        # keep lesions separate under 26-connectivity
        if (ndimage.binary_dilation(lesion, np.ones((3, 3, 3), bool)) & gt).any():
            continue
        gt |= lesion
        placed += 1

    hu = np.full((d, h, w), config.background_intensity, np.float64)
    hu[vessels] = config.vessel_intensity
    hu[gt] = config.lesion_intensity
    if config.background_noise_sigma > 0:
        hu += rng.normal(0.0, config.background_noise_sigma, size=hu.shape)
    spacing = config.spacing
    labels = gt.any(axis=(1, 2)).astype(np.uint8)
    labels.setflags(write=False)
    return PhantomStudy(Volume(hu.astype(np.float32), spacing), Volume.mask(gt, spacing),
                        labels, int(config.seed), study_id, placed, Volume.mask(vessels, spacing))


def _generate_one(args):
    config, count, study_id = args
    return generate_phantom(config, lesion_count=count, study_id=study_id)


def dataset_plan(config: PhantomConfig, n_studies, positivity):
    """Deterministic (study_id, seed, positive) triples for a dataset."""
    if not 0 <= positivity <= 1:
        raise PreconditionError(f"positivity must be in [0, 1], got {positivity}")
    if n_studies < 0:
        raise PreconditionError("n_studies must be non-negative")
    n_pos = int(math.floor(n_studies * positivity + 1e-9))
    order = make_rng(config.seed).permutation(n_studies)
    positive = np.zeros(n_studies, bool)
    positive[order[:n_pos]] = True
    return [(f"study_{i:04d}", derive_seed(config.seed, i), bool(positive[i]))
            for i in range(n_studies)]


def generate_dataset(config: PhantomConfig, n_studies, positivity, jobs=1):
    plan = dataset_plan(config, n_studies, positivity)
    lo, hi = config.lesion_count_range
    pos_cfg_range = (max(1, lo), max(1, hi))
    tasks = []
    for study_id, seed, positive in plan:
        if positive:
            cfg = replace(config, seed=seed, lesion_count_range=pos_cfg_range)
            tasks.append((cfg, None, study_id))
        else:
            tasks.append((replace(config, seed=seed), 0, study_id))
    if jobs and jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(_generate_one, tasks))
    return [_generate_one(t) for t in tasks]
