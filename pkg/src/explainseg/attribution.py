"""Integrated Gradients heatmaps with several references and optional noise averaging.

All attributions are of the classifier logit.  The path integral uses the
midpoint Riemann rule, alpha_k = (k + 0.5) / steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import classifier
from .errors import ConfigError, PreconditionError, ShapeError
from .volume import MiniVolume, Volume


@dataclass(frozen=True)
class Reference:
    """Baseline policy: ``zero``, ``constant`` (value = c) or ``blur`` (value = sigma, in-plane voxels)."""
    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "constant", "blur"):
            raise ConfigError(f"unknown reference kind {self.kind!r}")
        if self.kind == "blur" and not self.value > 0:
            raise ConfigError("blur reference needs a positive sigma")

    def make(self, x):
        x = np.asarray(x)
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "constant":
            return np.full_like(x, self.value)
        return ndimage.gaussian_filter(x, sigma=(0.0, self.value, self.value), mode="nearest").astype(x.dtype)

    def to_dict(self):
        return {"kind": self.kind, "value": float(self.value)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], float(d.get("value", 0.0)))


DEFAULT_REFERENCES = (
    Reference("zero"),
    Reference("constant", 0.25),
    Reference("constant", 0.5),
    Reference("constant", 0.75),
    Reference("blur", 4.0),
)


@dataclass(frozen=True)
class AttributionConfig:
    ig_steps: int = 32
    references: tuple = field(default=DEFAULT_REFERENCES)
    n_references: int = 5
    smoothgrad_n: int = 0
    smoothgrad_sigma: float = 0.1  # fraction of the [0, 1] window range
    seed: int = 0

    def __post_init__(self):
        refs = tuple(r if isinstance(r, Reference) else Reference.from_dict(r) for r in self.references)
        object.__setattr__(self, "references", refs)
        if self.ig_steps < 1:
            raise ConfigError("ig_steps must be >= 1")
        if self.n_references < 1:
            raise ConfigError("n_references must be >= 1")
        if self.n_references > len(refs):
            raise ConfigError(f"n_references={self.n_references} but only {len(refs)} references given")
        if self.smoothgrad_n < 0:
            raise ConfigError("smoothgrad_n must be >= 0")
        if self.smoothgrad_sigma < 0:
            raise ConfigError("smoothgrad_sigma must be >= 0")

    @property
    def active_references(self):
        return self.references[:self.n_references]

    def to_dict(self):
        return {"ig_steps": self.ig_steps, "references": [r.to_dict() for r in self.references],
                "n_references": self.n_references, "smoothgrad_n": self.smoothgrad_n,
                "smoothgrad_sigma": self.smoothgrad_sigma, "seed": self.seed,
                "target": "logit"}

    @classmethod
    def from_dict(cls, d):
        d = {k: v for k, v in d.items() if k != "target"}
        if "references" in d:
            d["references"] = tuple(Reference.from_dict(r) for r in d["references"])
        return cls(**d)


def _data(x):
    if isinstance(x, (MiniVolume, Volume)):
        return x.data
    return np.asarray(x)


def _spacing(x):
    if isinstance(x, MiniVolume):
        return x.volume.spacing
    if isinstance(x, Volume):
        return x.spacing
    return (1.0, 1.0, 1.0)


def midpoint_alphas(steps):
    return (np.arange(steps, dtype=np.float64) + 0.5) / steps


def _ig_arrays(params, x, baselines, steps, dtype=np.float32):
    """Per-baseline IG arrays, shape (n_baselines, 7, H, W), float32.

    Rounding each map to float32 before any averaging keeps means of
    identical maps exact when they are accumulated in float64.
    """
    if steps < 1:
        raise PreconditionError("steps must be >= 1")
    x = np.asarray(x, dtype)
    bs = [np.asarray(b, dtype) for b in baselines]
    for b in bs:
        if b.shape != x.shape:
            raise ShapeError(f"baseline shape {b.shape} does not match input {x.shape}")
    sums, _ = classifier.path_gradient_sums(params, x, bs, midpoint_alphas(steps).astype(dtype), dtype)
    diff = np.stack([x - b for b in bs]).astype(np.float64)
    return (diff * sums.astype(np.float64) / steps).astype(np.float32)


def integrated_gradients(params, x, baseline, steps=32) -> Volume:
    """IG_i = (x_i - x'_i) * mean over alpha of dF/dx_i at x' + alpha (x - x')."""
    ig = _ig_arrays(params, _data(x), [_data(baseline)], steps)[0]
    return Volume(ig, _spacing(x))


def multi_reference_ig(params, x, baselines, steps=32) -> Volume:
    """Mean of the per-baseline IG heatmaps."""
    if len(baselines) == 0:
        raise PreconditionError("at least one baseline is required")
    ig = _ig_arrays(params, _data(x), [_data(b) for b in baselines], steps)
    return Volume(ig.mean(axis=0, dtype=np.float64).astype(np.float32), _spacing(x))


def reference_ig(params, x, cfg: AttributionConfig) -> Volume:
    """multi_reference_ig over the references configured in ``cfg``."""
    xd = _data(x)
    return multi_reference_ig(params, x, [r.make(xd) for r in cfg.active_references], cfg.ig_steps)


def smoothgrad_ig(params, x, cfg: AttributionConfig) -> Volume:
    """Average of reference IG over ``smoothgrad_n`` Gaussian-noised copies of x.

    References are rebuilt from each noisy copy.  Noise is drawn from a Philox
    stream keyed by ``cfg.seed``; sample k always gets the same noise.
    """
    if cfg.smoothgrad_n < 1:
        raise PreconditionError("smoothgrad_n must be >= 1")
    xd = np.asarray(_data(x), np.float32)
    rng = np.random.Generator(np.random.Philox(int(cfg.seed)))
    acc = np.zeros(xd.shape, np.float64)
    refs = cfg.active_references
    for _ in range(cfg.smoothgrad_n):
        noise = rng.normal(0.0, 1.0, xd.shape) * cfg.smoothgrad_sigma
        xn = (xd + noise).astype(np.float32)
        ig = _ig_arrays(params, xn, [r.make(xn) for r in refs], cfg.ig_steps)
        acc += ig.mean(axis=0, dtype=np.float64).astype(np.float32)
    return Volume((acc / cfg.smoothgrad_n).astype(np.float32), _spacing(x))


def attribute(params, x, cfg: AttributionConfig) -> Volume:
    """Heatmap for the pipeline: SmoothGrad when enabled, plain reference IG otherwise."""
    if cfg.smoothgrad_n > 0:
        return smoothgrad_ig(params, x, cfg)
    return reference_ig(params, x, cfg)


def completeness_error(params, x, baseline, steps, dtype=np.float32):
    """(relative error, F(x) - F(baseline)) of the IG completeness identity."""
    xd, bd = np.asarray(_data(x), dtype), np.asarray(_data(baseline), dtype)
    ig = _ig_arrays(params, xd, [bd], steps, dtype)[0].astype(np.float64)
    f = classifier.forward_logits(params, np.stack([xd, bd]), dtype=dtype).astype(np.float64)
    delta = f[0] - f[1]
    gap = abs(ig.sum() - delta)
    if delta == 0:
        return (0.0 if gap == 0 else math.inf), delta
    return gap / abs(delta), delta
