"""Small 2.5D max-pooling CNN with a hand-written sparse reverse mode.

Architecture (fixed)::

    x (7, H, W) -> conv3x3x3(C1) -> ReLU -> maxpool(2x2x1)
                -> conv3x3x3(C2) -> ReLU -> maxpool(2x2x1)
                -> global max over (z, y, x) -> linear -> logit

Because the head is a global max, the gradient of the logit reaches exactly one
conv2 position per channel.  The backward pass therefore scatters along those
routes instead of running dense transposed convolutions, which keeps input
gradients and weight gradients roughly as cheap as a forward pass.  Convs
run through ``torch.nn.functional.conv2d`` with the z taps folded into the
channel axis; torch is used as a kernel library only, never for autograd.

Max-pool ties route to the lowest linear index: windows are enumerated in
linear order and argmaxes always take the first maximal entry.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import PreconditionError, ShapeError, TrainingError
from .volume import MINI_DEPTH, MiniVolume, Volume, extract_minivolume, hu_window

ARCH_NAME = "conv3-relu-pool2-conv3-relu-pool2-gmax-linear"
_OFFSETS = np.array([(kz, ky, kx) for kz in range(3) for ky in range(3) for kx in range(3)])


@dataclass(eq=False)
class ClassifierParams:
    w1: np.ndarray  # (C1, 1, 3, 3, 3) as (out, in, kz, ky, kx)
    b1: np.ndarray
    w2: np.ndarray  # (C2, C1, 3, 3, 3)
    b2: np.ndarray
    w3: np.ndarray  # (C2,)
    b3: np.ndarray  # shape (1,)

    NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __post_init__(self):
        for name in self.NAMES:
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            if not np.isfinite(arr).all():
                raise ValueError(f"parameter {name} is not finite")
            setattr(self, name, arr)
        c1, c2 = self.c1, self.c2
        expected = {"w1": (c1, 1, 3, 3, 3), "b1": (c1,), "w2": (c2, c1, 3, 3, 3),
                    "b2": (c2,), "w3": (c2,), "b3": (1,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def c1(self):
        return self.w1.shape[0]

    @property
    def c2(self):
        return self.w2.shape[0]

    def descriptor(self):
        return {"arch": ARCH_NAME, "c1": int(self.c1), "c2": int(self.c2), "depth": MINI_DEPTH,
                "kernel": [3, 3, 3], "pool": [2, 2, 1], "activation": "relu",
                "output": "logit", "layout": "x-fastest"}

    def arrays(self):
        return [getattr(self, n) for n in self.NAMES]

    def copy(self):
        return ClassifierParams(*[a.copy() for a in self.arrays()])

    @classmethod
    def zeros(cls, c1=8, c2=16):
        return cls(np.zeros((c1, 1, 3, 3, 3)), np.zeros(c1), np.zeros((c2, c1, 3, 3, 3)),
                   np.zeros(c2), np.zeros(c2), np.zeros(1))

    @classmethod
    def random(cls, c1=8, c2=16, seed=0):
        """Weights and biases uniform in +-1/sqrt(fan_in).

        He-scaled normal weights train far slower on the phantom task; the
        smaller uniform range keeps the global max from locking onto vessel
        edges early on.
        """
        rng = np.random.default_rng(seed)

        def u(fan_in, shape):
            return rng.uniform(-1.0, 1.0, shape) / math.sqrt(fan_in)

        return cls(u(27, (c1, 1, 3, 3, 3)), u(27, c1),
                   u(27 * c1, (c2, c1, 3, 3, 3)), u(27 * c1, c2),
                   u(c2, c2), u(c2, 1))

    def __eq__(self, other):
        return isinstance(other, ClassifierParams) and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


# --------------------------------------------------------------------------
# forward


def _as_batch(x):
    """Accept MiniVolume, Volume, (7,H,W) or (N,7,H,W); return (N,7,H,W) array."""
    if isinstance(x, MiniVolume):
        x = x.data
    elif isinstance(x, Volume):
        x = x.data
    arr = np.asarray(x)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected (7,H,W) or (N,7,H,W) input, got {arr.shape}")
    n, d, h, w = arr.shape
    if d != MINI_DEPTH:
        raise ShapeError(f"input depth must be {MINI_DEPTH}, got {d}")
    if h % 4 or w % 4 or h == 0 or w == 0:
        raise ShapeError(f"in-plane size must be a positive multiple of 4, got {(h, w)}")
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


def _torch_params(params, dtype):
    tdt = torch.float64 if dtype == np.float64 else torch.float32
    return {n: torch.from_numpy(getattr(params, n)).to(tdt) for n in ClassifierParams.NAMES}


def _conv_z3(x, w, b):
    """3x3x3 'same' conv. x (N, D, Cin, H, W), w (Cout, Cin, 3, 3, 3) -> (N, D, Cout, H, W)."""
    n, d, cin, h, wd = x.shape
    cout = w.shape[0]
    xp = F.pad(x, (0, 0, 0, 0, 0, 0, 1, 1))
    win = torch.stack([xp[:, k:k + d] for k in range(3)], dim=2)  # N, D, 3, Cin, H, W
    win = win.reshape(n * d, 3 * cin, h, wd)
    w2d = w.permute(0, 2, 1, 3, 4).reshape(cout, 3 * cin, 3, 3)
    y = F.conv2d(win, w2d, b, padding=1)
    return y.reshape(n, d, cout, h, wd)


_QUADS = ((0, 0), (0, 1), (1, 0), (1, 1))  # window order == linear index order


def _quadrants(z):
    """The four 2x2-window sub-grids of (N, D, C, H, W), in linear-index order."""
    n, d, c, h, w = z.shape
    v = z.reshape(n, d, c, h // 2, 2, w // 2, 2)
    return [v[:, :, :, :, dy, :, dx] for dy, dx in _QUADS]


def _max4(q):
    return torch.maximum(torch.maximum(q[0], q[1]), torch.maximum(q[2], q[3]))


class _Trace:
    """Forward intermediates needed by the sparse backward pass."""

    __slots__ = ("q1", "p1", "z2", "g", "route2", "logits")


def _first_argmax4(vals):
    """Index of the first maximal entry along axis 0 of a (4, ...) array."""
    return np.argmax(vals, axis=0)


def _forward(tp, a, b=None, alphas=None, keep=False):
    """Run the network from conv1 pre-activations.

    ``a`` is conv1(x) + b1 with shape (N or 1, D, C1, H, W).  When ``b`` is
    given the pre-activation is ``a + alpha * b`` for each alpha (one batch
    item per alpha), which is how straight-line paths are evaluated.
    """
    if b is None:
        q1 = [q.contiguous() for q in _quadrants(a)]
    else:
        al = alphas.reshape(-1, 1, 1, 1, 1)
        q1 = [torch.addcmul(qa, al, qb) for qa, qb in zip(_quadrants(a), _quadrants(b))]
    # relu and max commute; pooling first touches 4x fewer elements
    p1 = torch.relu(_max4(q1))
    z2 = _conv_z3(p1, tp["w2"], tp["b2"])
    p2 = torch.relu(_max4(_quadrants(z2)))
    n, d, c2, h4, w4 = p2.shape
    # first max over (y, x) within each slice, then the first slice holding the
    # overall max: together the lowest linear index
    m_hw, i_hw = p2.reshape(n, d, c2, h4 * w4).max(dim=-1)
    g, gd = m_hw.max(dim=1)
    logits = g @ tp["w3"] + tp["b3"]
    if not keep:
        return logits.numpy(), None
    tr = _Trace()
    tr.q1 = np.stack([q.numpy() for q in q1])
    tr.p1 = p1.numpy()
    tr.z2 = z2.numpy()
    tr.g = g.numpy()
    gd = gd.numpy()
    nn_, cc = np.meshgrid(np.arange(n), np.arange(c2), indexing="ij")
    gy, gx = np.divmod(i_hw.numpy()[nn_, gd, cc], w4)
    cand = np.stack([tr.z2[nn_, gd, cc, 2 * gy + dy, 2 * gx + dx] for dy, dx in _QUADS])
    sub = _first_argmax4(cand)
    # conv2 output position of each channel's global max
    tr.route2 = (gd, 2 * gy + sub // 2, 2 * gx + sub % 2)
    tr.logits = logits.numpy()
    return tr.logits, tr


def _z1(tp, x_np, bias=True):
    x = torch.from_numpy(np.require(x_np, requirements=("C", "W")))[:, :, None]
    return _conv_z3(x, tp["w1"], tp["b1"] if bias else torch.zeros_like(tp["b1"]))


def forward_logits(params, x, dtype=None, chunk=16):
    """Logits for a batch of windowed mini-volumes."""
    arr = _as_batch(x)
    dtype = arr.dtype if dtype is None else np.dtype(dtype)
    arr = arr.astype(dtype, copy=False)
    tp = _torch_params(params, dtype)
    out = []
    with torch.no_grad():
        for s in range(0, len(arr), chunk):
            logits, _ = _forward(tp, _z1(tp, arr[s:s + chunk]))
            out.append(logits)
    return np.concatenate(out) if out else np.zeros(0, dtype)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1 / (1 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1 + np.exp(-np.abs(z))))


def forward(params, mini):
    """(probability, logit) for a single mini-volume."""
    arr = _as_batch(mini)
    if len(arr) != 1:
        raise ShapeError("forward takes a single mini-volume; use forward_logits for batches")
    logit = float(forward_logits(params, arr)[0])
    return float(sigmoid(logit)), logit


def predict_proba(params, x, chunk=16):
    return sigmoid(forward_logits(params, x, chunk=chunk))


# --------------------------------------------------------------------------
# sparse reverse mode


def _backward_to_z1(params, tr, upstream, dtype):
    """Scatter d(logit)/d(z1) along the max routes.

    Returns the non-zero entries as (n, d, c1, y, x, value) arrays.
    """
    n, d, c2, h2, w2 = tr.z2.shape
    c1 = params.c1
    w2p = params.w2.astype(dtype)
    gz = upstream[:, None] * params.w3.astype(dtype)[None, :] * (tr.g > 0)  # (N, C2)
    rd, ry, rx = tr.route2
    td = rd[:, :, None] + _OFFSETS[:, 0] - 1  # (N, C2, 27)
    ty = ry[:, :, None] + _OFFSETS[:, 1] - 1
    tx = rx[:, :, None] + _OFFSETS[:, 2] - 1
    valid = (td >= 0) & (td < d) & (ty >= 0) & (ty < h2) & (tx >= 0) & (tx < w2)
    valid &= (gz != 0)[:, :, None]
    # values (N, C2, C1, 27)
    vals = gz[:, :, None, None] * w2p.reshape(c2, c1, 27)[None]
    nn_ = np.broadcast_to(np.arange(n)[:, None, None, None], vals.shape)
    cc1 = np.broadcast_to(np.arange(c1)[None, None, :, None], vals.shape)
    vmask = np.broadcast_to(valid[:, :, None, :], vals.shape)
    tdb = np.broadcast_to(td[:, :, None, :], vals.shape)[vmask]
    tyb = np.broadcast_to(ty[:, :, None, :], vals.shape)[vmask]
    txb = np.broadcast_to(tx[:, :, None, :], vals.shape)[vmask]
    nb, cb, vb = nn_[vmask], cc1[vmask], vals[vmask]
    if vb.size == 0:
        empty = np.zeros(0, np.int64)
        return empty, empty, empty, empty, empty, np.zeros(0, dtype)
    key = (((nb * d + tdb) * c1 + cb) * h2 + tyb) * w2 + txb
    ukey, inv = np.unique(key, return_inverse=True)
    acc = np.bincount(inv, weights=vb, minlength=len(ukey)).astype(dtype)
    rest, px = np.divmod(ukey, w2)
    rest, py = np.divmod(rest, h2)
    rest, pc = np.divmod(rest, c1)
    pn, pd = np.divmod(rest, d)
    # route through pool1 and relu1 (relu active iff pooled value > 0)
    active = tr.p1[pn, pd, pc, py, px] > 0
    sub = _first_argmax4(tr.q1[:, pn, pd, pc, py, px])
    yy = 2 * py + sub // 2
    xx = 2 * px + sub % 2
    keep = active & (acc != 0)
    return pn[keep], pd[keep], pc[keep], yy[keep], xx[keep], acc[keep]


def _conv1_transpose(params, entries, out_shape, group, dtype):
    """Scatter z1 gradients back to the input through conv1 weights."""
    en, ed, ec, ey, ex, ev = entries
    g_count, d, h, w = out_shape
    out = np.zeros(g_count * d * h * w, np.float64)
    if ev.size:
        w1 = params.w1.astype(dtype).reshape(params.c1, 27)
        td = ed[:, None] + _OFFSETS[:, 0] - 1
        ty = ey[:, None] + _OFFSETS[:, 1] - 1
        tx = ex[:, None] + _OFFSETS[:, 2] - 1
        valid = (td >= 0) & (td < d) & (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
        vals = ev[:, None] * w1[ec]
        gg = np.broadcast_to(group[en][:, None], td.shape)
        key = ((gg * d + td) * h + ty) * w + tx
        out += np.bincount(key[valid], weights=vals[valid], minlength=out.size)
    return out.reshape(out_shape).astype(dtype)


def input_gradient_array(params, x, dtype=None, chunk=16):
    """d(logit)/d(input) for a batch, shape (N, 7, H, W)."""
    arr = _as_batch(x)
    dtype = arr.dtype if dtype is None else np.dtype(dtype)
    arr = arr.astype(dtype, copy=False)
    tp = _torch_params(params, dtype)
    grads = []
    with torch.no_grad():
        for s in range(0, len(arr), chunk):
            xb = arr[s:s + chunk]
            _, tr = _forward(tp, _z1(tp, xb), keep=True)
            ent = _backward_to_z1(params, tr, np.ones(len(xb), dtype), dtype)
            grads.append(_conv1_transpose(params, ent, xb.shape, np.arange(len(xb)), dtype))
    return np.concatenate(grads)


def input_gradient(params, mini) -> Volume:
    arr = _as_batch(mini)
    if len(arr) != 1:
        raise ShapeError("input_gradient takes a single mini-volume")
    spacing = mini.volume.spacing if isinstance(mini, MiniVolume) else (1.0, 1.0, 1.0)
    return Volume(input_gradient_array(params, arr)[0], spacing)


def _auto_chunk(shape, budget=2 ** 18):
    """Batch size keeping roughly ``budget`` voxels per forward call."""
    return max(1, budget // int(np.prod(shape)))


def path_gradient_sums(params, x, baselines, alphas, dtype=np.float32, chunk=None):
    """Sum over ``alphas`` of d(logit)/d(input) at baseline + alpha*(x - baseline).

    One result per baseline.  conv1 is affine along a straight path, so its
    output is formed from two convolutions per baseline instead of one per
    step; the per-step gradients are summed before the final transposed conv1.
    Also returns the logits at every path point, shape (n_baselines, n_alphas).
    """
    x = np.asarray(x, dtype)
    baselines = [np.asarray(b, dtype) for b in baselines]
    alphas = np.asarray(alphas, dtype)
    tp = _torch_params(params, dtype)
    nb, na = len(baselines), len(alphas)
    chunk = chunk or _auto_chunk(x.shape)
    total = np.zeros((nb,) + x.shape, dtype)
    logits = np.zeros((nb, na), dtype)
    with torch.no_grad():
        for i, base in enumerate(baselines):
            a = _z1(tp, base[None])
            b = _z1(tp, (x - base)[None], bias=False)
            for s in range(0, na, chunk):
                al = torch.from_numpy(alphas[s:s + chunk])
                lg, tr = _forward(tp, a, b, al, keep=True)
                logits[i, s:s + chunk] = lg
                ent = _backward_to_z1(params, tr, np.ones(len(al), dtype), dtype)
                total[i] += _conv1_transpose(params, ent, (1,) + x.shape,
                                             np.zeros(len(al), np.int64), dtype)[0]
    return total, logits


# --------------------------------------------------------------------------
# finite-difference verification


def _pattern(params, x, dtype):
    """Activation pattern (relu masks and pool/global argmaxes) of a batch."""
    tp = _torch_params(params, dtype)
    with torch.no_grad():
        z1 = _z1(tp, x)
        q1 = torch.stack([q for q in _quadrants(z1)])
        p1 = torch.relu(q1.max(dim=0).values)
        z2 = _conv_z3(p1, tp["w2"], tp["b2"])
        q2 = torch.stack([q for q in _quadrants(z2)])
        p2 = torch.relu(q2.max(dim=0).values)
        n, d, c2, h4, w4 = p2.shape
        gidx = p2.permute(0, 2, 1, 3, 4).reshape(n, c2, -1).max(dim=-1).indices
    n = x.shape[0]
    parts = [(z1 > 0), q1.numpy().argmax(axis=0), (z2 > 0), q2.numpy().argmax(axis=0), gidx]
    return np.concatenate([np.asarray(p).reshape(n, -1) for p in parts], axis=1).astype(np.int64)


def finite_diff_check(params, mini, eps=1e-5, n_voxels=256, seed=0, return_details=False):
    """Max relative error between input_gradient and central differences (float64).

    Voxels whose +-eps perturbation changes the activation pattern sit on a
    ReLU or max-pool kink; they are skipped (and counted) because the network
    is only differentiable inside a linear piece.  The per-voxel error is
    |a - f| / max(|a|, |f|, 1e-6 * max(1, |logit|)).
    """
    if not eps > 0:
        raise PreconditionError("eps must be positive")
    x = _as_batch(mini).astype(np.float64)
    if len(x) != 1:
        raise ShapeError("finite_diff_check takes a single mini-volume")
    x = x[0]
    grad = input_gradient_array(params, x[None], dtype=np.float64)[0].ravel()
    logit0 = float(forward_logits(params, x[None], dtype=np.float64)[0])
    floor = 1e-6 * max(1.0, abs(logit0))
    base_pat = _pattern(params, x[None], np.float64)[0]
    order = np.random.default_rng(seed).permutation(x.size)
    target = min(n_voxels, x.size)
    errors, checked, kinks = [], [], 0
    for s in range(0, len(order), 128):
        if len(checked) >= target:
            break
        idx = order[s:s + 128]
        k = len(idx)
        batch = np.repeat(x.ravel()[None], 2 * k, axis=0)
        batch[np.arange(k), idx] += eps
        batch[k + np.arange(k), idx] -= eps
        batch = batch.reshape((2 * k,) + x.shape)
        pats = _pattern(params, batch, np.float64)
        same = (pats == base_pat).all(axis=1)
        ok = same[:k] & same[k:]
        lg = forward_logits(params, batch, dtype=np.float64, chunk=64)
        fd = (lg[:k] - lg[k:]) / (2 * eps)
        an = grad[idx]
        rel = np.abs(an - fd) / np.maximum(np.maximum(np.abs(an), np.abs(fd)), floor)
        kinks += int((~ok).sum())
        for i in np.flatnonzero(ok):
            if len(checked) >= target:
                break
            checked.append(int(idx[i]))
            errors.append(float(rel[i]))
    max_err = max(errors) if errors else 0.0
    if return_details:
        return {"max_rel_error": max_err, "n_checked": len(checked), "n_kinks": kinks,
                "voxels": checked}
    return max_err


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.03
    iterations: int = 600
    batch_size: int = 16
    momentum: float = 0.9
    grad_clip: float = 5.0
    cutout_prob: float = 0.5
    cutout_size_range: tuple = (4, 20)  # in-plane box edge, voxels
    cutout_depth_range: tuple = (1, 7)
    crop_size: int = 64  # in-plane training crop; 0 trains on whole slices
    channels: tuple = (8, 16)
    init_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("cutout_size_range", "cutout_depth_range", "channels"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if not self.learning_rate > 0:
            raise PreconditionError("learning_rate must be positive")
        if not self.iterations > 0:
            raise PreconditionError("iterations must be positive")
        if self.batch_size < 2:
            raise PreconditionError("batch_size must be at least 2")
        if not 0 <= self.cutout_prob <= 1:
            raise PreconditionError("cutout_prob must be in [0, 1]")
        if self.crop_size < 0 or self.crop_size % 4:
            raise PreconditionError("crop_size must be a non-negative multiple of 4")


class MiniVolumeDataset:
    """Slice-labelled mini-volumes drawn lazily from windowed studies."""

    def __init__(self, studies, labels, masks=None):
        self.studies = [np.asarray(s, np.float32) for s in studies]
        self.labels = [np.asarray(l, np.uint8) for l in labels]
        for s, l in zip(self.studies, self.labels):
            if s.ndim != 3 or len(l) != s.shape[0]:
                raise ShapeError("each study needs one label per slice")
        self.masks = None
        if masks is not None:
            self.masks = [np.asarray(m, bool) for m in masks]
            if any(m.shape != s.shape for m, s in zip(self.masks, self.studies)):
                raise ShapeError("lesion masks must match their studies")
        self.index = np.array([(i, z) for i, l in enumerate(self.labels) for z in range(len(l))],
                              dtype=np.int64).reshape(-1, 2)
        flat = np.concatenate(self.labels) if self.labels else np.zeros(0, np.uint8)
        self.positives = np.flatnonzero(flat == 1)
        self.negatives = np.flatnonzero(flat == 0)

    @classmethod
    def from_phantoms(cls, studies):
        return cls([hu_window(s.volume).data for s in studies], [s.slice_labels for s in studies],
                   [s.gt_mask.data for s in studies])

    def __len__(self):
        return len(self.index)

    def mini(self, k):
        i, z = self.index[k]
        return extract_minivolume(self.studies[i], int(z)).data

    def label(self, k):
        i, z = self.index[k]
        return int(self.labels[i][z])

    def batch(self, ks):
        return np.stack([self.mini(k) for k in ks]), np.array([self.label(k) for k in ks], np.float32)

    def crop(self, k, size, rng):
        """Random in-plane crop of mini-volume k.

        When lesion masks are known, a positive crop is placed so that it
        contains a lesion voxel of the center slice; otherwise the crop
        position is uniform.
        """
        x = self.mini(k)
        _, h, w = x.shape
        if not size or (size >= h and size >= w):
            return x
        ch, cw = min(size, h), min(size, w)
        i, z = self.index[k]
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        if self.masks is not None and self.labels[i][z]:
            ys, xs = np.nonzero(self.masks[i][z])
            j = int(rng.integers(len(ys)))
            y0 = _crop_origin(rng, int(ys[j]), ch, h)
            x0 = _crop_origin(rng, int(xs[j]), cw, w)
        return np.ascontiguousarray(x[:, y0:y0 + ch, x0:x0 + cw])


def _crop_origin(rng, c, size, extent, margin=4):
    """Origin of a crop of length ``size`` containing c, away from its border if possible."""
    lo, hi = max(0, c - size + 1 + margin), min(c - margin, extent - size)
    if hi < lo:
        lo, hi = max(0, c - size + 1), min(c, extent - size)
    return int(rng.integers(lo, hi + 1))


def _cutout(rng, x, cfg):
    _, h, w = x.shape
    lo, hi = cfg.cutout_size_range
    bh, bw = (int(rng.integers(lo, hi + 1)) for _ in range(2))
    bd = int(rng.integers(cfg.cutout_depth_range[0], cfg.cutout_depth_range[1] + 1))
    bh, bw, bd = min(bh, h), min(bw, w), min(bd, MINI_DEPTH)
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    z0 = int(rng.integers(0, MINI_DEPTH - bd + 1))
    x[z0:z0 + bd, y0:y0 + bh, x0:x0 + bw] = 0.0


def loss_and_grads(params, xb, yb):
    """Mean binary cross-entropy on logits and its parameter gradients."""
    dtype = np.float32
    tp = _torch_params(params, dtype)
    with torch.no_grad():
        logits, tr = _forward(tp, _z1(tp, xb.astype(dtype)), keep=True)
    n = len(xb)
    lg = logits.astype(np.float64)
    loss = float(np.mean(np.logaddexp(0.0, lg) - yb * lg))
    dlogit = ((sigmoid(lg) - yb) / n).astype(dtype)

    grads = {"w3": (dlogit @ tr.g).astype(dtype), "b3": np.array([dlogit.sum()], dtype)}
    n_, d, c2, h2, w2 = tr.z2.shape
    c1 = params.c1
    gz = dlogit[:, None] * params.w3[None, :] * (tr.g > 0)
    grads["b2"] = gz.sum(axis=0).astype(dtype)
    rd, ry, rx = tr.route2
    td = rd[:, :, None] + _OFFSETS[:, 0] - 1
    ty = ry[:, :, None] + _OFFSETS[:, 1] - 1
    tx = rx[:, :, None] + _OFFSETS[:, 2] - 1
    valid = (td >= 0) & (td < d) & (ty >= 0) & (ty < h2) & (tx >= 0) & (tx < w2)
    nn_ = np.arange(n)[:, None, None]
    p1 = tr.p1
    # gather p1 patches (N, C2, C1, 27)
    tdc, tyc, txc = np.clip(td, 0, d - 1), np.clip(ty, 0, h2 - 1), np.clip(tx, 0, w2 - 1)
    patch = p1[nn_[:, :, :, None], tdc[:, :, None, :], np.arange(c1)[None, None, :, None],
               tyc[:, :, None, :], txc[:, :, None, :]]
    patch = patch * valid[:, :, None, :]
    grads["w2"] = np.einsum("nc,nckq->ckq", gz, patch).reshape(c2, c1, 3, 3, 3).astype(dtype)

    en, ed, ec, ey, ex, ev = _backward_to_z1(params, tr, dlogit, dtype)
    grads["b1"] = np.bincount(ec, weights=ev, minlength=c1).astype(dtype)
    dd, hh, ww = xb.shape[1:]
    qd = ed[:, None] + _OFFSETS[:, 0] - 1
    qy = ey[:, None] + _OFFSETS[:, 1] - 1
    qx = ex[:, None] + _OFFSETS[:, 2] - 1
    qvalid = (qd >= 0) & (qd < dd) & (qy >= 0) & (qy < hh) & (qx >= 0) & (qx < ww)
    xv = xb[en[:, None], np.clip(qd, 0, dd - 1), np.clip(qy, 0, hh - 1), np.clip(qx, 0, ww - 1)]
    xv = xv * qvalid
    w1g = np.zeros((c1, 27), np.float64)
    np.add.at(w1g, ec, ev[:, None] * xv)
    grads["w1"] = w1g.reshape(c1, 1, 3, 3, 3).astype(dtype)
    return loss, grads


def train(dataset: MiniVolumeDataset, cfg: TrainConfig = TrainConfig(), log=None) -> ClassifierParams:
    """Momentum SGD on balanced batches with cutout augmentation.

    ``log`` (a list) receives one dict per iteration with the batch loss.
    """
    if len(dataset.positives) == 0 or len(dataset.negatives) == 0:
        raise TrainingError("training data must contain both positive and negative slices")
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    params = ClassifierParams.random(*cfg.channels, seed=cfg.init_seed)
    velocity = {n: np.zeros_like(getattr(params, n)) for n in ClassifierParams.NAMES}
    n_pos = math.ceil(cfg.batch_size / 2)
    for it in range(cfg.iterations):
        pos = rng.choice(dataset.positives, n_pos)
        neg = rng.choice(dataset.negatives, cfg.batch_size - n_pos)
        ks = np.concatenate([pos, neg])
        xb = np.stack([dataset.crop(k, cfg.crop_size, rng) for k in ks])
        yb = np.array([dataset.label(k) for k in ks], np.float32)
        for i in range(len(xb)):
            if rng.random() < cfg.cutout_prob:
                _cutout(rng, xb[i], cfg)
        loss, grads = loss_and_grads(params, xb, yb)
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        scale = min(1.0, cfg.grad_clip / norm) if norm > 0 else 1.0
        for name in ClassifierParams.NAMES:
            v = velocity[name]
            v *= cfg.momentum
            v -= np.float32(cfg.learning_rate * scale) * grads[name]
            setattr(params, name, getattr(params, name) + v)
        if not all(np.isfinite(a).all() for a in params.arrays()):
            raise TrainingError(f"parameters diverged at iteration {it}")
        if log is not None:
            log.append({"iteration": it, "loss": loss, "grad_norm": norm})
    return params
