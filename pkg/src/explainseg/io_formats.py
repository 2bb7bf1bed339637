"""On-disk formats: volumes, cluster sets, classifier params, metrics and dataset manifests.

Volumes are a JSON header plus a sibling little-endian raw payload in
x-fastest order.  Every JSON file is written with sorted keys, and every
write goes to a temporary file in the target directory that is renamed into
place, so a reader never sees a partial file.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import ClassifierParams
from .clustering import ClusterSet, make_cluster
from .errors import (ChecksumError, DataIntegrityError, FormatError, LengthMismatchError,
                     MissingFileError, ReferentialError, SchemaError, VersionError)
from .evaluation import MetricsReport
from .volume import Volume

VERSION = 1
VOLUME_MAGIC = "explainseg-volume"
CLUSTERS_MAGIC = "explainseg-clusters"
PARAMS_MAGIC = "explainseg-params"
METRICS_MAGIC = "explainseg-metrics"
MANIFEST_MAGIC = "explainseg-manifest"
SEMANTICS = ("hu", "windowed", "heatmap", "mask")
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


# --------------------------------------------------------------------------
# primitives


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path, obj):
    atomic_write_bytes(path, dumps_json(obj).encode("utf-8"))


def read_json(path):
    path = Path(path)
    if not path.is_file():
        raise MissingFileError("file not found", path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"not valid JSON ({e})", path) from None


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def config_hash(obj) -> str:
    """Content hash of a JSON-compatible config; independent of key order."""
    return sha256_hex(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8"))


def _require(doc, key, types, path, magic=None):
    if not isinstance(doc, dict) or key not in doc:
        raise SchemaError("missing field", key, path)
    v = doc[key]
    if not isinstance(v, types) or isinstance(v, bool) and bool not in _as_tuple(types):
        raise SchemaError(f"wrong type {type(v).__name__}", key, path)
    return v


def _as_tuple(t):
    return t if isinstance(t, tuple) else (t,)


def _check_header(doc, magic, path):
    if not isinstance(doc, dict):
        raise SchemaError("top level must be an object", None, path)
    if doc.get("magic") != magic:
        raise SchemaError(f"expected magic {magic!r}", "magic", path)
    version = _require(doc, "version", int, path)
    if version > VERSION or version < 1:
        raise VersionError(f"unsupported version {version} (reader supports {VERSION})", path)


# --------------------------------------------------------------------------
# volumes


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple
    spacing: tuple
    dtype: str
    value_semantics: str
    checksum: str
    payload: str
    provenance: dict = field(default_factory=dict)
    magic: str = VOLUME_MAGIC
    version: int = VERSION

    def to_dict(self):
        return {"magic": self.magic, "version": self.version, "dims": list(self.dims),
                "spacing": list(self.spacing), "dtype": self.dtype,
                "value_semantics": self.value_semantics, "checksum": self.checksum,
                "payload": self.payload, "provenance": self.provenance}


def payload_path(header_path):
    p = Path(header_path)
    return p.with_suffix(".raw")


def save_volume(vol, semantics, path, provenance=None):
    """Write header ``path`` (JSON) and its ``.raw`` payload sibling."""
    if semantics not in SEMANTICS:
        raise SchemaError(f"unknown value semantics {semantics!r}", "value_semantics", path)
    arr = vol.data if isinstance(vol, Volume) else np.asarray(vol)
    spacing = vol.spacing if isinstance(vol, Volume) else (1.0, 1.0, 1.0)
    if arr.ndim != 3:
        raise SchemaError("volume must be 3D", "dims", path)
    if semantics == "mask":
        if not np.isin(arr, (0, 1)).all():
            raise DataIntegrityError(f"mask payload must be 0/1: {path}")
        dtype = "u8"
    else:
        if not np.isfinite(arr).all():
            raise DataIntegrityError(f"non-finite voxel in payload: {path}")
        dtype = "f32"
    data = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes(order="C")
    d, h, w = arr.shape
    raw = payload_path(path)
    header = VolumeHeader((w, h, d), tuple(float(s) for s in spacing), dtype, semantics,
                          sha256_hex(data), raw.name, dict(provenance or {}))
    atomic_write_bytes(raw, data)
    write_json(path, header.to_dict())
    return header


def load_volume(path):
    """(Volume, VolumeHeader); each failure mode raises its own error type."""
    path = Path(path)
    doc = read_json(path)
    _check_header(doc, VOLUME_MAGIC, path)
    dims = _require(doc, "dims", list, path)
    if len(dims) != 3 or not all(isinstance(v, int) and v > 0 for v in dims):
        raise SchemaError("dims must be three positive integers", "dims", path)
    spacing = _require(doc, "spacing", list, path)
    if len(spacing) != 3 or not all(isinstance(v, (int, float)) and v > 0 for v in spacing):
        raise SchemaError("spacing must be three positive numbers", "spacing", path)
    dtype = _require(doc, "dtype", str, path)
    if dtype not in _DTYPES:
        raise SchemaError(f"unknown dtype {dtype!r}", "dtype", path)
    sem = _require(doc, "value_semantics", str, path)
    if sem not in SEMANTICS:
        raise SchemaError(f"unknown value semantics {sem!r}", "value_semantics", path)
    checksum = _require(doc, "checksum", str, path)
    payload_name = _require(doc, "payload", str, path)
    provenance = doc.get("provenance", {})
    if not isinstance(provenance, dict):
        raise SchemaError("provenance must be an object", "provenance", path)
    raw = path.parent / payload_name
    if not raw.is_file():
        raise MissingFileError("payload not found", raw)
    data = raw.read_bytes()
    w, h, d = dims
    expected = w * h * d * _DTYPES[dtype].itemsize
    if len(data) != expected:
        raise LengthMismatchError(f"payload has {len(data)} bytes, header implies {expected}", raw)
    if sha256_hex(data) != checksum:
        raise ChecksumError("payload checksum mismatch", raw)
    arr = np.frombuffer(data, dtype=_DTYPES[dtype]).reshape(d, h, w)
    if sem == "mask" and not np.isin(arr, (0, 1)).all():
        raise DataIntegrityError(f"mask payload holds values other than 0/1: {raw}")
    vol = Volume(arr.astype(np.uint8 if dtype == "u8" else np.float32), tuple(spacing),
                 is_mask=(sem == "mask"))
    header = VolumeHeader(tuple(dims), tuple(float(s) for s in spacing), dtype, sem, checksum,
                          payload_name, provenance, doc["magic"], doc["version"])
    return vol, header


# --------------------------------------------------------------------------
# cluster sets


def rle_encode(indices):
    """[[start, length], ...] runs over sorted unique linear indices."""
    idx = np.unique(np.asarray(indices, dtype=np.int64))
    if len(idx) == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) != 1) + 1
    starts = np.r_[0, breaks]
    ends = np.r_[breaks, len(idx)]
    return [[int(idx[s]), int(e - s)] for s, e in zip(starts, ends)]


def rle_decode(runs):
    if not runs:
        return np.zeros(0, np.int64)
    return np.concatenate([np.arange(s, s + n, dtype=np.int64) for s, n in runs])


def clusters_to_dict(cs: ClusterSet, provenance=None):
    dims = [int(v) for v in cs.source_dims]
    out = []
    for c in cs:
        out.append({"id": int(c.id), "voxel_count": int(c.voxel_count),
                    "centroid": [float(v) for v in c.centroid],
                    "bbox": [[int(a), int(b)] for a, b in c.bbox],
                    "rle_voxels": rle_encode(c.linear_indices(dims))})
    return {"magic": CLUSTERS_MAGIC, "version": VERSION, "source_dims": dims, "clusters": out,
            "provenance": dict(provenance or {})}


def clusters_from_dict(doc, path=None) -> ClusterSet:
    _check_header(doc, CLUSTERS_MAGIC, path)
    dims = _require(doc, "source_dims", list, path)
    if len(dims) != 3 or not all(isinstance(v, int) and v > 0 for v in dims):
        raise SchemaError("source_dims must be three positive integers", "source_dims", path)
    w, h, d = dims
    entries = _require(doc, "clusters", list, path)
    clusters, seen = [], np.zeros(0, np.int64)
    for k, e in enumerate(entries):
        where = f"clusters[{k}]"
        cid = _require(e, "id", int, path)
        runs = _require(e, "rle_voxels", list, path)
        if not all(isinstance(r, list) and len(r) == 2 and all(isinstance(v, int) for v in r)
                   and r[1] > 0 for r in runs):
            raise SchemaError("runs must be [start, length] integer pairs", f"{where}.rle_voxels", path)
        lin = rle_decode(runs)
        if len(lin) == 0:
            raise SchemaError("cluster has no voxels", f"{where}.rle_voxels", path)
        if lin.min() < 0 or lin.max() >= w * h * d:
            raise SchemaError("voxel index outside the volume", f"{where}.rle_voxels", path)
        if _require(e, "voxel_count", int, path) != len(np.unique(lin)):
            raise SchemaError("voxel_count disagrees with voxels", f"{where}.voxel_count", path)
        z, rem = np.divmod(lin, h * w)
        y, x = np.divmod(rem, w)
        clusters.append(make_cluster(cid, np.stack([x, y, z], axis=1)))
        seen = np.concatenate([seen, lin])
    if len(np.unique(seen)) != len(seen):
        raise SchemaError("clusters overlap", "clusters", path)
    return ClusterSet(tuple(clusters), (w, h, d))


def save_clusters(cs: ClusterSet, path, provenance=None):
    write_json(path, clusters_to_dict(cs, provenance))


def load_clusters(path) -> ClusterSet:
    return clusters_from_dict(read_json(path), path)


# --------------------------------------------------------------------------
# classifier params


def save_params(params: ClassifierParams, path, provenance=None):
    """JSON descriptor ``path`` plus a little-endian float32 ``.bin`` blob."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    arrays, offset, chunks = [], 0, []
    for name in ClassifierParams.NAMES:
        a = np.ascontiguousarray(getattr(params, name), dtype="<f4")
        arrays.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        offset += a.size
        chunks.append(a.tobytes())
    blob = b"".join(chunks)
    doc = {"magic": PARAMS_MAGIC, "version": VERSION, "descriptor": params.descriptor(),
           "arrays": arrays, "checksum": sha256_hex(blob), "payload": blob_path.name,
           "provenance": dict(provenance or {})}
    atomic_write_bytes(blob_path, blob)
    write_json(path, doc)


def load_params(path) -> ClassifierParams:
    path = Path(path)
    doc = read_json(path)
    _check_header(doc, PARAMS_MAGIC, path)
    desc = _require(doc, "descriptor", dict, path)
    arrays = _require(doc, "arrays", list, path)
    blob_path = path.parent / _require(doc, "payload", str, path)
    if not blob_path.is_file():
        raise MissingFileError("parameter blob not found", blob_path)
    blob = blob_path.read_bytes()
    total = sum(int(a.get("count", 0)) for a in arrays if isinstance(a, dict))
    if len(blob) != 4 * total:
        raise LengthMismatchError(f"blob has {len(blob)} bytes, descriptor implies {4 * total}", blob_path)
    if sha256_hex(blob) != _require(doc, "checksum", str, path):
        raise ChecksumError("parameter blob checksum mismatch", blob_path)
    flat = np.frombuffer(blob, dtype="<f4")
    values = {}
    for k, a in enumerate(arrays):
        name = _require(a, "name", str, path)
        shape = tuple(_require(a, "shape", list, path))
        off, cnt = _require(a, "offset", int, path), _require(a, "count", int, path)
        if int(np.prod(shape)) != cnt:
            raise SchemaError("shape and count disagree", f"arrays[{k}].shape", path)
        values[name] = flat[off:off + cnt].reshape(shape).astype(np.float32)
    missing = [n for n in ClassifierParams.NAMES if n not in values]
    if missing:
        raise SchemaError("missing parameter arrays", f"arrays.{missing[0]}", path)
    try:
        params = ClassifierParams(*(values[n] for n in ClassifierParams.NAMES))
    except ValueError as e:
        raise SchemaError(str(e), "arrays", path) from None
    if params.descriptor() != desc:
        raise SchemaError("architecture descriptor does not match the arrays", "descriptor", path)
    return params


# --------------------------------------------------------------------------
# metrics


def save_metrics(report: MetricsReport, path, provenance=None):
    doc = dict(report.to_dict())
    doc.update({"magic": METRICS_MAGIC, "version": VERSION, "provenance": dict(provenance or {})})
    write_json(path, doc)


def load_metrics(path) -> MetricsReport:
    path = Path(path)
    doc = read_json(path)
    _check_header(doc, METRICS_MAGIC, path)
    for key in ("tp", "fp", "fn"):
        if _require(doc, key, int, path) < 0:
            raise SchemaError("count must be non-negative", key, path)
    for key in ("sensitivity", "ppv", "f1"):
        if key not in doc or not (doc[key] is None or isinstance(doc[key], (int, float))):
            raise SchemaError("rate must be a number or null", key, path)
    _require(doc, "per_study", list, path)
    return MetricsReport.from_dict(doc)


# --------------------------------------------------------------------------
# dataset manifest


def save_manifest(manifest: dict, path):
    doc = dict(manifest)
    doc.update({"magic": MANIFEST_MAGIC, "version": VERSION})
    write_json(path, doc)


def load_manifest(path, check_files=True) -> dict:
    """Validated manifest; referenced files must exist when ``check_files``."""
    path = Path(path)
    doc = read_json(path)
    _check_header(doc, MANIFEST_MAGIC, path)
    studies = _require(doc, "studies", list, path)
    ids = set()
    for k, s in enumerate(studies):
        sid = _require(s, "id", str, path)
        if sid in ids:
            raise SchemaError(f"duplicate study id {sid!r}", f"studies[{k}].id", path)
        ids.add(sid)
        labels = _require(s, "slice_labels", list, path)
        if not all(v in (0, 1) for v in labels):
            raise SchemaError("slice labels must be 0/1", f"studies[{k}].slice_labels", path)
        for key in ("volume", "gt"):
            rel = s.get(key)
            if rel is None:
                continue
            if not isinstance(rel, str):
                raise SchemaError("file reference must be a string", f"studies[{k}].{key}", path)
            if check_files:
                target = path.parent / rel
                if not target.is_file() or not payload_path(target).is_file():
                    raise ReferentialError(f"study {sid} references missing file {rel}", path)
    return doc
