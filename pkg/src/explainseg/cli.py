"""Command-line entry point: phantom-gen, train, pseudolabel, eval, report.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Errors are also
written to stderr as one JSON object per line.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io_formats as iof
from .attribution import AttributionConfig
from .classifier import MiniVolumeDataset, TrainConfig, train
from .errors import ConfigError, ExplainSegError, FormatError, StudyMismatchError
from .evaluation import MetricsReport, evaluate_dataset, format_row, regions_from_mask
from .phantom import PhantomConfig, generate_dataset
from .pipeline import PipelineConfig, assemble, generate_pseudolabels, iteration_histogram, sweep_high_threshold
from .volume import hu_window

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SECTIONS = ("phantom", "train", "attribution", "pipeline", "eval")


class UsageError(Exception):
    """Bad flags or missing inputs; maps to exit code 2."""


# --------------------------------------------------------------------------
# run configuration


def _tuples(d):
    return {k: tuple(v) if isinstance(v, list) and k != "references" else v for k, v in d.items()}


class RunConfig:
    """Merged configuration of every stage, with a key-order independent hash."""

    def __init__(self, sections=None):
        s = {k: dict(v) for k, v in (sections or {}).items()}
        unknown = set(s) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            self.phantom = PhantomConfig(**_tuples(s.get("phantom", {})))
            self.train = TrainConfig(**_tuples(s.get("train", {})))
            self.attribution = AttributionConfig.from_dict(s.get("attribution", {}))
            self.pipeline = PipelineConfig(**_tuples(s.get("pipeline", {})))
        except TypeError as e:
            raise ConfigError(f"invalid config key: {e}") from None
        self.eval = dict(s.get("eval", {}))

    @classmethod
    def load(cls, path=None):
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            with open(p, "rb") as f:
                return cls(tomllib.load(f))
        except tomllib.TOMLDecodeError as e:
            raise UsageError(f"config file {p} is not valid TOML: {e}") from None

    def to_dict(self):
        pipe = self.pipeline.to_dict()
        return {"phantom": self.phantom.to_dict(),
                "train": {k: list(v) if isinstance(v, tuple) else v for k, v in vars(self.train).items()},
                "attribution": self.attribution.to_dict(), "pipeline": pipe, "eval": self.eval}

    def hash(self):
        return iof.config_hash(self.to_dict())

    def replace(self, section, **changes):
        changes = {k: v for k, v in changes.items() if v is not None}
        if changes:
            setattr(self, section, replace(getattr(self, section), **changes))
        return self


# --------------------------------------------------------------------------
# dataset helpers


def _study_paths(root, sid):
    return root / sid / "volume.json", root / sid / "gt.json"


def load_dataset(root):
    """(manifest, list of (study_id, HU Volume, gt Volume or None))."""
    root = Path(root)
    if not root.is_dir():
        raise UsageError(f"data directory not found: {root}")
    manifest = iof.load_manifest(root / "manifest.json")
    out = []
    for s in manifest["studies"]:
        vol, _ = iof.load_volume(root / s["volume"])
        gt = iof.load_volume(root / s["gt"])[0] if s.get("gt") else None
        out.append((s["id"], vol, gt, np.array(s["slice_labels"], np.uint8)))
    return manifest, out


def _jobs(n):
    return max(1, os.cpu_count() or 1) if n is None else max(1, n)


def _single_thread():
    try:
        import torch
        torch.set_num_threads(1)
    except Exception:  # pragma: no cover - torch always present in practice
        pass


# --------------------------------------------------------------------------
# subcommands


def cmd_phantom_gen(args, rc: RunConfig):
    if not 0 <= args.positivity <= 1:
        raise UsageError(f"--positivity must be in [0, 1], got {args.positivity}")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.dims is not None:
        rc.replace("phantom", dims=tuple(args.dims))
    if args.lesions is not None:
        rc.replace("phantom", lesion_count_range=tuple(args.lesions))
    rc.replace("phantom", seed=args.seed)
    out = Path(args.out)
    studies = generate_dataset(rc.phantom, args.count, args.positivity, jobs=_jobs(args.jobs))
    h = rc.hash()
    prov = {"config_hash": h}
    entries = []
    for st in studies:
        vpath, gpath = _study_paths(out, st.study_id)
        iof.save_volume(st.volume, "hu", vpath, prov)
        iof.save_volume(st.gt_mask, "mask", gpath, prov)
        entries.append({"id": st.study_id, "seed": str(st.seed), "positive": st.positive,
                        "lesion_count": st.lesion_count,
                        "volume": f"{st.study_id}/volume.json", "gt": f"{st.study_id}/gt.json",
                        "slice_labels": [int(v) for v in st.slice_labels]})
    iof.save_manifest({"config": rc.to_dict(), "config_hash": h, "count": args.count,
                       "positivity": args.positivity, "studies": entries}, out / "manifest.json")
    print(json.dumps({"studies": len(entries), "positive": sum(e["positive"] for e in entries),
                      "config_hash": h}))
    return 0


def cmd_train(args, rc: RunConfig):
    rc.replace("train", iterations=args.iterations, seed=args.seed)
    _, data = load_dataset(args.data)
    ds = MiniVolumeDataset([hu_window(v).data for _, v, _, _ in data], [lab for _, _, _, lab in data],
                           [g.data for _, _, g, _ in data] if all(g is not None for _, _, g, _ in data) else None)
    log = []
    params = train(ds, rc.train, log=log)
    h = rc.hash()
    out = Path(args.out)
    iof.save_params(params, out, {"config_hash": h})
    iof.write_csv(out.with_name(out.stem + "_curve.csv"), ["iteration", "loss", "grad_norm"],
                  [[r["iteration"], repr(r["loss"]), repr(r["grad_norm"])] for r in log])
    print(json.dumps({"model": str(out), "final_loss": log[-1]["loss"], "config_hash": h}))
    return 0


def _parse_sweep(text):
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError:
        raise UsageError(f"--sweep expects lo:hi:n, got {text!r}") from None
    if n < 1 or not 0 < lo <= hi:
        raise UsageError("--sweep needs 0 < lo <= hi and n >= 1")
    return list(np.linspace(lo, hi, n)) if n > 1 else [lo]


def _pseudolabel_one(task):
    _single_thread()
    sid, vol, params, attrib, pipe = task
    r = generate_pseudolabels(vol, params, attrib, pipe, study_id=sid)
    return sid, r


def _iteration_curve(results, gts, cfg):
    """Metrics after truncating every trace to k iterations, k = 1..max used."""
    kmax = max([len(t) for r in results.values() for t in r.traces.values()] + [1])
    rows = []
    for k in range(1, kmax + 1):
        preds = {sid: assemble(r.traces, r.mask.dims, cfg, max_iter=k)[1] for sid, r in results.items()}
        m = evaluate_dataset(preds, gts)
        rows.append((k, m))
    return rows


def cmd_pseudolabel(args, rc: RunConfig):
    model = Path(args.model)
    if not model.is_file():
        raise UsageError(f"model not found: {model}")
    if args.t_high is not None and args.sweep is not None:
        raise UsageError("--t-high and --sweep are mutually exclusive")
    rc.replace("pipeline", t_high=args.t_high, iter_limit=args.iter_limit)
    _, data = load_dataset(args.data)
    params = iof.load_params(model)
    out = Path(args.out)
    h = rc.hash()
    prov = {"config_hash": h}
    gts = {sid: regions_from_mask(g) for sid, _, g, _ in data if g is not None}
    if args.sweep is not None:
        if len(gts) != len(data):
            raise UsageError("--sweep needs ground truth for every study")

        class _S:  # minimal study view for the sweep
            def __init__(self, v, g):
                self.volume, self.gt_mask = v, g

        best, curve = sweep_high_threshold([_S(v, g) for _, v, g, _ in data], _parse_sweep(args.sweep),
                                           params, rc.attribution, rc.pipeline)
        iof.write_csv(out / "sweep.csv", ["t_high", "f1", "sensitivity", "ppv"],
                      [[repr(t), repr(f), _fmt(s), _fmt(p)] for t, f, s, p in curve])
        rc.replace("pipeline", t_high=best)
        h = rc.hash()
        prov = {"config_hash": h}
    if rc.pipeline.t_high is None:
        raise UsageError("t_high is not set: pass --t-high, --sweep, or set it in the config")
    tasks = [(sid, v, params, rc.attribution, rc.pipeline) for sid, v, _, _ in data]
    jobs = _jobs(args.jobs)
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = dict(ex.map(_pseudolabel_one, tasks))
    else:
        results = dict(_pseudolabel_one(t) for t in tasks)
    hist = {}
    for sid in sorted(results):
        r = results[sid]
        d = out / sid
        iof.save_volume(r.mask, "mask", d / "mask.json", prov)
        iof.save_clusters(r.clusters, d / "clusters.json", prov)
        report = dict(r.report, config_hash=h)
        report.pop("timing", None)  # keep outputs byte-stable across runs
        iof.write_json(d / "report.json", report)
        for k, v in iteration_histogram(r.traces).items():
            hist[k] = hist.get(k, 0) + v
    iof.write_csv(out / "iteration_histogram.csv", ["iterations", "slices"],
                  [[k, hist[k]] for k in sorted(hist)])
    summary = {"config_hash": h, "config": rc.to_dict(), "studies": sorted(results),
               "t_high": rc.pipeline.t_high}
    if len(gts) == len(data):
        rows = _iteration_curve(results, gts, rc.pipeline)
        iof.write_csv(out / "iteration_curve.csv", ["iteration", "sensitivity", "ppv", "f1"],
                      [[k, _fmt(m.sensitivity), _fmt(m.ppv), repr(m.f1)] for k, m in rows])
        summary["final"] = rows[-1][1].to_dict()
    iof.write_json(out / "summary.json", summary)
    print(json.dumps({"studies": len(results), "t_high": rc.pipeline.t_high, "config_hash": h}))
    return 0


def _fmt(v):
    return "" if v is None else repr(v)


def _load_predictions(pred_dir, ids, dims):
    """ClusterSet per study; an empty prediction directory means no detections."""
    pred_dir = Path(pred_dir)
    if not pred_dir.is_dir():
        raise UsageError(f"prediction directory not found: {pred_dir}")
    from .clustering import ClusterSet

    present = {p.parent.name for p in pred_dir.glob("*/clusters.json")}
    if not present:
        return {sid: ClusterSet((), dims[sid]) for sid in ids}
    missing, extra = sorted(set(ids) - present), sorted(present - set(ids))
    if missing or extra:
        raise StudyMismatchError(f"prediction and ground-truth studies differ: {', '.join(missing + extra)}",
                                 missing + extra)
    preds = {}
    for sid in ids:
        cs = iof.load_clusters(pred_dir / sid / "clusters.json")
        if tuple(cs.source_dims) != tuple(dims[sid]):
            raise StudyMismatchError(f"volume dims differ for study {sid}: "
                                     f"{tuple(cs.source_dims)} vs {tuple(dims[sid])}", [sid])
        preds[sid] = cs
    return preds


def cmd_eval(args, rc: RunConfig):
    _, data = load_dataset(args.gt)
    if any(g is None for _, _, g, _ in data):
        raise UsageError("ground-truth dataset lacks lesion masks")
    gts = {sid: regions_from_mask(g) for sid, _, g, _ in data}
    dims = {sid: g.dims for sid, _, g, _ in data}
    preds = _load_predictions(args.pred, list(gts), dims)
    if args.strict_iou is None:
        args.strict_iou = rc.eval.get("strict_iou")
    rep = evaluate_dataset(preds, gts, strict_iou=args.strict_iou)
    out = Path(args.out)
    prov = {"config_hash": rc.hash(), "strict_iou": args.strict_iou}
    iof.save_metrics(rep, out, prov)
    label = Path(args.pred).name + (f" (iou>{args.strict_iou})" if args.strict_iou is not None else "")
    iof.write_csv(out.with_suffix(".csv"), ["config", "sensitivity", "ppv", "f1"], [format_row(label, rep)])
    print(json.dumps({"tp": rep.tp, "fp": rep.fp, "fn": rep.fn, "f1": rep.f1}))
    return 0


def cmd_report(args, rc: RunConfig):
    runs = []
    for d in args.runs:
        d = Path(d)
        if (d / "summary.json").is_file():
            runs.append(d)
    if not runs:
        raise UsageError("no runs found (directories need a summary.json)")
    out = Path(args.out)
    rows, curves = [], []
    for d in runs:
        summary = iof.read_json(d / "summary.json")
        final = summary.get("final")
        if final is not None:
            rows.append(format_row(d.name, MetricsReport.from_dict(final)))
        curve_path = d / "iteration_curve.csv"
        if curve_path.is_file():
            import csv

            with open(curve_path, newline="") as f:
                recs = list(csv.DictReader(f))
            curves.append((d.name, [(int(r["iteration"]), _num(r["sensitivity"]), _num(r["ppv"]),
                                     _num(r["f1"])) for r in recs]))
    iof.write_csv(out / "table.csv", ["config", "sensitivity", "ppv", "f1"], rows)
    if curves:
        _plot_curves(curves, out / "iterations.svg")
        iof.write_csv(out / "iterations.csv", ["run", "iteration", "sensitivity", "ppv", "f1"],
                      [[name, k, _fmt(s), _fmt(p), _fmt(f)] for name, c in curves for k, s, p, f in c])
    print(json.dumps({"runs": len(runs), "rows": len(rows)}))
    return 0


def _num(s):
    return float(s) if s not in ("", None) else None


def _plot_curves(curves, path):
    import matplotlib

    matplotlib.use("Agg")
    import io as _io

    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(11, 3.4))
    for ax, col, title in zip(axes, (3, 1, 2), ("F1", "Sensitivity", "PPV")):
        for name, c in curves:
            xs = [r[0] for r in c]
            ys = [np.nan if r[col] is None else r[col] for r in c]
            ax.plot(xs, ys, marker="o", label=name)
        ax.set_title(title)
        ax.set_xlabel("iteration")
        ks = sorted({r[0] for _, c in curves for r in c})
        ax.set_xticks(ks)
        ax.set_xlim(min(ks) - 0.5, max(ks) + 0.5)
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    buf = _io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    iof.atomic_write_bytes(path, buf.getvalue())


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"error": "usage", "message": message}) + "\n")
        raise SystemExit(2)


def build_parser():
    p = _Parser(prog="explainseg", description="Weakly supervised pseudo-labels from an explained classifier.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("phantom-gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--positivity", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dims", type=int, nargs=3, metavar=("W", "H", "D"))
    g.add_argument("--lesions", type=int, nargs=2, metavar=("MIN", "MAX"))
    g.add_argument("--config")
    g.add_argument("--jobs", type=int)
    g.set_defaults(func=cmd_phantom_gen)

    t = sub.add_parser("train", help="train the slice classifier")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("pseudolabel", help="generate pseudo-label masks")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--t-high", type=float)
    s.add_argument("--sweep")
    s.add_argument("--iter-limit", type=int)
    s.add_argument("--jobs", type=int)
    s.set_defaults(func=cmd_pseudolabel)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--strict-iou", type=float)
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="tables and iteration plots from runs")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config")
    r.set_defaults(func=cmd_report)
    return p


def _fail(code, kind, message, **extra):
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    _single_thread()
    try:
        rc = RunConfig.load(args.config)
        return args.func(args, rc)
    except UsageError as e:
        return _fail(2, "usage", str(e))
    except ConfigError as e:
        return _fail(2, "config", str(e))
    except StudyMismatchError as e:
        return _fail(1, "study_mismatch", str(e), offenders=e.offenders)
    except FormatError as e:
        return _fail(1, type(e).__name__, str(e))
    except ExplainSegError as e:
        return _fail(1, type(e).__name__, str(e))
    except OSError as e:
        return _fail(1, "io", str(e))


if __name__ == "__main__":
    sys.exit(main())
