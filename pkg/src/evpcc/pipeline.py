"""Original / voxelized / decompressed pipelines over event datasets.

A run expands into work units, one per (sequence, configuration point).
Units are independent, so they go through a process pool; results are put
back in canonical order before anything is written, which keeps reports
byte-identical across runs and ``--jobs`` settings.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import quality
from .characterize import characterize_sequence, dataset_summary
from .codec.external import ExternalCodec, run_external_codec
from .codec.octree import OctreeConfig, decode, encode, rate_bpe
from .convert import ConversionConfig, event_to_pc, pc_to_event_with_count
from .event_io import POS, EventSequence, FormatParams, load_events, walk_dataset
from .pc_model import EventPointCloud, write_ply
from .tensor_export import build_tensor, write_tensor

log = logging.getLogger(__name__)

PIPELINES = ("original", "voxelized", "decompressed")
METRIC_CHOICES = ("e2e", "e2d", "both", "none")

ROW_FIELDS = [
    "source_id", "label", "pipeline", "tsf", "codec", "rate_point", "dup_method",
    "n_events", "n_points_pos", "n_points_neg", "discarded_pct", "cross_duplicates_in",
    "duplicates_resolved", "n_decoded_events", "bytes_pos", "bytes_neg", "bpe",
    "psnr_e2e", "psnr_e2d", "peak", "error",
]


class JobError(ValueError):
    pass


@dataclass(frozen=True)
class CodecSpec:
    """Builtin octree codec or an external command template.

    For the builtin codec each entry of ``truncate_levels`` is one rate point;
    for external codecs each entry of ``params`` fills ``{param}``.
    """

    kind: str = "octree"
    truncate_levels: tuple = (0,)
    score_radius: int = 2
    command: Optional[str] = None
    params: tuple = (None,)
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ("octree", "external"):
            raise JobError(f"unknown codec kind {self.kind!r}")
        if self.kind == "external":
            if not self.command:
                raise JobError("external codec needs a command template")
            ExternalCodec.parse(self.command)
        elif any(int(t) < 0 for t in self.truncate_levels):
            raise JobError("truncate levels must be >= 0")

    @property
    def label(self) -> str:
        return self.name or ("octree" if self.kind == "octree" else "external")

    @property
    def scores_capable(self) -> bool:
        return self.kind == "octree"

    def rate_points(self) -> list:
        if self.kind == "octree":
            return [int(t) for t in self.truncate_levels]
        return list(self.params)

    @classmethod
    def from_dict(cls, d: dict) -> "CodecSpec":
        d = dict(d)
        kind = d.pop("type", d.pop("kind", "octree"))
        if "truncate" in d:
            d["truncate_levels"] = d.pop("truncate")
        tl = d.pop("truncate_levels", (0,))
        params = d.pop("params", (None,))
        known = {"score_radius", "command", "name"}
        unknown = set(d) - known
        if unknown:
            raise JobError(f"unknown codec fields {sorted(unknown)}")
        return cls(kind=kind,
                   truncate_levels=tuple(tl) if isinstance(tl, (list, tuple)) else (tl,),
                   params=tuple(params) if isinstance(params, (list, tuple)) else (params,),
                   **d)


@dataclass(frozen=True)
class ConfigPoint:
    pipeline: str
    tsf: int
    dup_method: str = "nn"
    codec: Optional[CodecSpec] = None
    rate_point: object = None

    @property
    def key(self) -> tuple:
        return (self.pipeline, self.tsf, self.codec.label if self.codec else "",
                self.dup_method)


@dataclass
class PipelineJob:
    pipeline: str = "voxelized"
    tsf: tuple = (256,)
    codecs: tuple = ()
    duplicate_methods: tuple = ("nn",)
    metric: str = "both"
    peak: Optional[float] = None
    e2d_neighbors: int = quality.E2D_NEIGHBORS
    dataset: Optional[str] = None
    out: Optional[str] = None
    units: str = "us"
    jobs: Optional[int] = None
    export_tensors: bool = False
    tensor_bins: int = 9

    def __post_init__(self):
        if self.pipeline not in PIPELINES:
            raise JobError(f"pipeline must be one of {PIPELINES}")
        self.tsf = tuple(int(t) for t in (self.tsf if isinstance(self.tsf, (list, tuple)) else [self.tsf]))
        if not self.tsf or any(t < 1 for t in self.tsf):
            raise JobError("tsf values must be positive integers")
        self.codecs = tuple(c if isinstance(c, CodecSpec) else CodecSpec.from_dict(c)
                            for c in self.codecs)
        dm = self.duplicate_methods
        self.duplicate_methods = tuple([dm] if isinstance(dm, str) else dm)
        for m in self.duplicate_methods:
            if m not in ("nn", "prob"):
                raise JobError(f"unknown duplicate method {m!r}")
        if self.metric not in METRIC_CHOICES:
            raise JobError(f"metric must be one of {METRIC_CHOICES}")
        FormatParams(self.units)
        if self.pipeline == "decompressed":
            if not self.codecs:
                raise JobError("decompressed pipeline needs a codec")
            if "prob" in self.duplicate_methods and not all(c.scores_capable for c in self.codecs):
                raise JobError("prob duplicate method needs a codec that outputs occupancy scores")
        if self.pipeline == "voxelized" and self.duplicate_methods != ("nn",):
            raise JobError("the voxelized pipeline resolves duplicates with nn only")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineJob":
        d = dict(d)
        if "codec" in d:
            d["codecs"] = [d.pop("codec")]
        if "duplicate_method" in d:
            d["duplicate_methods"] = d.pop("duplicate_method")
        if "tsfs" in d:
            d["tsf"] = d.pop("tsfs")
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise JobError(f"unknown job fields {sorted(unknown)}")
        return cls(**d)

    def points(self) -> list:
        out = []
        for tsf in self.tsf:
            if self.pipeline != "decompressed":
                out.append(ConfigPoint(self.pipeline, tsf, "nn"))
                continue
            for codec in self.codecs:
                for dm in self.duplicate_methods:
                    for rp in codec.rate_points():
                        out.append(ConfigPoint(self.pipeline, tsf, dm, codec, rp))
        return out


# ------------------------------------------------------------------ units

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _json_safe(v):
    if isinstance(v, float) and (math.isinf(v) or math.isnan(v)):
        return str(v)
    if isinstance(v, dict):
        return {str(k): _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def _metric(fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (quality.UndefinedMetricError, quality.InsufficientPointsError) as exc:
        log.info("metric undefined: %s", exc)
        return None


def _code_cloud(pc: EventPointCloud, point: ConfigPoint, workdir: Path):
    """Run the configured codec on one polarity cloud -> (decoded cloud, bytes)."""
    codec = point.codec
    if codec.kind == "octree":
        cfg = OctreeConfig.lossy(int(point.rate_point), codec.score_radius)
        bs = encode(pc, cfg, allow_empty=True)
        return decode(bs, pc.polarity), len(bs)
    if len(pc) == 0:
        return EventPointCloud(pc.polarity, np.zeros((0, 3), dtype=np.int64)), 0
    name = "pos" if pc.polarity == POS else "neg"
    in_ply = workdir / f"{name}.ply"
    in_ply.write_bytes(write_ply(pc))
    params = {} if point.rate_point is None else {"param": point.rate_point}
    return run_external_codec(codec.command, in_ply, workdir / name, pc.polarity, **params)


def process_sequence(seq: EventSequence, point: ConfigPoint, metric: str = "both",
                     peak: Optional[float] = None, e2d_neighbors: int = quality.E2D_NEIGHBORS):
    """Run one sequence through one configuration point.

    Returns the report row and the reconstructed event sequence.
    """
    row = dict.fromkeys(ROW_FIELDS)
    row.update(source_id=seq.source_id, label=seq.label, pipeline=point.pipeline,
               tsf=point.tsf, dup_method=point.dup_method, n_events=len(seq),
               codec=point.codec.label if point.codec else "",
               rate_point=point.rate_point)
    cfg = ConversionConfig(point.tsf, point.dup_method)
    pos, neg, stats = event_to_pc(seq, cfg)
    row.update(n_points_pos=len(pos), n_points_neg=len(neg),
               discarded_pct=stats.discarded_pct,
               cross_duplicates_in=stats.n_cross_polarity_duplicates)
    if point.pipeline == "decompressed":
        with tempfile.TemporaryDirectory(prefix="evpcc-") as tmp:
            pos, nb_pos = _code_cloud(pos, point, Path(tmp))
            neg, nb_neg = _code_cloud(neg, point, Path(tmp))
        row.update(bytes_pos=nb_pos, bytes_neg=nb_neg)
        if len(seq):
            row["bpe"] = rate_bpe(nb_pos, nb_neg, len(seq))
    rec, n_dups = pc_to_event_with_count(pos, neg, cfg, seq.units_per_second,
                                         label=seq.label, source_id=seq.source_id)
    row.update(duplicates_resolved=n_dups, n_decoded_events=len(rec))
    space = quality.MetricSpace(peak=peak)
    ref = quality.to_metric_space(seq)
    dec = quality.to_metric_space(rec)
    if metric in ("e2e", "both", "e2d"):
        try:
            row["peak"] = peak if peak is not None else quality.default_peak(ref)
        except quality.UndefinedMetricError:
            row["peak"] = None
        if row["peak"] is not None:
            space = quality.MetricSpace(peak=row["peak"])
            if metric in ("e2e", "both"):
                row["psnr_e2e"] = _metric(quality.psnr_e2e, ref, dec, space)
            if metric in ("e2d", "both"):
                row["psnr_e2d"] = _metric(quality.psnr_e2d, ref, dec, space, k=e2d_neighbors)
    return row, rec


def _load(entry, units):
    label, src = entry
    if isinstance(src, EventSequence):
        return src
    return load_events(src, FormatParams(units), label=label)


def _run_unit(args):
    entry, point, opts = args
    label, src = entry
    sid = src.source_id if isinstance(src, EventSequence) else str(src)
    try:
        seq = _load(entry, opts["units"])
        row, rec = process_sequence(seq, point, opts["metric"], opts["peak"], opts["e2d_neighbors"])
        if opts.get("tensor_dir"):
            _export_tensor(rec, point, opts)
        return row
    except Exception as exc:  # crash isolation: one bad sequence never stops the run
        row = dict.fromkeys(ROW_FIELDS)
        row.update(source_id=sid, label=label, pipeline=point.pipeline, tsf=point.tsf,
                   codec=point.codec.label if point.codec else "",
                   rate_point=point.rate_point, dup_method=point.dup_method,
                   error=f"{type(exc).__name__}: {exc}")
        log.warning("sequence %s failed: %s", sid, exc)
        log.debug("%s", traceback.format_exc())
        return row


def _tensor_name(src_id, label) -> str:
    stem = Path(str(src_id)).name
    for suf in (".evt.csv", ".bin"):
        if stem.endswith(suf):
            stem = stem[: -len(suf)]
    return f"{label}/{stem}" if label else stem


def _export_tensor(seq, point, opts):
    tag = f"{point.pipeline}_tsf{point.tsf}"
    if point.codec is not None:
        tag += f"_{point.codec.label}_{point.dup_method}_{point.rate_point}"
    path = Path(opts["tensor_dir"]) / tag / (_tensor_name(seq.source_id, seq.label) + ".evt.tensor")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(write_tensor(build_tensor(seq, bins=opts.get("tensor_bins", 9))))


def _map(fn, items, jobs):
    jobs = jobs or os.cpu_count() or 1
    if jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


# ------------------------------------------------------------------ reports

@dataclass
class SweepReport:
    rows: list = field(default_factory=list)
    aggregates: list = field(default_factory=list)
    curves: dict = field(default_factory=dict)  # name -> RateDistortionCurve

    @property
    def failures(self) -> list:
        return [r for r in self.rows if r.get("error")]

    def rows_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ROW_FIELDS)
        for r in self.rows:
            w.writerow([_fmt(r.get(k)) for k in ROW_FIELDS])
        return buf.getvalue()

    def summary(self) -> dict:
        return _json_safe({
            "n_rows": len(self.rows),
            "n_failures": len(self.failures),
            "aggregates": self.aggregates,
            "curves": sorted(self.curves),
        })

    def write(self, out) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "rows.csv").write_text(self.rows_csv())
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        if self.curves:
            cdir = out / "curves"
            cdir.mkdir(exist_ok=True)
            for name, curve in sorted(self.curves.items()):
                (cdir / f"{name}.csv").write_text(curve.to_csv())
        manifest = out / "failures.json"
        if self.failures:
            manifest.write_text(json.dumps(
                [{"source_id": r["source_id"], "tsf": r["tsf"], "codec": r["codec"],
                  "rate_point": _json_safe(r["rate_point"]), "error": r["error"]}
                 for r in self.failures], indent=2) + "\n")
        elif manifest.exists():
            manifest.unlink()


def _mean(vals):
    vals = [v for v in vals if v is not None]
    if not vals:
        return None
    return float(np.mean(vals))


def aggregate(rows: list, points: list) -> list:
    """Mean of each numeric metric over the successful rows of every configuration point."""
    out = []
    for pt in points:
        sel = [r for r in rows if not r.get("error") and r["pipeline"] == pt.pipeline
               and r["tsf"] == pt.tsf and r["dup_method"] == pt.dup_method
               and r["codec"] == (pt.codec.label if pt.codec else "")
               and r["rate_point"] == pt.rate_point]
        agg = {"pipeline": pt.pipeline, "tsf": pt.tsf, "codec": pt.codec.label if pt.codec else "",
               "dup_method": pt.dup_method, "rate_point": pt.rate_point, "n": len(sel)}
        for k in ("bpe", "psnr_e2e", "psnr_e2d", "discarded_pct"):
            agg[k] = _mean([r[k] for r in sel])
        out.append(agg)
    return out


def build_curves(aggregates: list) -> dict:
    """Rate/score curves (bpe vs mean PSNR) per (tsf, codec, dup method)."""
    groups = {}
    for a in aggregates:
        if a["pipeline"] != "decompressed" or a["bpe"] is None:
            continue
        groups.setdefault((a["tsf"], a["codec"], a["dup_method"]), []).append(a)
    curves = {}
    for (tsf, codec, dm), aggs in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0]))):
        for metric in ("psnr_e2e", "psnr_e2d"):
            pts = sorted((a["bpe"], a[metric]) for a in aggs
                         if a[metric] is not None and math.isfinite(a[metric]))
            rates, scores = [], []
            for r, s in pts:
                if r > 0 and (not rates or r > rates[-1]):
                    rates.append(r)
                    scores.append(s)
            if rates:
                name = f"{codec}_tsf{tsf}_{dm}_{metric}"
                curves[name] = quality.RateDistortionCurve(rates, scores, name)
    return curves


def sweep(entries: list, job: PipelineJob) -> SweepReport:
    """Run every (sequence, configuration point) of a job.

    ``entries`` is a list of (label, path or EventSequence).
    """
    points = job.points()
    opts = {"units": job.units, "metric": job.metric, "peak": job.peak,
            "e2d_neighbors": job.e2d_neighbors, "tensor_bins": job.tensor_bins,
            "tensor_dir": str(Path(job.out) / "tensors") if job.export_tensors and job.out else None}
    units = [(entry, pt, opts) for pt in points for entry in entries]
    rows = _map(_run_unit, units, job.jobs)
    aggs = aggregate(rows, points)
    return SweepReport(rows, aggs, build_curves(aggs))


def run_voxelized(job: PipelineJob, entries=None) -> SweepReport:
    job = replace(job, pipeline="voxelized", codecs=(), duplicate_methods=("nn",))
    return sweep(_entries(job, entries), job)


def run_decompressed(job: PipelineJob, entries=None) -> SweepReport:
    job = replace(job, pipeline="decompressed")
    return sweep(_entries(job, entries), job)


def _entries(job, entries):
    if entries is not None:
        return list(entries)
    if not job.dataset:
        raise JobError("job has no dataset")
    return walk_dataset(job.dataset)


def _original_unit(args):
    entry, opts = args
    label, src = entry
    try:
        seq = _load(entry, opts["units"])
        stats = characterize_sequence(seq, tsf=opts["tsf"])
        if opts.get("tensor_dir"):
            path = Path(opts["tensor_dir"]) / "original" / (_tensor_name(seq.source_id, label) + ".evt.tensor")
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(write_tensor(build_tensor(seq, bins=opts["tensor_bins"])))
        return stats, None
    except Exception as exc:
        sid = src.source_id if isinstance(src, EventSequence) else str(src)
        return None, {"source_id": sid, "error": f"{type(exc).__name__}: {exc}"}


def run_original(job: PipelineJob, entries=None):
    """Characterize every sequence and export its tensor; returns (stats, failures)."""
    entries = _entries(job, entries)
    opts = {"units": job.units, "tsf": job.tsf[0], "tensor_bins": job.tensor_bins,
            "tensor_dir": str(Path(job.out) / "tensors") if job.out else None}
    results = _map(_original_unit, [(e, opts) for e in entries], job.jobs)
    stats = [s for s, _ in results if s is not None]
    failures = [f for _, f in results if f is not None]
    return stats, failures


def characterization_csv(stats) -> str:
    rows = [s.row() for s in stats]
    fields = list(rows[0]) if rows else ["source_id", "label"]
    for r in rows:
        for k in r:
            if k not in fields:
                fields.append(k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in fields])
    return buf.getvalue()


def write_characterization(stats, out, failures=()) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sequences.csv").write_text(characterization_csv(stats))
    hist = {s.source_id: s.temporal_histogram for s in stats}
    (out / "histograms.json").write_text(json.dumps(hist, sort_keys=True) + "\n")
    summary = dataset_summary(stats).to_dict() if stats else {"n_sequences": 0}
    (out / "summary.json").write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n")
    if failures:
        (out / "failures.json").write_text(json.dumps(list(failures), indent=2) + "\n")
