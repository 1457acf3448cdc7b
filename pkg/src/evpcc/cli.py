"""Command line entry point: ``evpcc <subcommand> ...``.

Exit codes: 0 success, 1 partial failures (manifest written), 2 invalid
invocation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import quality
from .codec.external import ExternalCodec, ExternalCodecError, run_external_codec
from .codec.octree import OctreeBitstream, OctreeConfig, decode, encode
from .convert import ConversionConfig, event_to_pc, pc_to_event
from .event_io import NEG, POS, FormatParams, load_events, save_events, walk_dataset
from .pc_model import read_ply, write_ply
from .pipeline import (
    JobError,
    PipelineJob,
    _json_safe,
    run_original,
    sweep,
    write_characterization,
)
from .tensor_export import build_tensor, write_tensor

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("evpcc")


class UsageError(Exception):
    pass


def _stem(path: Path) -> str:
    name = path.name
    for suf in (".evt.csv", ".bin", ".ply", ".eoc"):
        if name.endswith(suf):
            return name[: -len(suf)]
    return path.stem


def _dump(obj, out=None):
    text = json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ commands

def cmd_characterize(args):
    job = PipelineJob("original", tsf=args.tsf or 256, dataset=args.root,
                      units=args.units, jobs=args.jobs)
    stats, failures = run_original(job)
    write_characterization(stats, _out_dir(args), failures)
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_e2p(args):
    params = FormatParams(args.units)
    cfg = ConversionConfig(args.tsf or 256)
    out = _out_dir(args)
    for path in map(Path, args.events):
        seq = load_events(path, params)
        pos, neg, stats = event_to_pc(seq, cfg)
        stem = _stem(path)
        (out / f"{stem}_pos.ply").write_bytes(write_ply(pos))
        (out / f"{stem}_neg.ply").write_bytes(write_ply(neg))
        _dump({"source_id": str(path), "tsf": cfg.tsf, **stats.to_dict()}, out / f"{stem}_stats.json")
    return EXIT_OK


def cmd_p2e(args):
    params = FormatParams(args.units)
    cfg = ConversionConfig(args.tsf or 256, args.dup_method)
    pos = read_ply(Path(args.pos).read_bytes(), POS)
    neg = read_ply(Path(args.neg).read_bytes(), NEG)
    seq = pc_to_event(pos, neg, cfg, params.units_per_second)
    target = Path(args.out) if args.out else Path(_stem(Path(args.pos)).removesuffix("_pos") + ".bin")
    if target.is_dir():
        target = target / (_stem(Path(args.pos)).removesuffix("_pos") + ".bin")
    target.parent.mkdir(parents=True, exist_ok=True)
    save_events(seq, target)
    return EXIT_OK


def cmd_encode(args):
    src = Path(args.ply)
    pc = read_ply(src.read_bytes())
    out = _out_dir(args)
    if args.external:
        try:
            dec, size = run_external_codec(ExternalCodec.parse(args.external), src,
                                           out / f"{_stem(src)}_work", pc.polarity)
        except ExternalCodecError as exc:
            log.error("%s", exc)
            return EXIT_PARTIAL
        (out / f"{_stem(src)}.dec.ply").write_bytes(write_ply(dec))
        _dump({"input": str(src), "compressed_bytes": size, "decoded_points": len(dec)})
        return EXIT_OK
    cfg = OctreeConfig(args.mode, args.truncate, args.score_radius)
    bs = encode(pc, cfg)
    (out / f"{_stem(src)}.eoc").write_bytes(bs.to_bytes())
    _dump({"input": str(src), "bytes": len(bs), "points": len(pc), "depth": bs.depth,
           "truncate_levels": bs.truncate_levels})
    return EXIT_OK


def cmd_decode(args):
    out = _out_dir(args)
    pol = {"pos": POS, "neg": NEG}[args.polarity]
    for path in map(Path, args.streams):
        pc = decode(OctreeBitstream.from_bytes(path.read_bytes()), pol)
        (out / f"{_stem(path)}.ply").write_bytes(write_ply(pc))
    return EXIT_OK


def _load_job(args, **override) -> PipelineJob:
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read job config {args.config}: {exc}") from exc
    for key, val in (("units", args.units_given), ("jobs", args.jobs), ("out", args.out)):
        if val is not None:
            cfg[key] = val
    if args.tsf is not None:
        cfg.pop("tsfs", None)
        cfg["tsf"] = [args.tsf]
    cfg.update(override)
    return PipelineJob.from_dict(cfg)


def _run_job(job: PipelineJob) -> int:
    if not job.out:
        raise UsageError("no output directory (set 'out' in the config or pass --out)")
    if job.pipeline == "original":
        stats, failures = run_original(job)
        write_characterization(stats, job.out, failures)
        return EXIT_PARTIAL if failures else EXIT_OK
    if not job.dataset:
        raise UsageError("job config lacks 'dataset'")
    report = sweep(walk_dataset(job.dataset), job)
    report.write(job.out)
    return EXIT_PARTIAL if report.failures else EXIT_OK


def cmd_run(args):
    return _run_job(_load_job(args))


def cmd_sweep(args):
    job = _load_job(args)
    if job.pipeline == "original":
        raise UsageError("sweep needs the voxelized or decompressed pipeline")
    return _run_job(job)


def cmd_metrics(args):
    params = FormatParams(args.units)
    ref = load_events(args.ref, params)
    dec = load_events(args.dec, params)
    space = quality.MetricSpace(peak=args.peak)
    report = {"ref": args.ref, "dec": args.dec, "n_ref": len(ref), "n_dec": len(dec)}
    try:
        if args.metric in ("e2e", "both"):
            v, d = quality.psnr_e2e(ref, dec, space, return_details=True)
            report["psnr_e2e"] = v
            report["e2e"] = d
            report["peak"] = d["peak"]
        if args.metric in ("e2d", "both"):
            v, d = quality.psnr_e2d(ref, dec, space, k=args.k, return_details=True)
            report["psnr_e2d"] = v
            report["e2d"] = d
            report["peak"] = d["peak"]
    except (quality.UndefinedMetricError, quality.InsufficientPointsError) as exc:
        report["error"] = str(exc)
        _dump(report, args.json_out)
        return EXIT_PARTIAL
    _dump(report, args.json_out)
    return EXIT_OK


def cmd_bdrate(args):
    ref = quality.RateDistortionCurve.from_csv(Path(args.ref_curve).read_text(), args.ref_curve)
    test = quality.RateDistortionCurve.from_csv(Path(args.test_curve).read_text(), args.test_curve)
    _dump({"ref": args.ref_curve, "test": args.test_curve, "bd_rate_pct": quality.bd_rate(ref, test)},
          args.json_out)
    return EXIT_OK


def cmd_topk(args):
    preds = quality.read_predictions(Path(args.predictions).read_text())
    if args.labels:
        truth = quality.read_labels(Path(args.labels).read_text())
    elif args.dataset:
        truth = {sid: label for label, sid in walk_dataset(args.dataset)}
    else:
        raise UsageError("topk needs --labels or --dataset")
    _dump({f"top{k}": quality.top_k(preds, truth, k) for k in args.k})
    return EXIT_OK


def cmd_tensor(args):
    params = FormatParams(args.units)
    out = _out_dir(args)
    for path in map(Path, args.events):
        seq = load_events(path, params)
        t = build_tensor(seq, args.bins, args.height, args.width)
        (out / f"{_stem(path)}.evt.tensor").write_bytes(write_tensor(t))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    def common(default):
        # subcommands repeat the global flags; SUPPRESS keeps them from
        # overwriting values given before the subcommand
        c = argparse.ArgumentParser(add_help=False)
        c.add_argument("--units", dest="units_given", choices=["us", "ms", "s"], default=default,
                       help="timestamp unit of event files (default: us)")
        c.add_argument("--tsf", type=int, default=default, help="temporal scaling factor")
        c.add_argument("--jobs", type=int, default=default, help="worker processes (default: all cores)")
        c.add_argument("--out", default=default, help="output file or directory")
        c.add_argument("-v", "--verbose", action="store_true", default=default or False)
        return c

    parser = argparse.ArgumentParser(prog="evpcc", description=__doc__.splitlines()[0],
                                     parents=[common(None)])
    sub = parser.add_subparsers(dest="command", required=True)
    sub_common = common(argparse.SUPPRESS)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[sub_common], help=help_)
        p.set_defaults(func=fn)
        return p

    p = add("characterize", cmd_characterize, "dataset characterization statistics")
    p.add_argument("root")

    p = add("e2p", cmd_e2p, "events -> POS/NEG PLY clouds")
    p.add_argument("events", nargs="+")

    p = add("p2e", cmd_p2e, "POS/NEG PLY clouds -> events")
    p.add_argument("pos")
    p.add_argument("neg")
    p.add_argument("--dup-method", choices=["nn", "prob"], default="nn")

    p = add("encode", cmd_encode, "encode a PLY cloud")
    p.add_argument("ply")
    p.add_argument("--mode", choices=["lossless", "lossy"], default="lossless")
    p.add_argument("--truncate", type=int, default=0)
    p.add_argument("--score-radius", type=int, default=2)
    p.add_argument("--external", default=None, help='"<encode cmd>;<decode cmd>" template')

    p = add("decode", cmd_decode, "decode .eoc streams to PLY")
    p.add_argument("streams", nargs="+")
    p.add_argument("--polarity", choices=["pos", "neg"], default="pos")

    p = add("run", cmd_run, "run a pipeline job from a JSON config")
    p.add_argument("config")

    p = add("sweep", cmd_sweep, "run a TSF x codec sweep from a JSON config")
    p.add_argument("config")

    p = add("metrics", cmd_metrics, "PSNR E2E / E2D between two event files")
    p.add_argument("--ref", required=True)
    p.add_argument("--dec", required=True)
    p.add_argument("--peak", type=float, default=None)
    p.add_argument("--metric", choices=["e2e", "e2d", "both"], default="both")
    p.add_argument("--k", type=int, default=quality.E2D_NEIGHBORS)
    p.add_argument("--json-out", default=None)

    p = add("bdrate", cmd_bdrate, "BD-Rate between two rate,score CSV curves")
    p.add_argument("ref_curve")
    p.add_argument("test_curve")
    p.add_argument("--json-out", default=None)

    p = add("topk", cmd_topk, "Top-k accuracy from a predictions CSV")
    p.add_argument("predictions")
    p.add_argument("--labels", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--k", type=int, nargs="+", default=[1, 5])

    p = add("tensor", cmd_tensor, "export event spike tensors")
    p.add_argument("events", nargs="+")
    p.add_argument("--bins", type=int, default=9)
    p.add_argument("--height", type=int, default=180)
    p.add_argument("--width", type=int, default=240)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.units = args.units_given or "us"
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, JobError) as exc:
        print(f"evpcc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"evpcc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
