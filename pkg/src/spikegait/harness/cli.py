"""Command line entry point.

    spikegait simulate  --frames DIR --config FILE --out events.evs1
    spikegait voxelize  --in events.evs1 --k INT --slices INT --out grid.bin
    spikegait train     --config FILE --out-dir DIR
    spikegait eval      --checkpoint FILE --gallery DIR --probe DIR --csv out.csv
    spikegait gradcheck --config FILE

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric or gradcheck failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from spikegait.errors import ConfigError, DataError, FormatError, InvalidArgument, InvalidStream, NumericError
from spikegait.events import read_events, two_scale_split, write_events, write_grids
from spikegait.harness.config import RunConfig, load_config

logger = logging.getLogger("spikegait")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _config(path):
    return load_config(path) if path else RunConfig()


def _condition_index(cfg, name):
    if name is None:
        return 0
    if name not in cfg.conditions:
        raise ConfigError(f"unknown condition {name!r}; known: {', '.join(cfg.conditions)}")
    return cfg.conditions.index(name)


def cmd_simulate(args):
    from spikegait.harness.data import sim_config
    from spikegait.simulator import generate_events, read_frame_dir

    cfg = _config(args.config)
    cond = _condition_index(cfg, args.condition)
    frames = read_frame_dir(args.frames)
    stream = generate_events(frames, sim_config(cfg, cond, args.seed if args.seed is not None else cfg.seed))
    write_events(stream, args.out)
    print(f"{len(stream)} events, {stream.width}x{stream.height}, {stream.duration} us -> {args.out}")


def cmd_voxelize(args):
    stream = read_events(args.inp)
    slices = two_scale_split(stream, args.slices, args.k, args.k_static)
    write_grids(list(slices.dynamic) + [slices.static_grid], args.out, n_dynamic=len(slices.dynamic))
    print(f"{args.slices} x K={args.k} dynamic grids + K={args.k_static} static grid -> {args.out}")


def _export_eval(run_dir, cfg, samples, streams):
    """events + labels.csv per condition, split into gallery (first sequence) and probes."""
    first = {}
    for s in samples:
        first[s.label] = min(first.get(s.label, s.sequence), s.sequence)
    for c, name in enumerate(cfg.conditions):
        for role in ("gallery", "probe"):
            d = os.path.join(run_dir, "eval", name, role)
            os.makedirs(d, exist_ok=True)
            rows = []
            for s, st in zip(samples, streams):
                if s.condition != c or (s.sequence == first[s.label]) != (role == "gallery"):
                    continue
                write_events(st, os.path.join(d, f"{s.sample_id}.evs1"))
                rows.append((s.sample_id, s.label))
            with open(os.path.join(d, "labels.csv"), "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(("sample_id", "label"))
                w.writerows(rows)


def cmd_train(args):
    from spikegait.harness.data import build_samples
    from spikegait.harness.train import train

    cfg = _config(args.config)
    eval_samples = None
    if cfg.export_eval:
        eval_samples, streams = build_samples(cfg, "eval", keep_streams=True)
        _export_eval(args.out_dir, cfg, eval_samples, streams)
    result = train(cfg, args.out_dir, eval_samples=eval_samples)
    for name, r in result.metrics.items():
        print(f"{name:8s} rank-1 {r.rank1:6.2f}  mAP {r.map:6.2f}  mINP {r.minp:6.2f}  ({r.n_probes} probes)")
    print(f"trained {cfg.iterations} iterations in {result.seconds:.1f} s -> {args.out_dir}")


def _read_split(directory, cfg):
    from spikegait.harness.data import Sample, stream_inputs

    path = os.path.join(directory, "labels.csv")
    if not os.path.exists(path):
        raise DataError(f"missing {path}")
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or "sample_id" not in rows[0] or "label" not in rows[0]:
        raise DataError(f"{path} needs a sample_id,label header and at least one row")
    samples = []
    for row in rows:
        sid = row["sample_id"]
        cands = [os.path.join(directory, sid + ext) for ext in (".evs1", ".csv")]
        ev = next((c for c in cands if os.path.exists(c)), None)
        if ev is None:
            raise DataError(f"no event file for sample {sid!r} in {directory}")
        dyn, stat, _ = stream_inputs(read_events(ev), cfg)
        try:
            label = int(row["label"])
        except ValueError:
            raise DataError(f"label of sample {sid!r} is not an integer: {row['label']!r}") from None
        samples.append(Sample(sid, label, 0, 0, dyn, stat))
    return samples


def cmd_eval(args):
    from spikegait.harness.evaluate import evaluate
    from spikegait.harness.train import embed, load_model, write_metrics

    model, cfg = load_model(args.checkpoint)
    gallery = _read_split(args.gallery, cfg)
    probe = _read_split(args.probe, cfg)
    g, q = embed(model, gallery), embed(model, probe)
    result = evaluate(
        g, [s.label for s in gallery], q, [s.label for s in probe],
        np.array([s.sample_id for s in gallery]), np.array([s.sample_id for s in probe]),
    )
    for i in result.excluded:
        print(f"excluded probe {probe[i].sample_id}: identity {probe[i].label} not in gallery", file=sys.stderr)
    write_metrics(args.csv, {"all": result})
    print(f"rank-1 {result.rank1:.2f}  mAP {result.map:.2f}  mINP {result.minp:.2f}  "
          f"({result.n_probes} probes, {len(result.excluded)} excluded) -> {args.csv}")


def cmd_gradcheck(args):
    from spikegait.harness.gradcheck import gradcheck

    cfg = _config(args.config)
    report = gradcheck(cfg, args.model or cfg.gradcheck_model)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_NUMERIC


def build_parser():
    p = argparse.ArgumentParser(prog="spikegait", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="frames directory -> event file")
    s.add_argument("--frames", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True, help=".evs1 (binary) or .csv")
    s.add_argument("--condition", help="condition name from the config (default: the first)")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("voxelize", help="event file -> two-scale voxel grids")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--k", type=int, required=True, help="bins per dynamic slice")
    s.add_argument("--slices", type=int, required=True)
    s.add_argument("--k-static", type=int, default=8)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_voxelize)

    s = sub.add_parser("train", help="train on the toy dataset")
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="gallery/probe retrieval with a trained checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--gallery", required=True)
    s.add_argument("--probe", required=True)
    s.add_argument("--csv", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of a tiny model")
    s.add_argument("--config")
    s.add_argument("--model", choices=("full", "static", "dynamic", "affine", "empty"))
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, InvalidStream, InvalidArgument, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
