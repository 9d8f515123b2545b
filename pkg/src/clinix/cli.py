"""Command-line entry point: ``clinix <command> [--seed N] [--config FILE] [--out PATH]``.

Config files are JSON objects whose keys are the field names of the matching
configuration class (``Fingerprint``, ``SynthSpec``, ``TrainConfig``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

from .errors import ClinixError
from .net import Fingerprint, ablation_plan, derive_plan, preset_plan
from .storage import load_checkpoint, read_volume_dir, write_volume
from .synth import SynthSpec, synth_generate
from .train import TrainConfig, evaluate, train
from .verify import bench, bench_csv, gradcheck, gradcheck_csv


def _load_config(path) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise SystemExit(f"config {path} must hold a JSON object")
    return data


def _emit(text: str, out):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_plan(args):
    if args.preset:
        plan = preset_plan(args.preset)
    else:
        cfg = _load_config(args.config)
        if not cfg:
            raise SystemExit("plan needs --preset or a fingerprint --config")
        plan = derive_plan(Fingerprint(**cfg))
    if args.ablation:
        plan = ablation_plan(plan, args.ablation)
    _emit(plan.to_text(), args.out)
    return 0


def cmd_synth(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    spec = SynthSpec.from_dict(cfg)
    samples = synth_generate(spec, args.count)
    out = Path(args.out or "synth")
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("id", "path", "T/W"))
    for s in samples:
        path = out / f"{s.id}.mcvx"
        write_volume(path, s)
        w.writerow((s.id, str(path), f"{s.target_ratio():.6f}"))
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_train(args):
    cfg_dict = _load_config(args.config)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    cfg_dict.setdefault("checkpoint", str(out / "checkpoint.mckp"))
    cfg_dict.setdefault("metrics_csv", str(out / "history.csv"))
    cfg = TrainConfig.from_dict(cfg_dict)
    if args.data:
        data = read_volume_dir(args.data)
    else:
        plan = cfg.resolve_plan()
        rmax = min(5.0, min(plan.patch_size) / 4)
        spec = SynthSpec(extents=tuple(plan.patch_size), class_count=cfg.num_classes,
                         radius=(min(2.0, rmax / 2), rmax), seed=cfg.seed)
        data = synth_generate(spec, args.count)
    result = train(cfg, data, log=lambda msg: print(msg, file=sys.stderr))
    last = result.history[-1]
    print(f"final loss {last['loss']:.6f} train DSC {last['train_dsc']:.4f}; "
          f"checkpoint {cfg.checkpoint}", file=sys.stderr)
    return 0


def cmd_eval(args):
    if not args.checkpoint or not args.data:
        raise SystemExit("eval needs --checkpoint and --data")
    m = evaluate(load_checkpoint(args.checkpoint), read_volume_dir(args.data))
    _emit(m.to_csv(), args.out)
    return 0


def cmd_gradcheck(args):
    results = gradcheck(args.scope, seed=args.seed or 0, rtol=args.rtol)
    _emit(gradcheck_csv(results), args.out)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient groups within rtol {args.rtol}",
          file=sys.stderr)
    return 1 if failed else 0


def cmd_bench(args):
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else None
    _emit(bench_csv(bench(args.kind, sizes, seed=args.seed or 0)), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--out", help="output file or directory")

    p = argparse.ArgumentParser(prog="clinix",
                                description="Stage-wise HGCN/Mamba 3D segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("plan", parents=[common], help="print a network plan")
    sp.add_argument("--preset", help="pcd, lungt, livert, abd, brats, toy or micro")
    sp.add_argument("--ablation", help="block arrangement for six-stage plans")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("synth", parents=[common], help="write synthetic volumes")
    sp.add_argument("--count", type=int, default=4)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", parents=[common], help="train and checkpoint")
    sp.add_argument("--data", help="directory of .mcvx volumes (default: synthesize)")
    sp.add_argument("--count", type=int, default=1, help="synthetic samples without --data")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", parents=[common], help="metrics CSV for a checkpoint")
    sp.add_argument("--checkpoint")
    sp.add_argument("--data")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    sp.add_argument("--scope", default="op", choices=["op", "block", "network", "all"])
    sp.add_argument("--rtol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("bench", parents=[common], help="scan / hgconv timings")
    sp.add_argument("--kind", default="scan", choices=["scan", "hgconv"])
    sp.add_argument("--sizes", help="comma-separated sequence lengths or cube edges")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ClinixError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
