"""Command-line entry point: ``xda <subcommand> ...``.

``XDA_THREADS`` (a positive integer) caps the BLAS/OpenMP thread pools; it
is the only environment input and must be read before numpy loads.
"""

from __future__ import annotations

import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
_threads = os.environ.get("XDA_THREADS")
if _threads is not None and _threads.isdigit() and int(_threads) > 0:
    for _var in _THREAD_VARS:
        os.environ[_var] = _threads

import argparse  # noqa: E402
import configparser  # noqa: E402
import logging  # noqa: E402
from dataclasses import replace  # noqa: E402

import numpy as np  # noqa: E402

from xda import experiments, selftest  # noqa: E402
from xda.config import TrainConfig  # noqa: E402
from xda.synthdata import CLASS_NAMES, export_dataset  # noqa: E402
from xda.train import TrainingDiverged, evaluate, train  # noqa: E402

log = logging.getLogger("xda")


def _pixel(text):
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y integers, got {text!r}") from None
    return x, y


def _load_config(path, seed=None):
    cfg = TrainConfig.load(path)
    return cfg if seed is None else replace(cfg, seed=seed)


def cmd_train(args):
    cfg = _load_config(args.config, args.seed)
    out = args.out or os.path.join("runs", f"{os.path.splitext(os.path.basename(args.config))[0]}-seed{cfg.seed}")
    _, record = train(cfg, out, progress=args.log_every)
    print(f"checkpoint: {os.path.join(out, 'model.xda')}")
    print(f"final target-eval mIoU: {record.final_miou:.4f}  ({record.wall_time:.1f} s)")
    return 0


def format_iou_table(iou, mean):
    lines = [f"{'class':<12s} {'IoU':>7s}"]
    for name, v in zip(CLASS_NAMES, iou):
        lines.append(f"{name:<12s} {'n/a' if np.isnan(v) else f'{v:.4f}':>7s}")
    lines.append(f"{'mIoU':<12s} {mean:>7.4f}")
    return "\n".join(lines)


def cmd_eval(args):
    iou, mean = evaluate(args.ckpt, args.split)
    print(format_iou_table(iou, mean))
    return 0


def cmd_dump_attn(args):
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.ckpt)), f"attn_scene{args.scene}")
    written = experiments.dump_attention(args.ckpt, args.scene, args.pixel, out)
    print(f"wrote {len(written)} heatmaps to {out}")
    return 0


def _table(args, named, key, name):
    os.makedirs(args.out, exist_ok=True)
    rows = experiments.run_table(named, args.out, n_seeds=args.seeds, progress=args.log_every)
    path = os.path.join(args.out, name)
    experiments.write_table(path, rows, key)
    for r in rows:
        print(f"{r.name:<20s} {100 * r.mean:6.2f} +- {100 * r.std:5.2f}")
    print(f"wrote {path}")
    return 0


def cmd_ablate(args):
    return _table(args, experiments.ablation_configs(_load_config(args.config)), "row", "ablation.csv")


def cmd_sweep(args):
    return _table(args, experiments.sweep_configs(_load_config(args.config)), "lambda_attn", "lambda_sweep.csv")


def cmd_gen_data(args):
    cfg = _load_config(args.config)
    manifest = export_dataset(args.out, cfg.data)
    print(f"wrote {manifest}")
    return 0


def cmd_selftest(args):
    ok, _ = selftest.run_all()
    print("selftest passed" if ok else "selftest FAILED")
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="xda", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train one run and write a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="run directory (default runs/<config>-seed<N>)")
    s.add_argument("--log-every", type=int, default=100)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-class IoU of a checkpoint on a target split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", choices=("train", "eval"), default="eval")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("dump-attn", help="write attention heatmaps for one query pixel")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--scene", type=int, required=True, help="scene seed")
    s.add_argument("--pixel", type=_pixel, required=True, help="query pixel X,Y")
    s.add_argument("--out")
    s.set_defaults(func=cmd_dump_attn)

    for name, func, helptext in (
        ("ablate", cmd_ablate, "run the seven ablation rows"),
        ("sweep-lambda", cmd_sweep, "run the lambda_attn sweep"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--seeds", type=int, default=experiments.N_SEEDS)
        s.add_argument("--log-every", type=int, default=0)
        s.set_defaults(func=func)

    s = sub.add_parser("gen-data", help="export the synthetic dataset as PPM/PGM files")
    s.add_argument("--out", required=True)
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("selftest", help="gradient checks and attention invariants")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if _threads is not None and not (_threads.isdigit() and int(_threads) > 0):
        print(f"xda: error: XDA_THREADS must be a positive integer, got {_threads!r}", file=sys.stderr)
        return 2
    if getattr(args, "seeds", 1) < 1:
        print("xda: error: --seeds must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"xda: error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, OSError, configparser.Error) as exc:
        print(f"xda: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
