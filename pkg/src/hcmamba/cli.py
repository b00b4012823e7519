"""``hcmamba`` command line: generate | train | eval | report.

Failures print a single ``error[ClassName]: message`` line to stderr and exit
with status 1 (2 for usage errors, as argparse does).
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import RunConfig, load_config
from .conv import gridding_coverage, receptive_field
from .data import Dataset, dataset_exists, generate_synthetic
from .errors import ContractError, HcMambaError
from .model import CONV_VARIANTS, ModelConfig, count_parameters
from .train import evaluate_split, load_params, train

REPORT_SCHEDULES = ((1, 1, 1), (2, 2, 2), (1, 2, 3), (1, 2, 3, 1))


def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if args.threads is not None:
        cfg = cfg.with_overrides({"threads": str(args.threads)}).validate()
    return cfg


def cmd_generate(args) -> int:
    cfg = _config(args)
    manifest = generate_synthetic(cfg.synthetic_spec(), cfg.data_dir, force=args.force)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if not dataset_exists(cfg.data_dir):
        raise ContractError(f"no dataset at {cfg.data_dir}; run 'hcmamba generate' first")
    resume = args.checkpoint is not None
    if resume and Path(args.checkpoint).resolve() != (Path(cfg.out_dir) / "last.ckpt").resolve():
        raise ContractError(f"resume expects {Path(cfg.out_dir) / 'last.ckpt'}, got {args.checkpoint}")
    result = train(cfg, resume=resume)
    print(f"best val mIoU {result.best_miou:.4f} at epoch {result.best_epoch}; "
          f"log {Path(cfg.out_dir) / 'log.csv'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    mcfg = cfg.model_config()
    ckpt = args.checkpoint or str(Path(cfg.out_dir) / "best.ckpt")
    with threadpool_limits(limits=cfg.threads):
        params = load_params(ckpt, mcfg)
        report = evaluate_split(params, Dataset.load(cfg.data_dir, args.split, cfg.num_classes),
                                mcfg, cfg.batch_size)
    print(f"{args.split}: {report.row()}")
    out = Path(cfg.out_dir) / f"eval_{args.split}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["split", "mIoU", "DSC", "Acc", "Spe", "Sen", "HD95"])
        w.writerow([args.split, report.miou, report.dsc, report.acc, report.spe, report.sen,
                    report.hd95])
    return 0


def parameter_report(base: ModelConfig) -> list[str]:
    counts = {v: count_parameters(ModelConfig(**{**base.to_dict(), "conv_variant": v}))["total"]
              for v in CONV_VARIANTS}
    lines = [f"parameters (C={base.base_channels}, N={base.state_size}, "
             f"input {base.input_size[0]}x{base.input_size[1]})"]
    lines += [f"  {v:<13}{n:>12,d}" for v, n in counts.items()]
    lines.append(f"  dw_only/full {counts['dw_only'] / counts['full']:.3f}   "
                 f"both/full {counts['both'] / counts['full']:.3f}")
    return lines


def receptive_field_report(kernel: int = 3) -> list[str]:
    lines = [f"receptive field (k={kernel})"]
    for sched in REPORT_SCHEDULES:
        cov = gridding_coverage(sched, kernel)
        state = "continuous" if cov.continuous else "discontinuous (gridding)"
        lines.append(f"  {','.join(map(str, sched)):<9} RF {receptive_field(sched, kernel):>3}  {state}")
    return lines


def cmd_report(args) -> int:
    cfg = _config(args)
    lines = parameter_report(cfg.model_config())
    lines += parameter_report(ModelConfig(conv_variant=cfg.conv_variant))
    lines += receptive_field_report()
    print("\n".join(lines))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="override one config key (repeatable)")
    common.add_argument("--threads", type=int, help="BLAS threads (default from config: 1)")

    parser = argparse.ArgumentParser(prog="hcmamba", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="write the synthetic dataset")
    g.add_argument("--force", action="store_true", help="overwrite an existing dataset directory")
    g.set_defaults(func=cmd_generate)
    t = sub.add_parser("train", parents=[common], help="train and log per-epoch metrics")
    t.add_argument("--checkpoint", metavar="PATH", help="resume from OUT_DIR/last.ckpt")
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", metavar="PATH", help="default: OUT_DIR/best.ckpt")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.set_defaults(func=cmd_eval)
    r = sub.add_parser("report", parents=[common], help="parameter and receptive-field report")
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except HcMambaError as e:
        msg = str(e).replace("\n", "; ")
        print(f"error[{type(e).__name__}]: {msg}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error[{type(e).__name__}]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
