"""Train the four HC-conv variants on the same data and tabulate params and val mIoU.

    python3 scripts/ablation.py [--variants both,full] [key=value ...]
"""
import argparse
from pathlib import Path

from hcmamba.config import load_config
from hcmamba.data import generate_synthetic
from hcmamba.model import count_parameters
from hcmamba.train import train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--variants", default="full,dw_only,dilated_only,both")
    ap.add_argument("overrides", nargs="*", help="key=value settings")
    args = ap.parse_args()
    base = load_config(args.config, args.overrides)
    if not (Path(base.data_dir) / "manifest.tsv").exists():
        generate_synthetic(base.synthetic_spec(), base.data_dir)
    rows = []
    for variant in args.variants.split(","):
        cfg = base.with_overrides({"conv_variant": variant,
                                   "out_dir": str(Path(base.out_dir) / variant)}).validate()
        res = train(cfg, log=lambda msg, v=variant: print(f"[{v}] {msg}"))
        rows.append((variant, count_parameters(cfg.model_config())["total"], res.final.val_miou,
                     res.final.val_dsc))
    full = dict((r[0], r[1]) for r in rows).get("full")
    print(f"{'variant':<14}{'params':>12}{'ratio':>8}{'mIoU':>8}{'DSC':>8}")
    for name, n, miou, dsc in rows:
        ratio = f"{n / full:.3f}" if full else "-"
        print(f"{name:<14}{n:>12,}{ratio:>8}{miou:>8.4f}{dsc:>8.4f}")


if __name__ == "__main__":
    main()
