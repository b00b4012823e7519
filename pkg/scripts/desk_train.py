"""Generate the synthetic set (if missing) and train one desk-scale model.

    python3 scripts/desk_train.py [--config configs/desk.cfg] [key=value ...]
"""
import argparse
import time
from pathlib import Path

from hcmamba.config import load_config
from hcmamba.data import generate_synthetic
from hcmamba.train import train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", type=Path)
    ap.add_argument("overrides", nargs="*", help="key=value settings")
    args = ap.parse_args()
    cfg = load_config(args.config, args.overrides)
    if not (Path(cfg.data_dir) / "manifest.tsv").exists():
        generate_synthetic(cfg.synthetic_spec(), cfg.data_dir)
    t0 = time.perf_counter()
    res = train(cfg, log=print)
    f = res.final
    print(f"done in {time.perf_counter() - t0:.0f}s: val mIoU {f.val_miou:.4f}, DSC {f.val_dsc:.4f}, "
          f"best mIoU {res.best_miou:.4f} at epoch {res.best_epoch}")


if __name__ == "__main__":
    main()
