"""Parameter and MAC counts of every ablation variant, with a per-block breakdown.

    python3 scripts/ablation_table.py --mics 6
"""
import argparse

from labnet.model import ABLATIONS, LABNet, ModelConfig, ablated
from labnet.resources import count_macs, count_params, macs_breakdown


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--mics", type=int, default=6)
    p.add_argument("--hidden", type=int, default=16)
    p.add_argument("--breakdown", action="store_true", help="MACs per frame by block")
    args = p.parse_args()

    print(f"{'variant':<10} {'params':>8} {'MACs/s':>10}")
    for name in ABLATIONS:
        model = LABNet(ablated(ModelConfig(hidden=args.hidden), name))
        macs = count_macs(model, args.mics)
        print(f"{name:<10} {count_params(model):>8} {macs / 1e6:>9.1f}M")
        if args.breakdown:
            for block, n in macs_breakdown(model, args.mics).items():
                print(f"    {block:<14} {n:>10} per frame")


if __name__ == "__main__":
    main()
