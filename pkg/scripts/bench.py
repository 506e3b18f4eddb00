"""Resource report: parameters, MACs/s per channel count, streaming RTF and latency.

    python3 scripts/bench.py --mics 1,3,6,12 --rtf-seconds 4
"""
import argparse
import json

import torch

from labnet.cli import bench_report, measure_rtf, parse_mics
from labnet.model import LABNet, ModelConfig
from labnet.params import load_params


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--model")
    p.add_argument("--mics", type=parse_mics, default=parse_mics("1,3,6,12"))
    p.add_argument("--rtf-seconds", type=float, default=2.0)
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args()
    torch.set_num_threads(args.threads)

    model = load_params(args.model) if args.model else LABNet(ModelConfig())
    report = bench_report(model, args.mics)
    report["rtf"] = {str(c): measure_rtf(model, c, args.rtf_seconds) for c in args.mics}
    print(json.dumps(report, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
