"""SI-SNR improvement versus microphone count for LABNet and oracle MVDR.

    python3 scripts/mic_sweep.py --count 5 --mics 1..12 [--model run/model.labnet]
"""
import argparse

import numpy as np
import torch

from labnet.baselines import mvdr, oracle_stats
from labnet.cli import parse_mics
from labnet.metrics import si_snr
from labnet.model import LABNet, ModelConfig, enhance
from labnet.params import load_params
from labnet.roomsim import SPLIT_MICS, SceneConstraints, utterance


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--mics", type=parse_mics, default=parse_mics("1..12"))
    p.add_argument("--seconds", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=3)
    p.add_argument("--model", help="trained parameter file; default is an untrained model")
    args = p.parse_args()
    torch.set_num_threads(1)

    model = load_params(args.model) if args.model else LABNet(ModelConfig())
    cons = SceneConstraints(mics=max(max(args.mics), SPLIT_MICS["test"]))
    recs = [utterance(i, args.seed, cons, args.seconds)[0] for i in range(args.count)]
    print(f"{'C':>3} {'LABNet':>9} {'MVDR':>9}   (mean SI-SNR improvement, dB)")
    for c in args.mics:
        net, bf = [], []
        for r in recs:
            sub = r.select(range(c))
            ref = sub.reverberant_clean[0]
            base = si_snr(sub.noisy[0], ref)
            net.append(si_snr(enhance(sub.noisy.astype(np.float32), model).numpy(), ref) - base)
            bf.append(si_snr(mvdr(sub.noisy, oracle_stats(sub)), ref) - base)
        print(f"{c:>3} {np.mean(net):>+9.2f} {np.mean(bf):>+9.2f}")


if __name__ == "__main__":
    main()
