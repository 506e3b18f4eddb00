"""Desk-scale training run: one multichannel and one monaural model on the same budget.

    python3 scripts/toy_train.py --train 20 --test 10 --epochs 15
"""
import argparse
import json
import time

import numpy as np
import torch

from labnet.metrics import si_snr
from labnet.model import ModelConfig, enhance
from labnet.params import save_params
from labnet.roomsim import SceneConstraints, utterance
from labnet.train import TrainConfig, train_toy


def held_out_improvement(model, recs, channels):
    gains = []
    for r in recs:
        est = enhance(r.noisy[:channels].astype(np.float32), model).numpy()
        ref = r.reverberant_clean[0]
        gains.append(si_snr(est, ref) - si_snr(r.noisy[0], ref))
    return float(np.mean(gains))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--train", type=int, default=20)
    p.add_argument("--test", type=int, default=10)
    p.add_argument("--mics", type=int, default=4)
    p.add_argument("--seconds", type=float, default=2.0)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", help="directory for checkpoints and curves")
    args = p.parse_args()
    torch.set_num_threads(1)

    t0 = time.perf_counter()
    cons = SceneConstraints(mics=args.mics)
    train = [utterance(i, args.seed, cons, args.seconds)[0] for i in range(args.train)]
    test = [utterance(100 + i, args.seed, cons, args.seconds)[0] for i in range(args.test)]
    print(f"simulated {len(train)} + {len(test)} utterances in {time.perf_counter() - t0:.0f} s")

    summary = {}
    for c in (args.mics, 1):
        cfg = TrainConfig(lr0=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                          segment_seconds=args.seconds, channel_range=(c, c), seed=0)
        out = f"{args.out}/c{c}" if args.out else None
        res = train_toy(train, ModelConfig(hidden=args.hidden), cfg, out_dir=out)
        losses = [h["train_loss"] for h in res.history]
        gain = held_out_improvement(res.model, test, c)
        summary[c] = {"initial_loss": losses[0], "final_loss": losses[-1],
                      "ratio": losses[-1] / losses[0], "si_snr_improvement_db": gain}
        if out:
            save_params(res.model, f"{out}/model.labnet")
        print(f"C={c}: loss {losses[0]:.4f} -> {losses[-1]:.4f} (x{losses[-1] / losses[0]:.2f}), "
              f"held-out SI-SNRi {gain:+.2f} dB  [{time.perf_counter() - t0:.0f} s]")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
