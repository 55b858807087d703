"""Compare BN running-variance drift under bit-meta and random-bit training.

Pretrains a toy MobileNet, then from the same starting point traces the
running variance of one depthwise layer while training with (a) bit-meta
steps and (b) one random candidate bit-width per 25-iteration "epoch" with
4-bit weights.  Prints the mean sliding-window std/mean of each trace and
writes both traces to CSV.
"""

import argparse
from pathlib import Path

from metamix import MetaMixTrainer, Model, PhasePlan, build_toy_mobilenet
from metamix.data import load_dataset
from metamix.instrument import relative_fluctuation, trace_bn


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="/tmp/metamix_bn")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--layer", default="b2.dw")
    ap.add_argument("--iterations", type=int, default=150)
    args = ap.parse_args()
    out = Path(args.out)

    train, _ = load_dataset("synthetic_cifar", out / "data", n_train=2000, n_test=200)
    model = Model(build_toy_mobilenet(width=8), seed=args.seed)
    MetaMixTrainer(model, PhasePlan(pretrain_epochs=4), seed=args.seed).pretrain(train)
    start = model.state_dict()

    for regime in ("bit_meta", "random_w4"):
        model.load_state_dict(start)
        trainer = MetaMixTrainer(model, PhasePlan(), seed=args.seed)
        trace = trace_bn(model, train, args.layer, regime, args.iterations, trainer=trainer,
                         seed=args.seed)
        trace.to_csv(out / f"bn_trace_{regime}.csv")
        f = relative_fluctuation(trace.series(args.layer)[1])
        print(f"{regime:<10} window std/mean {f:.4f}")


if __name__ == "__main__":
    main()
