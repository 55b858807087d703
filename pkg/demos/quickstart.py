"""Minimal library walk-through: pretrain, select bits, fine-tune, report BOPs.

Takes about a minute and a half on one CPU core with the defaults below.

    python demos/quickstart.py --out /tmp/metamix_quickstart
"""

import argparse
from pathlib import Path

from metamix import (BitAssignment, MetaMixTrainer, Model, PhasePlan, RegularizerCfg,
                     build_toy_mobilenet, bops, count_ops, cost_report)
from metamix.costmodel import uniform_bops
from metamix.data import load_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="/tmp/metamix_quickstart")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--budget", type=float, default=0.6, help="fraction of the all-8-bit BOPs")
    args = ap.parse_args()

    train, test = load_dataset("synthetic_cifar", Path(args.out) / "data", n_train=2000, n_test=1000)
    model = Model(build_toy_mobilenet(width=8, num_classes=10), seed=args.seed)
    cost = count_ops(model.spec)
    target = args.budget * uniform_bops(cost, 8)

    plan = PhasePlan(pretrain_epochs=6, finetune_epochs=8)
    trainer = MetaMixTrainer(model, plan, reg=RegularizerCfg(target, 1.0, target), seed=args.seed)
    fp = trainer.pretrain(train, test)
    print(f"full precision accuracy {fp['accuracy']:.3f}")

    assignment = trainer.run_bit_selection(train)
    for name, bits in assignment.bits().items():
        print(f"  {name:<12} {bits}-bit activations")
    print(f"BOPs {bops(cost, assignment):,} for a target of {target:,.0f}")

    res = trainer.run_weight_training(train, test, assignment)
    print(f"mixed-precision accuracy {res['accuracy']:.3f}")

    uniform = BitAssignment.uniform(model.spec.searched_layers(), 4)
    print(f"uniform 4-bit would cost {cost_report(cost, uniform)['total_bops']:,} BOPs")
    print("timings (s):", {k: round(v, 1) for k, v in trainer.timings.items()})


if __name__ == "__main__":
    main()
