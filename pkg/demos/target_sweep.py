"""How often does bit-search land exactly on an achievable BOPs target?

A 4-layer plain net with candidates (8, 4, 2) has 81 assignments and a few
dozen distinct costs.  For every distinct cost this script runs bit-search
alone (frozen random weights, lambda_r = 1e6) and counts the targets where
the chosen assignment's cost equals the target.  The extremes (all-min and
all-max) always succeed; interior targets mostly do not, because the L1
penalty only says "too many" or "too few" BOPs and every layer reacts to it
at once.

    python demos/target_sweep.py --optimizer adam --lr 0.05
    python demos/target_sweep.py --optimizer sgd --lr 1e-6
"""

import argparse
import itertools
import time

from metamix import BitAssignment, MetaMixTrainer, Model, PhasePlan, RegularizerCfg, bops
from metamix.data import make_blobs
from metamix.zoo import build_plain_net


def search(base_state, spec, data, target, optimizer, lr, steps):
    m = Model(spec, seed=0)
    m.load_state_dict(base_state)
    tr = MetaMixTrainer(m, PhasePlan(batch_size=32, lr_alpha=lr, alpha_optimizer=optimizer),
                        reg=RegularizerCfg(target, 1e6, target))
    done = 0
    epoch = 0
    while done < steps:
        for xb, yb in data.batches(32, seed=0, epoch=epoch):
            tr.bit_search_step(xb, yb)
            done += 1
            if done == steps:
                break
        epoch += 1
    return bops(tr.cost, BitAssignment.from_branch_sets(m.branch_sets))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    ap.add_argument("--lr", type=float, default=0.05)
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args()

    data = make_blobs(256, num_classes=4, dim=192, separation=3.0, seed=0, shape=(3, 8, 8))
    spec = build_plain_net(channels=(4, 8, 8, 16))
    base = Model(spec, seed=0)
    base.calibrate(data.x[:64])
    state = base.state_dict()
    cost = MetaMixTrainer(base, PhasePlan(batch_size=32)).cost
    names = spec.searched_layers()
    targets = sorted({bops(cost, dict(zip(names, c))) for c in itertools.product((8, 4, 2), repeat=4)})

    t0 = time.perf_counter()
    hits = 0
    for t in targets:
        got = search(state, spec, data, t, args.optimizer, args.lr, args.steps)
        hits += got == t
        print(f"target {t:>9}  got {got:>9}  {'hit' if got == t else 'miss'}")
    print(f"{args.optimizer} lr={args.lr}: {hits}/{len(targets)} targets hit exactly "
          f"({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
