"""
Peak live-tensor bytes of one training step, traced vs untraced, across bond
dimensions.

    python scripts/memory_vs_bond_dim.py --bond-dims 10 50 100 --batch 500
"""

import argparse
import gc

import numpy as np

from tnkit import autodiff as ad
from tnkit.models import MPSLayer, embed


def step_peak(bond_dim, traced, x, y, inline):
    model = MPSLayer(n_features=x.shape[1] + 1, in_dim=2, out_dim=10, bond_dim=bond_dim, seed=0,
                     inline_input=inline, inline_mats=inline)
    if traced:
        model.trace(np.zeros((1,) + x.shape[1:]))
    model.memory.reset_peak()
    ad.cross_entropy(model(x), y).backward()
    return model.memory.peak_bytes


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    p.add_argument("--bond-dims", type=int, nargs="+", default=[10, 50, 100])
    p.add_argument("--features", type=int, default=100)
    p.add_argument("--batch", type=int, default=500)
    p.add_argument("--stacked", action="store_true",
                   help="use the stacked (non-inline) contraction; needs far more memory")
    args = p.parse_args()

    rng = np.random.default_rng(0)
    x = embed(rng.uniform(size=(args.batch, args.features)), "unit", 2)
    y = rng.integers(0, 10, size=args.batch)
    print(f"{'D':>5} {'traced MB':>10} {'untraced MB':>12} {'saving':>7}")
    for d in args.bond_dims:
        traced = step_peak(d, True, x, y, not args.stacked)
        gc.collect()
        untraced = step_peak(d, False, x, y, not args.stacked)
        gc.collect()
        print(f"{d:>5} {traced / 1e6:>10.1f} {untraced / 1e6:>12.1f} {1 - traced / untraced:>7.0%}")


if __name__ == "__main__":
    main()
