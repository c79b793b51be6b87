"""
Block-wise training of an MPS layer: only a two-site block is trainable at a
time, and the block sweeps left to right and back (DMRG-style freezing).

    python scripts/block_training.py --sweeps 2 --steps 20
"""

import argparse

import numpy as np

from tnkit.autodiff import cross_entropy, no_grad
from tnkit.models import MPSLayer, canonicalize, embed
from tnkit.training import Adam, two_gaussians


def accuracy(model, x, y):
    with no_grad():
        return float(np.mean(np.argmax(model(x).value, axis=1) == y))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    p.add_argument("--features", type=int, default=8)
    p.add_argument("--bond-dim", type=int, default=4)
    p.add_argument("--sweeps", type=int, default=2)
    p.add_argument("--steps", type=int, default=20, help="Adam steps per block")
    p.add_argument("--lr", type=float, default=0.05)
    args = p.parse_args()

    raw, y = two_gaussians(256, args.features, seed=0)
    x = embed(raw, "unit", 2)
    # stacking would merge frozen and trainable cores into one buffer
    model = MPSLayer(n_features=args.features + 1, in_dim=2, out_dim=2, bond_dim=args.bond_dim,
                     init_std=1e-2, seed=0, auto_stack=False)
    canonicalize(model)
    n = len(model.sites)
    print(f"start: accuracy {accuracy(model, x, y):.3f}")

    blocks = list(range(n - 1)) + list(range(n - 3, 0, -1))
    for sweep in range(args.sweeps):
        for left in blocks:
            for i, site in enumerate(model.sites):
                site.parameterize(i in (left, left + 1))
            opt = Adam(model.parameters(), lr=args.lr)
            for _ in range(args.steps):
                opt.zero_grad()
                loss = cross_entropy(model(x), y)
                loss.backward()
                opt.step()
        print(f"sweep {sweep + 1}: loss {loss.item():.4f}  accuracy {accuracy(model, x, y):.3f}")


if __name__ == "__main__":
    main()
