"""Train a toy diffusion backend on the shape corpus and save a checkpoint.

Usage: python3 scripts/train_toy.py --resolution 32 --steps 6000 --out models/toy32.npz
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from cfedit.backend import heldout_loss, train_toy_backend
from cfedit.corpus import ToyCorpusSpec


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--resolution", type=int, default=64)
    ap.add_argument("--steps", type=int, default=8000)
    ap.add_argument("--batch-size", type=int, default=16)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=2e-4)
    ap.add_argument("--channels", type=str, default="32,64,128")
    ap.add_argument("--two-object-fraction", type=float, default=0.0)
    ap.add_argument("--out", type=str, default="models/toy.npz")
    args = ap.parse_args()

    spec = ToyCorpusSpec(resolution=args.resolution,
                         two_object_fraction=args.two_object_fraction)
    channels = tuple(int(c) for c in args.channels.split(","))
    t0 = time.time()
    backend = train_toy_backend(spec, steps=args.steps, seed=args.seed,
                                batch_size=args.batch_size, lr=args.lr,
                                channels=channels)
    backend.save(args.out)
    info = backend.config.info
    print(f"saved {args.out}  baseline={info['baseline_loss']:.4f} "
          f"heldout={info['heldout_loss']:.4f}  ({time.time() - t0:.0f}s)")


if __name__ == "__main__":
    main()
