"""Overlap counts of strided transposed convolutions and checkerboard energy
of randomly initialised generators.

    python scripts/checkerboard_study.py --seeds 20 --out runs/checkerboard
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from dvcp.evaluation import checkerboard_energy, overlap_map
from dvcp.networks import UPSAMPLER_MODES, Generator, NetworkConfig


def overlap_table(max_k=8, max_s=8):
    print("kernel stride even pattern")
    for k in range(1, max_k + 1):
        for s in range(1, max_s + 1):
            om = overlap_map(k, s, 8)
            assert om.even == (k % s == 0)
            print(f"{k:6d} {s:6d} {str(om.even):5s} {om.pattern()}")


def energies(seeds, kernel=3, latent_size=8):
    out = {m: [] for m in UPSAMPLER_MODES}
    samples = {}
    for seed in range(seeds):
        torch.manual_seed(10_000 + seed)
        z = torch.randn(1, 32, latent_size, latent_size)
        for mode in UPSAMPLER_MODES:
            torch.manual_seed(seed)
            gen = Generator(3, NetworkConfig.desk(upsampler_mode=mode, kernel_size=kernel))
            with torch.no_grad():
                y = gen(z)
            out[mode].append(checkerboard_energy(y))
            if seed == 0:
                samples[mode] = y[0].permute(1, 2, 0).numpy()
    return out, samples


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--kernel", type=int, default=3)
    ap.add_argument("--out", default=None, help="directory for a figure of sample outputs")
    args = ap.parse_args()

    overlap_table()
    e, samples = energies(args.seeds, args.kernel)
    print()
    for mode, vals in e.items():
        print(f"{mode:14s} median {np.median(vals):.4f}  min {np.min(vals):.4f}  max {np.max(vals):.4f}")

    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        fig, axes = plt.subplots(1, len(samples), figsize=(3 * len(samples), 3))
        for ax, (mode, img) in zip(axes, samples.items()):
            img = (img - img.min()) / max(img.max() - img.min(), 1e-12)
            ax.imshow(img[:16, :16], interpolation="nearest")
            ax.set_title(f"{mode}\nenergy {np.median(e[mode]):.3f}")
            ax.axis("off")
        fig.tight_layout()
        fig.savefig(out / "generator_samples.png", dpi=120)
        print(f"figure: {out / 'generator_samples.png'}")


if __name__ == "__main__":
    main()
