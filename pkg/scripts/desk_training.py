"""Desk-scale training run on synthetic clips.

Trains the small 16-channel configuration with milestones scaled by
``--scale`` and reports closed-loop P-frame PSNR / estimated bpp on held-out
synthetic clips, before and after training.

    python scripts/desk_training.py --seeds 0 1 2 --out runs/desk
"""

import argparse
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch

from dvcp.data import SyntheticClipSource, synth_sequence
from dvcp.entropy import bits_estimate
from dvcp.losses import LossWeights
from dvcp.model import DVCPModel, load_checkpoint
from dvcp.networks import NetworkConfig
from dvcp.training import Schedule, TrainConfig, read_log, run_training, stack_batch

HELD_OUT_MOTIONS = [(1, 0), (2, 1), (0, -1), (-1, 1), (2, -2)]


def desk_config(seed, omega, out_dir, scale=0.001, lr=1e-3, mode="nn_conv"):
    return TrainConfig(schedule=Schedule(scale=scale), weights=LossWeights(omega=omega),
                       network=NetworkConfig.desk(upsampler_mode=mode), seed=seed, batch_size=4,
                       crop_size=32, frames_per_sample=7, lr=lr, checkpoint_every=0,
                       out_dir=str(out_dir))


def train_desk(seed, omega, out_dir, **kw):
    cfg = desk_config(seed, omega, out_dir, **kw)
    return run_training(cfg, SyntheticClipSource(seed, num_frames=7, canvas=48))


@torch.no_grad()
def heldout_scores(model, size=32, frames=7):
    """(mean P-frame PSNR, mean estimated bpp) over the held-out clips."""
    psnrs, bpps = [], []
    for i, motion in enumerate(HELD_OUT_MOTIONS):
        x = stack_batch([synth_sequence(5000 + i, frames, size, size, motion)])[0]
        ref = x[:1]
        for t in range(1, frames):
            out = model.pframe(ref, x[t:t + 1], "infer")
            mse = torch.mean((out.reconstruction - x[t:t + 1]) ** 2).item()
            psnrs.append(10 * math.log10(1 / mse))
            bits = bits_estimate(out.mv_likelihoods) + bits_estimate(out.res_likelihoods)
            bpps.append(bits.item() / (size * size))
            ref = out.reconstruction
    return float(np.mean(psnrs)), float(np.mean(bpps))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--omega", type=float, default=1 / 256)
    ap.add_argument("--scale", type=float, default=0.001)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--mode", default="nn_conv", choices=["nn_conv", "bilinear_conv", "deconv"])
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)

    gains = []
    for seed in args.seeds:
        t0 = time.time()
        ckpt, log = train_desk(seed, args.omega, Path(args.out) / f"seed{seed}", scale=args.scale,
                               lr=args.lr, mode=args.mode)
        rows = read_log(log)
        last = rows[-1]
        trained, _ = load_checkpoint(ckpt)
        torch.manual_seed(seed)
        untrained = DVCPModel(trained.config).eval()
        p1, b1 = heldout_scores(trained)
        p0, b0 = heldout_scores(untrained)
        gains.append(p1 - p0)
        print(f"seed {seed}: {len(rows)} its in {time.time() - t0:.0f}s, final total {float(last['total']):.4f}, "
              f"PSNR {p0:.2f} -> {p1:.2f} dB, est. bpp {b0:.3f} -> {b1:.3f}")
    print(f"median PSNR gain {np.median(gains):.2f} dB")


if __name__ == "__main__":
    main()
