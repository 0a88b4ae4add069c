"""Desk-scale rate/FVD sweep over the four omega presets.

Trains one desk model per omega (and per upsampler mode), codes a held-out
synthetic clip with each, writes rd_points.csv / metrics.csv / fvd_vs_bpp.png
and, with two modes, the FVD BD-rate of the second against the first.

    python scripts/rd_sweep.py --modes deconv nn_conv --out runs/rd
"""

import argparse
from pathlib import Path

import torch

from desk_training import train_desk
from dvcp.codec import rd_sweep
from dvcp.config import QP_TO_OMEGA
from dvcp.data import synth_sequence
from dvcp.evaluation import emit_report, fvd_bd_rate


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--modes", nargs="+", default=["nn_conv"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--frames", type=int, default=20)
    ap.add_argument("--scale", type=float, default=0.001, help="milestone scale of each run")
    ap.add_argument("--out", default="runs/rd")
    args = ap.parse_args()
    torch.set_num_threads(1)

    out = Path(args.out)
    clip = synth_sequence(9000, args.frames, 32, 32, (1, 0))
    curves = []
    for mode in args.modes:
        ckpts = []
        for qp, omega in sorted(QP_TO_OMEGA.items()):
            ckpt, _ = train_desk(args.seed, omega, out / mode / f"qp{qp}", mode=mode,
                                 scale=args.scale)
            ckpts.append((omega, ckpt))
        curve = rd_sweep(clip, ckpts, gop_size=10, clip_len=10, label=mode)
        curves.append(curve)
        for p in sorted(curve.points, key=lambda p: p.omega):
            print(f"{mode:14s} omega {p.omega:.6f}  {p.bpp:.4f} bpp  PSNR {p.psnr:.2f} dB  FVD {p.fvd:.4f}")

    metrics = {}
    if len(curves) > 1:
        for c in curves[1:]:
            metrics[f"bd_rate.{c.label}_vs_{curves[0].label}"] = fvd_bd_rate(curves[0], c)
            print(f"FVD BD-rate {c.label} vs {curves[0].label}: "
                  f"{metrics[f'bd_rate.{c.label}_vs_{curves[0].label}']:.2f}%")
    paths = emit_report(curves, metrics, out)
    print(f"report: {paths['rd_csv'].parent}")


if __name__ == "__main__":
    main()
