"""``dvcp`` command-line entry point."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import codec, data, evaluation
from .config import QP_TO_OMEGA, ConfigError, RunConfig, omega_for, resolve_config

log = logging.getLogger("dvcp")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvcp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="write a synthetic translating clip")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=7)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--dx", type=float, default=1)
    p.add_argument("--dy", type=float, default=0)

    p = sub.add_parser("train", help="staged joint training")
    _add_config_flags(p)
    rate = p.add_mutually_exclusive_group()
    rate.add_argument("--qp", type=int, choices=sorted(QP_TO_OMEGA))
    rate.add_argument("--omega", type=float)
    p.add_argument("--scale", type=float, help="multiply every milestone")
    p.add_argument("--out")
    p.add_argument("--data", help="dataset root (default $DVCP_DATA_DIR)")
    p.add_argument("--synthetic", action="store_true", default=None)
    p.add_argument("--resume")

    p = sub.add_parser("encode", help="encode frames to a .dvcp bitstream")
    _add_config_flags(p)
    p.add_argument("--input", required=True, help="frame directory or .yuv file")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--frames", type=int, help="frame count (default: config test_frames)")
    p.add_argument("--model", required=True)
    p.add_argument("--gop", type=int)
    p.add_argument("--intra", choices=codec.INTRA_MODES)
    p.add_argument("--out", required=True)

    p = sub.add_parser("decode", help="decode a .dvcp bitstream to frames")
    _add_config_flags(p)
    p.add_argument("--input", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="PSNR/FVD of decoded frames or an RD sweep over models")
    _add_config_flags(p)
    p.add_argument("--original", required=True)
    p.add_argument("--decoded", help="decoded frame directory")
    p.add_argument("--bitstream", help="bitstream of --decoded, for bpp")
    p.add_argument("--models", nargs="+", help="checkpoints for an RD sweep")
    p.add_argument("--omega", type=float, nargs="+")
    p.add_argument("--sequence", default=None, help="sequence label in CSV output")
    p.add_argument("--frames", type=int)
    p.add_argument("--out")

    p = sub.add_parser("bdrate", help="FVD BD-rate between two RD CSV files")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)

    p = sub.add_parser("analyze-upsampler", help="deconvolution overlap and checkerboard report")
    p.add_argument("--kernel", type=int, default=3)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--width", type=int, default=12, help="pattern length to print")
    p.add_argument("--seeds", type=int, default=0,
                   help="also compare checkerboard energy of random generators")
    return parser


def _resolve(args, overrides: Optional[dict] = None) -> RunConfig:
    base = {"seed": getattr(args, "seed", None)}
    base.update(overrides or {})
    cfg = resolve_config(getattr(args, "config", None), base)
    if cfg.cache_dir:
        os.environ.setdefault("TORCH_HOME", cfg.cache_dir)
    return cfg


def cmd_synth(args) -> int:
    cfg = _resolve(args, {"out_dir": args.out})
    clip = data.synth_sequence(cfg.seed, args.frames, args.height, args.width, (args.dx, args.dy))
    data.save_frame_sequence(clip, args.out)
    cfg.save(args.out)
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .training import run_training

    overrides = {
        "out_dir": args.out,
        "data_dir": args.data,
        "synthetic": args.synthetic,
        "weights": {"omega": omega_for(args.qp, args.omega)},
        "schedule": {"scale": args.scale},
    }
    cfg = _resolve(args, overrides)
    if cfg.synthetic:
        source = data.SyntheticClipSource(cfg.seed, cfg.frames_per_sample, cfg.synth_canvas)
    elif cfg.data_dir:
        source = data.DirectoryClipSource(cfg.data_dir, cfg.frames_per_sample, cfg.seed)
    else:
        raise ConfigError("data_dir", "set --data, $DVCP_DATA_DIR or --synthetic")
    cfg.save(cfg.out_dir)
    ckpt, log_path = run_training(cfg.train_config(), source, resume=args.resume, progress=True)
    print(f"checkpoint: {ckpt}\nlog: {log_path}")
    return 0


def cmd_encode(args) -> int:
    overrides = {"gop_size": args.gop, "intra_mode": args.intra}
    cfg = _resolve(args, overrides)
    count = args.frames if args.frames is not None else None
    sample = data.load_frame_sequence(args.input, args.start, count, args.width, args.height)
    if args.frames is None and sample.num_frames > cfg.test_frames:
        sample = sample.slice(0, cfg.test_frames)
    result = codec.encode_sequence(sample, args.model, cfg.gop_size, cfg.intra_mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    codec.write_bitstream(result.bitstream, out)
    cfg.save(out.parent)
    bs = result.bitstream
    print(f"{bs.frame_count} frames, {bs.total_bytes()} bytes, "
          f"{bs.bpp():.4f} bpp ({bs.bpp(include_headers=False):.4f} without headers)")
    return 0


def cmd_decode(args) -> int:
    cfg = _resolve(args, {"out_dir": args.out})
    sample = codec.decode_sequence(args.input, args.model)
    data.save_frame_sequence(sample, args.out)
    cfg.save(args.out)
    print(f"decoded {sample.num_frames} frames to {args.out}")
    return 0


def _checkpoint_omega(path) -> float:
    from .model import load_checkpoint

    _, blob = load_checkpoint(path)
    return float(blob.get("extra", {}).get("config", {}).get("weights", {}).get("omega", float("nan")))


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    out = Path(args.out or Path(cfg.out_dir) / f"eval-{cfg.digest()}")
    original = data.load_frame_sequence(args.original, 0, args.frames)
    if args.frames is None and original.num_frames > cfg.test_frames:
        original = original.slice(0, cfg.test_frames)
    label = args.sequence or Path(args.original).name
    embedder = evaluation.RandomVideoEmbedder()
    if args.models:
        omegas = args.omega or [_checkpoint_omega(m) for m in args.models]
        if len(omegas) != len(args.models):
            raise ConfigError("omega", "need one omega per model")
        curve = codec.rd_sweep(original, list(zip(omegas, args.models)), cfg.gop_size,
                               cfg.intra_mode, embedder, cfg.fvd_clip_len, label)
        curves = [curve]
        metrics = {f"{label}.points": len(curve.points)}
    else:
        if not args.decoded:
            raise ConfigError("decoded", "give --decoded or --models")
        decoded = data.load_frame_sequence(args.decoded, 0, original.num_frames)
        ps = evaluation.psnr(original, decoded)
        fv = evaluation.fvd(evaluation.split_clips(original, cfg.fvd_clip_len),
                            evaluation.split_clips(decoded, cfg.fvd_clip_len), embedder)
        bpp = codec.read_bitstream(args.bitstream).bpp() if args.bitstream else float("nan")
        omega = args.omega[0] if args.omega else float("nan")
        metrics = {"psnr": evaluation.capped(ps), "fvd": fv, "bpp": bpp}
        print(f"PSNR {evaluation.capped(ps):.4f} dB  FVD {fv:.4f}  bpp {bpp:.6f}")
        out.mkdir(parents=True, exist_ok=True)
        evaluation.write_rd_rows([(label, omega, bpp, ps, fv)], out / "rd_points.csv")
        cfg.save(out)
        with open(out / "metrics.csv", "w") as fh:
            fh.write("key,value\n")
            for k in sorted(metrics):
                fh.write(f"{k},{metrics[k]:.10g}\n")
        print(f"report: {out}")
        return 0
    paths = evaluation.emit_report(curves, metrics, out)
    cfg.save(out)
    for p in curves[0].points:
        print(f"omega {p.omega:.6g}: {p.bpp:.4f} bpp  PSNR {evaluation.capped(p.psnr):.3f} dB  FVD {p.fvd:.3f}")
    print(f"report: {paths['rd_csv'].parent}")
    return 0


def cmd_bdrate(args) -> int:
    anchor = evaluation.read_rd_csv(args.anchor)
    test = evaluation.read_rd_csv(args.test)
    shared = sorted(set(anchor) & set(test))
    if not shared:
        raise ConfigError("sequence", "no sequence appears in both CSV files")
    values = []
    for name in shared:
        v = evaluation.fvd_bd_rate(anchor[name], test[name])
        values.append(v)
        if len(shared) > 1:
            print(f"{name}: {v:.2f}%")
    mean = float(np.mean(values))
    if mean == 0:
        mean = 0.0  # avoid printing -0.00%
    print(f"{mean:.2f}%")
    return 0


def cmd_analyze_upsampler(args) -> int:
    om = evaluation.overlap_map(args.kernel, args.stride, max(args.width, 1))
    rem = args.kernel % args.stride
    verdict = "even" if om.even else "uneven"
    print(f"{verdict} ({args.kernel} mod {args.stride} = {rem})")
    print(f"overlap counts: {om.pattern()}")
    if args.seeds:
        import torch

        from .networks import Generator, NetworkConfig

        energies = {"deconv": [], "nn_conv": []}
        for seed in range(args.seeds):
            torch.manual_seed(10_000 + seed)
            z = torch.randn(1, 16, 8, 8)
            for mode in energies:
                torch.manual_seed(seed)
                cfg = NetworkConfig(base_channels=16, latent_channels=16, levels=3,
                                    kernel_size=args.kernel, upsampler_mode=mode)
                with torch.no_grad():
                    energies[mode].append(evaluation.checkerboard_energy(Generator(3, cfg)(z)))
        for mode, vals in energies.items():
            print(f"median checkerboard energy ({mode}): {np.median(vals):.4f}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "bdrate": cmd_bdrate,
    "analyze-upsampler": cmd_analyze_upsampler,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError, codec.BitstreamError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
