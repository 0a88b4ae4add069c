"""The full inter-frame codec model and its checkpoint format."""

from __future__ import annotations

import os
import tempfile
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn

from .entropy import CodingTables, FactorizedEntropyModel, likelihood, quantize
from .networks import (Discriminator, Encoder, FlowNet, Generator, MotionCompensation,
                       NetworkConfig, warp)

CHECKPOINT_VERSION = 1

# network name -> attribute names it owns (entropy models train with their encoder)
NETWORK_GROUPS = {
    "flow": ("flow_net",),
    "mv_enc": ("mv_encoder", "mv_prior"),
    "mv_gen": ("mv_generator",),
    "motion_comp": ("motion_comp",),
    "res_enc": ("res_encoder", "res_prior"),
    "res_gen": ("res_generator",),
    "discriminator": ("discriminator",),
}
CODEC_NETWORKS = ("flow", "mv_enc", "mv_gen", "motion_comp", "res_enc", "res_gen")


@dataclass
class PFrameOutput:
    flow: torch.Tensor
    flow_hat: torch.Tensor
    warped: torch.Tensor
    prediction: torch.Tensor
    reconstruction: torch.Tensor
    mv_symbols: torch.Tensor
    mv_likelihoods: torch.Tensor
    res_symbols: Optional[torch.Tensor]
    res_likelihoods: Optional[torch.Tensor]


class DVCPModel(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.flow_net = FlowNet(config.flow_levels, config.flow_channels)
        self.mv_encoder = Encoder(2, config)
        self.mv_generator = Generator(2, config)
        self.mv_prior = FactorizedEntropyModel(config.latent_channels)
        self.motion_comp = MotionCompensation(config.mc_channels)
        self.res_encoder = Encoder(3, config)
        self.res_generator = Generator(3, config)
        self.res_prior = FactorizedEntropyModel(config.latent_channels)
        self.discriminator = Discriminator(config.disc_levels, config.disc_channels,
                                           config.negative_slope)

    def group(self, name: str) -> list[nn.Module]:
        return [getattr(self, attr) for attr in NETWORK_GROUPS[name]]

    def group_parameters(self, name: str) -> list[nn.Parameter]:
        return [p for m in self.group(name) for p in m.parameters()]

    def reset_discriminator(self, seed: Optional[int] = None) -> None:
        if seed is not None:
            torch.manual_seed(seed)
        c = self.config
        self.discriminator = Discriminator(c.disc_levels, c.disc_channels, c.negative_slope)

    def pframe(self, reference, current, mode: str = "train", rng=None,
               use_mc: bool = True, use_residual: bool = True) -> PFrameOutput:
        """Predict and code ``current`` from ``reference``.

        In ``infer`` mode the reconstruction is produced by :meth:`reconstruct`
        from the integer symbols, i.e. exactly what a decoder computes.
        """
        flow = self.flow_net(reference, current)
        q_mv = quantize(self.mv_encoder(flow), mode, rng)
        p_mv = likelihood(q_mv, self.mv_prior)
        flow_hat = self.mv_generator(q_mv)
        warped = warp(reference, flow_hat)
        prediction = self.motion_comp(warped, reference, flow_hat) if use_mc else warped
        q_res = p_res = None
        if use_residual:
            q_res = quantize(self.res_encoder(current - prediction), mode, rng)
            p_res = likelihood(q_res, self.res_prior)
            recon = prediction + self.res_generator(q_res)
        else:
            recon = prediction
        if mode == "infer":
            recon = self.reconstruct(reference, q_mv, q_res if use_residual else None,
                                     use_mc=use_mc)
        return PFrameOutput(flow, flow_hat, warped, prediction, recon, q_mv, p_mv, q_res, p_res)

    def reconstruct(self, reference, mv_symbols, res_symbols, use_mc: bool = True) -> torch.Tensor:
        """Decoder-side reconstruction from integer latents, clamped to [0, 1]."""
        flow_hat = self.mv_generator(mv_symbols)
        warped = warp(reference, flow_hat)
        prediction = self.motion_comp(warped, reference, flow_hat) if use_mc else warped
        recon = prediction if res_symbols is None else prediction + self.res_generator(res_symbols)
        return recon.clamp(0.0, 1.0)

    def intra_encode(self, frame) -> torch.Tensor:
        """Learned intra mode: residual autoencoder against an all-zero reference."""
        return quantize(self.res_encoder(frame), "infer")

    def intra_reconstruct(self, symbols) -> torch.Tensor:
        return self.res_generator(symbols).clamp(0.0, 1.0)

    def coding_tables(self) -> dict[str, CodingTables]:
        return {"mv": CodingTables(self.mv_prior), "residual": CodingTables(self.res_prior)}

    def checksum(self) -> int:
        """CRC32 over all decoder-relevant parameters and buffers."""
        crc = 0
        for name in CODEC_NETWORKS:
            for attr in NETWORK_GROUPS[name]:
                for key, t in sorted(getattr(self, attr).state_dict().items()):
                    crc = zlib.crc32(f"{attr}.{key}".encode(), crc)
                    crc = zlib.crc32(t.detach().cpu().contiguous().numpy().tobytes(), crc)
        return crc & 0xFFFFFFFF


def parameter_checksum(modules) -> int:
    crc = 0
    for m in modules:
        for p in m.parameters():
            crc = zlib.crc32(p.detach().cpu().contiguous().numpy().tobytes(), crc)
    return crc & 0xFFFFFFFF


def save_checkpoint(path, model: DVCPModel, iteration: int = 0, extra: Optional[dict] = None) -> Path:
    """Atomically write a versioned checkpoint (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "format_version": CHECKPOINT_VERSION,
        "network_config": asdict(model.config),
        "networks": {attr: getattr(model, attr).state_dict()
                     for attrs in NETWORK_GROUPS.values() for attr in attrs},
        "iteration": int(iteration),
        "extra": extra or {},
    }
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(blob, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return path


def load_checkpoint(path) -> tuple[DVCPModel, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    version = blob.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    model = DVCPModel(NetworkConfig(**blob["network_config"]))
    for attr, state in blob["networks"].items():
        getattr(model, attr).load_state_dict(state)
    model.eval()
    return model, blob
