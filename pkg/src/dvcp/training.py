"""Milestone-gated joint training with alternating LSGAN updates."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import torch

from . import losses as L
from .data import VideoSample, random_crop
from .entropy import LatentCode
from .model import NETWORK_GROUPS, DVCPModel, load_checkpoint, save_checkpoint
from .networks import FeatureExtractor, NetworkConfig, make_extractor

log = logging.getLogger(__name__)

GENERATOR_NETWORKS = ("flow", "mv_enc", "mv_gen", "motion_comp", "res_enc", "res_gen")
LOG_HEADER = ("iteration", "stage", "mse", "adv", "vgg", "rate_bpp", "total", "d_loss")


@dataclass
class Schedule:
    total_iters: int = 700_000
    mc_join: int = 20_000
    residual_join: int = 40_000
    adversarial_join: int = 400_000
    scale: float = 1.0

    def __post_init__(self):
        m = self.milestones
        if not 0 < m["mc_join"] <= m["residual_join"] <= m["adversarial_join"] <= m["total_iters"]:
            raise ValueError(f"milestones out of order: {m}")

    def _scaled(self, v: int) -> int:
        return int(round(v * self.scale))

    @property
    def milestones(self) -> dict[str, int]:
        return {
            "mc_join": self._scaled(self.mc_join),
            "residual_join": self._scaled(self.residual_join),
            "vgg_loss_at": self._scaled(self.residual_join),
            "adversarial_join": self._scaled(self.adversarial_join),
            "total_iters": self._scaled(self.total_iters),
        }

    @property
    def iterations(self) -> int:
        return self.milestones["total_iters"]


@dataclass(frozen=True)
class StagePlan:
    index: int
    active_networks: frozenset
    active_losses: frozenset

    def __post_init__(self):
        if "discriminator" in self.active_networks and "adv" not in self.active_losses:
            raise ValueError("an active discriminator needs the adversarial loss")
        if ({"mv_enc", "res_enc"} & self.active_networks) and "rate" not in self.active_losses:
            raise ValueError("active encoders need the rate loss")

    @property
    def use_mc(self) -> bool:
        return "motion_comp" in self.active_networks

    @property
    def use_residual(self) -> bool:
        return "res_enc" in self.active_networks

    @property
    def use_discriminator(self) -> bool:
        return "discriminator" in self.active_networks

    def effective_weights(self, w: L.LossWeights) -> L.LossWeights:
        return L.LossWeights(
            alpha=w.alpha if "mse" in self.active_losses else 0.0,
            beta=w.beta if "adv" in self.active_losses else 0.0,
            gamma=w.gamma if "vgg" in self.active_losses else 0.0,
            omega=w.omega if "rate" in self.active_losses else 0.0,
        )


def stage_for(iteration: int, s: Schedule) -> StagePlan:
    m = s.milestones
    if not 0 <= iteration < m["total_iters"]:
        raise ValueError(f"iteration {iteration} outside [0, {m['total_iters']})")
    nets = {"flow", "mv_enc", "mv_gen"}
    lossset = {"mse", "rate"}
    index = 0
    if iteration >= m["mc_join"]:
        nets.add("motion_comp")
        index = 1
    if iteration >= m["residual_join"]:
        nets |= {"res_enc", "res_gen"}
        index = 2
    if iteration >= m["vgg_loss_at"]:
        lossset.add("vgg")
    if iteration >= m["adversarial_join"]:
        nets.add("discriminator")
        lossset.add("adv")
        index = 3
    return StagePlan(index, frozenset(nets), frozenset(lossset))


def stack_batch(batch) -> torch.Tensor:
    """VideoSamples (or an array) to a (B, T, 3, H, W) float tensor."""
    if torch.is_tensor(batch):
        return batch.float()
    if isinstance(batch, VideoSample):
        batch = [batch]
    if len(batch) == 0:
        raise ValueError("empty batch")
    arr = np.stack([s.frames if isinstance(s, VideoSample) else np.asarray(s) for s in batch])
    return torch.from_numpy(arr).permute(0, 1, 4, 2, 3).contiguous().float()


class Trainer:
    """Owns a model, per-network optimizers and the quantization-noise stream."""

    def __init__(self, model: DVCPModel, weights: L.LossWeights, extractor: FeatureExtractor,
                 lr: float = 1e-4, seed: int = 0, clip_norm: float = 1.0):
        self.model = model
        self.weights = weights
        self.extractor = extractor
        self.lr = lr
        self.clip_norm = clip_norm
        self.rng = torch.Generator().manual_seed(seed)
        self.optimizers = {
            name: torch.optim.Adam(model.group_parameters(name), lr=lr)
            for name in NETWORK_GROUPS
        }
        # "raw" / "recon" per coded P-frame of the last step, for inspection
        self.reference_log: list[str] = []

    def generator_objective(self, frames: torch.Tensor, plan: StagePlan):
        """Code frames 1..T-1 of each clip, chaining references.

        Returns ``(total, breakdown, reconstructions, originals)`` where the
        last two are stacked over all coded frames.
        """
        model = self.model
        b, t, _, h, w = frames.shape
        if t < 2:
            raise ValueError("training clips need at least two frames")
        w_eff = plan.effective_weights(self.weights)
        reference = frames[:, 0]
        self.reference_log = []
        recons, mse, vgg, rate = [], 0.0, 0.0, 0.0
        for i in range(1, t):
            current = frames[:, i]
            out = model.pframe(reference, current, "train", self.rng,
                               use_mc=plan.use_mc, use_residual=plan.use_residual)
            mv = LatentCode(out.mv_symbols, out.mv_likelihoods, "mv")
            res = (LatentCode(out.res_symbols, out.res_likelihoods, "residual")
                   if plan.use_residual else None)
            mse = mse + L.mse_loss(current, out.reconstruction)
            rate = rate + L.rate_loss(res, mv, b * h * w)
            if "vgg" in plan.active_losses:
                vgg = vgg + L.vgg_loss(current, out.reconstruction, self.extractor)
            recons.append(out.reconstruction)
            if plan.use_mc:
                reference = out.reconstruction.detach().clamp(0.0, 1.0)
                self.reference_log.append("recon")
            else:
                reference = current
                self.reference_log.append("raw")
        n = t - 1
        recon = torch.cat(recons)
        originals = frames[:, 1:].transpose(0, 1).reshape(-1, *frames.shape[2:])
        adv = 0.0
        if plan.use_discriminator:
            adv = L.adversarial_loss(model.discriminator(recon))
        total, breakdown = L.generator_loss(mse / n, adv, vgg / n, rate / n, w_eff)
        return total, breakdown, recon, originals

    def discriminator_objective(self, fake: torch.Tensor, real: torch.Tensor) -> torch.Tensor:
        disc = self.model.discriminator
        d_loss = L.discriminator_loss(disc(fake.detach()), disc(real))
        L._check_finite("d_loss", d_loss)
        return d_loss

    def _step(self, names: Sequence[str]) -> None:
        params = [p for n in names for p in self.model.group_parameters(n) if p.grad is not None]
        if self.clip_norm:
            torch.nn.utils.clip_grad_norm_(params, self.clip_norm)
        for n in names:
            self.optimizers[n].step()

    def _zero(self) -> None:
        for opt in self.optimizers.values():
            opt.zero_grad(set_to_none=True)

    def train_step(self, batch, plan: StagePlan) -> L.LossBreakdown:
        frames = stack_batch(batch)
        if frames.shape[0] == 0:
            raise ValueError("empty batch")
        self.model.train()
        self._zero()
        total, breakdown, recon, originals = self.generator_objective(frames, plan)
        total.backward()
        active_g = [n for n in GENERATOR_NETWORKS if n in plan.active_networks]
        self._step(active_g)
        self._zero()
        if plan.use_discriminator:
            d_loss = self.discriminator_objective(recon, originals)
            d_loss.backward()
            self._step(["discriminator"])
            self._zero()
            breakdown.d_loss = float(d_loss.detach())
        return breakdown

    def state_dict(self) -> dict:
        return {
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "rng": self.rng.get_state(),
            "weights": asdict(self.weights),
            "lr": self.lr,
            "optimizer": "adam",
        }

    def load_state_dict(self, state: dict) -> None:
        for k, o in self.optimizers.items():
            o.load_state_dict(state["optimizers"][k])
        self.rng.set_state(state["rng"])


def train_step(batch, plan: StagePlan, state: Trainer, w: Optional[L.LossWeights] = None) -> L.LossBreakdown:
    if w is not None:
        state.weights = w
    return state.train_step(batch, plan)


@dataclass
class TrainConfig:
    schedule: Schedule = field(default_factory=Schedule)
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    seed: int = 0
    batch_size: int = 4
    crop_size: int = 256
    frames_per_sample: int = 7
    lr: float = 1e-4
    clip_norm: float = 1.0
    extractor: str = "random"
    checkpoint_every: int = 10_000
    out_dir: str = "runs/train"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        sched = Schedule(**d.pop("schedule", {}))
        weights = L.LossWeights(**d.pop("weights", {}))
        net = NetworkConfig(**d.pop("network", {}))
        return cls(schedule=sched, weights=weights, network=net, **d)


class BatchSampler:
    """Draws ``batch_size`` clips and crops each at its own seeded position."""

    def __init__(self, source, batch_size: int, crop_size: int, seed: int):
        self.source = source
        self.batch_size = batch_size
        self.crop_size = crop_size
        self.rng = np.random.default_rng(seed)

    def next(self) -> torch.Tensor:
        clips = [random_crop(self.source.sample(), self.crop_size, self.rng)
                 for _ in range(self.batch_size)]
        return stack_batch(clips)

    def state(self) -> dict:
        st = {"crop": self.rng.bit_generator.state}
        if hasattr(self.source, "rng"):
            st["source"] = self.source.rng.bit_generator.state
        return st

    def restore(self, st: dict) -> None:
        self.rng.bit_generator.state = st["crop"]
        if "source" in st:
            self.source.rng.bit_generator.state = st["source"]


def _write_log_row(writer, iteration: int, plan: StagePlan, b: L.LossBreakdown) -> None:
    writer.writerow([iteration, plan.index, *b.csv_values()])


def run_training(config: TrainConfig, source, resume: Optional[str] = None,
                 stop_at: Optional[int] = None, progress: bool = False):
    """Train for ``config.schedule`` iterations; returns (checkpoint path, log path).

    ``resume`` continues from a checkpoint written by an earlier call.
    ``stop_at`` ends the run early (exclusive), still writing a checkpoint.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.pt"
    log_path = out / "train_log.csv"

    torch.manual_seed(config.seed)
    model = DVCPModel(config.network)
    extractor = make_extractor(config.extractor, seed=config.seed + 1234)
    trainer = Trainer(model, config.weights, extractor, lr=config.lr, seed=config.seed,
                      clip_norm=config.clip_norm)
    sampler = BatchSampler(source, config.batch_size, config.crop_size, config.seed)
    start = 0
    if resume is not None:
        loaded, blob = load_checkpoint(resume)
        model.load_state_dict(loaded.state_dict())
        trainer.load_state_dict(blob["extra"]["trainer"])
        sampler.restore(blob["extra"]["sampler"])
        torch.set_rng_state(blob["extra"]["torch_rng"])
        start = blob["iteration"]

    def checkpoint(iteration: int) -> None:
        extra = {"trainer": trainer.state_dict(), "sampler": sampler.state(),
                 "torch_rng": torch.get_rng_state(), "config": asdict(config)}
        save_checkpoint(ckpt_path, model, iteration, extra)

    end = config.schedule.iterations if stop_at is None else min(stop_at, config.schedule.iterations)
    mode = "a" if resume is not None and log_path.exists() else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOG_HEADER)
        for it in range(start, end):
            plan = stage_for(it, config.schedule)
            batch = sampler.next()
            try:
                b = trainer.train_step(batch, plan)
            except L.NonFiniteLossError:
                log.error("non-finite loss at iteration %d, keeping last good checkpoint", it)
                checkpoint(it)
                raise
            _write_log_row(writer, it, plan, b)
            if progress and it % 50 == 0:
                log.info("it %d stage %d total %.5f mse %.5f rate %.4f", it, plan.index,
                         b.total, b.mse, b.rate)
            if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                fh.flush()
                checkpoint(it + 1)
    checkpoint(end)
    return ckpt_path, log_path


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def is_monotone_plan(plans: Iterable[StagePlan]) -> bool:
    plans = list(plans)
    return all(a.active_networks <= b.active_networks and a.active_losses <= b.active_losses
               for a, b in zip(plans, plans[1:]))

