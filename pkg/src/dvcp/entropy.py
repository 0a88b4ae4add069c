"""Quantization surrogate, factorized entropy model, rate and latent coding.

The entropy model is a per-channel learned univariate CDF built from a small
monotone network (softplus-positive matrices, tanh gates). Its likelihood of
an integer symbol ``q`` is ``c(q + 0.5) - c(q - 0.5)``; the same model,
quantized to 16-bit frequencies, drives the arithmetic coder.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import rangecoder as rc

LIKELIHOOD_FLOOR = 1e-9
TAIL_MASS = 2.0 ** -18
MAX_SUPPORT = 1024
ROLE_CODES = {"mv": 0, "residual": 1, "intra": 2}
ROLE_NAMES = {v: k for k, v in ROLE_CODES.items()}

# [u32 payload length][u8 role][u16 channels][u16 h][u16 w][u32 model checksum]
BLOCK_HEADER = struct.Struct("<IBHHHI")


class BitstreamError(ValueError):
    pass


@dataclass
class LatentCode:
    values: torch.Tensor
    likelihoods: torch.Tensor
    role: str


def round_half_away(y: torch.Tensor) -> torch.Tensor:
    return torch.sign(y) * torch.floor(torch.abs(y) + 0.5)


def quantize(y: torch.Tensor, mode: str = "train", rng: torch.Generator | None = None) -> torch.Tensor:
    """Additive U(-0.5, 0.5) noise in training, rounding half away from zero otherwise."""
    if mode == "train":
        u = torch.rand(y.shape, generator=rng, dtype=y.dtype, device=y.device) - 0.5
        return y + u
    if mode == "infer":
        return round_half_away(y)
    raise ValueError(f"unknown quantization mode {mode!r}")


class FactorizedEntropyModel(nn.Module):
    def __init__(self, channels: int, filters=(3, 3, 3), init_scale: float = 10.0):
        super().__init__()
        self.channels = channels
        dims = (1, *filters, 1)
        scale = init_scale ** (1.0 / (len(filters) + 1))
        self.matrices = nn.ParameterList()
        self.biases = nn.ParameterList()
        self.factors = nn.ParameterList()
        for i in range(len(filters) + 1):
            init = float(np.log(np.expm1(1.0 / scale / dims[i + 1])))
            self.matrices.append(nn.Parameter(torch.full((channels, dims[i + 1], dims[i]), init)))
            self.biases.append(nn.Parameter(torch.rand(channels, dims[i + 1], 1) - 0.5))
            if i < len(filters):
                self.factors.append(nn.Parameter(torch.zeros(channels, dims[i + 1], 1)))

    def _logits_cdf(self, x: torch.Tensor) -> torch.Tensor:
        # x: (C, 1, N)
        logits = x
        for i, matrix in enumerate(self.matrices):
            logits = torch.matmul(F.softplus(matrix), logits) + self.biases[i]
            if i < len(self.factors):
                logits = logits + torch.tanh(self.factors[i]) * torch.tanh(logits)
        return logits

    def cdf(self, x: torch.Tensor) -> torch.Tensor:
        """Per-channel CDF at points ``x`` of shape (C, N)."""
        return torch.sigmoid(self._logits_cdf(x.unsqueeze(1))).squeeze(1)

    def forward(self, q: torch.Tensor) -> torch.Tensor:
        return likelihood(q, self)


def likelihood(q: torch.Tensor, model: FactorizedEntropyModel) -> torch.Tensor:
    """P(q) per element of an (N, C, H, W) or (C, H, W) tensor, floored at 1e-9."""
    squeeze = q.dim() == 3
    if squeeze:
        q = q.unsqueeze(0)
    if q.shape[1] != model.channels:
        raise ValueError(f"latent has {q.shape[1]} channels, model has {model.channels}")
    n, c, h, w = q.shape
    x = q.permute(1, 0, 2, 3).reshape(c, 1, -1)
    lower = model._logits_cdf(x - 0.5)
    upper = model._logits_cdf(x + 0.5)
    # evaluate on the side of the median where sigmoid differences are accurate
    sign = -torch.sign(lower + upper).detach()
    p = torch.abs(torch.sigmoid(sign * upper) - torch.sigmoid(sign * lower))
    p = p.clamp_min(LIKELIHOOD_FLOOR).reshape(c, n, h, w).permute(1, 0, 2, 3)
    return p[0] if squeeze else p


def bits_estimate(likelihoods: torch.Tensor) -> torch.Tensor:
    return -torch.log2(likelihoods).sum()


def latent_code(y: torch.Tensor, model: FactorizedEntropyModel, role: str, mode: str = "train",
                rng: torch.Generator | None = None) -> LatentCode:
    q = quantize(y, mode, rng)
    return LatentCode(q, likelihood(q, model), role)


class CodingTables:
    """Integer frequency tables derived from a frozen entropy model.

    Channel ``c`` codes symbols ``lo[c] .. hi[c]`` directly; index
    ``hi - lo + 1`` is the escape symbol for anything outside.
    """

    def __init__(self, model: FactorizedEntropyModel, precision: int = 16):
        self.precision = precision
        self.lo: list[int] = []
        self.hi: list[int] = []
        self.cum: list[list[int]] = []
        grid = torch.arange(-MAX_SUPPORT, MAX_SUPPORT + 1, dtype=torch.float64)
        with torch.no_grad():
            model64 = _as_double(model)
            edges = torch.cat([grid - 0.5, grid[-1:] + 0.5])
            cdf = model64.cdf(edges.unsqueeze(0).expand(model.channels, -1)).numpy()
            probs = likelihood(grid.view(1, 1, 1, -1).expand(1, model.channels, 1, -1),
                               model64).reshape(model.channels, -1).numpy()
        for c in range(model.channels):
            left = np.nonzero(cdf[c, 1:] > TAIL_MASS)[0]
            right = np.nonzero(cdf[c, :-1] < 1.0 - TAIL_MASS)[0]
            lo_i = int(left[0]) if len(left) else MAX_SUPPORT
            hi_i = int(right[-1]) if len(right) else MAX_SUPPORT
            if hi_i < lo_i:
                lo_i = hi_i = int(np.argmax(probs[c]))
            pmf = probs[c, lo_i:hi_i + 1].astype(np.float64)
            escape = max(1.0 - float(pmf.sum()), TAIL_MASS)
            self.lo.append(lo_i - MAX_SUPPORT)
            self.hi.append(hi_i - MAX_SUPPORT)
            self.cum.append(rc.pmf_to_cumulative(list(pmf) + [escape], precision))
        self.checksum = self._checksum()

    def _checksum(self) -> int:
        crc = 0
        for lo, hi, cum in zip(self.lo, self.hi, self.cum):
            crc = zlib.crc32(struct.pack("<ii", lo, hi), crc)
            crc = zlib.crc32(np.asarray(cum, dtype=np.uint32).tobytes(), crc)
        return crc & 0xFFFFFFFF

    @property
    def channels(self) -> int:
        return len(self.cum)


def _as_double(model: FactorizedEntropyModel) -> FactorizedEntropyModel:
    clone = FactorizedEntropyModel(model.channels, filters=tuple(m.shape[1] for m in model.matrices[:-1]))
    clone.load_state_dict(model.state_dict())
    return clone.double().eval()


def _tables(model) -> CodingTables:
    return model if isinstance(model, CodingTables) else CodingTables(model)


def range_encode(symbols, model, role: str = "residual") -> bytes:
    """Code an integer (C, H, W) latent into a self-describing block."""
    tables = _tables(model)
    arr = np.asarray(symbols.detach().cpu().numpy() if torch.is_tensor(symbols) else symbols)
    if arr.ndim != 3:
        raise ValueError(f"expected a (C, H, W) latent, got shape {arr.shape}")
    if not np.all(arr == np.round(arr)):
        raise ValueError("range_encode needs integer-valued symbols")
    arr = arr.astype(np.int64)
    c, h, w = arr.shape
    if c != tables.channels:
        raise ValueError(f"latent has {c} channels, model has {tables.channels}")
    payload = b""
    if arr.size:
        enc = rc.ArithmeticEncoder()
        for ch in range(c):
            lo, hi, cum = tables.lo[ch], tables.hi[ch], tables.cum[ch]
            esc = hi - lo + 1
            for s in arr[ch].ravel().tolist():
                if lo <= s <= hi:
                    enc.encode(cum, s - lo)
                else:
                    enc.encode(cum, esc)
                    if s < lo:
                        enc.encode_bits(0, 1)
                        rc.encode_exp_golomb(enc, lo - s - 1)
                    else:
                        enc.encode_bits(1, 1)
                        rc.encode_exp_golomb(enc, s - hi - 1)
        payload = enc.finish()
    header = BLOCK_HEADER.pack(len(payload), ROLE_CODES[role], c, h, w, tables.checksum)
    return header + payload


def parse_block(bits: bytes, offset: int = 0):
    """Split one coded block; returns (fields dict, payload, next offset)."""
    if len(bits) - offset < BLOCK_HEADER.size:
        raise BitstreamError("truncated bitstream")
    length, role, c, h, w, checksum = BLOCK_HEADER.unpack_from(bits, offset)
    start = offset + BLOCK_HEADER.size
    if len(bits) - start < length:
        raise BitstreamError("truncated bitstream")
    if role not in ROLE_NAMES:
        raise BitstreamError(f"unknown latent role code {role}")
    fields = dict(role=ROLE_NAMES[role], shape=(c, h, w), checksum=checksum)
    return fields, bytes(bits[start:start + length]), start + length


def range_decode(bits: bytes, model, shape=None) -> torch.Tensor:
    tables = _tables(model)
    fields, payload, _ = parse_block(bits)
    if fields["checksum"] != tables.checksum:
        raise BitstreamError("entropy model checksum mismatch")
    c, h, w = fields["shape"]
    if shape is not None and tuple(shape) != (c, h, w):
        raise BitstreamError(f"block shape {(c, h, w)} differs from expected {tuple(shape)}")
    if c != tables.channels:
        raise BitstreamError(f"block has {c} channels, model has {tables.channels}")
    out = np.zeros((c, h, w), dtype=np.int64)
    if out.size:
        dec = rc.ArithmeticDecoder(payload)
        flat = out.reshape(c, -1)
        for ch in range(c):
            lo, hi, cum = tables.lo[ch], tables.hi[ch], tables.cum[ch]
            esc = hi - lo + 1
            for i in range(h * w):
                s = dec.decode(cum)
                if s == esc:
                    if dec.decode_bits(1) == 0:
                        flat[ch, i] = lo - 1 - rc.decode_exp_golomb(dec)
                    else:
                        flat[ch, i] = hi + 1 + rc.decode_exp_golomb(dec)
                else:
                    flat[ch, i] = lo + s
    return torch.from_numpy(out).float()
