"""Sequence encoder/decoder and the ``.dvcp`` container.

Layout (little-endian)::

    header  : magic "DVCP" | u16 version | u32 model checksum | u16 W | u16 H
              | u32 frame_count | u16 gop_size | u8 intra_mode | u32 crc32(header)
    record* : u8 frame type ('I' / 'P') | u32 payload length | u32 crc32(payload) | payload

A P-frame payload is an MV latent block followed by a residual latent block
(see :mod:`dvcp.entropy`). An I-frame payload is a PNG image (``stored``) or a
single latent block (``learned``).
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .data import VideoSample, from_uint8, to_uint8
from .entropy import BLOCK_HEADER, BitstreamError, bits_estimate, likelihood, parse_block, range_decode, range_encode
from .evaluation import RDCurve, RDPoint, RandomVideoEmbedder, fvd, psnr, split_clips
from .model import DVCPModel, load_checkpoint

MAGIC = b"DVCP"
VERSION = 1
INTRA_MODES = ("stored", "learned")
HEADER = struct.Struct("<4sHIHHIHB")
HEADER_CRC = struct.Struct("<I")
RECORD = struct.Struct("<BII")


@dataclass
class FrameRecord:
    frame_type: str
    payload: bytes

    def blocks(self) -> list[bytes]:
        """Split a latent-coded payload into its self-delimiting blocks."""
        out, offset = [], 0
        while offset < len(self.payload):
            _, _, end = parse_block(self.payload, offset)
            out.append(self.payload[offset:end])
            offset = end
        return out


@dataclass
class Bitstream:
    model_checksum: int
    width: int
    height: int
    gop_size: int
    intra_mode: str = "stored"
    records: list = field(default_factory=list)
    version: int = VERSION

    @property
    def frame_count(self) -> int:
        return len(self.records)

    def header_bytes(self) -> bytes:
        head = HEADER.pack(MAGIC, self.version, self.model_checksum, self.width, self.height,
                           self.frame_count, self.gop_size, INTRA_MODES.index(self.intra_mode))
        return head + HEADER_CRC.pack(zlib.crc32(head))

    def to_bytes(self) -> bytes:
        parts = [self.header_bytes()]
        for r in self.records:
            parts.append(RECORD.pack(ord(r.frame_type), len(r.payload), zlib.crc32(r.payload)))
            parts.append(r.payload)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        hsize = HEADER.size + HEADER_CRC.size
        if len(data) < hsize:
            raise BitstreamError("truncated bitstream")
        magic, version, checksum, w, h, count, gop, intra = HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise BitstreamError("not a DVCP bitstream")
        if version != VERSION:
            raise BitstreamError(f"unsupported bitstream version {version}")
        (crc,) = HEADER_CRC.unpack_from(data, HEADER.size)
        if crc != zlib.crc32(data[:HEADER.size]):
            raise BitstreamError("header checksum mismatch")
        if intra >= len(INTRA_MODES):
            raise BitstreamError(f"unknown intra mode {intra}")
        bs = cls(checksum, w, h, gop, INTRA_MODES[intra], version=version)
        offset = hsize
        for i in range(count):
            if len(data) - offset < RECORD.size:
                raise BitstreamError("truncated bitstream")
            ftype, length, crc = RECORD.unpack_from(data, offset)
            offset += RECORD.size
            if len(data) - offset < length:
                raise BitstreamError("truncated bitstream")
            payload = bytes(data[offset:offset + length])
            offset += length
            if zlib.crc32(payload) != crc:
                raise BitstreamError(f"payload checksum mismatch in frame {i}")
            if chr(ftype) not in ("I", "P"):
                raise BitstreamError(f"unknown frame type {ftype}")
            bs.records.append(FrameRecord(chr(ftype), payload))
        if offset != len(data):
            raise BitstreamError("trailing bytes after last frame")
        return bs

    def total_bytes(self) -> int:
        return len(self.to_bytes())

    def header_overhead_bytes(self) -> int:
        n = HEADER.size + HEADER_CRC.size + RECORD.size * len(self.records)
        for r in self.records:
            if r.frame_type == "P" or self.intra_mode == "learned":
                n += BLOCK_HEADER.size * len(r.blocks())
        return n

    def bpp(self, include_headers: bool = True) -> float:
        bits = 8 * self.total_bytes()
        if not include_headers:
            bits -= 8 * self.header_overhead_bytes()
        return bits / (self.width * self.height * max(self.frame_count, 1))


@dataclass
class EncodeResult:
    bitstream: Bitstream
    reconstruction: VideoSample
    estimated_bits: list
    coded_bits: list

    def __iter__(self):
        return iter((self.bitstream, self.reconstruction))


def _model(model) -> DVCPModel:
    if isinstance(model, DVCPModel):
        return model.eval()
    loaded, _ = load_checkpoint(model)
    return loaded


def _frame_tensor(frame: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(frame)).permute(2, 0, 1).unsqueeze(0).float()


def _frame_array(t: torch.Tensor) -> np.ndarray:
    return t[0].permute(1, 2, 0).detach().cpu().numpy().astype(np.float32)


def check_geometry(model: DVCPModel, height: int, width: int) -> None:
    d = max(2 ** model.config.levels, 2 ** (model.config.flow_levels - 1))
    if height % d or width % d:
        raise ValueError(f"frame size {height}x{width} must be divisible by {d}")
    if height > 0xFFFF or width > 0xFFFF:
        raise ValueError("frame size exceeds container limits")


def _png_bytes(frame: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(frame), mode="RGB").save(buf, format="PNG", optimize=True)
    return buf.getvalue()


def _png_frame(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


@torch.no_grad()
def encode_sequence(frames: VideoSample, model, gop_size: int = 10, intra_mode: str = "stored",
                    reference_hook: Optional[Callable[[int, torch.Tensor], None]] = None) -> EncodeResult:
    """Code a clip; P-frames predict from the previous *reconstructed* frame.

    ``reference_hook(index, reference)`` is called before each P-frame.
    """
    model = _model(model)
    if gop_size < 1:
        raise ValueError("gop_size must be >= 1")
    if intra_mode not in INTRA_MODES:
        raise ValueError(f"intra_mode must be one of {INTRA_MODES}")
    check_geometry(model, frames.height, frames.width)
    tables = model.coding_tables()
    bs = Bitstream(model.checksum(), frames.width, frames.height, gop_size, intra_mode)
    recon, est_bits, coded_bits = [], [], []
    reference = None
    for i, frame in enumerate(frames.frames):
        current = _frame_tensor(frame)
        if i % gop_size == 0:
            if intra_mode == "stored":
                payload = _png_bytes(frame)
                rec = _frame_tensor(_png_frame(payload))
                est = 8.0 * len(payload)
            else:
                sym = model.intra_encode(current)
                payload = range_encode(sym[0], tables["residual"], "intra")
                rec = model.intra_reconstruct(sym)
                est = float(bits_estimate(likelihood(sym, model.res_prior)))
            bs.records.append(FrameRecord("I", payload))
        else:
            if reference_hook is not None:
                reference_hook(i, reference.clone())
            out = model.pframe(reference, current, "infer")
            mv_block = range_encode(out.mv_symbols[0], tables["mv"], "mv")
            res_block = range_encode(out.res_symbols[0], tables["residual"], "residual")
            payload = mv_block + res_block
            rec = out.reconstruction
            est = float(bits_estimate(out.mv_likelihoods) + bits_estimate(out.res_likelihoods))
            bs.records.append(FrameRecord("P", payload))
        est_bits.append(est)
        coded_bits.append(8 * len(payload))
        recon.append(_frame_array(rec))
        reference = rec
    return EncodeResult(bs, VideoSample(np.stack(recon), frames.frame_rate, frames.source_id),
                        est_bits, coded_bits)


@torch.no_grad()
def decode_sequence(bits, model) -> VideoSample:
    """Rebuild frames from a Bitstream (or its bytes / a ``.dvcp`` path)."""
    if isinstance(bits, (str, Path)):
        bits = Path(bits).read_bytes()
    bs = bits if isinstance(bits, Bitstream) else Bitstream.from_bytes(bits)
    model = _model(model)
    if bs.model_checksum != model.checksum():
        raise BitstreamError("model checksum mismatch: bitstream was coded with another checkpoint")
    check_geometry(model, bs.height, bs.width)
    tables = model.coding_tables()
    c, d = model.config.latent_channels, 2 ** model.config.levels
    lshape = (c, bs.height // d, bs.width // d)
    frames, reference = [], None
    for i, rec in enumerate(bs.records):
        if (rec.frame_type == "I") != (i % bs.gop_size == 0):
            raise BitstreamError(f"frame {i} has type {rec.frame_type}, inconsistent with GOP")
        if rec.frame_type == "I":
            if bs.intra_mode == "stored":
                try:
                    arr = _png_frame(rec.payload)
                except Exception as e:  # PIL raises several unrelated types
                    raise BitstreamError(f"corrupt intra frame {i}: {e}") from e
                if arr.shape != (bs.height, bs.width, 3):
                    raise BitstreamError(f"intra frame {i} has wrong size")
                out = _frame_tensor(arr)
            else:
                sym = range_decode(rec.payload, tables["residual"], lshape).unsqueeze(0)
                out = model.intra_reconstruct(sym)
        else:
            blocks = rec.blocks()
            if len(blocks) != 2:
                raise BitstreamError(f"P-frame {i} needs 2 latent blocks, found {len(blocks)}")
            q_mv = range_decode(blocks[0], tables["mv"], lshape).unsqueeze(0)
            q_res = range_decode(blocks[1], tables["residual"], lshape).unsqueeze(0)
            out = model.reconstruct(reference, q_mv, q_res)
        frames.append(_frame_array(out))
        reference = out
    return VideoSample(np.stack(frames))


def write_bitstream(bs: Bitstream, path) -> Path:
    path = Path(path)
    path.write_bytes(bs.to_bytes())
    return path


def read_bitstream(path) -> Bitstream:
    return Bitstream.from_bytes(Path(path).read_bytes())


class SweepError(RuntimeError):
    def __init__(self, message: str, partial: list):
        super().__init__(message)
        self.partial = partial


def rd_sweep(frames: VideoSample, checkpoints: Sequence, gop_size: int = 10,
             intra_mode: str = "stored", embedder=None, clip_len: int = 10,
             label: str = "") -> RDCurve:
    """One RD point per checkpoint (measured bpp, PSNR and FVD), sorted by bpp.

    ``checkpoints`` holds ``(omega, model_or_path)`` pairs.
    """
    if len(checkpoints) < 2:
        raise ValueError("BD-rate needs >=2 points")
    embedder = embedder or RandomVideoEmbedder()
    real = split_clips(frames, clip_len)
    points = []
    for omega, ckpt in checkpoints:
        try:
            res = encode_sequence(frames, ckpt, gop_size, intra_mode)
        except Exception as e:
            raise SweepError(f"encode failed for omega={omega}: {e}", points) from e
        bs = res.bitstream
        points.append(RDPoint(
            bpp=bs.bpp(), psnr=psnr(frames, res.reconstruction),
            fvd=fvd(real, split_clips(res.reconstruction, clip_len), embedder),
            omega=float(omega), label=label, bpp_no_header=bs.bpp(include_headers=False)))
    return RDCurve(points, label=label)
