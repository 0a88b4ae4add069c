import numpy as np
import pytest
import torch

from dvcp.codec import (Bitstream, FrameRecord, decode_sequence, encode_sequence, read_bitstream,
                        rd_sweep, write_bitstream)
from dvcp.data import VideoSample, synth_sequence
from dvcp.entropy import BitstreamError
from dvcp.model import DVCPModel, load_checkpoint, save_checkpoint
from dvcp.networks import NetworkConfig


def small_model(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = NetworkConfig(base_channels=8, latent_channels=8, levels=2, flow_levels=2, flow_channels=8,
                        mc_channels=8, disc_levels=2, disc_channels=8, **kw)
    return DVCPModel(cfg).eval()


@pytest.fixture(scope="module")
def model():
    return small_model()


def clip(seed=0, t=12, size=16, motion=(1, 0)):
    return synth_sequence(seed, t, size, size, motion)


def test_gop_structure_100_frames(model):
    frames = np.concatenate([clip(seed, t=10).frames for seed in range(10)])
    res = encode_sequence(VideoSample(frames), model, gop_size=10)
    types = [r.frame_type for r in res.bitstream.records]
    assert types.count("I") == 10 and types.count("P") == 90
    assert all(types[i] == "I" for i in range(0, 100, 10))
    dec = decode_sequence(res.bitstream.to_bytes(), model)
    assert dec.num_frames == 100
    assert np.array_equal(dec.frames, res.reconstruction.frames)


@pytest.mark.parametrize("gop", [1, 4])
@pytest.mark.parametrize("intra", ["stored", "learned"])
def test_decoder_matches_encoder_bit_exactly(model, gop, intra):
    x = clip(3, t=9)
    bs, recon = encode_sequence(x, model, gop, intra)
    out = decode_sequence(bs.to_bytes(), model)
    assert out.frames.dtype == recon.frames.dtype
    assert np.array_equal(out.frames, recon.frames)


def test_gop_one_is_all_intra(model):
    bs = encode_sequence(clip(t=5), model, gop_size=1).bitstream
    assert [r.frame_type for r in bs.records] == ["I"] * 5


def test_stored_intra_is_lossless_to_8bit(model):
    x = clip(t=3)
    _, recon = encode_sequence(x, model, gop_size=3)
    assert np.max(np.abs(recon.frames[0] - x.frames[0])) <= 0.5 / 255 + 1e-7


def test_container_roundtrip_lossless(model, tmp_path):
    bs = encode_sequence(clip(t=6), model, gop_size=3).bitstream
    path = write_bitstream(bs, tmp_path / "a.dvcp")
    back = read_bitstream(path)
    assert back.to_bytes() == bs.to_bytes()
    assert (back.width, back.height, back.gop_size, back.frame_count) == (16, 16, 3, 6)
    assert back.model_checksum == model.checksum()
    assert np.array_equal(decode_sequence(path, model).frames, decode_sequence(bs, model).frames)


def test_tampering_is_detected(model):
    data = bytearray(encode_sequence(clip(t=4), model, gop_size=2).bitstream.to_bytes())
    for pos in (0, 8, len(data) // 2, len(data) - 1):
        bad = bytearray(data)
        bad[pos] ^= 0x40
        with pytest.raises(BitstreamError):
            decode_sequence(bytes(bad), model)
    with pytest.raises(BitstreamError, match="truncated"):
        Bitstream.from_bytes(bytes(data[:-3]))
    with pytest.raises(BitstreamError, match="trailing"):
        Bitstream.from_bytes(bytes(data) + b"\x00")


def test_other_checkpoint_is_rejected(model):
    bs = encode_sequence(clip(t=3), model).bitstream
    with pytest.raises(BitstreamError, match="checksum"):
        decode_sequence(bs, small_model(seed=9))


def test_inconsistent_gop_rejected(model):
    bs = encode_sequence(clip(t=3), model, gop_size=3).bitstream
    bs.records[1] = FrameRecord("I", bs.records[0].payload)
    with pytest.raises(BitstreamError):
        decode_sequence(bs.to_bytes(), model)


def test_closed_loop_references(model):
    x = clip(5, t=6)
    seen = {}
    res = encode_sequence(x, model, gop_size=3, reference_hook=lambda i, ref: seen.__setitem__(i, ref))
    assert sorted(seen) == [1, 2, 4, 5]
    for i, ref in seen.items():
        expected = res.reconstruction.frames[i - 1]
        assert np.array_equal(ref[0].permute(1, 2, 0).numpy(), expected)
        # the reference is the reconstruction, not the source frame
        assert i % 3 == 1 or not np.array_equal(expected, x.frames[i - 1])


def test_bits_close_to_estimate(model):
    res = encode_sequence(clip(t=8, size=32), model, gop_size=8)
    for est, coded in zip(res.estimated_bits[1:], res.coded_bits[1:]):
        assert coded <= est * 1.02 + 8 * 64


def test_bpp_accounting(model):
    bs = encode_sequence(clip(t=4), model, gop_size=2).bitstream
    assert bs.bpp() == 8 * len(bs.to_bytes()) / (16 * 16 * 4)
    assert 0 < bs.bpp(include_headers=False) < bs.bpp()


def test_geometry_and_argument_errors(model):
    with pytest.raises(ValueError):
        encode_sequence(VideoSample(np.zeros((2, 18, 18, 3), np.float32)), model)
    with pytest.raises(ValueError):
        encode_sequence(clip(t=2), model, gop_size=0)
    with pytest.raises(ValueError):
        encode_sequence(clip(t=2), model, intra_mode="jpeg")


def test_checkpoint_path_roundtrip(model, tmp_path):
    path = save_checkpoint(tmp_path / "m.pt", model, iteration=3)
    loaded, blob = load_checkpoint(path)
    assert blob["iteration"] == 3 and loaded.checksum() == model.checksum()
    x = clip(t=4)
    a = encode_sequence(x, path).bitstream.to_bytes()
    assert a == encode_sequence(x, model).bitstream.to_bytes()


def test_rd_sweep_points_sorted(tmp_path):
    x = clip(t=6)
    ckpts = [(1 / 256, small_model(1)), (1 / 2048, small_model(2))]
    curve = rd_sweep(x, ckpts, gop_size=3, clip_len=3, label="synth")
    assert len(curve.points) == 2
    assert curve.points[0].bpp < curve.points[1].bpp
    assert {p.omega for p in curve.points} == {1 / 256, 1 / 2048}
    assert all(np.isfinite(p.fvd) and p.fvd >= 0 for p in curve.points)
    with pytest.raises(ValueError, match=">=2 points"):
        rd_sweep(x, ckpts[:1])
