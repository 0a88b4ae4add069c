import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from dvcp.data import (DataError, SyntheticClipSource, VideoSample, load_frame_sequence,
                       random_crop, read_yuv420, save_frame_sequence, synth_sequence)


def _write_pngs(directory, frames_u8):
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames_u8):
        Image.fromarray(f).save(directory / f"{i:06d}.png")


def test_load_seven_frames(tmp_path, rng):
    frames = rng.integers(0, 256, (7, 16, 24, 3), dtype=np.uint8)
    _write_pngs(tmp_path / "clip", frames)
    s = load_frame_sequence(tmp_path / "clip", 0, 7)
    assert s.num_frames == 7
    assert s.frames.shape == (7, 16, 24, 3)
    np.testing.assert_array_equal(np.round(s.frames * 255).astype(np.uint8), frames)


def test_load_range_mapping(tmp_path):
    frames = np.zeros((2, 4, 4, 3), np.uint8)
    frames[0] = 255
    _write_pngs(tmp_path / "c", frames)
    s = load_frame_sequence(tmp_path / "c", 0, 2)
    assert s.frames[0].min() == 1.0
    assert s.frames[1].max() == 0.0


def test_load_offset_keeps_order(tmp_path):
    frames = np.stack([np.full((4, 4, 3), 10 * i, np.uint8) for i in range(5)])
    _write_pngs(tmp_path / "c", frames)
    s = load_frame_sequence(tmp_path / "c", 2, 3)
    assert [round(float(f[0, 0, 0]) * 255) for f in s.frames] == [20, 30, 40]


def test_load_errors(tmp_path, rng):
    with pytest.raises(DataError, match="empty sample requested"):
        load_frame_sequence(tmp_path, 0, 0)
    with pytest.raises(DataError, match="missing path"):
        load_frame_sequence(tmp_path / "nope", 0, 1)
    _write_pngs(tmp_path / "c", rng.integers(0, 256, (3, 4, 4, 3), dtype=np.uint8))
    with pytest.raises(DataError):
        load_frame_sequence(tmp_path / "c", 0, 4)
    Image.fromarray(np.zeros((6, 6, 3), np.uint8)).save(tmp_path / "c" / "000009.png")
    with pytest.raises(DataError, match="inconsistent"):
        load_frame_sequence(tmp_path / "c", 0, 4)


def test_yuv_reader(tmp_path):
    w, h = 8, 4
    y = np.full((h, w), 16, np.uint8)
    u = np.full((h // 2, w // 2), 128, np.uint8)
    v = np.full((h // 2, w // 2), 128, np.uint8)
    white = np.full((h, w), 235, np.uint8)
    raw = b"".join(p.tobytes() for p in (y, u, v, white, u, v))
    path = tmp_path / "clip.yuv"
    path.write_bytes(raw)
    frames = read_yuv420(path, w, h)
    assert frames.shape == (2, h, w, 3)
    np.testing.assert_allclose(frames[0], 0.0, atol=1e-6)
    np.testing.assert_allclose(frames[1], 1.0, atol=1e-6)
    s = load_frame_sequence(path, 1, 1, width=w, height=h)
    assert s.num_frames == 1


def test_roundtrip_within_one_level(tmp_path, rng):
    s = VideoSample(rng.random((3, 8, 8, 3)).astype(np.float32))
    save_frame_sequence(s, tmp_path / "out")
    back = load_frame_sequence(tmp_path / "out", 0, 3)
    assert np.max(np.abs(back.frames - s.frames)) <= 1 / 255 + 1e-7


def test_crop_identity_and_determinism(rng):
    s = VideoSample(rng.random((4, 16, 16, 3)).astype(np.float32))
    for seed in (0, 1, 99):
        np.testing.assert_array_equal(random_crop(s, 16, seed).frames, s.frames)
    big = VideoSample(rng.random((4, 20, 30, 3)).astype(np.float32))
    a, b = random_crop(big, 8, 5), random_crop(big, 8, 5)
    np.testing.assert_array_equal(a.frames, b.frames)
    assert a.frames.shape == (4, 8, 8, 3)
    with pytest.raises(DataError):
        random_crop(s, 17, 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), size=st.integers(1, 12))
def test_crop_shared_across_frames(seed, size):
    # each frame holds a coordinate-dependent pattern shifted by the frame index;
    # a shared crop keeps the per-frame offset identical
    h, w, t = 12, 15, 5
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    base = (yy * w + xx) / (h * w)
    frames = np.stack([np.repeat(base[..., None], 3, -1) * 0.5 + 0.1 * i for i in range(t)])
    out = random_crop(VideoSample(frames.astype(np.float32)), size, seed).frames
    for i in range(1, t):
        np.testing.assert_allclose(out[i] - out[0], 0.1 * i, atol=1e-6)


def test_synth_zero_motion_static():
    s = synth_sequence(3, 5, 16, 16, (0, 0))
    for f in s.frames[1:]:
        np.testing.assert_array_equal(f, s.frames[0])


@pytest.mark.parametrize("motion", [(1, 0), (0, 2), (-1, 1), (2, -2)])
def test_synth_integer_shift_matches_index_arithmetic(motion):
    dx, dy = motion
    s = synth_sequence(7, 4, 16, 20, motion)
    f0 = s.frames[0]
    h, w = f0.shape[:2]
    for t in range(1, 4):
        expected = np.empty_like(f0)
        for y in range(h):
            for x in range(w):
                expected[y, x] = f0[(y - t * dy) % h, (x - t * dx) % w]
        np.testing.assert_array_equal(s.frames[t], expected)


def test_synth_seeding_and_errors():
    a = synth_sequence(1, 2, 16, 16)
    b = synth_sequence(2, 2, 16, 16)
    assert not np.array_equal(a.frames[0], b.frames[0])
    np.testing.assert_array_equal(a.frames, synth_sequence(1, 2, 16, 16).frames)
    with pytest.raises(DataError):
        synth_sequence(0, 5, 8, 8, (2, 0))
    assert a.frames.min() >= 0 and a.frames.max() <= 1


def test_video_sample_invariants():
    with pytest.raises(DataError):
        VideoSample(np.full((1, 4, 4, 3), 1.5))
    with pytest.raises(DataError):
        VideoSample(np.zeros((0, 4, 4, 3)))


def test_synthetic_source_yields_seven_frame_clips():
    src = SyntheticClipSource(seed=0, num_frames=7, canvas=32)
    clip = src.sample()
    assert clip.frames.shape == (7, 32, 32, 3)
