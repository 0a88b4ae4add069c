"""Frame-sequence ingestion, synthetic clips and crop sampling.

Frames are held as float32 arrays of shape (T, H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

IMAGE_SUFFIXES = (".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff", ".ppm")


class DataError(ValueError):
    pass


@dataclass
class VideoSample:
    frames: np.ndarray
    frame_rate: Optional[float] = None
    source_id: str = ""

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim == 3:
            frames = frames[None]
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise DataError(f"frames must have shape (T, H, W, 3), got {frames.shape}")
        if frames.shape[0] < 1:
            raise DataError("empty sample requested")
        if not np.all(np.isfinite(frames)) or frames.min() < 0.0 or frames.max() > 1.0:
            raise DataError("pixel values must lie in [0, 1]")
        self.frames = frames

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def __len__(self):
        return self.num_frames

    def slice(self, start: int, stop: int) -> "VideoSample":
        return VideoSample(self.frames[start:stop], self.frame_rate, self.source_id)


@dataclass(frozen=True)
class CropSpec:
    top: int
    left: int
    size: int

    def validate(self, height: int, width: int) -> None:
        if self.top < 0 or self.left < 0:
            raise DataError(f"negative crop offset {self}")
        if self.top + self.size > height or self.left + self.size > width:
            raise DataError(f"crop {self} exceeds frame {height}x{width}")

    def apply(self, frames: np.ndarray) -> np.ndarray:
        return frames[..., self.top:self.top + self.size, self.left:self.left + self.size, :]


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(frames) * 255.0), 0, 255).astype(np.uint8)


def from_uint8(frames: np.ndarray) -> np.ndarray:
    return np.asarray(frames, dtype=np.float32) / 255.0


def _list_frame_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_frame_sequence(
    path,
    start: int = 0,
    count: Optional[int] = None,
    width: Optional[int] = None,
    height: Optional[int] = None,
) -> VideoSample:
    """Load ``count`` frames beginning at ``start``.

    ``path`` is either a directory of 8-bit RGB images (read in lexicographic
    filename order) or a planar 8-bit YUV 4:2:0 file, in which case ``width``
    and ``height`` must be given. ``count=None`` reads everything after ``start``.
    """
    path = Path(path)
    if count is not None and count <= 0:
        raise DataError("empty sample requested")
    if start < 0:
        raise DataError(f"negative start index {start}")
    if not path.exists():
        raise DataError(f"missing path: {path}")

    if path.is_dir():
        files = _list_frame_files(path)
        stop = len(files) if count is None else start + count
        if stop > len(files) or start >= len(files):
            raise DataError(
                f"{path} holds {len(files)} frames, requested [{start}, {stop})")
        frames = []
        for f in files[start:stop]:
            with Image.open(f) as im:
                frames.append(np.asarray(im.convert("RGB")))
        shapes = {fr.shape for fr in frames}
        if len(shapes) != 1:
            raise DataError(f"inconsistent frame sizes in {path}: {sorted(shapes)}")
        return VideoSample(from_uint8(np.stack(frames)), source_id=str(path))

    if path.suffix.lower() == ".yuv":
        if width is None or height is None:
            raise DataError("raw .yuv input needs width and height")
        return VideoSample(read_yuv420(path, width, height, start, count), source_id=str(path))

    raise DataError(f"unsupported input {path}")


def yuv_to_rgb(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """BT.601 limited-range YCbCr (8-bit planes, full resolution) to RGB in [0, 1]."""
    y = (y.astype(np.float64) - 16.0) * (255.0 / 219.0)
    u = (u.astype(np.float64) - 128.0) * (255.0 / 224.0)
    v = (v.astype(np.float64) - 128.0) * (255.0 / 224.0)
    r = y + 1.402 * v
    g = y - 0.344136 * u - 0.714136 * v
    b = y + 1.772 * u
    rgb = np.stack([r, g, b], axis=-1) / 255.0
    return np.clip(rgb, 0.0, 1.0).astype(np.float32)


def read_yuv420(path, width: int, height: int, start: int = 0,
                count: Optional[int] = None) -> np.ndarray:
    if width % 2 or height % 2:
        raise DataError("4:2:0 geometry needs even width and height")
    frame_bytes = width * height * 3 // 2
    total = os.path.getsize(path) // frame_bytes
    stop = total if count is None else start + count
    if stop > total or start >= total:
        raise DataError(f"{path} holds {total} frames, requested [{start}, {stop})")
    out = []
    with open(path, "rb") as fh:
        fh.seek(start * frame_bytes)
        for _ in range(stop - start):
            buf = np.frombuffer(fh.read(frame_bytes), dtype=np.uint8)
            y = buf[:width * height].reshape(height, width)
            c = width * height // 4
            u = buf[width * height:width * height + c].reshape(height // 2, width // 2)
            v = buf[width * height + c:].reshape(height // 2, width // 2)
            u = u.repeat(2, axis=0).repeat(2, axis=1)
            v = v.repeat(2, axis=0).repeat(2, axis=1)
            out.append(yuv_to_rgb(y, u, v))
    return np.stack(out)


def save_frame_sequence(sample: VideoSample, directory) -> list[Path]:
    """Write one ``%06d.png`` file per frame."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(to_uint8(sample.frames)):
        p = directory / f"{i:06d}.png"
        Image.fromarray(frame, mode="RGB").save(p)
        paths.append(p)
    return paths


def draw_crop(height: int, width: int, size: int, rng: np.random.Generator) -> CropSpec:
    if size > height or size > width:
        raise DataError(f"crop size {size} exceeds frame {height}x{width}")
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    return CropSpec(top, left, size)


def random_crop(sample: VideoSample, size: int, rng_seed) -> VideoSample:
    """Crop every frame of ``sample`` at one shared, seeded position.

    ``rng_seed`` may be an int or an existing ``numpy.random.Generator``.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    spec = draw_crop(sample.height, sample.width, size, rng)
    spec.validate(sample.height, sample.width)
    return VideoSample(spec.apply(sample.frames).copy(), sample.frame_rate, sample.source_id)


def smooth_texture(seed: int, height: int, width: int, sigma: float = 2.0) -> np.ndarray:
    """Periodic smooth RGB texture in [0, 1] (Gaussian-filtered white noise)."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((height, width, 3))
    tex = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="wrap")
    tex -= tex.min()
    tex /= max(tex.max(), 1e-12)
    return tex.astype(np.float32)


def synth_sequence(seed: int, T: int, H: int, W: int, motion=(1, 0),
                   sigma: float = 2.0) -> VideoSample:
    """Translate a seeded texture by ``t * motion`` with wrap-around.

    For integer motion, frame ``t`` satisfies
    ``frame_t[y, x] = frame_0[(y - t*dy) % H, (x - t*dx) % W]`` so the exact
    optical flow is ``(dx, dy)`` at every pixel.
    """
    dx, dy = motion
    if T < 1:
        raise DataError("empty sample requested")
    if abs(dx) * (T - 1) >= W or abs(dy) * (T - 1) >= H:
        raise DataError(f"motion {motion} too large for {T} frames on {H}x{W}")
    base = smooth_texture(seed, H, W, sigma)
    if float(dx).is_integer() and float(dy).is_integer():
        frames = [np.roll(base, (int(t * dy), int(t * dx)), axis=(0, 1)) for t in range(T)]
    else:
        frames = [ndimage.shift(base, (t * dy, t * dx, 0), order=3, mode="grid-wrap")
                  for t in range(T)]
    frames = np.clip(np.stack(frames), 0.0, 1.0)
    return VideoSample(frames, source_id=f"synth-{seed}")


@dataclass
class SyntheticClipSource:
    """Endless stream of random translating clips for desk-scale training.

    Each draw picks a fresh texture seed and an integer motion with components
    in ``[-max_motion, max_motion]``.
    """

    seed: int = 0
    num_frames: int = 7
    canvas: int = 48
    max_motion: int = 2
    sigma: float = 2.0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def sample(self) -> VideoSample:
        tex_seed = int(self.rng.integers(0, 2**31 - 1))
        dx, dy = (int(v) for v in self.rng.integers(-self.max_motion, self.max_motion + 1, size=2))
        return synth_sequence(tex_seed, self.num_frames, self.canvas, self.canvas,
                              (dx, dy), sigma=self.sigma)

    def __iter__(self) -> Iterator[VideoSample]:
        while True:
            yield self.sample()


@dataclass
class DirectoryClipSource:
    """Random ``num_frames`` windows from sub-directories of frame images."""

    root: str
    num_frames: int = 7
    seed: int = 0
    clips: Sequence[Path] = field(init=False, repr=False)
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        root = Path(self.root)
        if not root.is_dir():
            raise DataError(f"missing path: {root}")
        subdirs = sorted(p for p in root.iterdir() if p.is_dir())
        candidates = subdirs or [root]
        self.clips = [d for d in candidates if len(_list_frame_files(d)) >= self.num_frames]
        if not self.clips:
            raise DataError(f"no clip with >= {self.num_frames} frames under {root}")
        self.rng = np.random.default_rng(self.seed)

    def sample(self) -> VideoSample:
        clip = self.clips[int(self.rng.integers(len(self.clips)))]
        n = len(_list_frame_files(clip))
        start = int(self.rng.integers(0, n - self.num_frames + 1))
        return load_frame_sequence(clip, start, self.num_frames)

    def __iter__(self) -> Iterator[VideoSample]:
        while True:
            yield self.sample()
