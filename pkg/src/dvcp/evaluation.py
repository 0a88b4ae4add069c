"""Quality and artifact metrics: PSNR, FVD, FVD BD-rate, overlap and checkerboard analysis."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy.interpolate import PchipInterpolator

from .data import VideoSample

PSNR_CAP = 99.0
RD_CSV_COLUMNS = ("sequence", "omega", "bpp", "psnr", "fvd")


# ---------------------------------------------------------------- PSNR

def _to_numpy(x) -> np.ndarray:
    if isinstance(x, VideoSample):
        return x.frames.astype(np.float64)
    if torch.is_tensor(x):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def frame_psnr(a, b) -> float:
    a, b = _to_numpy(a), _to_numpy(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def psnr(a, b) -> float:
    """PSNR in dB against peak 1.0.

    4-D inputs (T, H, W, C) and VideoSamples are sequences: the result is the
    mean of per-frame values. Identical inputs give ``inf``.
    """
    a, b = _to_numpy(a), _to_numpy(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 4:
        values = [frame_psnr(x, y) for x, y in zip(a, b)]
        return math.inf if all(math.isinf(v) for v in values) else float(
            np.mean([min(v, PSNR_CAP) if math.isinf(v) else v for v in values]))
    return frame_psnr(a, b)


def capped(value: float) -> float:
    return min(value, PSNR_CAP)


# ---------------------------------------------------------------- FVD

@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("covariance does not match mean dimension")
        if not np.allclose(self.cov, self.cov.T, atol=1e-8):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -1e-8:
            raise ValueError("covariance must be positive semi-definite")


def gaussian_stats(embeddings: np.ndarray) -> GaussianStats:
    """Mean and covariance of row vectors, with diagonal loading when rank-deficient."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need a non-empty (n, dim) embedding matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite embeddings")
    n, dim = x.shape
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False).reshape(dim, dim) if n > 1 else np.zeros((dim, dim))
    cov = 0.5 * (cov + cov.T)
    if n < dim + 1:
        load = 1e-6 * np.trace(cov) / dim
        cov = cov + load * np.eye(dim)
    return GaussianStats(mean, cov)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(s1: GaussianStats, s2: GaussianStats) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The trace of the product root is taken as Tr sqrt(A S2 A) with A = sqrt(S1),
    which is symmetric PSD and has the same eigenvalues as S1 S2.
    """
    diff = s1.mean - s2.mean
    root1 = _psd_sqrt(s1.cov)
    cross = _psd_sqrt(root1 @ s2.cov @ root1)
    return float(diff @ diff + np.trace(s1.cov) + np.trace(s2.cov) - 2.0 * np.trace(cross))


class RandomVideoEmbedder(nn.Module):
    """Fixed-seed random spatiotemporal convnet, globally pooled to a vector."""

    def __init__(self, seed: int = 2021, channels: int = 32, dim: int = 64):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.net = nn.Sequential(
            nn.Conv3d(3, channels, (3, 5, 5), stride=(1, 2, 2), padding=(1, 2, 2)), nn.ReLU(),
            nn.Conv3d(channels, channels, 3, stride=(1, 2, 2), padding=1), nn.ReLU(),
            nn.Conv3d(channels, dim, 3, stride=2, padding=1),
        )
        with torch.no_grad():
            for m in self.net:
                if isinstance(m, nn.Conv3d):
                    fan_in = m.weight[0].numel()
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                    m.bias.copy_(0.1 * torch.randn(m.bias.shape, generator=gen))
        self.requires_grad_(False)
        self.eval()
        self.dim = dim

    @torch.no_grad()
    def forward(self, clip) -> np.ndarray:
        frames = clip.frames if isinstance(clip, VideoSample) else np.asarray(clip)
        x = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))
        x = x.permute(3, 0, 1, 2).unsqueeze(0)
        return self.net(x).mean(dim=(2, 3, 4))[0].double().numpy()


def split_clips(sample: VideoSample, clip_len: int = 10) -> list[VideoSample]:
    """Non-overlapping clips; a shorter sequence is returned whole."""
    if sample.num_frames <= clip_len:
        return [sample]
    return [sample.slice(i, i + clip_len)
            for i in range(0, sample.num_frames - clip_len + 1, clip_len)]


def embed_set(clips: Sequence, embedder) -> np.ndarray:
    if len(clips) == 0:
        raise ValueError("empty clip set")
    emb = np.stack([np.asarray(embedder(c), dtype=np.float64) for c in clips])
    if not np.all(np.isfinite(emb)):
        raise ValueError("non-finite embeddings")
    return emb


def fvd(real: Sequence, generated: Sequence, embedder=None) -> float:
    embedder = embedder or RandomVideoEmbedder()
    s_real = gaussian_stats(embed_set(real, embedder))
    s_gen = gaussian_stats(embed_set(generated, embedder))
    return frechet_distance(s_real, s_gen)


# ---------------------------------------------------------------- RD curves / BD-rate

@dataclass
class RDPoint:
    bpp: float
    psnr: float
    fvd: float
    omega: float
    label: str = ""
    bpp_no_header: Optional[float] = None

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")


@dataclass
class RDCurve:
    points: list
    label: str = ""

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)
        if len(self.points) < 2:
            raise ValueError("BD-rate needs >=2 points")
        rates = [p.bpp for p in self.points]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError(f"RD curve bpp values must be strictly increasing, got {rates}")
        if not all(math.isfinite(p.fvd) for p in self.points):
            raise ValueError("RD curve quality values must be finite")

    @property
    def bpp(self) -> np.ndarray:
        return np.array([p.bpp for p in self.points])

    @property
    def fvd(self) -> np.ndarray:
        return np.array([p.fvd for p in self.points])


def _monotone_log_rate(curve: RDCurve):
    """(fvd, log10 bpp) sorted by FVD, dropping points that break the
    expected decrease of rate with FVD."""
    order = np.argsort(curve.fvd, kind="stable")
    q = curve.fvd[order]
    r = np.log10(curve.bpp[order])
    keep_q, keep_r = [q[0]], [r[0]]
    dropped = 0
    for qi, ri in zip(q[1:], r[1:]):
        if qi > keep_q[-1] and ri < keep_r[-1]:
            keep_q.append(qi)
            keep_r.append(ri)
        else:
            dropped += 1
    if dropped:
        warnings.warn(f"curve {curve.label!r}: {dropped} non-monotone point(s) excluded "
                      "from BD-rate integration")
    if len(keep_q) < 2:
        raise ValueError(f"curve {curve.label!r} has fewer than 2 monotone points")
    return np.array(keep_q), np.array(keep_r)


def fvd_bd_rate(anchor: RDCurve, test: RDCurve) -> float:
    """Average bitrate change (percent) of ``test`` against ``anchor`` at equal FVD.

    log10(bpp) is interpolated as a monotone piecewise cubic in FVD for each
    curve and the difference is averaged over the shared FVD interval.
    Negative values mean the test curve needs fewer bits.
    """
    qa, ra = _monotone_log_rate(anchor)
    qt, rt = _monotone_log_rate(test)
    lo, hi = max(qa[0], qt[0]), min(qa[-1], qt[-1])
    if not hi > lo:
        raise ValueError("curves do not overlap in FVD")
    fa, ft = PchipInterpolator(qa, ra), PchipInterpolator(qt, rt)
    delta = (ft.integrate(lo, hi) - fa.integrate(lo, hi)) / (hi - lo)
    return float(100.0 * (10.0 ** delta - 1.0))


# ---------------------------------------------------------------- checkerboard analysis

@dataclass
class OverlapMap:
    kernel: int
    stride: int
    counts: np.ndarray
    even: bool

    @property
    def counts_2d(self) -> np.ndarray:
        return np.outer(self.counts, self.counts)

    def pattern(self, n: Optional[int] = None) -> str:
        vals = self.counts if n is None else self.counts[:n]
        return ",".join(str(int(v)) for v in vals)


def overlap_map(kernel: int, stride: int, out_size: int = 16) -> OverlapMap:
    """Count kernel taps landing on each output pixel of a 1-D transposed conv.

    Every input position ``i`` writes to outputs ``i*stride .. i*stride+kernel-1``.
    The returned window starts at output index ``kernel`` and lies entirely in
    the interior, away from the partially covered borders. The separable 2-D
    counts are the outer product (``counts_2d``).
    """
    if kernel < 1 or stride < 1 or out_size < 1:
        raise ValueError("kernel, stride and out_size must be >= 1")
    n_in = (kernel + out_size) // stride + 2 * kernel + 2
    full = np.zeros((n_in - 1) * stride + kernel, dtype=np.int64)
    for i in range(n_in):
        for k in range(kernel):
            full[i * stride + k] += 1
    window = full[kernel:kernel + out_size]
    return OverlapMap(kernel, stride, window, bool(np.all(window == window[0])))


def checkerboard_energy(frame) -> float:
    """Share of AC spectral energy in the highest vertical or horizontal frequency bins.

    Accepts (H, W), (H, W, C) or torch (C, H, W) / (1, C, H, W) inputs; channels
    are pooled.
    """
    if torch.is_tensor(frame):
        x = frame.detach().cpu().double()
        if x.dim() == 4:
            x = x[0]
        if x.dim() == 3:
            x = x.permute(1, 2, 0)
        x = x.numpy()
    else:
        x = np.asarray(frame, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    h, w = x.shape[:2]
    if h < 4 or w < 4:
        raise ValueError(f"checkerboard_energy needs at least 4x4, got {h}x{w}")
    x = x - x.mean(axis=(0, 1), keepdims=True)
    power = (np.abs(np.fft.fft2(x, axes=(0, 1))) ** 2).sum(axis=2)
    total = power.sum()
    if total <= 1e-20 * h * w:
        return 0.0
    fy, fx = np.abs(np.fft.fftfreq(h)), np.abs(np.fft.fftfreq(w))
    band = (fy[:, None] == fy.max()) | (fx[None, :] == fx.max())
    return float(power[band].sum() / total)


# ---------------------------------------------------------------- reports

def write_rd_csv(curves: Sequence[RDCurve], path) -> Path:
    rows = [(c.label, p.omega, p.bpp, p.psnr, p.fvd) for c in curves for p in c.points]
    return write_rd_rows(rows, path)


def write_rd_rows(rows, path) -> Path:
    """Rows of (sequence, omega, bpp, psnr, fvd), written sorted with fixed formatting."""
    path = Path(path)
    rows = sorted(((r[0], r[1], r[2], capped(r[3]), r[4]) for r in rows),
                  key=lambda r: (r[0], r[1], r[2]))
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(RD_CSV_COLUMNS)
        for seq, omega, bpp, ps, fv in rows:
            wr.writerow([seq, f"{omega:.10g}", f"{bpp:.6f}", f"{ps:.4f}", f"{fv:.4f}"])
    return path


def read_rd_csv(path) -> dict[str, RDCurve]:
    groups: dict[str, list[RDPoint]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(RD_CSV_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            groups.setdefault(row["sequence"], []).append(RDPoint(
                bpp=float(row["bpp"]), psnr=float(row["psnr"]), fvd=float(row["fvd"]),
                omega=float(row["omega"]), label=row["sequence"]))
    return {k: RDCurve(v, label=k) for k, v in groups.items()}


def plot_rd_curves(curves: Sequence[RDCurve]):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for c in curves:
        ax.plot(c.bpp, c.fvd, marker="o", label=c.label)
    ax.set_xlabel("bitrate (bpp)")
    ax.set_ylabel("FVD")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return fig


def emit_report(curves: Sequence[RDCurve], metrics: Optional[dict], out_dir) -> dict:
    """Write rd_points.csv, metrics.csv and fvd_vs_bpp.png under ``out_dir``."""
    if not curves:
        raise ValueError("emit_report needs at least one curve")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write report to {out}: {e}") from e
    paths = {"rd_csv": write_rd_csv(curves, out / "rd_points.csv")}
    if metrics:
        mp = out / "metrics.csv"
        with open(mp, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["key", "value"])
            for k in sorted(metrics):
                v = metrics[k]
                wr.writerow([k, f"{v:.10g}" if isinstance(v, float) else v])
        paths["metrics_csv"] = mp
    import matplotlib.pyplot as plt

    fig = plot_rd_curves(curves)
    paths["plot"] = out / "fvd_vs_bpp.png"
    fig.savefig(paths["plot"], dpi=100, metadata={"Software": None})
    plt.close(fig)
    return paths
