"""Figures written next to JSON reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .audio import AudioBuffer, FrameParams, stft  # noqa: E402


def _save(fig, path) -> str:
    path = os.fspath(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight")
    plt.close(fig)
    return path


def _spec_db(x: np.ndarray, fs: int) -> np.ndarray:
    spec = stft(AudioBuffer(x, fs), FrameParams())
    return 20 * np.log10(np.maximum(spec.magnitude(), 1e-12)).T


def plot_denoise(noisy: AudioBuffer, denoised: AudioBuffer, path, channel: int = 0,
                 title: str = "") -> str:
    """Waveform and spectrogram of one channel before and after denoising."""
    fs = noisy.sample_rate
    fig, axes = plt.subplots(2, 2, figsize=(11, 6), sharex="col")
    for col, (name, buf) in enumerate((("input", noisy), ("denoised", denoised))):
        x = buf.samples[channel]
        t = np.arange(x.size) / fs
        axes[0, col].plot(t, x, lw=0.5)
        axes[0, col].set_title(f"{name} {title}".strip())
        axes[0, col].set_ylabel("amplitude")
        db = _spec_db(x, fs)
        axes[1, col].imshow(db, origin="lower", aspect="auto", cmap="magma",
                            extent=(0, x.size / fs, 0, fs / 2), vmin=db.max() - 90, vmax=db.max())
        axes[1, col].set_xlabel("time (s)")
        axes[1, col].set_ylabel("frequency (Hz)")
    return _save(fig, path)


def plot_psnr(report, path) -> str:
    """Measured PSNR per denoiser next to the published reference values."""
    entries = report.entries
    names = [e.name for e in entries]
    measured = [np.nan if e.psnr_db is None or not np.isfinite(e.psnr_db) else e.psnr_db for e in entries]
    ref = [e.paper_reference_db for e in entries]
    x = np.arange(len(entries))
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.bar(x - 0.2, measured, 0.4, label="measured")
    ax.bar(x + 0.2, ref, 0.4, label="published reference", alpha=0.6)
    if np.isfinite(report.noisy_psnr_db):
        ax.axhline(report.noisy_psnr_db, color="k", ls="--", lw=1, label="noisy input")
    ax.set_xticks(x, names, rotation=15)
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    return _save(fig, path)


def plot_sources(sources: np.ndarray, sample_rate: int, path) -> str:
    """One row per separated source."""
    n = sources.shape[0]
    fig, axes = plt.subplots(n, 1, figsize=(10, 2.2 * n), sharex=True, squeeze=False)
    t = np.arange(sources.shape[1]) / sample_rate
    for k in range(n):
        axes[k, 0].plot(t, sources[k], lw=0.5)
        axes[k, 0].set_ylabel(f"source {k}")
    axes[-1, 0].set_xlabel("time (s)")
    return _save(fig, path)


def plot_azimuths(report, path) -> str:
    """Per-block source estimates on a polar plot; far-field blocks sit on the rim."""
    az, rad, far = [], [], []
    for b in report.blocks:
        if b.estimate is None:
            continue
        az.append(np.radians(b.estimate.azimuth))
        far.append(b.estimate.distance is None)
        rad.append(b.estimate.distance if b.estimate.distance is not None else np.nan)
    fig = plt.figure(figsize=(5, 5))
    ax = fig.add_subplot(projection="polar")
    if az:
        az, rad, far = np.array(az), np.array(rad), np.array(far)
        rim = np.nanmax(rad) * 1.1 if np.any(~far) else 1.0
        ax.scatter(az[~far], rad[~far], s=14, label="finite distance")
        if np.any(far):
            ax.scatter(az[far], np.full(far.sum(), rim), marker="x", s=18, label="far field")
        ax.legend(loc="lower left", fontsize=8)
    ax.set_title("source estimates (m)")
    return _save(fig, path)


def plot_timings(report, path) -> str:
    """Stacked per-stage processing time for each block against the block budget."""
    stages = sorted({s for b in report.blocks for s in b.timings_ms})
    idx = np.arange(len(report.blocks))
    fig, ax = plt.subplots(figsize=(9, 3.5))
    bottom = np.zeros(len(idx))
    for s in stages:
        vals = np.array([b.timings_ms.get(s, 0.0) for b in report.blocks])
        ax.bar(idx, vals, bottom=bottom, label=s, width=1.0)
        bottom += vals
    ax.axhline(report.config.block_s * 1e3, color="r", ls="--", lw=1, label="block length")
    ax.set_xlabel("block")
    ax.set_ylabel("ms")
    ax.legend(fontsize=8, ncol=3)
    return _save(fig, path)
