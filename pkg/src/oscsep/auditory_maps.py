"""Cochleotopic auditory maps: AM-spectrum (CAM) and spectral (CSM) grids.

Both maps cut the 256 filterbank channels into non-overlapping Hamming
frames, take a zero-padded 512-point DFT per channel, sharpen the
spectrum by frequency-axis reassignment, log-compress, normalize to
[0, 1] over the whole utterance, and max-pool the 256 frequency bins
down to 50.  The CAM runs on AM envelopes (high channels demodulated,
low channels raw), the CSM on the filterbank outputs directly.

The resulting per-frame 256 x 50 grids are the external input p(i, j)
of the oscillator network.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .audio_io import AudioSignal, WORKING_RATE
from . import filterbank
from .filterbank import ChannelSignals, FilterbankSpec, NUM_CHANNELS

CAM = "cam"
CSM = "csm"

NUM_BINS = 50
FFT_SIZE = 512
KEPT_BINS = 256

# Channels 1..29 (1-based) resolve harmonics and are used raw; demodulation
# starts at channel 30 (about 400 Hz).
FIRST_ENVELOPE_CHANNEL = 30
ENVELOPE_CUTOFF_HZ = 400.0
LOG_FLOOR = 1e-6

_ENV_B, _ENV_A = sps.butter(4, ENVELOPE_CUTOFF_HZ, fs=WORKING_RATE)


@dataclass(frozen=True)
class FrameSpec:
    """Framing for map construction: non-overlapping Hamming windows."""

    window_ms: int = 32

    def __post_init__(self):
        if self.window_ms not in (4, 32):
            raise ValueError(f"window_ms must be 4 or 32, got {self.window_ms}")

    @property
    def window_samples(self) -> int:
        return self.window_ms * (WORKING_RATE // 1000)


@dataclass
class MapFrame:
    """One time frame of a CAM or CSM: 256 channels x 50 bins in [0, 1]."""

    values: np.ndarray
    frame_index: int
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (NUM_CHANNELS, NUM_BINS):
            raise ValueError(
                f"map frame must be ({NUM_CHANNELS}, {NUM_BINS}), got {self.values.shape}"
            )
        if self.kind not in (CAM, CSM):
            raise ValueError(f"kind must be '{CAM}' or '{CSM}'")


def envelope(channel: np.ndarray, channel_index: int) -> np.ndarray:
    """AM-demodulate one filterbank channel.

    channel_index is 1-based.  Channels below FIRST_ENVELOPE_CHANNEL pass
    through unchanged; the rest are half-wave rectified and low-passed at
    400 Hz (4th-order Butterworth).
    """
    if not 1 <= channel_index <= NUM_CHANNELS:
        raise ValueError(f"channel_index must be in [1, {NUM_CHANNELS}]")
    x = np.asarray(channel, dtype=np.float64)
    if channel_index < FIRST_ENVELOPE_CHANNEL:
        return x
    return sps.lfilter(_ENV_B, _ENV_A, np.maximum(x, 0.0))


def _frame_segments(channels: np.ndarray, window: int) -> np.ndarray:
    """Cut (256, n) channel rows into (frames, 256, window) segments."""
    n = channels.shape[1]
    num_frames = n // window
    if num_frames == 0:
        return np.zeros((0, channels.shape[0], window))
    trimmed = channels[:, : num_frames * window]
    return trimmed.reshape(channels.shape[0], num_frames, window).transpose(1, 0, 2)


def frame_spectra(channels: np.ndarray, spec: FrameSpec) -> np.ndarray:
    """Per-frame Hamming-windowed spectra, shape (frames, 256, 256).

    Frames are non-overlapping windows of spec.window_samples; the DFT is
    zero-padded to 512 points and the 256 lowest non-negative-frequency
    bins are kept.  Remainder samples past the last full window are
    dropped; an input shorter than one window yields zero frames.
    """
    channels = np.asarray(channels, dtype=np.float64)
    w = spec.window_samples
    segments = _frame_segments(channels, w)
    if segments.shape[0] == 0:
        warnings.warn(
            f"input of {channels.shape[1]} samples is shorter than one "
            f"{w}-sample window; no frames produced"
        )
        return np.zeros((0, channels.shape[0], KEPT_BINS), dtype=np.complex128)
    window = np.hamming(w)
    return np.fft.rfft(segments * window, n=FFT_SIZE, axis=-1)[..., :KEPT_BINS]


def reassign(spectra: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Frequency-axis reassignment of framed spectra.

    Each bin's energy moves to the bin nearest its instantaneous-frequency
    estimate, obtained from the auxiliary transform taken with the
    derivative of the Hamming window.  Bins whose magnitude is below
    1e-12 of the frame maximum stay in place.  Total energy is conserved.

    spectra: (frames, channels, 256) from frame_spectra.
    segments: matching (frames, channels, window) raw signal frames.
    """
    spectra = np.asarray(spectra)
    segments = np.asarray(segments, dtype=np.float64)
    frames, n_ch, n_bins = spectra.shape
    if frames == 0:
        return np.zeros((0, n_ch, n_bins))
    w = segments.shape[-1]
    n = np.arange(w)
    d_window = 0.46 * (2.0 * np.pi / (w - 1)) * np.sin(2.0 * np.pi * n / (w - 1))
    aux = np.fft.rfft(segments * d_window, n=FFT_SIZE, axis=-1)[..., :n_bins]

    energy = np.abs(spectra) ** 2
    bins = np.arange(n_bins, dtype=np.float64)
    # Bin-unit frequency correction: omega_hat = omega_k - Im(aux / X).
    with np.errstate(divide="ignore", invalid="ignore"):
        shift = np.imag(aux / spectra) * (FFT_SIZE / (2.0 * np.pi))
    target = np.rint(bins[None, None, :] - shift)
    frame_max = np.sqrt(energy).max(axis=(1, 2), keepdims=True)
    keep = ~np.isfinite(target) | (np.sqrt(energy) < 1e-12 * frame_max)
    target = np.where(keep, bins[None, None, :], target)
    target = np.clip(target, 0, n_bins - 1).astype(np.intp)

    out = np.zeros_like(energy)
    frame_idx = np.broadcast_to(np.arange(frames)[:, None, None], energy.shape)
    chan_idx = np.broadcast_to(np.arange(n_ch)[None, :, None], energy.shape)
    np.add.at(out, (frame_idx.ravel(), chan_idx.ravel(), target.ravel()), energy.ravel())
    return np.sqrt(out)


def log_and_normalize(grids: np.ndarray) -> np.ndarray:
    """Log-compress magnitudes and rescale to [0, 1] over the whole stack.

    The floor bounds dynamic range; the affine rescale uses the global
    min/max over all frames so inter-frame energy ordering survives.
    An all-zero stack maps to all zeros.
    """
    logged = np.log(LOG_FLOOR + np.asarray(grids, dtype=np.float64))
    lo = logged.min()
    hi = logged.max()
    if hi <= lo:
        return np.zeros_like(logged)
    return (logged - lo) / (hi - lo)


def downsample_bins(grid: np.ndarray) -> np.ndarray:
    """Max-pool the last axis from 256 bins to 50.

    Pool boundaries are k * 256 // 50, so share sizes differ by at most
    one bin; max pooling keeps sparse spectral rays visible.
    """
    grid = np.asarray(grid)
    if grid.shape[-1] != KEPT_BINS:
        raise ValueError(f"expected {KEPT_BINS} bins on the last axis, got {grid.shape[-1]}")
    edges = [(k * KEPT_BINS) // NUM_BINS for k in range(NUM_BINS + 1)]
    pooled = [grid[..., edges[k] : edges[k + 1]].max(axis=-1) for k in range(NUM_BINS)]
    return np.stack(pooled, axis=-1)


def _build_map(channels: ChannelSignals, fspec: FrameSpec, kind: str) -> list[MapFrame]:
    data = channels.channels
    if kind == CAM:
        data = np.stack([envelope(data[i], i + 1) for i in range(data.shape[0])])
    segments = _frame_segments(data, fspec.window_samples)
    if segments.shape[0] == 0:
        warnings.warn("input shorter than one window; empty map")
        return []
    window = np.hamming(fspec.window_samples)
    spectra = np.fft.rfft(segments * window, n=FFT_SIZE, axis=-1)[..., :KEPT_BINS]
    grids = reassign(spectra, segments)
    grids = log_and_normalize(grids)
    grids = downsample_bins(grids)
    return [MapFrame(values=grids[f], frame_index=f, kind=kind) for f in range(grids.shape[0])]


def build_cam_from_channels(channels: ChannelSignals, fspec: FrameSpec) -> list[MapFrame]:
    return _build_map(channels, fspec, CAM)


def build_csm_from_channels(channels: ChannelSignals, fspec: FrameSpec) -> list[MapFrame]:
    return _build_map(channels, fspec, CSM)


def build_cam(
    sig: AudioSignal,
    fspec: FrameSpec = FrameSpec(),
    bank_spec: FilterbankSpec = FilterbankSpec(),
) -> list[MapFrame]:
    """Cochleotopic/AMtopic map: one frame per non-overlapping window."""
    return build_cam_from_channels(filterbank.analyze(sig, bank_spec), fspec)


def build_csm(
    sig: AudioSignal,
    fspec: FrameSpec = FrameSpec(),
    bank_spec: FilterbankSpec = FilterbankSpec(),
) -> list[MapFrame]:
    """Cochleotopic/spectrotopic map: as build_cam but without demodulation."""
    return build_csm_from_channels(filterbank.analyze(sig, bank_spec), fspec)


def write_pgm(values: np.ndarray, path) -> None:
    """8-bit binary PGM of a [0, 1] grid (rows = channels)."""
    img = np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes(order="C"))


def dump_frames(frames: list[MapFrame], out_dir, prefix: str | None = None) -> list[str]:
    """Write one PGM and one CSV per frame; returns the paths written."""
    import os

    paths = []
    for frame in frames:
        stem = f"{prefix or frame.kind}_frame_{frame.frame_index:04d}"
        pgm_path = os.path.join(str(out_dir), stem + ".pgm")
        csv_path = os.path.join(str(out_dir), stem + ".csv")
        write_pgm(frame.values, pgm_path)
        np.savetxt(csv_path, frame.values, fmt="%.9g", delimiter=",")
        paths.extend([pgm_path, csv_path])
    return paths
