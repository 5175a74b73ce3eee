"""WAV file I/O and resampling to the pipeline's 8 kHz working rate.

All downstream processing assumes mono float samples in [-1, 1] at
exactly 8000 Hz; this module is the only place sample rates are touched.
"""

from __future__ import annotations

import math
import wave
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

WORKING_RATE = 8000

# Anti-alias design: linear-phase FIR, passband edge 3.6 kHz, cutoff 3.8 kHz,
# stopband attenuation 80 dB (spec floor is 60 dB).
_AA_CUTOFF_HZ = 3800.0
_AA_TRANSITION_HZ = 400.0
_AA_ATTEN_DB = 80.0


class AudioIOError(Exception):
    """Unreadable, unwritable or malformed audio file."""


@dataclass
class AudioSignal:
    """A sampled mono waveform.

    samples are dimensionless amplitudes, nominally in [-1, 1]; they must
    be finite. sample_rate is in Hz and must be positive.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("AudioSignal samples must be one-dimensional")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioSignal samples must be finite")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


def read_wav(path) -> AudioSignal:
    """Read a PCM WAV file as a normalized mono AudioSignal.

    Stereo (or any multi-channel) input is averaged down to mono.
    Integer samples are normalized by the type's full scale, so a
    16-bit value v maps to v / 32768.
    """
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            rate = wf.getframerate()
            n_frames = wf.getnframes()
            raw = wf.readframes(n_frames)
    except FileNotFoundError:
        raise AudioIOError(f"no such file: {path}") from None
    except (wave.Error, EOFError) as exc:
        raise AudioIOError(f"unsupported or corrupt WAV file {path}: {exc}") from exc

    if n_frames == 0:
        raise AudioIOError(f"zero-length audio: {path}")

    if sampwidth == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif sampwidth == 4:
        data = np.frombuffer(raw, dtype="<i4").astype(np.float64) / 2147483648.0
    elif sampwidth == 1:
        data = (np.frombuffer(raw, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    else:
        raise AudioIOError(f"unsupported sample width {sampwidth} bytes: {path}")

    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    return AudioSignal(samples=data, sample_rate=rate)


def write_wav(sig: AudioSignal, path) -> None:
    """Write a 16-bit PCM WAV file.

    Samples outside [-1, 1] are clipped; a UserWarning reporting the
    number of clipped samples is emitted when that happens.
    """
    x = sig.samples
    n_clipped = int(np.count_nonzero((x > 1.0) | (x < -1.0)))
    if n_clipped:
        warnings.warn(f"{n_clipped} samples clipped to [-1, 1] while writing {path}")
        x = np.clip(x, -1.0, 1.0)
    quantized = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    try:
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(sig.sample_rate)
            wf.writeframes(quantized.tobytes())
    except OSError as exc:
        raise AudioIOError(f"cannot write {path}: {exc}") from exc


def _design_antialias_fir(in_rate: int, up: int) -> np.ndarray:
    """Kaiser-window low-pass for polyphase resampling at rate in_rate * up."""
    inter_rate = in_rate * up
    width = 2.0 * _AA_TRANSITION_HZ / inter_rate
    numtaps, beta = sps.kaiserord(_AA_ATTEN_DB, width)
    numtaps |= 1  # odd length keeps the filter exactly linear-phase
    return sps.firwin(numtaps, _AA_CUTOFF_HZ, window=("kaiser", beta), fs=inter_rate)


def resample_to_8k(sig: AudioSignal) -> AudioSignal:
    """Resample to exactly 8000 Hz with anti-alias low-pass filtering.

    Rates below 8000 Hz are refused: the pipeline never upsamples.
    An 8000 Hz input is returned unchanged.
    """
    if sig.sample_rate < WORKING_RATE:
        raise ValueError(
            f"input rate {sig.sample_rate} Hz is below the working rate "
            f"{WORKING_RATE} Hz; upsampling is not supported"
        )
    if sig.sample_rate == WORKING_RATE:
        return sig
    g = math.gcd(WORKING_RATE, sig.sample_rate)
    up = WORKING_RATE // g
    down = sig.sample_rate // g
    taps = _design_antialias_fir(sig.sample_rate, up)
    out = sps.resample_poly(sig.samples, up, down, window=taps)
    return AudioSignal(samples=out, sample_rate=WORKING_RATE)
