"""Mask construction from phase groupings, masked resynthesis, metrics.

Per-frame phase groups are stitched into sources by greedy Jaccard
matching of their channel sets across consecutive frames.  Each source's
binary mask selects (channel, frame) cells; masks are expanded to sample
rate with short complementary cross-fades, applied to the analysis
channels and resynthesized through the synthesis filterbank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import AudioSignal
from . import filterbank
from .filterbank import ChannelSignals, NUM_CHANNELS
from .oscillator_net import PhaseGrouping

CROSSFADE_MS = 2.0
SNR_CAP_DB = 100.0


@dataclass
class SourceMask:
    """Binary gain over (channel, frame) for one source."""

    values: np.ndarray  # (NUM_CHANNELS, num_frames) of {0, 1}
    source_id: int

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[0] != NUM_CHANNELS:
            raise ValueError(f"mask must be ({NUM_CHANNELS}, frames), got {self.values.shape}")
        if not np.all((self.values == 0) | (self.values == 1)):
            raise ValueError("mask values must be binary")
        self.values = self.values.astype(np.uint8)

    @property
    def num_frames(self) -> int:
        return self.values.shape[1]


def _jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def groups_to_masks(groupings: list[PhaseGrouping]) -> list[SourceMask]:
    """Stitch per-frame phase groups into per-source binary masks.

    Groups in consecutive frames are matched greedily by largest Jaccard
    overlap of their channel sets; matched chains continue a source,
    unmatched groups start new ones.  The silent group never contributes
    to any mask.  Ties break toward lower source and group ids, so the
    result is independent of per-frame group numbering.
    """
    num_frames = len(groupings)
    source_masks: list[np.ndarray] = []
    prev_channels: dict[int, set] = {}  # source id -> channel set in previous frame

    for f, grouping in enumerate(groupings):
        group_sets = []
        for gid in range(grouping.num_groups):
            if grouping.silent_group is not None and gid == grouping.silent_group:
                continue
            members = set(int(c) for c in grouping.channels_of(gid))
            if members:
                group_sets.append((gid, members))

        candidates = []
        for sid, prev in prev_channels.items():
            for gid, members in group_sets:
                j = _jaccard(prev, members)
                if j > 0.0:
                    candidates.append((-j, sid, gid))
        candidates.sort()

        assigned_sources = set()
        assigned_groups = {}
        for neg_j, sid, gid in candidates:
            if sid in assigned_sources or gid in assigned_groups:
                continue
            assigned_sources.add(sid)
            assigned_groups[gid] = sid

        next_channels: dict[int, set] = {}
        for gid, members in group_sets:
            sid = assigned_groups.get(gid)
            if sid is None:
                sid = len(source_masks)
                source_masks.append(np.zeros((NUM_CHANNELS, num_frames), np.uint8))
            for c in members:
                source_masks[sid][c, f] = 1
            next_channels[sid] = members
        prev_channels = next_channels

    return [SourceMask(values=m, source_id=i) for i, m in enumerate(source_masks)]


def _sample_gains(mask_row: np.ndarray, frame_len: int, total_samples: int,
                  sample_rate: int) -> np.ndarray:
    """Per-sample gain for one channel: frame steps smoothed at transitions.

    The step function is convolved with a short raised-cosine kernel, so
    complementary masks produce gains that sum exactly to one.
    """
    gains = np.repeat(mask_row.astype(np.float64), frame_len)[:total_samples]
    if len(gains) < total_samples:
        pad_value = gains[-1] if len(gains) else 0.0
        gains = np.concatenate([gains, np.full(total_samples - len(gains), pad_value)])
    width = int(round(CROSSFADE_MS * 1e-3 * sample_rate))
    if width >= 2:
        kernel = np.hanning(width + 2)[1:-1]
        kernel = kernel / kernel.sum()
        padded = np.concatenate(
            [np.full(width, gains[0]), gains, np.full(width, gains[-1])]
        )
        gains = np.convolve(padded, kernel, mode="same")[width:-width]
    return gains


def apply_mask_and_synthesize(channels: ChannelSignals, mask: SourceMask,
                              frame_len: int) -> AudioSignal:
    """Apply one source's binary mask and resynthesize its waveform.

    The mask is piecewise constant per frame, expanded to sample rate
    with a 2 ms raised-cosine cross-fade at transitions.  Output covers
    the masked frames only (num_frames * frame_len samples), matching
    the tail truncation of map building.
    """
    total = mask.num_frames * frame_len
    if total > channels.num_samples:
        raise ValueError(
            f"mask covers {total} samples but channels have only {channels.num_samples}"
        )
    masked = np.empty((NUM_CHANNELS, total))
    for c in range(NUM_CHANNELS):
        gains = _sample_gains(mask.values[c], frame_len, total, channels.sample_rate)
        masked[c] = channels.channels[c, :total] * gains
    tail = None
    if channels.tail is not None:
        # The ring-out continues the last frame, so it takes that frame's gain.
        tail = channels.tail * mask.values[:, -1:].astype(np.float64)
    return filterbank.synthesize(
        ChannelSignals(channels=masked, sample_rate=channels.sample_rate, tail=tail)
    )


def normalize_energy(sig: AudioSignal, reference: AudioSignal, frame_len: int) -> AudioSignal:
    """Scale each frame of sig so its RMS matches the reference frame's.

    Frames with output RMS below 1e-8 are left untouched.  A trailing
    partial frame is treated as one frame.
    """
    if len(sig) != len(reference):
        raise ValueError("signal and reference must have equal length")
    out = sig.samples.copy()
    for start in range(0, len(out), frame_len):
        seg = out[start : start + frame_len]
        ref = reference.samples[start : start + frame_len]
        rms_out = np.sqrt(np.mean(seg**2))
        if rms_out < 1e-8:
            continue
        rms_ref = np.sqrt(np.mean(ref**2))
        seg *= rms_ref / rms_out
    return AudioSignal(samples=out, sample_rate=sig.sample_rate)


def snr_improvement(estimate: AudioSignal, target: AudioSignal,
                    mixture: AudioSignal) -> float:
    """SNR gain of the estimate over the mixture, both against the target.

    10 log10(|t|^2 / |t - e|^2) - 10 log10(|t|^2 / |t - m|^2), each term
    capped at SNR_CAP_DB for exact reconstructions.
    """
    t = target.samples
    if len(estimate) != len(t) or len(mixture) != len(t):
        raise ValueError("signals must have equal length")
    t_energy = float(np.sum(t**2))
    if t_energy == 0.0:
        raise ValueError("target has zero energy")

    def snr(x):
        err = float(np.sum((t - x) ** 2))
        if err == 0.0:
            return SNR_CAP_DB
        return min(10.0 * np.log10(t_energy / err), SNR_CAP_DB)

    return snr(estimate.samples) - snr(mixture.samples)
