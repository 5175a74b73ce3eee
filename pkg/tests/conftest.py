"""Shared fixtures: compiled-kernel warm-up and the desk-test mixture."""

import numpy as np
import pytest

from oscsep import oscillator_net as net
from oscsep.audio_io import AudioSignal


@pytest.fixture(scope="session")
def warm_kernels():
    """Compile the numba kernels once so test bodies time the algorithms."""
    import oscsep.filterbank as fb

    net.reference_period(0.2, net.NetParams())
    net.simulate_oscillators([0.0], [0.0], [0.2], np.zeros((1, 1)),
                             net.NetParams(noise=False), steps=10, controller=True)
    fb._bank(fb.FilterbankSpec())
    vals = np.zeros((256, 50))
    import oscsep.auditory_maps as am

    frame = am.MapFrame(values=vals, frame_index=0, kind=am.CAM)
    net.simulate_frame(frame, net.NetParams(steps_per_frame=8), rng=np.random.default_rng(0))
    return True


def make_desk_sources(n=8000, fs=8000):
    """The two AM tones of the desk separation experiment, equal RMS."""
    t = np.arange(n) / fs
    a = np.sin(2 * np.pi * 1000 * t) * (1 + 0.8 * np.cos(2 * np.pi * 100 * t))
    b = np.sin(2 * np.pi * 2500 * t) * (1 + 0.8 * np.cos(2 * np.pi * 170 * t))
    a *= 0.15 / np.sqrt(np.mean(a**2))
    b *= 0.15 / np.sqrt(np.mean(b**2))
    return AudioSignal(a, fs), AudioSignal(b, fs)


@pytest.fixture(scope="session")
def desk_sources():
    return make_desk_sources()
