"""Monophonic source separation via oscillatory correlation.

Pipeline: audio in -> Bark-scaled gammatone analysis -> CAM/CSM auditory
maps -> two-layer relaxation-oscillator network -> per-source binary
masks -> masked resynthesis through the same filterbank.
"""

__version__ = "0.1.0"
