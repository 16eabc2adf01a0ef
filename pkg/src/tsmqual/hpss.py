"""Median-filter harmonic/percussive separation with binary masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter

from .audio_io import AudioSignal
from .errors import AudioError
from .spectral import frames_at, hann, n_uniform_frames


@dataclass(frozen=True)
class HpssConfig:
    frame_size: int = 1024
    hop: int = 256
    harmonic_kernel: int = 17   # frames, along time
    percussive_kernel: int = 17  # bins, along frequency


def _padded_stft(x, frame_size, hop, window):
    pad = frame_size // 2
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    n = n_uniform_frames(len(xp), frame_size, hop)
    starts = np.arange(n) * hop
    return np.fft.rfft(frames_at(xp, starts, frame_size) * window, axis=1), starts, len(xp)


def _istft(spec, starts, length, frame_size, window):
    frames = np.fft.irfft(spec, n=frame_size, axis=1) * window
    out = np.zeros(length + frame_size)
    norm = np.zeros(length + frame_size)
    for s, frame in zip(starts, frames):
        out[s:s + frame_size] += frame
        norm[s:s + frame_size] += window ** 2
    good = norm > 1e-10
    out[good] /= norm[good]
    out[~good] = 0.0
    return out[:length]


def hpss(signal: AudioSignal, config: HpssConfig = HpssConfig()):
    """Split ``signal`` into (harmonic, percussive) time signals.

    Each STFT cell is assigned wholly to the percussive part when the
    frequency-direction median exceeds the time-direction median, otherwise
    to the harmonic part, so the two outputs sum back to the input.
    """
    x = signal.samples
    if len(x) < config.frame_size:
        raise AudioError(
            f"signal of {len(x)} samples is shorter than one {config.frame_size}-sample frame")
    window = hann(config.frame_size)
    spec, starts, length = _padded_stft(x, config.frame_size, config.hop, window)
    mag = np.abs(spec)
    harm = median_filter(mag, size=(config.harmonic_kernel, 1), mode="constant")
    perc = median_filter(mag, size=(1, config.percussive_kernel), mode="constant")
    perc_mask = perc > harm
    pad = config.frame_size // 2
    outputs = []
    for mask in (~perc_mask, perc_mask):
        y = _istft(spec * mask, starts, length, config.frame_size, window)
        outputs.append(AudioSignal(y[pad:pad + len(x)], signal.sample_rate))
    return outputs[0], outputs[1], perc_mask


def hps_percussive(signal: AudioSignal, config: HpssConfig = HpssConfig()) -> AudioSignal:
    return hpss(signal, config)[1]


def rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0
