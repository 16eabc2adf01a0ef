"""WAV loading and signal preparation (downmix, DC removal, peak
normalisation, energy-threshold truncation)."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import AudioError

# Sum of |x| over four consecutive samples, full scale = 1.
ACTIVITY_THRESHOLD = 0.0061
ACTIVITY_WINDOW = 4


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise AudioError("AudioSignal must be mono")
        if int(self.sample_rate) <= 0:
            raise AudioError(f"invalid sample rate {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _to_float(data: np.ndarray) -> np.ndarray:
    kind, size = data.dtype.kind, data.dtype.itemsize
    if kind == "f":
        return data.astype(np.float64)
    if kind == "u" and size == 1:
        return (data.astype(np.float64) - 128.0) / 128.0
    if kind == "i":
        # scipy left-aligns 24-bit samples in int32, so 2**31 covers both
        return data.astype(np.float64) / float(2 ** (8 * size - 1))
    raise AudioError(f"unsupported sample format {data.dtype}")


def load_audio(path) -> AudioSignal:
    """Read a PCM or float WAV file and sum all channels to mono.

    Integer formats are mapped to [-1, 1) before the channels are summed.
    """
    path = Path(path)
    if not path.is_file():
        raise AudioError(f"no such file: {path}")
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError, EOFError) as exc:
        raise AudioError(f"cannot read {path}: {exc}") from exc
    samples = _to_float(np.asarray(data))
    if samples.ndim == 2:
        samples = samples.sum(axis=1)
    if samples.size == 0:
        raise AudioError(f"{path} contains no samples")
    return AudioSignal(samples, rate)


def write_audio(path, signal: AudioSignal, bits: int = 16) -> None:
    """Write a mono WAV; ``bits`` 16 or 32 gives integer PCM, 0 gives float32."""
    x = np.clip(signal.samples, -1.0, 1.0)
    if bits == 0:
        data = x.astype(np.float32)
    elif bits in (16, 32):
        scale = 2 ** (bits - 1)
        data = np.clip(np.round(x * scale), -scale, scale - 1).astype(f"int{bits}")
    else:
        raise ValueError("bits must be 0, 16 or 32")
    wavfile.write(path, signal.sample_rate, data)


def prepare(signal: AudioSignal) -> AudioSignal:
    """Remove the DC offset, then scale so the peak magnitude is exactly 1."""
    x = signal.samples - signal.samples.mean()
    peak = np.max(np.abs(x)) if x.size else 0.0
    # a constant input leaves only rounding residue after the mean is removed
    if peak <= 16 * np.finfo(float).eps * np.max(np.abs(signal.samples), initial=0.0):
        raise AudioError("silent signal")
    return AudioSignal(x / peak, signal.sample_rate)


def active_bounds(samples: np.ndarray, threshold: float = ACTIVITY_THRESHOLD):
    """First and last sample index of the region where a 4-sample window of
    absolute values sums above ``threshold``.

    The window slides one sample at a time; ``start`` is the first sample of the
    first qualifying window, ``end`` the last sample of the last one.
    """
    a = np.abs(np.asarray(samples, dtype=np.float64))
    if a.size < ACTIVITY_WINDOW:
        raise AudioError("no active region")
    sums = np.convolve(a, np.ones(ACTIVITY_WINDOW), mode="valid")
    hits = np.flatnonzero(sums > threshold)
    if hits.size == 0:
        raise AudioError("no active region")
    return int(hits[0]), int(hits[-1]) + ACTIVITY_WINDOW - 1


def truncate_active(ref: AudioSignal, test: AudioSignal):
    """Cut each signal independently to its own active region."""
    out = []
    for sig in (ref, test):
        start, end = active_bounds(sig.samples)
        out.append(AudioSignal(sig.samples[start:end + 1], sig.sample_rate))
    return out[0], out[1]


def load_pair(ref_path, test_path):
    """Load, prepare and truncate a reference/test pair."""
    ref = load_audio(ref_path)
    test = load_audio(test_path)
    if ref.sample_rate != test.sample_rate:
        raise AudioError(
            f"sample rate mismatch: {ref.sample_rate} Hz vs {test.sample_rate} Hz")
    return truncate_active(prepare(ref), prepare(test))
