"""STFT, time-scale ratio estimation and reference/test frame alignment."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.signal import get_window

from .audio_io import AudioSignal
from .errors import AudioError, DataError


class AlignmentMode(str, Enum):
    ANCHOR_REF = "anchor_ref"
    ANCHOR_TEST = "anchor_test"
    INTERP_TO_LONGEST = "interp_to_longest"
    INTERP_TO_SHORTEST = "interp_to_shortest"
    INTERP_TO_REF = "interp_to_ref"
    INTERP_TO_TEST = "interp_to_test"

    @property
    def is_anchor(self) -> bool:
        return self in (AlignmentMode.ANCHOR_REF, AlignmentMode.ANCHOR_TEST)

    @classmethod
    def parse(cls, value) -> "AlignmentMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {
            "interp_longest": "interp_to_longest",
            "interp_shortest": "interp_to_shortest",
            "interp_ref": "interp_to_ref",
            "interp_test": "interp_to_test",
        }
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise DataError(f"unknown alignment mode {value!r}") from None


DEFAULT_ALIGNMENT = AlignmentMode.INTERP_TO_TEST


@dataclass(frozen=True)
class Spectrogram:
    """One-sided complex STFT, indexed ``[frame, bin]``."""

    bins: np.ndarray
    frame_size: int
    hop: int
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.bins.shape[0]

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.bins)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.bins)

    @property
    def bin_hz(self) -> float:
        return self.sample_rate / self.frame_size


def hann(frame_size: int) -> np.ndarray:
    return get_window("hann", frame_size, fftbins=True)


def _check_frame_params(frame_size, hop):
    if frame_size < 2 or frame_size & (frame_size - 1):
        raise DataError(f"frame size must be a power of two, got {frame_size}")
    if not 0 < hop <= frame_size:
        raise DataError(f"hop must be in (0, frame_size], got {hop}")


def n_uniform_frames(length: int, frame_size: int, hop: int) -> int:
    """Frame count of uniform framing with a zero-padded final frame."""
    if length < frame_size:
        return 0
    return 1 + -(-(length - frame_size) // hop)


def frame_is_valid(start: int, length: int, frame_size: int, hop: int) -> bool:
    """Whether a frame starting at ``start`` belongs to a signal of ``length``.

    Same rule as uniform framing: the frame must overlap the signal by more
    than ``frame_size - hop`` samples, so the last uniform frame may be
    partial and zero-padded.
    """
    return length >= frame_size and start < length - frame_size + hop


def frames_at(x: np.ndarray, starts, frame_size: int) -> np.ndarray:
    """Gather frames at arbitrary start indices, zero-padding past the end."""
    starts = np.asarray(starts, dtype=np.int64)
    padded = np.concatenate([x, np.zeros(frame_size)])
    idx = starts[:, None] + np.arange(frame_size)[None, :]
    return padded[idx]


def spectrum_of_frames(frames: np.ndarray, window: np.ndarray) -> np.ndarray:
    return np.fft.rfft(frames * window[None, :], axis=1)


def stft(signal: AudioSignal, frame_size: int = 2048, hop: int = 512,
         window: np.ndarray | None = None) -> Spectrogram:
    """Hann-windowed one-sided STFT with frames starting at multiples of ``hop``."""
    _check_frame_params(frame_size, hop)
    x = signal.samples
    n = n_uniform_frames(len(x), frame_size, hop)
    if n == 0:
        raise AudioError(
            f"signal of {len(x)} samples is shorter than one {frame_size}-sample frame")
    if window is None:
        window = hann(frame_size)
    frames = frames_at(x, np.arange(n) * hop, frame_size)
    return Spectrogram(spectrum_of_frames(frames, window), frame_size, hop,
                       signal.sample_rate)


def estimate_beta(ref: AudioSignal, test: AudioSignal, known: float | None = None) -> float:
    """Playback-speed ratio: ``known`` when given, else len(ref) / len(test)."""
    if known is not None:
        beta = float(known)
    else:
        if len(test) == 0:
            raise AudioError("empty test signal")
        beta = len(ref) / len(test)
    if not np.isfinite(beta) or beta <= 0:
        raise DataError(f"time-scale ratio must be positive, got {beta}")
    return beta


def _anchor_name(anchor) -> str:
    if anchor in (AlignmentMode.ANCHOR_REF, "ref"):
        return "ref"
    if anchor in (AlignmentMode.ANCHOR_TEST, "test"):
        return "test"
    raise DataError(f"anchor must be 'ref' or 'test', got {anchor!r}")


def time_instance_starts(ref_len: int, test_len: int, anchor: str, beta: float,
                         frame_size: int, hop: int):
    """Frame start indices (ref, test) sampling both signals at the same
    time instants. Frames invalid in either signal end the sequence."""
    anchor = _anchor_name(anchor)
    if anchor == "ref":
        anchor_len, other_len, scale = ref_len, test_len, 1.0 / beta
    else:
        anchor_len, other_len, scale = test_len, ref_len, beta
    anchored = np.arange(max(n_uniform_frames(anchor_len, frame_size, hop), 0)) * hop
    other = np.rint(anchored * scale).astype(np.int64)
    keep = np.array([frame_is_valid(int(s), other_len, frame_size, hop) for s in other],
                    dtype=bool)
    # starts are monotone, so the valid set is a prefix
    n = int(np.argmin(keep)) if not keep.all() else keep.size
    anchored, other = anchored[:n], other[:n]
    if anchor == "ref":
        return anchored, other
    return other, anchored


def time_instance_frames(ref: AudioSignal, test: AudioSignal, anchor: str, beta: float,
                         frame_size: int = 2048, hop: int = 512,
                         window: np.ndarray | None = None):
    """Spectrograms of both signals framed at identical time instants.

    With ``anchor='test'`` the test signal is framed every ``hop`` samples and
    reference frame ``u`` starts at ``round(u * beta * hop)``; ``anchor='ref'``
    mirrors this with ``round(u * hop / beta)``.
    """
    _check_frame_params(frame_size, hop)
    ref_starts, test_starts = time_instance_starts(
        len(ref), len(test), anchor, beta, frame_size, hop)
    if ref_starts.size == 0:
        raise AudioError("time-instance framing produced no frames")
    if window is None:
        window = hann(frame_size)
    specs = []
    for sig, starts in ((ref, ref_starts), (test, test_starts)):
        bins = spectrum_of_frames(frames_at(sig.samples, starts, frame_size), window)
        specs.append(Spectrogram(bins, frame_size, hop, sig.sample_rate))
    return specs[0], specs[1]


def interp_frames(matrix: np.ndarray, target_frames: int) -> np.ndarray:
    """Per-column linear interpolation along axis 0 onto ``target_frames``
    evenly spaced positions spanning the original first to last row."""
    matrix = np.asarray(matrix)
    n = matrix.shape[0]
    if target_frames == n:
        return matrix.copy()
    if n < 2 or target_frames < 2:
        raise DataError(
            f"cannot interpolate {n} frames to {target_frames} frames")
    pos = np.linspace(0.0, n - 1.0, target_frames)
    lo = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    frac = pos - lo
    if matrix.ndim > 1:
        frac = frac.reshape((-1,) + (1,) * (matrix.ndim - 1))
    return matrix[lo] * (1.0 - frac) + matrix[lo + 1] * frac


def interpolate_spectrogram(spec: Spectrogram, target_frames: int) -> np.ndarray:
    """Magnitudes of ``spec`` linearly resampled along time; phase is dropped."""
    return interp_frames(spec.magnitude, target_frames)


def target_frame_count(mode: AlignmentMode, ref_frames: int, test_frames: int) -> int:
    return {
        AlignmentMode.INTERP_TO_LONGEST: max(ref_frames, test_frames),
        AlignmentMode.INTERP_TO_SHORTEST: min(ref_frames, test_frames),
        AlignmentMode.INTERP_TO_REF: ref_frames,
        AlignmentMode.INTERP_TO_TEST: test_frames,
    }[mode]


def align_matrices(ref: np.ndarray, test: np.ndarray, mode) -> tuple:
    """Bring two frame-major matrices to a common frame count (interp modes)."""
    mode = AlignmentMode.parse(mode)
    if mode.is_anchor:
        if ref.shape[0] != test.shape[0]:
            raise DataError("anchored spectrograms must have equal frame counts")
        return ref, test
    target = target_frame_count(mode, ref.shape[0], test.shape[0])
    return interp_frames(ref, target), interp_frames(test, target)


def align(ref_spec: Spectrogram, test_spec: Spectrogram, mode, beta: float | None = None):
    """Magnitude matrices of equal frame count.

    Interpolation modes resample whichever input differs from the target
    length. Anchor modes expect spectrograms already produced by
    :func:`time_instance_frames` and return their magnitudes.
    """
    return align_matrices(ref_spec.magnitude, test_spec.magnitude, mode)


def align_signals(ref: AudioSignal, test: AudioSignal, mode, beta: float,
                  frame_size: int = 2048, hop: int = 512,
                  window: np.ndarray | None = None):
    """Frame and align a signal pair under any of the six modes."""
    mode = AlignmentMode.parse(mode)
    if mode.is_anchor:
        anchor = "ref" if mode is AlignmentMode.ANCHOR_REF else "test"
        r, t = time_instance_frames(ref, test, anchor, beta, frame_size, hop, window)
        return r.magnitude, t.magnitude
    r = stft(ref, frame_size, hop, window)
    t = stft(test, frame_size, hop, window)
    return align(r, t, mode)
