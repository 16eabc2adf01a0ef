"""Features targeting time-scale modification artefacts: spectral error
measures, phase-progression 'phasiness', spectral similarity, onset and
transient statistics, and test bandwidth."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np

from .audio_io import AudioSignal
from .errors import FeatureError
from .hpss import HpssConfig, hps_percussive, rms
from .spectral import Spectrogram, interp_frames, stft, time_instance_frames

log = logging.getLogger(__name__)

SER_CAP = 80.0
TWO_PI = 2.0 * np.pi
ONSET_EPS = 1e-12


@dataclass
class TsmFeatureSet:
    ser: float
    dm: float
    mphnw: float
    mphmw: float
    sphnw: float
    sphmw: float
    ssmad: float
    ssmd: float
    peak_delta: float
    tr_rat: float
    hps_tr_rat: float
    bandwidth_test_new: float
    diagnostics: list = field(default_factory=list)

    def values(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "diagnostics"}


# -- magnitude-spectrum measures ---------------------------------------------

def ser(ref_mag: np.ndarray, test_mag: np.ndarray) -> float:
    """Signal-to-error ratio in dB, capped at 80 (the identical-input value)."""
    ref_mag, test_mag = _same_shape(ref_mag, test_mag)
    num = np.sum(test_mag ** 2)
    den = np.sum((ref_mag - test_mag) ** 2)
    if den == 0.0:
        return SER_CAP
    value = 10.0 * np.log10(max(num, np.finfo(float).tiny) / den)
    return float(min(value, SER_CAP))


def dm(ref_mag: np.ndarray, test_mag: np.ndarray) -> float:
    """Squared magnitude difference normalised by reference energy."""
    ref_mag, test_mag = _same_shape(ref_mag, test_mag)
    den = np.sum(ref_mag ** 2)
    if den == 0.0:
        raise FeatureError("dm", "silent reference spectrum")
    return float(np.sum((test_mag - ref_mag) ** 2) / den)


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise FeatureError("alignment", f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


# -- phasiness -----------------------------------------------------------------

def unwrap_phase_monotonic(phase: np.ndarray, return_counts: bool = False):
    """Unwrap STFT phase so every bin strictly increases from frame to frame.

    Angles are first mapped into (0, 2*pi]; each later frame then receives the
    fewest whole turns that lift it above the previous frame's value.
    """
    phase = np.asarray(phase, dtype=np.float64)
    base = np.where(phase > 0.0, phase, phase + TWO_PI)
    counts = np.zeros(base.shape, dtype=np.int64)
    out = base.copy()
    for u in range(1, base.shape[0]):
        prev = out[u - 1]
        p = np.maximum(np.floor((prev - base[u]) / TWO_PI) + 1.0, 0.0).astype(np.int64)
        cand = base[u] + TWO_PI * p
        # floor() can be off by one turn at exact multiples
        low = cand <= prev
        p[low] += 1
        lower = (p > 0) & (base[u] + TWO_PI * (p - 1) > prev)
        p[lower] -= 1
        counts[u] = p
        out[u] = base[u] + TWO_PI * p
    if return_counts:
        return out, counts
    return out


def phase_difference(ref_spec: Spectrogram, test_spec: Spectrogram, beta: float,
                     weighted: bool) -> np.ndarray:
    """Weighted difference of unwrapped phase progressions, with the longer
    progression interpolated to the shorter one's frame count."""
    ref_phase = unwrap_phase_monotonic(ref_spec.phase)
    test_phase = unwrap_phase_monotonic(test_spec.phase)
    n_ref, n_test = ref_phase.shape[0], test_phase.shape[0]
    if min(n_ref, n_test) < 2:
        raise FeatureError("phasiness", "need at least two frames per signal")
    if n_test >= n_ref:
        diff = ref_phase - beta * interp_frames(test_phase, n_ref)
        kept = ref_spec.magnitude
    else:
        diff = beta * interp_frames(ref_phase, n_test) - test_phase
        kept = test_spec.magnitude
    if weighted:
        peak = kept.max()
        diff = diff * (kept / peak if peak > 0 else 0.0)
    return diff


def phasiness(ref_spec: Spectrogram, test_spec: Spectrogram, beta: float):
    """Return (mphnw, mphmw, sphnw, sphmw)."""
    stats = {}
    for weighted in (False, True):
        d = np.abs(phase_difference(ref_spec, test_spec, beta, weighted))
        stats[weighted] = (float(d.mean()), float(d.mean(axis=1).std()))
    return stats[False][0], stats[True][0], stats[False][1], stats[True][1]


# -- spectral similarity -------------------------------------------------------

def cubic_shape(mag_frame: np.ndarray, n_points: int):
    """Cubic least-squares fit of a peak-normalised magnitude frame, evaluated
    without its constant term on ``n_points`` points over [0, 1].

    Returns None for a silent frame.
    """
    peak = mag_frame.max()
    if peak <= 0:
        return None
    x = np.linspace(0.0, 1.0, mag_frame.size)
    c3, c2, c1, _ = np.polyfit(x, mag_frame / peak, 3)
    grid = np.linspace(0.0, 1.0, n_points)
    return ((c3 * grid + c2) * grid + c1) * grid


def spectral_similarity(ref: AudioSignal, test: AudioSignal, beta: float,
                        frame_size: int = 2048, hop: int = 512):
    """Return (ssmad, ssmd) from reference-anchored frame pairs."""
    r, t = time_instance_frames(ref, test, "ref", beta, frame_size, hop)
    rm, tm = r.magnitude, t.magnitude
    mad, md = [], []
    for u in range(rm.shape[0]):
        a = cubic_shape(rm[u], frame_size // 2)
        b = cubic_shape(tm[u], frame_size // 2)
        if a is None or b is None:
            continue
        d = a - b
        mad.append(np.mean(np.abs(d)))
        md.append(np.mean(d))
    if not mad:
        raise FeatureError("spectral_similarity", "no non-silent frame pairs")
    return float(np.mean(mad)), float(np.mean(md))


# -- onsets and transients -----------------------------------------------------

@dataclass
class OnsetEnvelope:
    """Log-energy differences; ``values[i]`` is the change into frame ``i + 1``."""

    values: np.ndarray
    peak_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    selected_peaks: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def weighted_energy(spec: Spectrogram) -> np.ndarray:
    half = spec.frame_size // 2
    power = np.abs(spec.bins[:, :half]) ** 2
    return power @ np.arange(half, dtype=np.float64)


def onset_envelope_from_spec(spec: Spectrogram) -> OnsetEnvelope:
    if spec.n_frames < 3:
        raise FeatureError("onset", "need at least three frames")
    log_e = np.log10(weighted_energy(spec) + ONSET_EPS)
    return OnsetEnvelope(np.diff(log_e))


def onset_envelope(signal: AudioSignal, frame_size: int = 2048, hop: int = 512) -> OnsetEnvelope:
    return onset_envelope_from_spec(stft(signal, frame_size, hop))


def peak_mask(values: np.ndarray) -> np.ndarray:
    """Strict maxima over the two neighbours on each side."""
    v = np.asarray(values, dtype=np.float64)
    mask = np.zeros(v.size, dtype=bool)
    if v.size < 5:
        return mask
    c = v[2:-2]
    mask[2:-2] = (c > v[:-4]) & (c > v[1:-3]) & (c > v[3:-1]) & (c > v[4:])
    return mask


def pick_peaks(env: OnsetEnvelope) -> OnsetEnvelope:
    v = env.values
    peaks = np.flatnonzero(peak_mask(v))
    threshold = v.mean() + v.std() if v.size else 0.0
    selected = peaks[v[peaks] > threshold]
    return OnsetEnvelope(v, peaks, selected)


def peak_delta(ref_env: OnsetEnvelope, test_env: OnsetEnvelope, fs: float, ref_len: int) -> float:
    """Difference in peak counts (test minus reference) per second of reference."""
    return float(fs / ref_len * (len(test_env.peak_indices) - len(ref_env.peak_indices)))


def transient_ratio(ref_env: OnsetEnvelope, test_env: OnsetEnvelope, diagnostics=None) -> float:
    """Mean selected-peak onset level of the reference over that of the test.

    Falls back to 1.0 (and records a diagnostic) when either signal has no
    selected peaks or the test level is zero.
    """
    if len(ref_env.selected_peaks) == 0 or len(test_env.selected_peaks) == 0:
        _note(diagnostics, "tr_rat: no selected onset peaks, using 1.0")
        return 1.0
    num = ref_env.values[ref_env.selected_peaks].mean()
    den = test_env.values[test_env.selected_peaks].mean()
    if den == 0.0:
        _note(diagnostics, "tr_rat: zero test transient level, using 1.0")
        return 1.0
    return float(num / den)


def hps_transient_ratio(ref: AudioSignal, test: AudioSignal,
                        config: HpssConfig = HpssConfig()) -> float:
    num = rms(hps_percussive(ref, config).samples)
    den = rms(hps_percussive(test, config).samples)
    if den == 0.0:
        raise FeatureError("hps_tr_rat", "no percussive energy")
    return num / den


def _note(diagnostics, message):
    log.warning(message)
    if diagnostics is not None:
        diagnostics.append(message)


# -- bandwidth -----------------------------------------------------------------

NOISE_FLOOR_HZ = 21000.0
BANDWIDTH_CUTOFF_HZ = 8000.0


def bandwidth_per_frame(power: np.ndarray, sample_rate: float, frame_size: int,
                        threshold_db: float, floor_power: np.ndarray | None = None,
                        search_from: np.ndarray | None = None) -> np.ndarray:
    """Highest bin frequency (Hz) per frame whose power exceeds the noise floor
    by ``threshold_db``; 0 where no bin qualifies.

    The noise floor is the maximum power above 21 kHz, taken from
    ``floor_power`` when given (PEAQ measures it on the test signal). The
    downward search starts just below 21 kHz, or below ``search_from`` Hz.
    """
    df = sample_rate / frame_size
    k_floor = int(np.ceil(NOISE_FLOOR_HZ / df))
    n_bins = power.shape[1]
    if k_floor >= n_bins:
        raise FeatureError("bandwidth", "sample rate too low for a 21 kHz noise-floor region")
    src = power if floor_power is None else floor_power
    floor = src[:, k_floor:].max(axis=1)
    level = 10.0 ** (threshold_db / 10.0)
    out = np.zeros(power.shape[0])
    for u in range(power.shape[0]):
        top = k_floor if search_from is None else int(round(search_from[u] / df))
        above = np.flatnonzero(power[u, :top] > level * floor[u])
        if above.size:
            out[u] = above[-1] * df
    return out


def mean_wideband(bw: np.ndarray, select: np.ndarray | None = None) -> float:
    """Average over frames whose bandwidth exceeds 8 kHz; 0 if none do."""
    mask = (bw if select is None else select) > BANDWIDTH_CUTOFF_HZ
    return float(bw[mask].mean()) if mask.any() else 0.0


def bandwidth_test_new(test_spec: Spectrogram) -> float:
    """Test bandwidth with a +10 dB threshold, in Hz; NaN when the sample rate
    leaves no region above 21 kHz."""
    power = np.abs(test_spec.bins) ** 2
    try:
        bw = bandwidth_per_frame(power, test_spec.sample_rate, test_spec.frame_size, 10.0)
    except FeatureError:
        return float("nan")
    return mean_wideband(bw)
