"""FFT ear model and the eleven basic model output variables (MOVs) of
ITU-R BS.1387, adapted for time-scaled material.

Differences from the standard:

* full scale is +/-1 and every frequency-dependent constant is evaluated
  at the input sample rate instead of being tabulated for 48 kHz;
* bandwidths are reported in Hz, with the noise floor taken above 21 kHz
  and an 8 kHz cutoff for frame inclusion;
* detection probability uses a single channel;
* RelDistFramesB is the fraction of frames whose peak noise-to-mask ratio
  exceeds 1.5 dB.

Numerics follow Kabal's clarifications of the standard on a best-effort
basis. Bit-exact conformance with the ITU test vectors is not claimed.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .audio_io import AudioSignal
from .errors import AudioError
from .spectral import (AlignmentMode, align_matrices, frames_at, n_uniform_frames,
                       time_instance_starts)
from .tsm_features import bandwidth_per_frame, mean_wideband

FRAME_SIZE = 2048
HOP = FRAME_SIZE // 2
LISTENING_LEVEL_DB = 92.0
CALIBRATION_HZ = 1019.5

BAND_LOW_HZ = 80.0
BAND_HIGH_HZ = 18000.0
BAND_STEP_BARK = 0.25
E_MIN = 1e-12

# Energy of the newest half frame, 8000 in 16-bit units.
ENERGY_THRESHOLD = 8000.0 / 32768.0 ** 2
EHS_MAX_HZ = 9000.0
AVERAGING_DELAY_S = 0.5
LOUDNESS_THRESHOLD_SONE = 0.1
WIN_MOD_DIFF_LENGTH = 4
REL_DIST_THRESHOLD = 10.0 ** (1.5 / 10.0)

# Lower bound for TotalNMRB, reached when reference and test are identical.
TOTAL_NMR_FLOOR_DB = -100.0

# Values of the difference-based MOVs for identical inputs.
NO_DISTORTION = {
    "win_mod_diff1": 0.0,
    "avg_mod_diff1": 0.0,
    "avg_mod_diff2": 0.0,
    "rms_noise_loud": 0.0,
    "total_nmr": TOTAL_NMR_FLOOR_DB,
    "rel_dist_frames": 0.0,
    "mfpd": 0.0,
    "adb": 0.0,
    "ehs": 0.0,
}


def hann_symmetric(n: int) -> np.ndarray:
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / (n - 1)))


def level_gain(sample_rate: float, frame_size: int = FRAME_SIZE) -> float:
    """Scale so a full-scale sine near 1019.5 Hz peaks at 92 dB.

    Uses the worst-case offset of the calibration tone from the nearest
    bin, as the standard does for 48 kHz.
    """
    w = hann_symmetric(frame_size)
    pos = CALIBRATION_HZ * frame_size / sample_rate
    offset = min(pos - np.floor(pos), np.ceil(pos) - pos)
    n = np.arange(frame_size)
    peak = 0.5 * abs(np.sum(w * np.exp(-2j * np.pi * offset * n / frame_size)))
    return 10.0 ** (LISTENING_LEVEL_DB / 20.0) / peak


@dataclass(frozen=True)
class PeaqSpectrum:
    """Scaled FFT magnitudes of one signal (frames x bins) plus the energy of
    the newest half of every frame."""

    magnitude: np.ndarray
    frame_energy: np.ndarray
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[0]


def _spectrum_at(signal: AudioSignal, starts) -> PeaqSpectrum:
    frames = frames_at(signal.samples, starts, FRAME_SIZE)
    window = hann_symmetric(FRAME_SIZE)
    mag = level_gain(signal.sample_rate) * np.abs(np.fft.rfft(frames * window, axis=1))
    energy = np.sum(frames[:, HOP:] ** 2, axis=1)
    return PeaqSpectrum(mag, energy, signal.sample_rate)


def peaq_spectrum(signal: AudioSignal) -> PeaqSpectrum:
    n = n_uniform_frames(len(signal), FRAME_SIZE, HOP)
    if n == 0:
        raise AudioError(f"signal of {len(signal)} samples is shorter than one PEAQ frame")
    return _spectrum_at(signal, np.arange(n) * HOP)


def peaq_spectra(ref: AudioSignal, test: AudioSignal, mode=AlignmentMode.INTERP_TO_TEST,
                 beta: float = 1.0):
    """Reference and test spectra brought to a common frame count before the
    rest of the ear model runs."""
    mode = AlignmentMode.parse(mode)
    if mode.is_anchor:
        anchor = "ref" if mode is AlignmentMode.ANCHOR_REF else "test"
        rs, ts = time_instance_starts(len(ref), len(test), anchor, beta, FRAME_SIZE, HOP)
        if rs.size == 0:
            raise AudioError("time-instance framing produced no PEAQ frames")
        return _spectrum_at(ref, rs), _spectrum_at(test, ts)
    r, t = peaq_spectrum(ref), peaq_spectrum(test)
    stacked_r = np.column_stack([r.magnitude, r.frame_energy])
    stacked_t = np.column_stack([t.magnitude, t.frame_energy])
    ar, at = align_matrices(stacked_r, stacked_t, mode)
    return (PeaqSpectrum(ar[:, :-1], ar[:, -1], r.sample_rate),
            PeaqSpectrum(at[:, :-1], at[:, -1], t.sample_rate))


# -- frequency scale -----------------------------------------------------------

def bark(f):
    return 7.0 * np.arcsinh(np.asarray(f, dtype=np.float64) / 650.0)


def bark_to_hz(z):
    return 650.0 * np.sinh(np.asarray(z, dtype=np.float64) / 7.0)


@dataclass(frozen=True)
class CriticalBands:
    lower: np.ndarray
    centre: np.ndarray
    upper: np.ndarray

    @property
    def count(self) -> int:
        return self.centre.size


def critical_bands() -> CriticalBands:
    z_lo, z_hi = bark(BAND_LOW_HZ), bark(BAND_HIGH_HZ)
    n = int(np.ceil((z_hi - z_lo) / BAND_STEP_BARK))
    zl = z_lo + np.arange(n) * BAND_STEP_BARK
    zu = np.minimum(zl + BAND_STEP_BARK, z_hi)
    return CriticalBands(bark_to_hz(zl), bark_to_hz((zl + zu) / 2.0), bark_to_hz(zu))


def grouping_matrix(bands: CriticalBands, n_bins: int, sample_rate: float) -> np.ndarray:
    """Fraction of each FFT bin's width falling inside each band (bands x bins)."""
    df = sample_rate / (2 * (n_bins - 1))
    k = np.arange(n_bins)
    lo = np.maximum(bands.lower[:, None], (k - 0.5) * df)
    hi = np.minimum(bands.upper[:, None], (k + 0.5) * df)
    return np.maximum(hi - lo, 0.0) / df


def outer_middle_ear_db(f):
    khz = np.asarray(f, dtype=np.float64) / 1000.0
    with np.errstate(divide="ignore"):
        return (-0.6 * 3.64 * khz ** -0.8 + 6.5 * np.exp(-0.6 * (khz - 3.3) ** 2)
                - 1e-3 * khz ** 3.6)


def internal_noise(fc):
    return 10.0 ** (0.4 * 0.364 * (np.asarray(fc) / 1000.0) ** -0.8)


def time_constant_coeff(fc, tau_100, tau_min, sample_rate, hop=HOP):
    tau = tau_min + 100.0 / np.asarray(fc) * (tau_100 - tau_min)
    return np.exp(-hop / (sample_rate * tau))


# -- ear model -----------------------------------------------------------------

@dataclass
class ExcitationPatterns:
    """Per-frame ear-model outputs for one signal."""

    bands: CriticalBands
    sample_rate: int
    power: np.ndarray            # scaled |X|^2, frames x bins
    weighted_magnitude: np.ndarray  # outer/middle-ear weighted |X|
    band_energy: np.ndarray      # frames x bands, before internal noise
    unsmeared: np.ndarray        # after frequency spreading
    excitation: np.ndarray       # after time spreading
    frame_energy: np.ndarray

    @property
    def n_frames(self) -> int:
        return self.excitation.shape[0]


def spread_frequency(energy: np.ndarray, fc: np.ndarray, normalise: bool = True) -> np.ndarray:
    """Level-dependent spreading across bands (frames x bands in and out)."""
    e = 0.4
    dz = BAND_STEP_BARK
    n = fc.size
    m = np.arange(n)
    a_low = 10.0 ** (-2.7 * dz)
    a_up = 10.0 ** ((-2.4 - 23.0 / fc) * dz) * energy ** (0.2 * dz)
    g_low = (1.0 - a_low ** (m + 1)) / (1.0 - a_low)
    with np.errstate(divide="ignore", invalid="ignore"):
        g_up = np.where(np.isclose(a_up, 1.0), (n - m).astype(float),
                        (1.0 - a_up ** (n - m)) / (1.0 - a_up))
    ene = (energy / (g_low + g_up - 1.0)) ** e
    a_up_e = a_up ** e
    a_low_e = a_low ** e

    out = np.empty_like(ene)
    out[:, n - 1] = ene[:, n - 1]
    for j in range(n - 2, -1, -1):
        out[:, j] = a_low_e * out[:, j + 1] + ene[:, j]
    for j in range(n - 1):
        powers = a_up_e[:, j:j + 1] ** np.arange(1, n - j)[None, :]
        out[:, j + 1:] += ene[:, j:j + 1] * powers
    out = out ** (1.0 / e)
    if normalise:
        out = out / _spreading_norm(fc)
    return out


_NORM_CACHE = {}


def _spreading_norm(fc):
    key = fc.tobytes()
    if key not in _NORM_CACHE:
        _NORM_CACHE[key] = spread_frequency(np.ones((1, fc.size)), fc, normalise=False)[0]
    return _NORM_CACHE[key]


def spread_time(unsmeared: np.ndarray, fc: np.ndarray, sample_rate: float) -> np.ndarray:
    a = time_constant_coeff(fc, 0.030, 0.008, sample_rate)
    out = np.empty_like(unsmeared)
    state = np.zeros(fc.size)
    for n in range(unsmeared.shape[0]):
        state = a * state + (1.0 - a) * unsmeared[n]
        out[n] = np.maximum(state, unsmeared[n])
    return out


def ear_model_from_spectrum(spectrum: PeaqSpectrum) -> ExcitationPatterns:
    fs = spectrum.sample_rate
    bands = critical_bands()
    n_bins = spectrum.magnitude.shape[1]
    freqs = np.arange(n_bins) * fs / (2 * (n_bins - 1))
    weight = 10.0 ** (outer_middle_ear_db(freqs) / 20.0)
    weighted = spectrum.magnitude * weight
    group = grouping_matrix(bands, n_bins, fs)
    band_energy = np.maximum((weighted ** 2) @ group.T, E_MIN)
    unsmeared = spread_frequency(band_energy + internal_noise(bands.centre), bands.centre)
    excitation = spread_time(unsmeared, bands.centre, fs)
    return ExcitationPatterns(bands, fs, spectrum.magnitude ** 2, weighted, band_energy,
                              unsmeared, excitation, spectrum.frame_energy)


def ear_model_fft(signal: AudioSignal) -> ExcitationPatterns:
    """Ear model of one prepared, truncated signal with uniform framing."""
    return ear_model_from_spectrum(peaq_spectrum(signal))


# -- pre-processing of excitation patterns ------------------------------------

def loudness(excitation: np.ndarray, fc: np.ndarray) -> np.ndarray:
    """Total loudness per frame in sone."""
    const = 1.07664
    e0 = 1e4
    thresh = 10.0 ** (0.364 * (fc / 1000.0) ** -0.8)
    s = 10.0 ** (0.1 * (-2.0 - 2.05 * np.arctan(fc / 4000.0)
                        - 0.75 * np.arctan((fc / 1600.0) ** 2)))
    n = const * (thresh / (s * e0)) ** 0.23 * ((1.0 - s + s * excitation / thresh) ** 0.23 - 1.0)
    return 24.0 / fc.size * np.sum(np.maximum(n, 0.0), axis=1)


def adapt(ref: np.ndarray, test: np.ndarray, fc: np.ndarray, sample_rate: float):
    """Level and pattern adaptation; returns the spectrally adapted patterns."""
    a = time_constant_coeff(fc, 0.050, 0.008, sample_rate)
    n_frames, n = ref.shape
    m1, m2 = 3, 4
    lo = np.maximum(np.arange(n) - m1, 0)
    hi = np.minimum(np.arange(n) + m2, n - 1)
    width = hi - lo + 1
    p_ref = np.zeros(n)
    p_test = np.zeros(n)
    r_num = np.zeros(n)
    r_den = np.zeros(n)
    pc_ref = np.zeros(n)
    pc_test = np.zeros(n)
    out_ref = np.empty_like(ref)
    out_test = np.empty_like(test)
    for i in range(n_frames):
        p_ref = a * p_ref + (1.0 - a) * ref[i]
        p_test = a * p_test + (1.0 - a) * test[i]
        num = np.sum(np.sqrt(p_test * p_ref))
        den = np.sum(p_test)
        cl = (num / den) ** 2 if den > 0 else 1.0
        if cl > 1.0:
            ep_ref, ep_test = ref[i] / cl, test[i]
        else:
            ep_ref, ep_test = ref[i], test[i] * cl
        r_num = a * r_num + ep_test * ep_ref
        r_den = a * r_den + ep_ref * ep_ref
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio_ref = np.where(r_num >= r_den, 1.0, r_num / r_den)
            ratio_test = np.where(r_num >= r_den, np.where(r_num > 0, r_den / r_num, 1.0), 1.0)
        ratio_ref = np.nan_to_num(ratio_ref, nan=1.0)
        csum_ref = np.concatenate([[0.0], np.cumsum(ratio_ref)])
        csum_test = np.concatenate([[0.0], np.cumsum(ratio_test)])
        pc_ref = a * pc_ref + (1.0 - a) * (csum_ref[hi + 1] - csum_ref[lo]) / width
        pc_test = a * pc_test + (1.0 - a) * (csum_test[hi + 1] - csum_test[lo]) / width
        out_ref[i] = ep_ref * pc_ref
        out_test[i] = ep_test * pc_test
    return out_ref, out_test


def modulation(unsmeared: np.ndarray, fc: np.ndarray, sample_rate: float):
    """Modulation pattern and smoothed loudness-like average per frame."""
    a = time_constant_coeff(fc, 0.050, 0.008, sample_rate)
    ee = unsmeared ** 0.3
    rate = sample_rate / HOP
    mod = np.empty_like(ee)
    avg = np.empty_like(ee)
    d = np.zeros(fc.size)
    e_avg = np.zeros(fc.size)
    prev = np.zeros(fc.size)
    for i in range(ee.shape[0]):
        d = a * d + (1.0 - a) * rate * np.abs(ee[i] - prev)
        e_avg = a * e_avg + (1.0 - a) * ee[i]
        prev = ee[i]
        mod[i] = d / (1.0 + e_avg / 0.3)
        avg[i] = e_avg
    return mod, avg


# -- model output variables ----------------------------------------------------

@dataclass
class MovSet:
    bandwidth_ref: float
    bandwidth_test: float
    total_nmr: float
    win_mod_diff1: float
    adb: float
    ehs: float
    avg_mod_diff1: float
    avg_mod_diff2: float
    rms_noise_loud: float
    mfpd: float
    rel_dist_frames: float

    def values(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def modulation_differences(mod_ref, mod_test, avg_ref, fc):
    n = fc.size
    diff = np.abs(mod_test - mod_ref)
    md1 = 100.0 / n * np.sum(diff / (1.0 + mod_ref), axis=1)
    scaled = np.where(mod_test > mod_ref, diff, 0.1 * diff)
    md2 = 100.0 / n * np.sum(scaled / (0.01 + mod_ref), axis=1)
    weight = np.sum(avg_ref / (avg_ref + 100.0 * internal_noise(fc) ** 0.3), axis=1)
    return md1, md2, weight


def windowed_average(x: np.ndarray, length: int = WIN_MOD_DIFF_LENGTH) -> float:
    if x.size < length:
        return float(np.sqrt(np.mean(np.sqrt(x)) ** 4)) if x.size else 0.0
    run = np.convolve(np.sqrt(x), np.ones(length) / length, mode="valid")
    return float(np.sqrt(np.mean(run ** 4)))


def noise_loudness(mod_ref, mod_test, ep_ref, ep_test, fc):
    alpha, tf0, s0, e = 1.5, 0.15, 0.5, 0.23
    thresh = internal_noise(fc)
    s_ref = tf0 * mod_ref + s0
    s_test = tf0 * mod_test + s0
    beta = np.exp(-alpha * (ep_test - ep_ref) / ep_ref)
    num = np.maximum(s_test * ep_test - s_ref * ep_ref, 0.0)
    den = thresh + s_ref * ep_ref * beta
    nl = (thresh / s_test) ** e * ((1.0 + num / den) ** e - 1.0)
    return np.maximum(24.0 / fc.size * np.sum(nl, axis=1), 0.0)


def noise_to_mask(ref: ExcitationPatterns, test: ExcitationPatterns):
    """Per-frame mean and maximum noise-to-mask ratio (linear)."""
    fc = ref.bands.centre
    group = grouping_matrix(ref.bands, ref.power.shape[1], ref.sample_rate)
    noise = ((ref.weighted_magnitude - test.weighted_magnitude) ** 2) @ group.T
    k = np.arange(fc.size)
    offset_db = np.where(k * BAND_STEP_BARK <= 12.0, 3.0, 0.25 * k * BAND_STEP_BARK)
    mask = ref.excitation / 10.0 ** (offset_db / 10.0)
    ratio = noise / mask
    return ratio.mean(axis=1), ratio.max(axis=1)


def detection(ref_exc: np.ndarray, test_exc: np.ndarray):
    """Single-channel detection probability and steps above threshold per frame."""
    c = [-0.198719, 0.0550197, -0.00102438, 5.05622e-6, 9.01033e-11]
    d1, d2, g = 5.95072, 6.39468, 1.71332
    er = 10.0 * np.log10(ref_exc)
    et = 10.0 * np.log10(test_exc)
    level = 0.3 * np.maximum(er, et) + 0.7 * et
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        s = np.where(level > 0,
                     d1 * (d2 / level) ** g + c[0] + c[1] * level + c[2] * level ** 2
                     + c[3] * level ** 3 + c[4] * level ** 4,
                     1e30)
    diff = et - er
    b = np.where(er > et, 4.0, 6.0)
    a = 10.0 ** (np.log10(np.log10(2.0)) / b) / s
    pc = 1.0 - 10.0 ** (-((a * diff) ** b))
    qc = np.abs(np.trunc(diff)) / s
    p = 1.0 - np.prod(1.0 - pc, axis=1)
    q = np.sum(qc, axis=1)
    return p, q


def max_filtered_probability(p: np.ndarray, c0: float = 0.9, c1: float = 1.0) -> float:
    smoothed = 0.0
    peak = 0.0
    for value in p:
        smoothed = c0 * smoothed + (1.0 - c0) * value
        peak = max(c1 * peak, smoothed)
    return float(peak)


def average_distorted_block(p: np.ndarray, q: np.ndarray) -> float:
    distorted = p > 0.5
    count = int(distorted.sum())
    if count == 0:
        return 0.0
    total = q[distorted].sum()
    return float(np.log10(total / count)) if total > 0 else -0.5


def ehs_frame(ref_power: np.ndarray, test_power: np.ndarray, lags: int) -> float:
    """Peak of the spectrum of the normalised autocorrelation of the log
    ratio of weighted test and reference power spectra."""
    tiny = np.finfo(float).tiny
    d = np.log10(np.maximum(test_power[1:2 * lags], tiny)) - \
        np.log10(np.maximum(ref_power[1:2 * lags], tiny))
    head = d[:lags]
    e0 = np.dot(head, head)
    if e0 == 0.0:
        return 0.0
    corr = np.empty(lags)
    for lag in range(lags):
        tail = d[lag:lag + lags]
        el = np.dot(tail, tail)
        corr[lag] = np.dot(head, tail) / np.sqrt(e0 * el) if el > 0 else 0.0
    window = 0.5 * np.sqrt(8.0 / 3.0) * hann_symmetric(lags) / lags
    power = np.abs(np.fft.rfft(window * (corr - corr.mean()))) ** 2
    rising = power[1:][power[1:] > power[:-1]]
    return float(rising.max()) if rising.size else 0.0


def compute_movs(ref: ExcitationPatterns, test: ExcitationPatterns) -> MovSet:
    if ref.n_frames != test.n_frames:
        raise AudioError(
            f"frame-count mismatch between patterns ({ref.n_frames} vs {test.n_frames})")
    fs = ref.sample_rate
    fc = ref.bands.centre
    n_frames = ref.n_frames
    delay = min(int(np.ceil(AVERAGING_DELAY_S * fs / HOP)), n_frames - 1)

    # bandwidth
    bw_ref = bandwidth_per_frame(ref.power, fs, FRAME_SIZE, 10.0, floor_power=test.power)
    df = fs / FRAME_SIZE
    bw_test = bandwidth_per_frame(test.power, fs, FRAME_SIZE, 5.0, floor_power=test.power,
                                  search_from=bw_ref + df)
    bandwidth_ref = mean_wideband(bw_ref)
    bandwidth_test = mean_wideband(bw_test, select=bw_ref)

    # noise-to-mask ratio
    nmr_avg, nmr_max = noise_to_mask(ref, test)
    mean_nmr = nmr_avg.mean()
    floor = 10.0 ** (TOTAL_NMR_FLOOR_DB / 10.0)
    total_nmr = float(10.0 * np.log10(max(mean_nmr, floor)))
    rel_dist = float(np.mean(nmr_max > REL_DIST_THRESHOLD))

    # modulation differences
    mod_ref, avg_ref = modulation(ref.unsmeared, fc, fs)
    mod_test, _ = modulation(test.unsmeared, fc, fs)
    md1, md2, weight = modulation_differences(mod_ref, mod_test, avg_ref, fc)
    win_md1 = windowed_average(md1[delay:])
    w = weight[delay:]
    avg_md1 = float(np.sum(w * md1[delay:]) / np.sum(w)) if np.sum(w) > 0 else 0.0
    avg_md2 = float(np.sum(w * md2[delay:]) / np.sum(w)) if np.sum(w) > 0 else 0.0

    # noise loudness
    ep_ref, ep_test = adapt(ref.excitation, test.excitation, fc, fs)
    nl = noise_loudness(mod_ref, mod_test, ep_ref, ep_test, fc)
    loud = (loudness(ref.excitation, fc) > LOUDNESS_THRESHOLD_SONE) & \
           (loudness(test.excitation, fc) > LOUDNESS_THRESHOLD_SONE)
    first_loud = int(np.argmax(loud)) if loud.any() else 0
    start = max(delay, first_loud)
    if start >= n_frames:
        start = 0
    rms_nl = float(np.sqrt(np.mean(nl[start:] ** 2)))

    # detection probability
    p, q = detection(ref.excitation, test.excitation)
    mfpd = max_filtered_probability(p)
    adb = average_distorted_block(p, q)

    # harmonic structure of the error
    lags = 2 ** int(np.floor(np.log2(FRAME_SIZE / 2 * EHS_MAX_HZ / (fs / 2))))
    active = (ref.frame_energy > ENERGY_THRESHOLD) | (test.frame_energy > ENERGY_THRESHOLD)
    ref_w2 = ref.weighted_magnitude ** 2
    test_w2 = test.weighted_magnitude ** 2
    ehs_values = [ehs_frame(ref_w2[i], test_w2[i], lags) for i in np.flatnonzero(active)]
    ehs = 1000.0 * float(np.mean(ehs_values)) if ehs_values else 0.0

    return MovSet(bandwidth_ref, bandwidth_test, total_nmr, win_md1, adb, ehs,
                  avg_md1, avg_md2, rms_nl, mfpd, rel_dist)


def peaq_basic(ref: AudioSignal, test: AudioSignal, mode=AlignmentMode.INTERP_TO_TEST,
               beta: float = 1.0) -> MovSet:
    """All eleven basic MOVs for a prepared, truncated pair."""
    rs, ts = peaq_spectra(ref, test, mode, beta)
    return compute_movs(ear_model_from_spectrum(rs), ear_model_from_spectrum(ts))
