import numpy as np
import pytest

from tsmqual.audio_io import AudioSignal

FS = 44100


def tone(freq, seconds=1.0, fs=FS, amp=1.0, phase=0.0):
    t = np.arange(int(round(seconds * fs))) / fs
    return amp * np.sin(2 * np.pi * freq * t + phase)


def music_like(seconds=5.0, fs=FS, seed=0):
    """Harmonic notes with decaying envelopes, clicks and a little noise."""
    rng = np.random.default_rng(seed)
    n = int(seconds * fs)
    x = 0.01 * rng.standard_normal(n)
    t = np.arange(n) / fs
    note_len = fs // 4
    for start in range(0, n - note_len, note_len):
        f0 = rng.choice([220.0, 261.6, 329.6, 392.0, 440.0])
        tt = t[:note_len]
        env = np.exp(-tt * 6.0)
        for h in range(1, 5):
            x[start:start + note_len] += env * np.sin(2 * np.pi * f0 * h * tt) / h
        x[start] += 0.8
    return x


def ola_stretch(x, beta, frame=1024):
    """Crude windowed overlap-add time-scaler used only to fabricate test
    pairs. Output length is about len(x) / beta."""
    hs = frame // 2
    ha = beta * hs
    w = np.hanning(frame)
    n_out = int(round(len(x) / beta))
    n_frames = int((n_out - frame) // hs) + 1
    y = np.zeros(n_out + frame)
    norm = np.zeros(n_out + frame)
    padded = np.concatenate([x, np.zeros(frame + int(ha) + 1)])
    for m in range(max(n_frames, 1)):
        a = int(round(m * ha))
        y[m * hs:m * hs + frame] += w * padded[a:a + frame]
        norm[m * hs:m * hs + frame] += w
    y = y[:n_out] / np.maximum(norm[:n_out], 1e-3)
    return y


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def signal():
    return AudioSignal(music_like(2.0), FS)


def phase_vocoder(x, beta, frame=2048, hs=512):
    """Naive phase vocoder (no phase locking): output length ~ len(x) / beta."""
    ha = hs * beta
    w = np.hanning(frame)
    n_frames = int((len(x) - frame) / ha) + 1
    omega = 2 * np.pi * np.arange(frame // 2 + 1) / frame
    y = np.zeros(n_frames * hs + frame)
    norm = np.zeros_like(y)
    prev_phase = acc = None
    for m in range(n_frames):
        a = int(round(m * ha))
        spec = np.fft.rfft(w * x[a:a + frame])
        phase = np.angle(spec)
        if acc is None:
            acc = phase.copy()
        else:
            dev = phase - prev_phase - omega * ha
            dev -= 2 * np.pi * np.round(dev / (2 * np.pi))
            acc = acc + (omega * ha + dev) * hs / ha
        prev_phase = phase
        y[m * hs:m * hs + frame] += w * np.fft.irfft(np.abs(spec) * np.exp(1j * acc), frame)
        norm[m * hs:m * hs + frame] += w ** 2
    return y / np.maximum(norm, 1e-3)


# -- acceptance verdicts -------------------------------------------------------

_verdicts = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if report.skipped:
        _verdicts.setdefault(number, (title, "SKIP"))
    elif report.failed:
        _verdicts[number] = (title, "FAIL")
    elif call.when == "call":
        _verdicts.setdefault(number, (title, "PASS"))


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_verdicts):
        title, verdict = _verdicts[number]
        terminalreporter.write_line(f"criterion {number:2d} {verdict:4s} {title}")
