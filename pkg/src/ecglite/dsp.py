"""ECG signal conditioning.

Three stages run in order on every channel: a Butterworth low-pass for
powerline noise, wavelet baseline-wander removal (``fixed = original -
baseline``), then an optional centered rolling mean. A quality gate and an
STFT spectrogram support dataset filtering and reporting.
"""
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import (
    DecompositionError,
    DesignError,
    InvalidWindow,
    ReconstructionError,
    SignalTooShort,
)
from .wfdb_ingest import EcgRecord

DB_FLOOR = -120.0
QUALITY_THRESHOLD = 0.10
GRID_BITS = 40


@dataclass(frozen=True)
class PreprocessConfig:
    lowpass_order: int = 15
    lowpass_cutoff_hz: float = 45.0
    wavelet: str = "db4"
    baseline_target_hz: float = 0.5
    rolling_window: int = 100
    rolling_enabled: bool = True
    zero_phase: bool = True
    quality_threshold: float = QUALITY_THRESHOLD

    def validate(self, fs):
        if self.lowpass_order < 1:
            raise DesignError("lowpass_order must be >= 1")
        if not 0 < self.lowpass_cutoff_hz < fs / 2:
            raise DesignError(
                f"cutoff {self.lowpass_cutoff_hz} Hz must lie below Nyquist ({fs / 2} Hz)")
        if self.rolling_window < 1:
            raise InvalidWindow("rolling_window must be >= 1")
        if self.baseline_target_hz <= 0:
            raise DesignError("baseline_target_hz must be positive")
        get_wavelet(self.wavelet)

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# --- Butterworth low-pass ----------------------------------------------------

@dataclass(frozen=True)
class SosCascade:
    """Cascade of biquads; rows are ``[b0, b1, b2, 1, a1, a2]``."""

    sections: np.ndarray
    design_order: int
    cutoff_hz: float
    sampling_rate: float

    def poles(self):
        out = []
        for _, _, _, _, a1, a2 in self.sections:
            out.extend(np.roots([1.0, a1, a2]) if a2 != 0 else [-a1])
        return np.asarray(out)

    def response(self, freqs_hz):
        """Complex frequency response at ``freqs_hz``."""
        z = np.exp(-2j * np.pi * np.asarray(freqs_hz, dtype=np.float64) / self.sampling_rate)
        h = np.ones_like(z)
        for b0, b1, b2, _, a1, a2 in self.sections:
            h *= (b0 + b1 * z + b2 * z * z) / (1.0 + a1 * z + a2 * z * z)
        return h


def design_lowpass(order, cutoff_hz, fs):
    """Butterworth low-pass via the bilinear transform with pre-warping.

    Sections are ordered by ascending pole Q and each has unity DC gain.
    """
    if order < 1:
        raise DesignError("order must be >= 1")
    if not 0 < cutoff_hz < fs / 2:
        raise DesignError(f"cutoff {cutoff_hz} Hz is not inside (0, {fs / 2}) Hz")

    warped = 2.0 * fs * math.tan(math.pi * cutoff_hz / fs)
    k = np.arange(1, order + 1)
    analog = warped * np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))

    sections = []
    for p in analog:
        if p.imag < -1e-12 * warped:
            continue  # conjugate of a pole already handled
        q = abs(p) / (-2.0 * p.real)
        zp = (2 * fs + p) / (2 * fs - p)
        if abs(p.imag) <= 1e-12 * warped:
            a1, a2 = -zp.real, 0.0
            g = (1.0 + a1) / 2.0
            row = [g, g, 0.0, 1.0, a1, a2]
        else:
            a1, a2 = -2.0 * zp.real, abs(zp) ** 2
            g = (1.0 + a1 + a2) / 4.0
            row = [g, 2 * g, g, 1.0, a1, a2]
        sections.append((q, row))
    sections.sort(key=lambda item: item[0])
    sos = np.array([row for _, row in sections], dtype=np.float64)
    return SosCascade(sos, order, float(cutoff_hz), float(fs))


def _steady_state(sos):
    # DF2T state that makes a unit-DC input pass through without transient
    zi = np.empty((sos.shape[0], 2))
    dc = 1.0
    for s, (b0, b1, b2, _, a1, a2) in enumerate(sos):
        out = dc * (b0 + b1 + b2) / (1.0 + a1 + a2)
        zi[s, 1] = b2 * dc - a2 * out
        zi[s, 0] = b1 * dc - a1 * out + zi[s, 1]
        dc = out
    return zi


def apply_filter(sos, x, zero_phase=True):
    """Run the cascade over ``x`` (1-D, or 2-D with one signal per row).

    With ``zero_phase`` the signal is odd-reflected by ``3 * order`` samples
    at both ends and filtered forward then backward.
    """
    x = np.asarray(x, dtype=np.float64)
    one_d = x.ndim == 1
    rows = np.atleast_2d(x)
    n = rows.shape[1]
    pad = 3 * sos.design_order
    if n <= pad:
        raise SignalTooShort(f"need more than {pad} samples, got {n}")

    zi = _steady_state(sos.sections)
    coeffs = np.ascontiguousarray(sos.sections)
    if not zero_phase:
        y = kernels.sosfilt(coeffs, rows, zi[:, None, :] * rows[None, :, :1])
        return y[0] if one_d else y

    left = 2 * rows[:, :1] - rows[:, pad:0:-1]
    right = 2 * rows[:, -1:] - rows[:, -2 : -pad - 2 : -1]
    ext = np.ascontiguousarray(np.concatenate([left, rows, right], axis=1))
    y = kernels.sosfilt(coeffs, ext, zi[:, None, :] * ext[None, :, :1])
    y = np.ascontiguousarray(y[:, ::-1])
    y = kernels.sosfilt(coeffs, y, zi[:, None, :] * y[None, :, :1])
    y = y[:, ::-1][:, pad:-pad]
    y = np.ascontiguousarray(y)
    return y[0] if one_d else y


# --- discrete wavelet transform ------------------------------------------------

_DAUBECHIES = {
    "db1": [0.7071067811865476, 0.7071067811865476],
    "db2": [-0.12940952255126037, 0.2241438680420134,
            0.8365163037378079, 0.48296291314453416],
    "db4": [-0.010597401785069032, 0.0328830116668852, 0.030841381835560764,
            -0.18703481171909309, -0.027983769416859854, 0.6308807679298589,
            0.7148465705529157, 0.2303778133088965],
}
_ALIASES = {"haar": "db1"}


@dataclass(frozen=True)
class WaveletSpec:
    name: str
    dec_lo: np.ndarray
    dec_hi: np.ndarray
    rec_lo: np.ndarray
    rec_hi: np.ndarray

    @property
    def length(self):
        return len(self.dec_lo)


def get_wavelet(name):
    key = _ALIASES.get(name.lower(), name.lower())
    if key not in _DAUBECHIES:
        raise DesignError(f"unknown wavelet {name!r}; available: {sorted(_DAUBECHIES)}")
    dec_lo = np.array(_DAUBECHIES[key])
    signs = (-1.0) ** np.arange(len(dec_lo))
    rec_hi = signs * dec_lo
    return WaveletSpec(key, dec_lo, rec_hi[::-1].copy(), dec_lo[::-1].copy(), rec_hi)


@dataclass
class DwtCoefficients:
    approximation: np.ndarray
    details: list  # deepest level first
    original_length: int
    levels: int
    wavelet: WaveletSpec
    level_lengths: list = field(default_factory=list)  # input length at each level, finest first


def _dwt_step(x, wav):
    f = wav.length
    ext = np.pad(x, f - 1, mode="symmetric")
    n_out = (len(x) + f - 1) // 2
    lo = np.convolve(ext, wav.dec_lo, mode="valid")[1 : 2 * n_out : 2]
    hi = np.convolve(ext, wav.dec_hi, mode="valid")[1 : 2 * n_out : 2]
    return lo, hi


def _idwt_step(a, d, wav, out_len):
    f = wav.length
    up_a = np.zeros(2 * len(a))
    up_a[::2] = a
    up_d = np.zeros(2 * len(d))
    up_d[::2] = d
    full = np.convolve(up_a, wav.rec_lo) + np.convolve(up_d, wav.rec_hi)
    return full[f - 2 : f - 2 + out_len]


def dwt_analyze(x, wavelet="db4", levels=1):
    """Multilevel Mallat decomposition with half-sample symmetric extension."""
    wav = wavelet if isinstance(wavelet, WaveletSpec) else get_wavelet(wavelet)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DecompositionError("dwt_analyze expects a 1-D signal")
    if levels < 1:
        raise DecompositionError("levels must be >= 1")
    if len(x) < 2 ** levels:
        raise DecompositionError(f"{levels} levels need at least {2 ** levels} samples, got {len(x)}")
    details, lengths = [], []
    a = x
    for _ in range(levels):
        lengths.append(len(a))
        a, d = _dwt_step(a, wav)
        details.append(d)
    return DwtCoefficients(a, details[::-1], len(x), levels, wav, lengths)


def dwt_synthesize(coeffs):
    """Inverse of :func:`dwt_analyze`."""
    wav = coeffs.wavelet
    if len(coeffs.details) != coeffs.levels or len(coeffs.level_lengths) != coeffs.levels:
        raise ReconstructionError("level count does not match the stored coefficient lists")
    a = np.asarray(coeffs.approximation, dtype=np.float64)
    for lvl, d in enumerate(coeffs.details):
        d = np.asarray(d, dtype=np.float64)
        out_len = coeffs.level_lengths[coeffs.levels - 1 - lvl]
        expected = (out_len + wav.length - 1) // 2
        if len(a) != expected or len(d) != expected:
            raise ReconstructionError(
                f"level {coeffs.levels - lvl}: expected {expected} coefficients, "
                f"got {len(a)} approximation / {len(d)} detail")
        a = _idwt_step(a, d, wav, out_len)
    if len(a) != coeffs.original_length:
        raise ReconstructionError("reconstructed length differs from original_length")
    return a


# --- baseline wander ---------------------------------------------------------

def baseline_levels(fs, target_hz=0.5):
    """Smallest L such that the level-L approximation band fs / 2**(L+1) <= target."""
    level = 1
    while fs / 2 ** (level + 1) > target_hz:
        level += 1
    return level


def grid_quantum(x):
    """Spacing of the fixed-point carrier grid for ``x``: 2**-GRID_BITS of its peak.

    Per row for 2-D input. Zero rows get quantum 0 (nothing to snap).
    """
    peak = np.max(np.abs(x), axis=-1, keepdims=True) if np.ndim(x) else np.abs(x)
    _, e = np.frexp(peak)
    return np.where(peak > 0, np.ldexp(1.0, e - 1 - GRID_BITS), 0.0)


def to_grid(x, quantum=None):
    """Round ``x`` to multiples of ``quantum`` (default :func:`grid_quantum`).

    Values on one grid with magnitudes below 2**53 quanta add and subtract
    exactly, which is what makes ``baseline + fixed == original`` hold bit
    for bit.
    """
    x = np.asarray(x, dtype=np.float64)
    q = grid_quantum(x) if quantum is None else quantum
    safe = np.where(q > 0, q, 1.0)
    return np.where(q > 0, np.round(x / safe) * safe, x)


def estimate_baseline(x, fs, config=PreprocessConfig()):
    """Approximation-only reconstruction, snapped to the carrier grid of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    levels = baseline_levels(fs, config.baseline_target_hz)
    c = dwt_analyze(x, config.wavelet, levels)
    c.details = [np.zeros_like(d) for d in c.details]
    return to_grid(dwt_synthesize(c), grid_quantum(x))


def remove_baseline(x, fs, config=PreprocessConfig()):
    x = np.asarray(x, dtype=np.float64)
    return x - estimate_baseline(x, fs, config)


# --- smoothing -------------------------------------------------------------------

def rolling_mean(x, window):
    """Centered moving average; edge windows shrink to the available samples.

    Even windows take the extra sample on the left, matching pandas'
    ``rolling(window, center=True, min_periods=1)``.
    """
    if window < 1:
        raise InvalidWindow(f"window must be >= 1, got {window}")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    left, right = window // 2, (window - 1) // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    sums = np.lib.stride_tricks.sliding_window_view(np.pad(x, pad), window, axis=-1).sum(axis=-1)
    idx = np.arange(n)
    counts = np.minimum(idx + right, n - 1) - np.maximum(idx - left, 0) + 1
    out = sums / counts
    # summation rounding can land an ulp outside the data range
    return np.clip(out, x.min(axis=-1, keepdims=True), x.max(axis=-1, keepdims=True))


# --- quality gate ------------------------------------------------------------------

def low_band_fraction(x, fs, config=PreprocessConfig()):
    x = np.asarray(x, dtype=np.float64)
    total = float(np.dot(x, x))
    if total == 0.0:
        return 0.0
    b = estimate_baseline(x, fs, config)
    return float(np.dot(b, b)) / total


def quality_gate(record, fs=None, config=PreprocessConfig()):
    """Return ``("keep", None)`` or ``("drop", reason)`` for a corrected record."""
    fs = record.sampling_rate if fs is None else fs
    for lead, row in zip(record.lead_names, record.samples):
        frac = low_band_fraction(row, fs, config)
        if frac > config.quality_threshold:
            return "drop", f"lead {lead}: {frac:.1%} of energy below {config.baseline_target_hz} Hz"
    return "keep", None


# --- spectrogram ---------------------------------------------------------------------

def stft_spectrogram(x, fs, window=256, hop=128):
    """Hann-windowed STFT magnitude in dB, shape ``(window // 2 + 1, frames)``."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < window:
        raise SignalTooShort(f"signal of {len(x)} samples is shorter than window {window}")
    n_frames = 1 + (len(x) - window) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[::hop][:n_frames]
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(window) / window)
    mag = np.abs(np.fft.rfft(frames * hann, axis=1)).T
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag)
    return np.maximum(db, DB_FLOOR)


def spectrogram_axes(n_samples, fs, window=256, hop=128):
    """(bin frequencies in Hz, frame-centre times in seconds)."""
    n_frames = 1 + (n_samples - window) // hop
    freqs = np.arange(window // 2 + 1) * fs / window
    times = (np.arange(n_frames) * hop + window / 2) / fs
    return freqs, times


# --- whole-record pipeline ------------------------------------------------------------

def preprocess_signal(rows, fs, config=PreprocessConfig(), sos=None):
    """Filter, remove baseline and optionally smooth each row of ``rows``."""
    config.validate(fs)
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if sos is None:
        sos = design_lowpass(config.lowpass_order, config.lowpass_cutoff_hz, fs)
    out = to_grid(apply_filter(sos, rows, zero_phase=config.zero_phase))
    out = np.stack([remove_baseline(r, fs, config) for r in out])
    if config.rolling_enabled:
        out = rolling_mean(out, config.rolling_window)
    return out


def preprocess_record(record, config=PreprocessConfig()):
    samples = preprocess_signal(record.samples, record.sampling_rate, config)
    return EcgRecord(record.ecg_id, record.sampling_rate, samples,
                     list(record.lead_names), record.invalid_samples)
