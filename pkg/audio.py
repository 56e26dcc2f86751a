"""Audio I/O and signal/feature primitives: STFT, log-magnitude, MFCC, VAD, filters."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import librosa
import numpy as np
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sp_fft
from scipy import ndimage, signal

from utils import DataError, UnsupportedFormatError, atomic_write

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-8
SYNTHESIS_FLOOR = 1e-8
PCM16_SCALE = 32768.0

# 25 ms / 10 ms framing shared by MFCC, VAD and the enhancer STFT.
FRAME_MS = 25.0
SHIFT_MS = 10.0

VAD_RANGE_DB = 30.0
VAD_SILENCE_ENERGY = 1e-12
VAD_SMOOTH_FRAMES = 5

A_WEIGHT_TAPS = 513
TELEPHONE_TAPS = 127
TELEPHONE_BAND_HZ = (300.0, 3400.0)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise DataError(f"waveform must be a non-empty 1-D signal, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise DataError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def with_samples(self, samples: np.ndarray) -> Waveform:
        return Waveform(samples, self.sample_rate)


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 200
    hop: int = 80
    fft_size: int = 256
    window_shape: str = "hamming"

    def __post_init__(self) -> None:
        if not 0 < self.hop <= self.window_length <= self.fft_size:
            raise DataError(
                f"STFT config needs 0 < hop <= window_length <= fft_size, got "
                f"hop={self.hop} window={self.window_length} fft={self.fft_size}"
            )
        if self.fft_size & (self.fft_size - 1):
            raise DataError(f"fft_size must be a power of two, got {self.fft_size}")
        if self.window_shape not in ("hamming", "hann"):
            raise DataError(f"window_shape must be hamming or hann, got {self.window_shape!r}")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    def window(self) -> np.ndarray:
        return signal.get_window(self.window_shape, self.window_length)


@dataclass(frozen=True, eq=False)
class ComplexSpectrogram:
    frames: np.ndarray
    config: StftConfig
    sample_rate: int

    def __post_init__(self) -> None:
        if self.frames.ndim != 2 or self.frames.shape[1] != self.config.bins:
            raise DataError(
                f"spectrogram needs {self.config.bins} columns, got shape {self.frames.shape}"
            )
        if not np.all(np.isfinite(self.frames)):
            raise DataError("spectrogram contains non-finite values")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    rows: np.ndarray
    frame_shift_ms: float = SHIFT_MS
    descriptor: str = ""

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise DataError(f"feature matrix must be 2-D, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise DataError(f"feature matrix {self.descriptor!r} contains non-finite values")
        object.__setattr__(self, "rows", rows)

    @property
    def num_frames(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def select(self, mask: FrameMask) -> FeatureMatrix:
        """Keep only the frames the mask marks active."""
        if len(mask) != self.num_frames:
            raise DataError(f"mask has {len(mask)} frames, features have {self.num_frames}")
        return FeatureMatrix(self.rows[mask.active], self.frame_shift_ms, self.descriptor)


@dataclass(frozen=True, eq=False)
class FrameMask:
    active: np.ndarray
    frame_shift_ms: float = SHIFT_MS
    window_ms: float = FRAME_MS

    def __post_init__(self) -> None:
        object.__setattr__(self, "active", np.asarray(self.active, dtype=bool).reshape(-1))

    def __len__(self) -> int:
        return self.active.size

    @property
    def num_active(self) -> int:
        return int(self.active.sum())


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def read_wav(path: Path | str) -> Waveform:
    """Read a PCM16 mono WAV file into [-1, 1) amplitudes."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"audio file not found: {path}")
    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise DataError(f"malformed WAV header in {path}: {e}") from e
    if info.format != "WAV" or info.subtype != "PCM_16" or info.channels != 1:
        raise UnsupportedFormatError(
            f"{path}: need PCM16 mono WAV, got {info.format}/{info.subtype} with {info.channels} channels"
        )
    data, rate = sf.read(str(path), dtype="int16", always_2d=False)
    return Waveform(data.astype(np.float64) / PCM16_SCALE, rate)


def write_wav(w: Waveform, path: Path | str) -> Path:
    """Write a waveform as PCM16 mono WAV; out-of-range samples are clipped."""
    clipped = np.clip(w.samples, -1.0, 1.0 - 1.0 / PCM16_SCALE)
    pcm = np.round(clipped * PCM16_SCALE).astype(np.int16)
    with atomic_write(path) as tmp:
        sf.write(str(tmp), pcm, w.sample_rate, subtype="PCM_16", format="WAV")
    return Path(path)


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------

def frame_count(num_samples: int, window_length: int, hop: int) -> int:
    if num_samples < window_length:
        return 0
    return (num_samples - window_length) // hop + 1


def _frames(x: np.ndarray, window_length: int, hop: int) -> np.ndarray:
    return sliding_window_view(x, window_length)[::hop]


def stft(w: Waveform, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    if len(w) < cfg.window_length:
        raise DataError(f"signal of {len(w)} samples is shorter than one {cfg.window_length}-sample window")
    frames = _frames(w.samples, cfg.window_length, cfg.hop) * cfg.window()
    spec = sp_fft.rfft(frames, n=cfg.fft_size, axis=1)
    return ComplexSpectrogram(spec, cfg, w.sample_rate)


def istft(s: ComplexSpectrogram) -> Waveform:
    """Weighted overlap-add inverse of :func:`stft`."""
    cfg = s.config
    if s.frames.shape[1] != cfg.bins:
        raise DataError(f"spectrogram has {s.frames.shape[1]} bins, config expects {cfg.bins}")
    window = cfg.window()
    frames = sp_fft.irfft(s.frames, n=cfg.fft_size, axis=1)[:, : cfg.window_length] * window
    length = (s.num_frames - 1) * cfg.hop + cfg.window_length
    out = np.zeros(length)
    norm = np.zeros(length)
    win_sq = window**2
    for t in range(s.num_frames):
        start = t * cfg.hop
        out[start : start + cfg.window_length] += frames[t]
        norm[start : start + cfg.window_length] += win_sq
    return Waveform(out / np.maximum(norm, SYNTHESIS_FLOOR), s.sample_rate)


def log_magnitude(s: ComplexSpectrogram) -> FeatureMatrix:
    rows = np.log(np.abs(s.frames) + LOG_FLOOR)
    shift = 1000.0 * s.config.hop / s.sample_rate
    return FeatureMatrix(rows, shift, f"logmag{s.config.bins}")


# ---------------------------------------------------------------------------
# MFCC
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MfccVariant:
    n_mels: int
    fmin: float
    fmax: float
    n_ceps: int


MFCC_VARIANTS = {
    "ivec": MfccVariant(n_mels=24, fmin=120.0, fmax=3800.0, n_ceps=20),
    "xvec": MfccVariant(n_mels=23, fmin=20.0, fmax=3700.0, n_ceps=23),
}

_MFCC_STFT = StftConfig(window_length=200, hop=80, fft_size=256, window_shape="hamming")


def mfcc(w: Waveform, variant: str = "ivec") -> FeatureMatrix:
    """Mel-cepstra on 25 ms Hamming frames every 10 ms (8 kHz input only)."""
    if w.sample_rate != 8000:
        raise DataError(f"MFCC needs 8000 Hz audio, got {w.sample_rate} Hz")
    try:
        v = MFCC_VARIANTS[variant]
    except KeyError:
        raise DataError(f"unknown MFCC variant {variant!r}; choose from {sorted(MFCC_VARIANTS)}") from None
    power = np.abs(stft(w, _MFCC_STFT).frames) ** 2
    fbank = librosa.filters.mel(
        sr=w.sample_rate, n_fft=_MFCC_STFT.fft_size, n_mels=v.n_mels,
        fmin=v.fmin, fmax=v.fmax, htk=True, norm=None,
    )
    energies = np.log(np.maximum(power @ fbank.T, LOG_FLOOR))
    ceps = sp_fft.dct(energies, type=2, norm="ortho", axis=1)[:, : v.n_ceps]
    return FeatureMatrix(ceps, SHIFT_MS, f"mfcc{v.n_ceps}")


def _regression_delta(x: np.ndarray) -> np.ndarray:
    # +-2 frame regression, denominator 2 * (1 + 4) = 10
    p = np.pad(x, ((2, 2), (0, 0)), mode="edge")
    return ((p[3:-1] - p[1:-3]) + 2.0 * (p[4:] - p[:-4])) / 10.0


def append_deltas(f: FeatureMatrix) -> FeatureMatrix:
    if f.num_frames < 5:
        raise DataError(f"deltas need at least 5 frames, got {f.num_frames}")
    d1 = _regression_delta(f.rows)
    d2 = _regression_delta(d1)
    return FeatureMatrix(np.hstack([f.rows, d1, d2]), f.frame_shift_ms, f"{f.descriptor}+dd")


def stmvn(f: FeatureMatrix, window_s: float = 3.0) -> FeatureMatrix:
    """Short-time mean/variance normalization over a centered sliding window."""
    if window_s <= 0:
        raise DataError(f"window must be positive, got {window_s}")
    half = int(round(window_s * 1000.0 / f.frame_shift_ms)) // 2
    x = f.rows
    out = np.empty_like(x)
    for t in range(f.num_frames):
        seg = x[max(0, t - half) : t + half + 1]
        mean = seg.mean(axis=0)
        std = np.maximum(seg.std(axis=0), VAR_FLOOR)
        out[t] = (x[t] - mean) / std
    return FeatureMatrix(out, f.frame_shift_ms, f.descriptor)


# ---------------------------------------------------------------------------
# Filters
# ---------------------------------------------------------------------------

def a_weighting_response(freqs: np.ndarray) -> np.ndarray:
    """Analytic A-weighting magnitude, normalized to unity at 1 kHz."""
    def ra(f: np.ndarray) -> np.ndarray:
        f2 = np.asarray(f, dtype=np.float64) ** 2
        num = 12194.0**2 * f2**2
        den = (f2 + 20.6**2) * np.sqrt((f2 + 107.7**2) * (f2 + 737.9**2)) * (f2 + 12194.0**2)
        return num / den
    return ra(freqs) / ra(np.array(1000.0))


def _a_weight_taps(sample_rate: int) -> np.ndarray:
    nyquist = sample_rate / 2.0
    grid = np.linspace(0.0, nyquist, 1025)
    return signal.firwin2(A_WEIGHT_TAPS, grid, a_weighting_response(grid), fs=sample_rate)


_A_WEIGHT_CACHE: dict[int, np.ndarray] = {}


def a_weight(w: Waveform) -> Waveform:
    """Apply the A-weighting curve with a linear-phase FIR, delay compensated."""
    if w.sample_rate not in (8000, 16000):
        raise DataError(f"A-weighting supports 8000/16000 Hz, got {w.sample_rate}")
    taps = _A_WEIGHT_CACHE.get(w.sample_rate)
    if taps is None:
        taps = _A_WEIGHT_CACHE.setdefault(w.sample_rate, _a_weight_taps(w.sample_rate))
    delay = (A_WEIGHT_TAPS - 1) // 2
    full = signal.fftconvolve(w.samples, taps)
    return w.with_samples(full[delay : delay + len(w)])


def fir_convolve(w: Waveform, h: np.ndarray) -> Waveform:
    """Linear convolution truncated to the input length; peak-limited to the input peak."""
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    if h.size == 0:
        raise DataError("impulse response is empty")
    out = signal.fftconvolve(w.samples, h)[: len(w)]
    peak = np.max(np.abs(out))
    if peak > 1.0:
        out = out * (np.max(np.abs(w.samples)) / peak)
    return w.with_samples(out)


_TELEPHONE_TAPS = signal.firwin(
    TELEPHONE_TAPS, list(TELEPHONE_BAND_HZ), pass_zero=False, window="hamming", fs=8000
)


def telephone_filter(w: Waveform) -> Waveform:
    if w.sample_rate != 8000:
        raise DataError(f"telephone channel needs 8000 Hz audio, got {w.sample_rate}")
    return fir_convolve(w, _TELEPHONE_TAPS)


def measure_rms_db(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    return 10.0 * np.log10(max(float(np.mean(x**2)), 1e-30))


# ---------------------------------------------------------------------------
# VAD
# ---------------------------------------------------------------------------

def _framing(sample_rate: int) -> tuple[int, int]:
    return int(round(FRAME_MS * sample_rate / 1000.0)), int(round(SHIFT_MS * sample_rate / 1000.0))


def energy_vad(w: Waveform) -> FrameMask:
    """Mark frames within 30 dB of the loudest frame, then 5-frame majority smoothing."""
    win, hop = _framing(w.sample_rate)
    if len(w) < win:
        raise DataError(f"VAD needs at least one {FRAME_MS:g} ms frame, got {len(w)} samples")
    energy = np.mean(_frames(w.samples, win, hop) ** 2, axis=1)
    if energy.max() < VAD_SILENCE_ENERGY:
        return FrameMask(np.zeros(energy.size, dtype=bool))
    log_e = 10.0 * np.log10(np.maximum(energy, 1e-30))
    raw = log_e >= log_e.max() - VAD_RANGE_DB
    smoothed = ndimage.median_filter(raw.astype(np.uint8), size=VAD_SMOOTH_FRAMES, mode="nearest")
    return FrameMask(smoothed.astype(bool))


def active_sample_mask(mask: FrameMask, num_samples: int, sample_rate: int) -> np.ndarray:
    """Boolean per-sample mask covering the union of active frames."""
    win = int(round(mask.window_ms * sample_rate / 1000.0))
    hop = int(round(mask.frame_shift_ms * sample_rate / 1000.0))
    coverage = np.zeros(num_samples + 1, dtype=np.int64)
    starts = np.flatnonzero(mask.active) * hop
    np.add.at(coverage, np.minimum(starts, num_samples), 1)
    np.add.at(coverage, np.minimum(starts + win, num_samples), -1)
    return np.cumsum(coverage[:-1]) > 0
