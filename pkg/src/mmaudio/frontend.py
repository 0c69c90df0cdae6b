"""Audio frontend: WAV decoding, mono/16 kHz conversion, 1 s segmentation and
100x64 log-Mel frames.

Frame-count arithmetic: a 16,000-sample segment framed with a 400-sample
window and 160-sample hop gives only floor((16000 - 400) / 160) + 1 = 98
frames. Each segment is therefore zero-padded by 120 samples on both sides
(16,240 samples), which yields (16240 - 400) / 160 + 1 = 100 frames.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import InvalidConfigError, InvalidInputError, InvalidShapeError

TARGET_RATE = 16000
SEGMENT_SAMPLES = 16000
WINDOW_SAMPLES = 400  # 25 ms
HOP_SAMPLES = 160  # 10 ms
N_FRAMES = 100
N_MELS = 64
N_FFT = 512
FMIN = 125.0
FMAX = 7500.0
LOG_OFFSET = 0.01
SEGMENT_PAD = 120

RECORD_MAGIC = b"LMEL"
RECORD_VERSION = 1
# magic, version, rows, cols, source_offset (seconds)
_RECORD_HEADER = struct.Struct("<4sIIId")


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = TARGET_RATE
    n_fft: int = N_FFT
    n_mels: int = N_MELS
    fmin: float = FMIN
    fmax: float = FMAX
    log_offset: float = LOG_OFFSET

    def __post_init__(self):
        if self.log_offset <= 0:
            raise InvalidConfigError("log_offset must be positive")
        if self.n_fft < WINDOW_SAMPLES:
            raise InvalidConfigError(f"n_fft must be >= {WINDOW_SAMPLES}")
        if self.sample_rate != TARGET_RATE:
            raise InvalidConfigError("the frontend operates at 16 kHz only")


@dataclass(frozen=True)
class Waveform:
    """PCM samples in [-1, 1]. ``samples`` is (n,) for mono or (n, channels)."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim not in (1, 2):
            raise InvalidInputError("samples must be 1-D or (n, channels)")
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("samples must be finite")
        object.__setattr__(self, "samples", samples)

    @property
    def channels(self) -> int:
        return 1 if self.samples.ndim == 1 else self.samples.shape[1]

    @property
    def duration(self) -> float:
        return self.samples.shape[0] / self.sample_rate

    def __len__(self):
        return self.samples.shape[0]


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_fft // 2 + 1)
    fmin: float
    fmax: float
    n_fft: int
    sample_rate: int = TARGET_RATE
    centers: np.ndarray = field(default=None, repr=False)

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class LogMelFrame:
    values: np.ndarray  # (100, 64)
    source_offset: float = 0.0

    def __post_init__(self):
        if self.values.shape != (N_FRAMES, N_MELS):
            raise InvalidShapeError(f"log-mel frame must be {N_FRAMES}x{N_MELS}, got {self.values.shape}")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def standardize(wave: Waveform) -> Waveform:
    """Down-mix to mono and resample to 16 kHz by linear interpolation."""
    if len(wave) == 0:
        raise InvalidInputError("empty sample buffer")
    samples = wave.samples
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if wave.sample_rate == TARGET_RATE:
        return Waveform(samples, TARGET_RATE)
    n_in = samples.shape[0]
    n_out = max(1, int(round(n_in * TARGET_RATE / wave.sample_rate)))
    t_out = np.arange(n_out) * (wave.sample_rate / TARGET_RATE)
    return Waveform(np.interp(t_out, np.arange(n_in), samples), TARGET_RATE)


def segment_1s(wave: Waveform) -> list[Waveform]:
    """Non-overlapping 1 s segments from offset 0; a trailing partial second is dropped."""
    if wave.sample_rate != TARGET_RATE or wave.channels != 1:
        raise InvalidInputError("segment_1s expects a standardized waveform")
    n = len(wave) // SEGMENT_SAMPLES
    return [
        Waveform(wave.samples[i * SEGMENT_SAMPLES:(i + 1) * SEGMENT_SAMPLES], TARGET_RATE)
        for i in range(n)
    ]


def build_mel_filterbank(n_fft=N_FFT, n_mels=N_MELS, fmin=FMIN, fmax=FMAX, sample_rate=TARGET_RATE):
    """Triangular filters with peaks equally spaced on the HTK mel scale."""
    if not 0 <= fmin < fmax <= sample_rate / 2:
        raise InvalidConfigError(f"need 0 <= fmin < fmax <= sample_rate/2, got fmin={fmin}, fmax={fmax}")
    if n_mels < 1:
        raise InvalidConfigError("n_mels must be >= 1")
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    return MelFilterbank(weights, float(fmin), float(fmax), n_fft, sample_rate, centers=edges[1:-1].copy())


def hamming(n=WINDOW_SAMPLES):
    # periodic form
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_magnitude(samples, n_fft=N_FFT):
    padded = np.pad(np.asarray(samples, dtype=np.float64), SEGMENT_PAD)
    frames = np.lib.stride_tricks.sliding_window_view(padded, WINDOW_SAMPLES)[::HOP_SAMPLES]
    return np.abs(np.fft.rfft(frames * hamming(), n=n_fft, axis=-1))


def log_mel(segment: Waveform, fb: MelFilterbank, config: FrontendConfig | None = None, source_offset=0.0):
    config = config or FrontendConfig()
    if segment.sample_rate != TARGET_RATE or segment.channels != 1:
        raise InvalidInputError("log_mel expects a mono 16 kHz segment")
    if len(segment) != SEGMENT_SAMPLES:
        raise InvalidInputError(f"segment must have {SEGMENT_SAMPLES} samples, got {len(segment)}")
    if fb.n_fft != config.n_fft:
        raise InvalidConfigError("filterbank n_fft does not match config")
    mel = stft_magnitude(segment.samples, config.n_fft) @ fb.weights.T
    return LogMelFrame(np.log(mel + config.log_offset), source_offset)


def featurize_waveform(wave: Waveform, config: FrontendConfig | None = None, fb=None):
    """Full chain for one clip: standardize, segment, log-Mel. Returns LogMelFrames."""
    config = config or FrontendConfig()
    fb = fb or build_mel_filterbank(config.n_fft, config.n_mels, config.fmin, config.fmax)
    segments = segment_1s(standardize(wave))
    return [log_mel(seg, fb, config, source_offset=float(i)) for i, seg in enumerate(segments)]


def read_wav(path) -> Waveform:
    """Decode a RIFF WAV holding 16-bit PCM or 32-bit float samples."""
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise InvalidInputError(f"{path}: unsupported WAV sample type {data.dtype}")
    return Waveform(samples, int(rate))


def write_wav(path, wave: Waveform, pcm16=True):
    if pcm16:
        data = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = wave.samples.astype(np.float32)
    wavfile.write(path, wave.sample_rate, data)


def write_record(path, frame: LogMelFrame):
    """Spectrogram record: little-endian header (magic, version, rows, cols, offset)
    followed by rows*cols float32 values in row-major order."""
    rows, cols = frame.values.shape
    with open(path, "wb") as fh:
        fh.write(_RECORD_HEADER.pack(RECORD_MAGIC, RECORD_VERSION, rows, cols, frame.source_offset))
        fh.write(np.ascontiguousarray(frame.values, dtype="<f4").tobytes())


def read_record(path) -> LogMelFrame:
    with open(path, "rb") as fh:
        blob = fh.read()
    magic, version, rows, cols, offset = _RECORD_HEADER.unpack_from(blob)
    if magic != RECORD_MAGIC or version != RECORD_VERSION:
        raise InvalidInputError(f"{path}: not a version-{RECORD_VERSION} log-mel record")
    values = np.frombuffer(blob, dtype="<f4", offset=_RECORD_HEADER.size, count=rows * cols)
    return LogMelFrame(values.reshape(rows, cols).astype(np.float64), offset)


def list_wavs(path):
    if os.path.isdir(path):
        return sorted(os.path.join(path, f) for f in os.listdir(path) if f.lower().endswith(".wav"))
    return [path]


class LogMelExtractor(TransformerMixin, BaseEstimator):
    """Transformer mapping 1 s, 16 kHz segments to 100x64 log-Mel frames.

    Parameters
    ----------
    n_fft : int, default=512
    n_mels : int, default=64
    fmin, fmax : float, default=125, 7500
        Filterbank edges in Hz.
    log_offset : float, default=0.01
        Added before the logarithm so silence maps to ``log(log_offset)``.

    ``transform`` takes ``X`` of shape (n_segments, 16000) and returns an
    array of shape (n_segments, 100, 64).
    """

    def __init__(self, n_fft=N_FFT, n_mels=N_MELS, fmin=FMIN, fmax=FMAX, log_offset=LOG_OFFSET):
        self.n_fft = n_fft
        self.n_mels = n_mels
        self.fmin = fmin
        self.fmax = fmax
        self.log_offset = log_offset

    def fit(self, X=None, y=None):
        self.config_ = FrontendConfig(TARGET_RATE, self.n_fft, self.n_mels, self.fmin, self.fmax, self.log_offset)
        self.filterbank_ = build_mel_filterbank(self.n_fft, self.n_mels, self.fmin, self.fmax)
        return self

    def transform(self, X):
        check_is_fitted(self, "filterbank_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != SEGMENT_SAMPLES:
            raise InvalidInputError(f"expected {SEGMENT_SAMPLES} samples per row, got {X.shape[1]}")
        mags = np.stack([stft_magnitude(row, self.n_fft) for row in X])
        return np.log(mags @ self.filterbank_.weights.T + self.log_offset)
