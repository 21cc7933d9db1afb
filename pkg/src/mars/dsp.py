"""Deterministic signal processing: WAV I/O, STFT/ISTFT, amplitude and mel
spectrograms, and Griffin-Lim phase reconstruction.

All functions are pure; randomness (Griffin-Lim phase init) is driven by an
explicit seed.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError, InvalidInputError

PAD_MODES = ("reflect", "zero")
BIN_TRIMS = ("drop_dc", "drop_nyquist", "keep_all")
WINDOWS = ("hann", "hamming", "rect")


# -----------------------------
# Domain types
# -----------------------------
@dataclass
class Waveform:
    """Mono audio: samples in [-1, 1] plus a sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InvalidInputError("waveform must be a non-empty 1-D sample array")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidInputError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 1024
    hop: int = 256
    window: str = "hann"
    pad_mode: str = "reflect"
    bin_trim: str = "drop_dc"

    def __post_init__(self):
        n, h = self.n_fft, self.hop
        if n <= 0 or n % 2 != 0 or (n & (n - 1)) != 0:
            raise InvalidConfigError(f"n_fft must be a positive power of two, got {n}")
        if h <= 0 or h > n or n % h != 0:
            raise InvalidConfigError(f"hop must divide n_fft and be <= n_fft, got hop={h}, n_fft={n}")
        if self.window not in WINDOWS:
            raise InvalidConfigError(f"unknown window {self.window!r}, expected one of {WINDOWS}")
        if self.pad_mode not in PAD_MODES:
            raise InvalidConfigError(f"unknown pad_mode {self.pad_mode!r}, expected one of {PAD_MODES}")
        if self.bin_trim not in BIN_TRIMS:
            raise InvalidConfigError(f"unknown bin_trim {self.bin_trim!r}, expected one of {BIN_TRIMS}")

    @property
    def full_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def trimmed_bins(self) -> int:
        return self.full_bins if self.bin_trim == "keep_all" else self.full_bins - 1


@dataclass
class ComplexSpectrogram:
    """Full-band complex STFT, shape (n_fft/2 + 1, frames)."""

    values: np.ndarray
    config: StftConfig

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.complex128)
        if self.values.ndim != 2:
            raise InvalidInputError("complex spectrogram must be 2-D")
        if self.values.shape[0] != self.config.full_bins:
            raise InvalidInputError(
                f"expected {self.config.full_bins} frequency rows, got {self.values.shape[0]}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("complex spectrogram contains non-finite entries")

    @property
    def real(self) -> np.ndarray:
        return self.values.real

    @property
    def imag(self) -> np.ndarray:
        return self.values.imag


@dataclass
class Spectrogram:
    """Amplitude spectrogram (freq_bins x frames), linear or log1p scaled."""

    values: np.ndarray
    config: StftConfig
    scale: str = "linear"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InvalidInputError("spectrogram must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("spectrogram contains non-finite values")
        if self.scale not in ("linear", "log1p"):
            raise InvalidInputError(f"unknown scale {self.scale!r}")
        if self.scale == "linear" and np.any(self.values < 0):
            raise InvalidInputError("linear-scale spectrogram must be non-negative")


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 64
    f_min: float = 0.0
    f_max: float = 8000.0
    stft: StftConfig = field(default_factory=StftConfig)
    sample_rate: int = 16000

    def __post_init__(self):
        if self.n_mels <= 0:
            raise InvalidConfigError("n_mels must be positive")
        if not (0 <= self.f_min < self.f_max <= self.sample_rate / 2):
            raise InvalidConfigError(
                f"need 0 <= f_min < f_max <= sample_rate/2, got ({self.f_min}, {self.f_max})"
            )


# -----------------------------
# WAV container I/O
# -----------------------------
_WAVE_PCM = 1
_WAVE_FLOAT = 3
_WAVE_EXTENSIBLE = 0xFFFE


def decode_wav(data: bytes) -> Waveform:
    """Parse a RIFF/WAVE container into a mono waveform in [-1, 1].

    Supports 16-bit PCM and 32-bit IEEE float; multichannel input is
    averaged down to mono.
    """
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise InvalidInputError("not a RIFF/WAVE file")

    fmt = None
    raw = None
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise InvalidInputError("malformed fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _WAVE_EXTENSIBLE and len(body) >= 26:
                # true format lives in the first two bytes of the SubFormat GUID
                (sub,) = struct.unpack_from("<H", body, 24)
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            if len(body) < size:
                raise InvalidInputError("truncated data chunk")
            raw = body
        pos += 8 + size + (size & 1)  # chunks are word aligned

    if fmt is None:
        raise InvalidInputError("missing fmt chunk")
    if raw is None:
        raise InvalidInputError("missing data chunk")

    audio_format, channels, sample_rate, _, _, bits = fmt
    if channels < 1:
        raise InvalidInputError("channel count must be >= 1")

    if audio_format == _WAVE_PCM and bits == 16:
        samples = np.frombuffer(raw[: len(raw) - len(raw) % (2 * channels)], dtype="<i2")
        samples = samples.astype(np.float64) / 32768.0
    elif audio_format == _WAVE_FLOAT and bits == 32:
        samples = np.frombuffer(raw[: len(raw) - len(raw) % (4 * channels)], dtype="<f4")
        samples = samples.astype(np.float64)
    else:
        raise InvalidInputError(
            f"unsupported encoding (format={audio_format}, bits={bits}); "
            "expected 16-bit PCM or 32-bit IEEE float"
        )

    if samples.size == 0:
        raise InvalidInputError("data chunk holds no complete frames")
    samples = samples.reshape(-1, channels).mean(axis=1)
    return Waveform(samples, sample_rate)


def encode_wav(w: Waveform, bit_depth: str | int = 16) -> bytes:
    """Serialize a waveform as RIFF/WAVE. ``bit_depth`` is 16 (PCM) or "32f".

    Samples outside [-1, 1] are clamped to full scale.
    """
    x = np.clip(w.samples, -1.0, 1.0)
    if bit_depth in (16, "16"):
        # scale matches the decode divisor so roundtrip error stays <= 1 LSB
        q = np.clip(np.round(x * 32768.0), -32768, 32767)
        payload = q.astype("<i2").tobytes()
        fmt_tag, bits = _WAVE_PCM, 16
    elif bit_depth in ("32f", "32F"):
        payload = x.astype("<f4").tobytes()
        fmt_tag, bits = _WAVE_FLOAT, 32
    else:
        raise InvalidInputError(f"bit_depth must be 16 or '32f', got {bit_depth!r}")

    block_align = bits // 8
    byte_rate = w.sample_rate * block_align
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, fmt_tag, 1, w.sample_rate, byte_rate, block_align, bits,
        b"data", len(payload),
    )
    return header + payload


# -----------------------------
# STFT / ISTFT
# -----------------------------
def make_window(name: str, n: int) -> np.ndarray:
    """Periodic (DFT-even) analysis window of length n."""
    t = np.arange(n)
    if name == "hann":
        return 0.5 - 0.5 * np.cos(2 * np.pi * t / n)
    if name == "hamming":
        return 0.54 - 0.46 * np.cos(2 * np.pi * t / n)
    if name == "rect":
        return np.ones(n)
    raise InvalidConfigError(f"unknown window {name!r}")


def check_cola(cfg: StftConfig, tol: float = 1e-8) -> None:
    """Validate that the squared window overlap-adds to a strictly positive
    constant profile, which guarantees exact least-squares inversion.

    Raises on violation (e.g. hann with hop == n_fft).
    """
    w2 = make_window(cfg.window, cfg.n_fft) ** 2
    profile = np.zeros(cfg.n_fft + cfg.hop)
    for start in range(0, cfg.n_fft + cfg.hop, cfg.hop):
        seg = w2[: len(profile) - start]
        profile[start:start + len(seg)] += seg
    steady = profile[cfg.n_fft - cfg.hop:cfg.n_fft]  # one hop of fully-overlapped samples
    if steady.min() < tol * max(steady.max(), 1.0):
        raise InvalidConfigError(
            f"window/hop violate overlap-add invertibility: window={cfg.window}, "
            f"n_fft={cfg.n_fft}, hop={cfg.hop}"
        )


def _pad_for_frames(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    half = cfg.n_fft // 2
    if cfg.pad_mode == "reflect":
        if len(x) < half + 1:
            raise InvalidInputError(
                f"waveform of {len(x)} samples is shorter than one frame under reflect padding"
            )
        return np.pad(x, half, mode="reflect")
    return np.pad(x, half, mode="constant")


def stft(w: Waveform, cfg: StftConfig) -> ComplexSpectrogram:
    """Center-padded short-time Fourier transform.

    Frame m covers samples [m*hop - n_fft/2, m*hop + n_fft/2); the frame
    count is ceil(len / hop).
    """
    x = w.samples
    frames = -(-len(x) // cfg.hop)
    if frames < 1:
        raise InvalidInputError("waveform shorter than one frame")
    padded = _pad_for_frames(x, cfg)
    need = (frames - 1) * cfg.hop + cfg.n_fft
    if len(padded) < need:
        padded = np.pad(padded, (0, need - len(padded)), mode="constant")
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop * np.arange(frames)[:, None]
    win = make_window(cfg.window, cfg.n_fft)
    spec = np.fft.rfft(padded[idx] * win, axis=1).T
    return ComplexSpectrogram(spec, cfg)


def _istft_raw(values: np.ndarray, cfg: StftConfig, length: int | None) -> np.ndarray:
    frames = values.shape[1]
    if length is None:
        length = frames * cfg.hop
    half = cfg.n_fft // 2
    win = make_window(cfg.window, cfg.n_fft)
    total = (frames - 1) * cfg.hop + cfg.n_fft
    num = np.zeros(total)
    den = np.zeros(total)
    frames_t = np.fft.irfft(values.T, n=cfg.n_fft, axis=1)
    for m in range(frames):
        s = m * cfg.hop
        num[s:s + cfg.n_fft] += win * frames_t[m]
        den[s:s + cfg.n_fft] += win * win
    good = den > 1e-10 * max(den.max(), 1.0)
    out = np.zeros(total)
    out[good] = num[good] / den[good]
    result = np.zeros(length)
    avail = out[half:half + length]
    result[: len(avail)] = avail
    return result


def istft(
    c: ComplexSpectrogram,
    cfg: StftConfig | None = None,
    length: int | None = None,
    sample_rate: int = 16000,
) -> Waveform:
    """Least-squares inverse STFT (windowed overlap-add with squared-window
    normalization). Output has ``length`` samples (default frames * hop).
    """
    cfg = cfg or c.config
    check_cola(cfg)
    return Waveform(_istft_raw(c.values, cfg, length), sample_rate)


def magnitude(c: ComplexSpectrogram, trim: str | None = None, scale: str = "linear") -> Spectrogram:
    """Amplitude of a complex spectrogram with optional bin trim and log1p."""
    trim = trim if trim is not None else c.config.bin_trim
    if trim not in BIN_TRIMS:
        raise InvalidInputError(f"unknown bin_trim {trim!r}")
    mag = np.abs(c.values)
    if trim == "drop_dc":
        mag = mag[1:]
    elif trim == "drop_nyquist":
        mag = mag[:-1]
    if scale == "log1p":
        mag = np.log1p(mag)
    cfg = c.config if c.config.bin_trim == trim else StftConfig(
        c.config.n_fft, c.config.hop, c.config.window, c.config.pad_mode, trim
    )
    return Spectrogram(mag, cfg, scale)


def restore_trimmed_rows(values: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Re-insert the trimmed frequency row (as zeros) to recover the full
    n_fft/2 + 1 rows expected by ISTFT and Griffin-Lim."""
    if cfg.bin_trim == "keep_all":
        if values.shape[0] != cfg.full_bins:
            raise InvalidInputError("row count does not match configuration")
        return values
    if values.shape[0] != cfg.full_bins - 1:
        raise InvalidInputError("row count does not match configuration")
    zero = np.zeros((1, values.shape[1]))
    if cfg.bin_trim == "drop_dc":
        return np.vstack([zero, values])
    return np.vstack([values, zero])


# -----------------------------
# Griffin-Lim
# -----------------------------
def _project_magnitude(spec: np.ndarray, mag: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    """Closest point to ``spec`` with magnitudes ``mag``; keeps a fallback
    phase where the input magnitude vanishes."""
    a = np.abs(spec)
    unit = np.where(a > 1e-12, spec / np.where(a > 1e-12, a, 1.0), fallback)
    return mag * unit


def griffin_lim(
    s: Spectrogram,
    iters: int = 64,
    seed: int = 0,
    sample_rate: int = 16000,
    length: int | None = None,
    momentum: float = 0.99,
    return_residuals: bool = False,
):
    """Iterative phase reconstruction from an amplitude spectrogram.

    Alternates the magnitude-constraint projection with the least-squares
    STFT-consistency projection. Each iteration also tries a
    momentum-extrapolated candidate and keeps whichever lowers the
    consistency residual || |STFT(w_t)| - s ||_2 more, so the residual stays
    non-increasing while converging far faster than the plain update.
    The initial phase is uniform random from ``seed``.
    """
    if s.scale != "linear":
        raise InvalidInputError("griffin_lim expects a linear-scale spectrogram")
    if np.any(s.values < 0):
        raise InvalidInputError("griffin_lim expects non-negative magnitudes")
    if iters < 1:
        raise InvalidInputError("iters must be >= 1")
    if not (0.0 <= momentum < 1.0):
        raise InvalidInputError("momentum must lie in [0, 1)")
    cfg = s.config
    check_cola(cfg)
    mag = restore_trimmed_rows(s.values, cfg)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))

    def roundtrip(spec):
        wave = _istft_raw(spec, cfg, length)
        rebuilt = stft(Waveform(wave, sample_rate), cfg).values
        return rebuilt, float(np.linalg.norm(np.abs(rebuilt) - mag))

    spec = mag * phase
    consistent, _ = roundtrip(spec)
    prev_consistent = consistent
    residuals = []
    for _ in range(iters):
        plain = _project_magnitude(consistent, mag, phase)
        plain_c, plain_r = roundtrip(plain)
        extrap = _project_magnitude(
            consistent + momentum * (consistent - prev_consistent), mag, phase)
        extrap_c, extrap_r = roundtrip(extrap) if momentum > 0 else (plain_c, np.inf)
        prev_consistent = consistent
        if extrap_r < plain_r:
            spec, consistent, res = extrap, extrap_c, extrap_r
        else:
            spec, consistent, res = plain, plain_c, plain_r
        phase = _project_magnitude(consistent, np.ones_like(mag), phase)
        residuals.append(res)
    result = Waveform(_istft_raw(spec, cfg, length), sample_rate)
    if return_residuals:
        return result, residuals
    return result


# -----------------------------
# Mel projection
# -----------------------------
def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def row_frequencies(cfg: StftConfig, sample_rate: int) -> np.ndarray:
    """Center frequency in Hz of each retained spectrogram row."""
    freqs = np.arange(cfg.full_bins) * sample_rate / cfg.n_fft
    if cfg.bin_trim == "drop_dc":
        return freqs[1:]
    if cfg.bin_trim == "drop_nyquist":
        return freqs[:-1]
    return freqs


def mel_filterbank(m: MelConfig) -> np.ndarray:
    """Triangular filterbank (n_mels x freq_bins) on mel-spaced centers.

    Every filter must overlap at least one retained bin.
    """
    freqs = row_frequencies(m.stft, m.sample_rate)
    if m.n_mels > len(freqs):
        raise InvalidConfigError(f"n_mels={m.n_mels} exceeds {len(freqs)} frequency rows")
    edges = mel_to_hz(np.linspace(hz_to_mel(m.f_min), hz_to_mel(m.f_max), m.n_mels + 2))
    fb = np.zeros((m.n_mels, len(freqs)))
    for i in range(m.n_mels):
        lo, mid, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - freqs) / max(hi - mid, 1e-12)
        fb[i] = np.clip(np.minimum(up, down), 0.0, None)
    sums = fb.sum(axis=1)
    if np.any(sums <= 0):
        raise InvalidConfigError(
            "mel filterbank has empty filters; reduce n_mels or widen the frequency range"
        )
    return fb


def apply_filterbank(fb: np.ndarray, s: Spectrogram) -> np.ndarray:
    if s.scale != "linear":
        raise InvalidInputError("mel projection expects a linear-scale spectrogram")
    if fb.shape[1] != s.values.shape[0]:
        raise InvalidInputError(
            f"filterbank expects {fb.shape[1]} rows, spectrogram has {s.values.shape[0]}"
        )
    return fb @ s.values


def mel_spectrogram(s: Spectrogram, m: MelConfig) -> np.ndarray:
    """Project an amplitude spectrogram onto mel filters -> (n_mels, frames)."""
    return apply_filterbank(mel_filterbank(m), s)
