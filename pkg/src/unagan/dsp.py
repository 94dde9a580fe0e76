"""Signal-processing kernel: STFT analysis/synthesis, magnitude segmentation,
SNR-controlled mixing, SI-SDR and WAV I/O.

Frame-count convention (``n_frames``)::

    center_padding=True:   1 + len // hop        (signal reflect-padded by fft_size // 2 on both sides)
    center_padding=False:  1 + (len - fft_size) // hop
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal
import torch

from .errors import (
    InputTooShort,
    InvalidConfig,
    LengthMismatch,
    SampleRateMismatch,
    SilentClean,
    SilentNoise,
    ZeroReference,
    ShapeError,
)

DEFAULT_SAMPLE_RATE = 16000
SI_SDR_CAP_DB = 60.0


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ShapeError(f"waveform must be mono 1-D, got shape {samples.shape}")
        if samples.size < 1:
            raise InputTooShort("waveform must contain at least one sample")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 256
    hop: int = 64
    window: str = "hann"
    center_padding: bool = True

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window_array(self) -> np.ndarray:
        return scipy.signal.get_window(self.window, self.fft_size, fftbins=True).astype(np.float64)

    def n_frames(self, length: int) -> int:
        if self.center_padding:
            return 1 + length // self.hop
        return 1 + (length - self.fft_size) // self.hop


@dataclass(frozen=True)
class Spectrogram:
    magnitude: np.ndarray
    phase: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    length: int | None = None
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.magnitude.shape != self.phase.shape:
            raise ShapeError("magnitude and phase must share shape")
        if np.any(self.magnitude < 0):
            raise ValueError("magnitude must be nonnegative")

    @property
    def n_frames(self) -> int:
        return self.magnitude.shape[1]

    def complex(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)


@dataclass(frozen=True)
class MagnitudeSegment:
    values: np.ndarray
    source_utterance: str
    frame_offset: int
    n_valid: int
    padded: bool = False


@dataclass(frozen=True)
class Mixture:
    waveform: Waveform
    gain: float
    peak: float
    clipped: bool
    noise_offset: int


def check_cola(cfg: StftConfig, rtol: float = 1e-10) -> None:
    """Raise InvalidConfig unless the squared window overlap-adds to a constant at ``cfg.hop``."""
    if cfg.fft_size < 2 or cfg.fft_size % 2:
        raise InvalidConfig(f"fft_size must be even and >= 2, got {cfg.fft_size}")
    if not 1 <= cfg.hop <= cfg.fft_size:
        raise InvalidConfig(f"hop must lie in [1, fft_size], got {cfg.hop}")
    w2 = cfg.window_array() ** 2
    envelope = np.zeros(cfg.hop)
    for start in range(0, cfg.fft_size, cfg.hop):
        chunk = w2[start:start + cfg.hop]
        envelope[:chunk.size] += chunk
    if envelope.min() <= 0 or envelope.max() - envelope.min() > rtol * envelope.max():
        raise InvalidConfig(
            f"window '{cfg.window}' does not satisfy constant overlap-add at hop {cfg.hop} "
            f"(fft_size {cfg.fft_size})"
        )


def _frame(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n_frames = 1 + (x.size - cfg.fft_size) // cfg.hop
    idx = np.arange(cfg.fft_size)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    return x[idx]


def stft(w: Waveform | np.ndarray, cfg: StftConfig = StftConfig()) -> Spectrogram:
    if not isinstance(w, Waveform):
        w = Waveform(w)
    x = w.samples
    if x.size < cfg.fft_size:
        raise InputTooShort(f"signal of {x.size} samples is shorter than one frame ({cfg.fft_size})")
    if cfg.center_padding:
        x = np.pad(x, cfg.fft_size // 2, mode="reflect")
    frames = _frame(x, cfg) * cfg.window_array()[None, :]
    spec = np.fft.rfft(frames, axis=1).T
    return Spectrogram(np.abs(spec), np.angle(spec), cfg, length=w.samples.size, sample_rate=w.sample_rate)


def istft_complex(spec: np.ndarray, cfg: StftConfig, length: int | None = None) -> np.ndarray:
    check_cola(cfg)
    n_frames = spec.shape[1]
    window = cfg.window_array()
    frames = np.fft.irfft(spec.T, n=cfg.fft_size, axis=1) * window[None, :]
    total = cfg.fft_size + cfg.hop * (n_frames - 1)
    out = np.zeros(total)
    envelope = np.zeros(total)
    w2 = window ** 2
    for t in range(n_frames):
        start = t * cfg.hop
        out[start:start + cfg.fft_size] += frames[t]
        envelope[start:start + cfg.fft_size] += w2
    nonzero = envelope > 1e-11
    out[nonzero] /= envelope[nonzero]
    if cfg.center_padding:
        out = out[cfg.fft_size // 2:]
        if length is None:
            length = cfg.hop * (n_frames - 1)
    if length is not None:
        out = out[:length] if out.size >= length else np.pad(out, (0, length - out.size))
    return out


def istft(spec: Spectrogram) -> Waveform:
    return Waveform(istft_complex(spec.complex(), spec.config, spec.length), spec.sample_rate)


def griffin_lim(magnitude: np.ndarray, cfg: StftConfig, length: int, init_phase: np.ndarray | None = None,
                n_iter: int = 32, sample_rate: int = DEFAULT_SAMPLE_RATE) -> Waveform:
    """Iterative phase recovery, optionally warm-started from ``init_phase``."""
    phase = init_phase if init_phase is not None else np.zeros_like(magnitude)
    for _ in range(n_iter):
        x = istft_complex(magnitude * np.exp(1j * phase), cfg, length)
        phase = stft(Waveform(x, sample_rate), cfg).phase
    return Waveform(istft_complex(magnitude * np.exp(1j * phase), cfg, length), sample_rate)


def segment_magnitude(magnitude, width: int = 128, mode: str = "random_crop", rng=None,
                      source_utterance: str = "") -> list[MagnitudeSegment]:
    """Cut a [bins x frames] magnitude into fixed-width segments.

    ``random_crop`` returns a single uniformly placed window; ``tiled`` covers the
    whole magnitude with the last segment zero-padded.
    """
    if isinstance(magnitude, Spectrogram):
        magnitude = magnitude.magnitude
    magnitude = np.asarray(magnitude)
    bins, frames = magnitude.shape
    if frames < 1:
        raise InputTooShort("magnitude has no frames")

    if mode == "random_crop":
        if frames <= width:
            values = np.zeros((bins, width), dtype=magnitude.dtype)
            values[:, :frames] = magnitude
            return [MagnitudeSegment(values, source_utterance, 0, frames, padded=frames < width)]
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        offset = int(rng.integers(0, frames - width + 1))
        return [MagnitudeSegment(magnitude[:, offset:offset + width].copy(), source_utterance, offset, width)]

    if mode == "tiled":
        segments = []
        for offset in range(0, frames, width):
            chunk = magnitude[:, offset:offset + width]
            n_valid = chunk.shape[1]
            values = np.zeros((bins, width), dtype=magnitude.dtype)
            values[:, :n_valid] = chunk
            segments.append(MagnitudeSegment(values, source_utterance, offset, n_valid, padded=n_valid < width))
        return segments

    raise ValueError(f"unknown segmentation mode {mode!r}")


def untile(segments: list[MagnitudeSegment]) -> np.ndarray:
    return np.concatenate([s.values[:, :s.n_valid] for s in segments], axis=1)


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


def fit_noise(noise: np.ndarray, length: int, rng=None, loop: bool = True) -> tuple[np.ndarray, int]:
    """Loop (random circular offset) or trim ``noise`` to ``length`` samples."""
    if not isinstance(rng, np.random.Generator) and rng is not None:
        rng = np.random.default_rng(rng)
    n = noise.size
    if n >= length:
        offset = int(rng.integers(0, n - length + 1)) if rng is not None else 0
        return noise[offset:offset + length], offset
    if not loop:
        raise InputTooShort(f"noise of {n} samples shorter than clean ({length}) and looping disabled")
    offset = int(rng.integers(0, n)) if rng is not None else 0
    idx = (offset + np.arange(length)) % n
    return noise[idx], offset


def mix_at_snr(clean: Waveform, noise: Waveform, snr_db: float, rng=None, loop_noise: bool = True) -> Mixture:
    """clean + g * noise with g = (rms(clean) / rms(noise)) * 10**(-snr_db / 20).

    The gain is applied to the noise so the clean reference is shared across SNR
    levels. No peak normalization is applied.
    """
    if clean.sample_rate != noise.sample_rate:
        raise SampleRateMismatch(f"sample rates differ: {clean.sample_rate} vs {noise.sample_rate}")
    fitted, offset = fit_noise(noise.samples, clean.samples.size, rng, loop_noise)
    clean_rms, noise_rms = rms(clean.samples), rms(fitted)
    if noise_rms == 0.0:
        raise SilentNoise("noise has zero power over the mixing span")
    if clean_rms == 0.0:
        raise SilentClean("clean signal has zero power")
    gain = (clean_rms / noise_rms) * 10.0 ** (-snr_db / 20.0)
    mixed = clean.samples + gain * fitted
    peak = float(np.max(np.abs(mixed)))
    return Mixture(Waveform(mixed, clean.sample_rate), gain, peak, peak > 1.0, offset)


def measured_snr(clean: np.ndarray, noise_component: np.ndarray) -> float:
    return 10.0 * math.log10(np.sum(np.square(clean)) / np.sum(np.square(noise_component)))


def si_sdr_torch(estimate: torch.Tensor, reference: torch.Tensor, zero_mean: bool = True,
                 cap: float = SI_SDR_CAP_DB) -> torch.Tensor:
    """Batched SI-SDR in dB over the last axis.

    10*log10(||a s||^2 / ||a s - e||^2) with a = <e, s> / <s, s>. Both energies are
    floored at 10**(-cap/10) times ||e||^2 so a vanishing residual or projection
    lands exactly on +/-cap while the value stays invariant to rescaling of e.
    """
    if estimate.shape != reference.shape:
        raise LengthMismatch(f"estimate {tuple(estimate.shape)} vs reference {tuple(reference.shape)}")
    if zero_mean:
        estimate = estimate - estimate.mean(dim=-1, keepdim=True)
        reference = reference - reference.mean(dim=-1, keepdim=True)
    ref_energy = (reference * reference).sum(dim=-1, keepdim=True)
    if bool((ref_energy == 0).any()):
        raise ZeroReference("reference has zero energy")
    alpha = (estimate * reference).sum(dim=-1, keepdim=True) / ref_energy
    target = alpha * reference
    residual = target - estimate
    num = (target * target).sum(dim=-1)
    den = (residual * residual).sum(dim=-1)
    energy = (estimate * estimate).sum(dim=-1)
    floor = (energy * 10.0 ** (-cap / 10.0)).clamp_min(torch.finfo(energy.dtype).tiny)
    value = 10.0 * (torch.log10(torch.maximum(num, floor)) - torch.log10(torch.maximum(den, floor)))
    value = torch.where(den <= floor, torch.full_like(value, cap), value)
    value = torch.where((num <= floor) | (energy == 0), torch.full_like(value, -cap), value)
    return value.clamp(-cap, cap)


def si_sdr(estimate, reference, zero_mean: bool = True, cap: float = SI_SDR_CAP_DB) -> float:
    est = estimate.samples if isinstance(estimate, Waveform) else np.asarray(estimate, dtype=np.float64)
    ref = reference.samples if isinstance(reference, Waveform) else np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise LengthMismatch(f"estimate has {est.shape} samples, reference {ref.shape}")
    value = si_sdr_torch(torch.from_numpy(np.ascontiguousarray(est, dtype=np.float64)),
                         torch.from_numpy(np.ascontiguousarray(ref, dtype=np.float64)), zero_mean, cap)
    return float(value)


def read_wav(path, expected_rate: int | None = DEFAULT_SAMPLE_RATE) -> Waveform:
    rate, data = scipy.io.wavfile.read(str(path))
    if data.ndim != 1:
        raise ShapeError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if expected_rate is not None and rate != expected_rate:
        raise SampleRateMismatch(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, rate)


def write_wav(path, w: Waveform, subtype: str = "float32") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if subtype == "float32":
        data = w.samples.astype(np.float32)
    elif subtype == "pcm16":
        data = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        raise ValueError(f"unsupported subtype {subtype!r}")
    scipy.io.wavfile.write(str(path), w.sample_rate, data)
    return path
