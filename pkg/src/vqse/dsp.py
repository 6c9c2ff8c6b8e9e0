"""STFT analysis/synthesis, log-power features, gain masking and WAV I/O."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

SAMPLE_RATE = 16000


class InvalidInputError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    """Frame layout of the STFT. Frames are not centred; a trailing partial
    frame is dropped."""

    window_length: int = 512
    hop_length: int = 256
    fft_size: int = 512
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop_length <= self.window_length <= self.fft_size:
            raise ConfigurationError(
                f"need 0 < hop ({self.hop_length}) <= window ({self.window_length}) <= fft ({self.fft_size})")
        if not signal.check_NOLA(self.window_array(), self.window_length,
                                 self.window_length - self.hop_length):
            raise ConfigurationError(f"{self.window} window with hop {self.hop_length} cannot be inverted")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window_array(self) -> np.ndarray:
        return signal.get_window(self.window, self.window_length, fftbins=True).astype(np.float64)

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.window_length:
            raise InvalidInputError(f"waveform of {n_samples} samples is shorter than one window "
                                    f"({self.window_length})")
        return 1 + (n_samples - self.window_length) // self.hop_length

    def interior(self, n_samples: int) -> slice:
        """Samples covered by full overlap; reconstruction is exact here."""
        t = self.n_frames(n_samples)
        return slice(self.window_length - self.hop_length, (t - 1) * self.hop_length + self.hop_length)


def stft(w: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Complex STFT of a 1-d waveform, shape ``(T, F)``."""
    w = np.asarray(w)
    if w.ndim != 1:
        raise InvalidInputError(f"expected a 1-d waveform, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InvalidInputError("waveform contains non-finite samples")
    t = cfg.n_frames(len(w))
    frames = np.lib.stride_tricks.sliding_window_view(w, cfg.window_length)[::cfg.hop_length][:t]
    return np.fft.rfft(frames * cfg.window_array(), n=cfg.fft_size, axis=-1)


NORM_FLOOR = 1e-2


def istft(spec: np.ndarray, cfg: StftConfig = StftConfig(), length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    Output has ``(T-1)*hop + window`` samples, zero-padded to ``length`` if
    given. Samples outside ``cfg.interior`` are not guaranteed exact.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != cfg.n_bins:
        raise InvalidInputError(f"expected (T, {cfg.n_bins}) spectrogram, got {spec.shape}")
    t = spec.shape[0]
    win = cfg.window_array()
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=-1)[:, :cfg.window_length] * win
    n = (t - 1) * cfg.hop_length + cfg.window_length
    out = np.zeros(n)
    norm = np.zeros(n)
    for i in range(t):
        s = i * cfg.hop_length
        out[s:s + cfg.window_length] += frames[i]
        norm[s:s + cfg.window_length] += win * win
    # floor the normaliser: near the ends only one tapered frame contributes,
    # and a masked (inconsistent) spectrum would otherwise blow up there
    out /= np.maximum(norm, NORM_FLOOR * norm.max())
    if length is not None:
        if length < n:
            out = out[:length]
        else:
            out = np.pad(out, (0, length - n))
    return out


def log_power(spec: np.ndarray, floor_epsilon: float = 1e-10) -> np.ndarray:
    if floor_epsilon <= 0:
        raise InvalidInputError(f"floor_epsilon must be positive, got {floor_epsilon}")
    return np.log(np.maximum(np.abs(spec) ** 2, floor_epsilon))


def apply_gain(gain: np.ndarray, spec: np.ndarray) -> np.ndarray:
    """Enhanced magnitude ``gain * |spec|``."""
    gain = np.asarray(gain)
    if gain.shape != np.shape(spec):
        raise InvalidInputError(f"gain shape {gain.shape} != spectrogram shape {np.shape(spec)}")
    if np.any(gain < 0) or np.any(gain > 1):
        raise InvalidInputError("gains must lie in [0, 1]")
    return gain * np.abs(spec)


def recombine_phase(mag: np.ndarray, spec: np.ndarray) -> np.ndarray:
    """Attach the phase of ``spec`` to ``mag``; zero-magnitude bins get phase 0."""
    mag = np.asarray(mag)
    if mag.shape != np.shape(spec):
        raise InvalidInputError(f"magnitude shape {mag.shape} != spectrogram shape {np.shape(spec)}")
    absx = np.abs(spec)
    phase = np.ones_like(spec, dtype=np.complex128)
    nz = absx > 0
    phase[nz] = spec[nz] / absx[nz]
    return mag * phase


# ---------------------------------------------------------------------------
# WAV I/O: PCM16 mono 16 kHz
# ---------------------------------------------------------------------------

def read_wav(path: str | Path) -> np.ndarray:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise InvalidInputError(f"{path}: expected mono 16-bit PCM")
        if fh.getframerate() != SAMPLE_RATE:
            raise InvalidInputError(f"{path}: expected {SAMPLE_RATE} Hz, got {fh.getframerate()}")
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path: str | Path, samples: np.ndarray) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(pcm.tobytes())
