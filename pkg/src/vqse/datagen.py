"""SNR-controlled mixing, dynamic-range scaling and a synthetic toy corpus."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .dsp import SAMPLE_RATE, InvalidInputError, read_wav, write_wav

ROLES = ("clean", "noise", "unpaired")


@dataclass
class PairedExample:
    degraded: np.ndarray
    clean: np.ndarray
    noise: np.ndarray
    snr_db: float
    noise_gain: float = 1.0
    level_db: float | None = None


@dataclass
class UnpairedExample:
    degraded: np.ndarray

    def __post_init__(self):
        if len(self.degraded) == 0:
            raise InvalidInputError("unpaired example is empty")


@dataclass(frozen=True)
class MixConfig:
    snr_low_db: float = -10.0
    snr_high_db: float = 30.0  # exclusive
    dynamic_range_db: float = 40.0
    segment_seconds: float = 1.0

    def __post_init__(self):
        if not self.snr_low_db < self.snr_high_db:
            raise ValueError("snr_low_db must be below snr_high_db")
        if self.dynamic_range_db <= 0:
            raise ValueError("dynamic_range_db must be positive")

    @property
    def segment_samples(self) -> int:
        return int(round(self.segment_seconds * SAMPLE_RATE))


def rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def snr_db(clean: np.ndarray, noise: np.ndarray) -> float:
    return float(10.0 * np.log10(np.sum(np.square(clean)) / np.sum(np.square(noise))))


def sample_segment(src: np.ndarray, seconds: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(seconds * SAMPLE_RATE))
    if len(src) < n:
        raise InvalidInputError(f"source has {len(src)} samples, segment needs {n}")
    offset = int(rng.integers(0, len(src) - n + 1))
    return src[offset:offset + n]


def noise_gain(speech: np.ndarray, noise: np.ndarray, snr: float) -> float:
    """Factor on ``noise`` that puts the mixture at ``snr`` dB."""
    rs, rn = rms(speech), rms(noise)
    if rs == 0 or rn == 0:
        raise InvalidInputError("speech and noise must both have nonzero RMS")
    return rs / rn * 10.0 ** (-snr / 20.0)


def scale_dynamic_range(p: PairedExample, dynamic_range_db: float, rng: np.random.Generator,
                        level_db: float | None = None) -> PairedExample:
    """Peak-normalise the mixture, then move it to a random level in
    ``[-dynamic_range_db, 0]`` dBFS; all three signals share one factor."""
    peak = float(np.max(np.abs(p.degraded)))
    if peak == 0:
        raise InvalidInputError("cannot scale a silent mixture")
    if level_db is None:
        level_db = float(rng.uniform(-dynamic_range_db, 0.0))
    c = 10.0 ** (level_db / 20.0) / peak
    return PairedExample(degraded=p.degraded * c, clean=p.clean * c, noise=p.noise * c,
                         snr_db=p.snr_db, noise_gain=p.noise_gain, level_db=level_db)


def mix_at_snr(speech: np.ndarray, noise: np.ndarray, snr: float, rng: np.random.Generator,
               cfg: MixConfig = MixConfig(), scale: bool = True) -> PairedExample:
    if len(speech) != len(noise):
        raise InvalidInputError(f"length mismatch: {len(speech)} vs {len(noise)}")
    g = noise_gain(speech, noise, snr)
    clean = np.asarray(speech, dtype=np.float64)
    scaled = g * np.asarray(noise, dtype=np.float64)
    p = PairedExample(degraded=clean + scaled, clean=clean, noise=scaled, snr_db=float(snr), noise_gain=g)
    if scale:
        p = scale_dynamic_range(p, cfg.dynamic_range_db, rng)
        # rebuild the sum so the additive identity is exact after scaling
        p.degraded = p.clean + p.noise
    return p


def draw_paired(clean: Sequence[np.ndarray], noise: Sequence[np.ndarray], cfg: MixConfig,
                rng: np.random.Generator, snr: float | None = None) -> PairedExample:
    """One training mixture: random clean and noise segments at a random SNR."""
    s = sample_segment(clean[int(rng.integers(len(clean)))], cfg.segment_seconds, rng)
    n = sample_segment(noise[int(rng.integers(len(noise)))], cfg.segment_seconds, rng)
    if snr is None:
        snr = float(rng.uniform(cfg.snr_low_db, cfg.snr_high_db))
    return mix_at_snr(s, n, snr, rng, cfg)


def draw_unpaired(items: Sequence[np.ndarray], cfg: MixConfig, rng: np.random.Generator) -> UnpairedExample:
    seg = sample_segment(items[int(rng.integers(len(items)))], cfg.segment_seconds, rng)
    peak = float(np.max(np.abs(seg)))
    level = float(rng.uniform(-cfg.dynamic_range_db, 0.0))
    scale = 10.0 ** (level / 20.0) / peak if peak > 0 else 1.0
    return UnpairedExample(degraded=seg * scale)


# ---------------------------------------------------------------------------
# toy corpus
# ---------------------------------------------------------------------------

# band edges in Hz; "pink" is shaped by 1/f instead of a band-pass
NOISE_CLASSES = {
    "low": (80.0, 600.0),
    "mid": (600.0, 2000.0),
    "high": (2000.0, 6000.0),
    "broad": (100.0, 7000.0),
    "pink": None,
}


@dataclass(frozen=True)
class ToyCorpusSpec:
    clean_per_split: dict = field(default_factory=lambda: {"train": 40, "valid": 8, "test": 12, "unpaired": 20})
    noise_per_class: dict = field(default_factory=lambda: {"train": 8, "valid": 2, "test": 3, "unpaired": 4})
    n_unpaired: int = 40
    item_seconds: float = 2.0
    seen_classes: tuple = ("low", "mid", "high", "broad")
    unseen_classes: tuple = ("pink",)
    unpaired_snr_center_db: float = 10.0
    unpaired_snr_spread_db: float = 5.0


@dataclass
class Source:
    name: str
    samples: np.ndarray
    role: str
    split: str
    label: str = ""


@dataclass
class ToyCorpus:
    clean: list[Source]
    noise: list[Source]
    unpaired: list[Source]

    def __iter__(self):
        return iter((self.clean, self.noise, self.unpaired))

    def select(self, role: str, split: str, classes: Sequence[str] | None = None) -> list[Source]:
        items = {"clean": self.clean, "noise": self.noise, "unpaired": self.unpaired}[role]
        out = [s for s in items if s.split == split]
        if classes is not None:
            out = [s for s in out if s.label in classes]
        return out


def harmonic_speech(rng: np.random.Generator, seconds: float) -> tuple[np.ndarray, float]:
    """Harmonic tone complex with syllable-rate amplitude modulation.

    Returns the waveform and its nominal fundamental in Hz.
    """
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    f0 = float(rng.uniform(100.0, 300.0))
    vib_rate = rng.uniform(3.0, 6.0)
    contour = f0 * (1.0 + 0.01 * np.sin(2 * np.pi * vib_rate * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(contour) / SAMPLE_RATE
    formants = [(rng.uniform(300, 900), 150.0), (rng.uniform(900, 2500), 300.0), (rng.uniform(2500, 3500), 400.0)]
    x = np.zeros(n)
    for h in range(1, int(4000 // f0) + 1):
        fh = h * f0
        env = sum(np.exp(-0.5 * ((fh - fc) / bw) ** 2) for fc, bw in formants)
        amp = (0.3 + env) / h
        x += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    syl_rate = rng.uniform(2.5, 5.0)
    # syllable envelope with a -30 dB floor so no segment is exactly silent
    am = 0.03 + 0.97 * np.clip(np.sin(2 * np.pi * syl_rate * t + rng.uniform(0, 2 * np.pi)), 0.0, None) ** 0.7
    x *= am
    return 0.5 * x / np.max(np.abs(x)), f0


def band_noise(rng: np.random.Generator, seconds: float, cls: str) -> np.ndarray:
    n = int(round(seconds * SAMPLE_RATE))
    white = rng.standard_normal(n + 2048)
    band = NOISE_CLASSES[cls]
    if band is None:
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(len(white), 1.0 / SAMPLE_RATE)
        spec[1:] /= np.sqrt(freqs[1:])
        spec[0] = 0.0
        y = np.fft.irfft(spec, n=len(white))
    else:
        sos = signal.butter(4, band, btype="bandpass", fs=SAMPLE_RATE, output="sos")
        y = signal.sosfilt(sos, white)
    y = y[2048:]
    t = np.arange(n) / SAMPLE_RATE
    y *= 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t + rng.uniform(0, 2 * np.pi))
    return 0.5 * y / np.max(np.abs(y))


def toy_corpus(rng: np.random.Generator, spec: ToyCorpusSpec = ToyCorpusSpec()) -> ToyCorpus:
    """Deterministic synthetic corpus.

    Clean and noise items are split into train/valid/test/unpaired. Test and
    valid noise covers seen and unseen classes; train noise only seen ones.
    The unpaired set mixes the held-out ``unpaired`` split at SNRs around
    ``unpaired_snr_center_db`` and keeps only the mixture.
    """
    clean, noise = [], []
    for split, count in spec.clean_per_split.items():
        for i in range(count):
            x, f0 = harmonic_speech(rng, spec.item_seconds)
            clean.append(Source(f"clean-{i:04d}", x, "clean", split, f"{f0:.3f}"))
    for split, count in spec.noise_per_class.items():
        classes = spec.seen_classes if split == "train" else spec.seen_classes + spec.unseen_classes
        for cls in classes:
            for i in range(count):
                noise.append(Source(f"{cls}-{i:04d}", band_noise(rng, spec.item_seconds, cls), "noise", split, cls))

    held_clean = [s.samples for s in clean if s.split == "unpaired"]
    held_noise = [s.samples for s in noise if s.split == "unpaired"]
    unpaired = []
    lo = spec.unpaired_snr_center_db - spec.unpaired_snr_spread_db
    hi = spec.unpaired_snr_center_db + spec.unpaired_snr_spread_db
    for i in range(spec.n_unpaired):
        s = held_clean[int(rng.integers(len(held_clean)))]
        nz = held_noise[int(rng.integers(len(held_noise)))]
        snr = float(rng.uniform(lo, hi))
        g = noise_gain(s, nz, snr)
        mix = s + g * nz
        mix = 0.5 * mix / np.max(np.abs(mix))
        unpaired.append(Source(f"unpaired-{i:04d}", mix, "unpaired", "train", f"{snr:.3f}"))
    return ToyCorpus(clean, noise, unpaired)


# ---------------------------------------------------------------------------
# on-disk corpus: <root>/{clean,noise}/<split>/<name>.wav, <root>/unpaired/<name>.wav
# manifest rows: "<relative path>\t<role>"; clean and noise go to manifest.tsv,
# unpaired mixtures to unpaired.tsv
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.tsv"
UNPAIRED_MANIFEST_NAME = "unpaired.tsv"


def _relpath(src: Source) -> str:
    if src.role == "unpaired":
        return f"unpaired/{src.name}.wav"
    return f"{src.role}/{src.split}/{src.name}.wav"


def write_corpus(corpus: ToyCorpus, root: str | Path) -> tuple[Path, Path]:
    """Write WAVs and the two manifests; returns (paired, unpaired) manifest paths."""
    root = Path(root)
    rows: dict[str, list] = {MANIFEST_NAME: [], UNPAIRED_MANIFEST_NAME: []}
    for group in corpus:
        for src in group:
            rel = _relpath(src)
            write_wav(root / rel, src.samples)
            target = UNPAIRED_MANIFEST_NAME if src.role == "unpaired" else MANIFEST_NAME
            rows[target].append((rel, src.role))
    for name, table in rows.items():
        with open(root / name, "w", newline="") as fh:
            csv.writer(fh, delimiter="\t", lineterminator="\n").writerows(table)
    return root / MANIFEST_NAME, root / UNPAIRED_MANIFEST_NAME


def read_manifest(path: str | Path) -> list[tuple[Path, str]]:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh, delimiter="\t"):
            if not rec:
                continue
            if len(rec) != 2 or rec[1] not in ROLES:
                raise InvalidInputError(f"{path}: bad manifest row {rec!r}")
            p = Path(rec[0])
            rows.append((p if p.is_absolute() else path.parent / p, rec[1]))
    return rows


def load_corpus(manifest: str | Path) -> ToyCorpus:
    """Read a manifest back into memory; split and class come from the path."""
    clean, noise, unpaired = [], [], []
    for p, role in read_manifest(manifest):
        x = read_wav(p)
        name = p.stem
        if role == "unpaired":
            unpaired.append(Source(name, x, role, "train"))
            continue
        split = p.parent.name
        label = name.split("-")[0] if role == "noise" else ""
        (clean if role == "clean" else noise).append(Source(name, x, role, split, label))
    return ToyCorpus(clean, noise, unpaired)
