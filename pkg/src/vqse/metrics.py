"""SI-SDR, the embedding-margin diagnostic and SNR-conditioned report tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import autodiff as ad
from .datagen import MixConfig, mix_at_snr, sample_segment, scale_dynamic_range
from .dsp import ConfigurationError, InvalidInputError, log_power, stft

SI_SDR_CLAMP_DB = 60.0
DEFAULT_SNR_GRID = (-10.0, -5.0, 0.0, 5.0, 10.0)


def si_sdr_raw(estimate: np.ndarray, reference: np.ndarray) -> float:
    """Unclamped SI-SDR in dB (may be +inf for a perfect estimate)."""
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise InvalidInputError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = float(ref @ ref)
    if ref_energy == 0:
        raise InvalidInputError("reference signal is all zeros")
    target = (est @ ref) / ref_energy * ref
    err = est - target
    num, den = float(target @ target), float(err @ err)
    if num == 0:
        return float("-inf")
    if den == 0:
        return float("inf")
    return 10.0 * np.log10(num / den)


def si_sdr(estimate: np.ndarray, reference: np.ndarray) -> float:
    """SI-SDR in dB clamped to +-60 dB."""
    return float(np.clip(si_sdr_raw(estimate, reference), -SI_SDR_CLAMP_DB, SI_SDR_CLAMP_DB))


# ---------------------------------------------------------------------------
# margin diagnostic
# ---------------------------------------------------------------------------

@dataclass
class MarginCurve:
    snr_bins_db: list[float]
    mean_margin: list[float]
    std_margin: list[float]
    count: list[int]

    def spearman(self) -> float:
        return float(stats.spearmanr(self.snr_bins_db, self.mean_margin).statistic)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["snr_db", "mean", "std", "count"])
        for row in zip(self.snr_bins_db, self.mean_margin, self.std_margin, self.count):
            w.writerow([f"{row[0]:g}", f"{row[1]:.8f}", f"{row[2]:.8f}", row[3]])
        return buf.getvalue()


def bin_margins(model, features: np.ndarray) -> np.ndarray:
    """Per-bin ``d(e, q_s) - d(e, q_n)`` from a frozen model, shape ``(N, T, F)``."""
    with ad.no_grad():
        e = model.encode(features)
        _, q_s, _ = model.quantize(e, "s")
        _, q_n, _ = model.quantize(e, "n")
        return ad.cosine_distance(e, q_s).data - ad.cosine_distance(e, q_n).data


def margin_diagnostic(model, clean: Sequence[np.ndarray], noise: Sequence[np.ndarray],
                      snr_grid: Sequence[float] = DEFAULT_SNR_GRID, n_mixtures: int = 16,
                      mix_cfg: MixConfig = MixConfig(), rng: np.random.Generator | None = None,
                      batch_size: int = 8) -> MarginCurve:
    """Mean and std of the per-bin margin over validation mixtures at each SNR.

    The same speech/noise segments and output level are reused at every SNR
    so the curve isolates the effect of the mixing SNR.
    """
    if len(clean) == 0 or len(noise) == 0 or n_mixtures < 1:
        raise ConfigurationError("margin diagnostic needs validation speech and noise")
    rng = rng if rng is not None else np.random.default_rng(0)
    pairs = []
    for _ in range(n_mixtures):
        s = sample_segment(clean[int(rng.integers(len(clean)))], mix_cfg.segment_seconds, rng)
        n = sample_segment(noise[int(rng.integers(len(noise)))], mix_cfg.segment_seconds, rng)
        level = float(rng.uniform(-mix_cfg.dynamic_range_db, 0.0))
        pairs.append((s, n, level))
    curve = MarginCurve([], [], [], [])
    eps = model.cfg.floor_epsilon
    for snr in snr_grid:
        feats = []
        for s, n, level in pairs:
            p = scale_dynamic_range(mix_at_snr(s, n, snr, rng, mix_cfg, scale=False), mix_cfg.dynamic_range_db,
                                    rng, level_db=level)
            feats.append(log_power(stft(p.degraded, model.stft_cfg), eps))
        margins = np.concatenate([bin_margins(model, np.stack(feats[i:i + batch_size])).ravel()
                                  for i in range(0, len(feats), batch_size)])
        curve.snr_bins_db.append(float(snr))
        curve.mean_margin.append(float(margins.mean()))
        curve.std_margin.append(float(margins.std()))
        curve.count.append(int(margins.size))
    return curve


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------

@dataclass
class EvalRow:
    snr_db: float
    split: str
    si_sdr_degraded: float | None
    si_sdr_enhanced: float | None
    count: int

    @property
    def improvement(self) -> float | None:
        if self.si_sdr_degraded is None or self.si_sdr_enhanced is None:
            return None
        return self.si_sdr_enhanced - self.si_sdr_degraded


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    COLUMNS = ("condition", "split", "si_sdr_degraded", "si_sdr_enhanced", "improvement", "count")

    def row(self, snr: float, split: str) -> EvalRow:
        for r in self.rows:
            if r.snr_db == snr and r.split == split:
                return r
        raise KeyError((snr, split))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([f"{r.snr_db:g}dB", r.split, _fmt(r.si_sdr_degraded), _fmt(r.si_sdr_enhanced),
                        _fmt(r.improvement), r.count])
        return buf.getvalue()

    def to_text(self) -> str:
        header = f"{'condition':>10} {'split':>7} {'degraded':>10} {'enhanced':>10} {'improve':>10} {'n':>5}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(f"{r.snr_db:>8g}dB {r.split:>7} {_fmt(r.si_sdr_degraded, 10)} "
                         f"{_fmt(r.si_sdr_enhanced, 10)} {_fmt(r.improvement, 10)} {r.count:>5}")
        return "\n".join(lines) + "\n"


def _fmt(v: float | None, width: int = 0) -> str:
    s = "missing" if v is None else f"{v:.4f}"
    return s.rjust(width) if width else s


def eval_report(enhance_fn: Callable[[np.ndarray], np.ndarray], clean: Sequence[np.ndarray],
                noise_by_split: dict[str, Sequence[np.ndarray]],
                snr_grid: Sequence[float] = DEFAULT_SNR_GRID, n_mixtures: int = 50,
                mix_cfg: MixConfig = MixConfig(), rng: np.random.Generator | None = None) -> EvalReport:
    """Per-utterance SI-SDR of degraded and enhanced audio, averaged per
    (SNR, split) cell. An empty noise split yields a row marked missing."""
    rng = rng if rng is not None else np.random.default_rng(0)
    report = EvalReport()
    for split, noise in noise_by_split.items():
        for snr in snr_grid:
            if len(clean) == 0 or len(noise) == 0:
                report.rows.append(EvalRow(float(snr), split, None, None, 0))
                continue
            deg, enh = [], []
            for _ in range(n_mixtures):
                s = sample_segment(clean[int(rng.integers(len(clean)))], mix_cfg.segment_seconds, rng)
                n = sample_segment(noise[int(rng.integers(len(noise)))], mix_cfg.segment_seconds, rng)
                p = mix_at_snr(s, n, snr, rng, mix_cfg)
                deg.append(si_sdr(p.degraded, p.clean))
                enh.append(si_sdr(enhance_fn(p.degraded), p.clean))
            report.rows.append(EvalRow(float(snr), split, float(np.mean(deg)), float(np.mean(enh)), n_mixtures))
    return report
