"""GRU gain-mask enhancer and its semi-supervised training.

The supervised loss is the MSE between enhanced and clean STFT magnitudes.
The unsupervised losses pass the enhanced log-power spectrogram through a
frozen VQ-VAE and apply a per-bin triplet hinge that pulls the enhanced
signal toward the speech half of the codebook and away from the noise half.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .autodiff import checkpoint as ckpt
from .datagen import MixConfig, PairedExample, UnpairedExample, draw_paired, draw_unpaired
from .dsp import (ConfigurationError, InvalidInputError, StftConfig, apply_gain, istft, log_power,
                  recombine_phase, stft)
from .metrics import si_sdr
from .seeding import rng_state

log = logging.getLogger(__name__)


class TrainMode(str, enum.Enum):
    BASELINE = "Baseline"
    PAIRED_EMBEDDING = "PairedEmbedding"
    PAIRED_FEATURE = "PairedFeature"
    UNPAIRED_EMBEDDING = "UnpairedEmbedding"
    UNPAIRED_FEATURE = "UnpairedFeature"

    @property
    def unsupervised_loss(self) -> str | None:
        if self is TrainMode.BASELINE:
            return None
        return "embedding" if self.value.endswith("Embedding") else "feature"

    @property
    def uses_unpaired(self) -> bool:
        return self.value.startswith("Unpaired")


@dataclass(frozen=True)
class EnhancerConfig:
    n_bins: int = 257
    hidden: int = 64
    layers: int = 2
    input_scale: float = 10.0
    dtype: str = "float32"


class Enhancer:
    """Input projection, stacked causal GRU, sigmoid gain per bin."""

    def __init__(self, cfg: EnhancerConfig = EnhancerConfig(), rng: np.random.Generator | None = None):
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = np.dtype(cfg.dtype)
        f, h = cfg.n_bins, cfg.hidden

        def uniform(shape, fan_in):
            b = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-b, b, shape).astype(dt)

        self.params: dict[str, Parameter] = {
            "in.w": Parameter(uniform((f, h), f)), "in.b": Parameter(np.zeros(h, dt)),
        }
        for layer in range(cfg.layers):
            self.params[f"gru{layer}.w_ih"] = Parameter(uniform((h, 3 * h), h))
            self.params[f"gru{layer}.w_hh"] = Parameter(uniform((h, 3 * h), h))
            self.params[f"gru{layer}.b_ih"] = Parameter(uniform((3 * h,), h))
            self.params[f"gru{layer}.b_hh"] = Parameter(uniform((3 * h,), h))
        self.params["out.w"] = Parameter(uniform((h, f), h))
        self.params["out.b"] = Parameter(np.zeros(f, dt))
        for k, p in self.params.items():
            p.name = k

    def normalize_input(self, features: np.ndarray) -> np.ndarray:
        """Subtract the running per-bin mean over frames ``0..t`` (causal
        utterance-mean normalisation) and rescale."""
        features = np.asarray(features, dtype=np.float64)
        cum = np.cumsum(features, axis=-2)
        counts = np.arange(1, features.shape[-2] + 1).reshape(-1, 1)
        return ((features - cum / counts) / self.cfg.input_scale).astype(self.cfg.dtype)

    def gains(self, features) -> Tensor:
        """Log-power features ``(N, T, F)`` or ``(T, F)`` -> gains in [0, 1]."""
        features = np.asarray(features)
        squeeze = features.ndim == 2
        if squeeze:
            features = features[None]
        if features.ndim != 3 or features.shape[-1] != self.cfg.n_bins:
            raise InvalidInputError(f"expected (..., T, {self.cfg.n_bins}) features, got {features.shape}")
        p = self.params
        x = ad.relu(ad.linear(Tensor(self.normalize_input(features)), p["in.w"], p["in.b"]))
        layers = [(p[f"gru{i}.w_ih"], p[f"gru{i}.w_hh"], p[f"gru{i}.b_ih"], p[f"gru{i}.b_hh"])
                  for i in range(self.cfg.layers)]
        h = ad.gru_stack(x, layers)
        g = ad.sigmoid(ad.linear(h, p["out.w"], p["out.b"]))
        return g[0] if squeeze else g

    def set_constant_gain(self, value: float) -> "Enhancer":
        """Force every output gain to ``value`` (used for identity/mute checks)."""
        value = float(np.clip(value, 1e-30, 1.0))
        logit = 60.0 if value >= 1.0 else float(np.log(value) - np.log1p(-value))
        self.params["out.w"].data[:] = 0
        self.params["out.b"].data[:] = max(logit, -60.0)
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"param.{k}": p.data for k, p in self.params.items()}

    def load_state_arrays(self, arrays) -> None:
        for k, p in self.params.items():
            p.data = np.array(arrays[f"param.{k}"], copy=True)


def enhance(degraded: np.ndarray, model: Enhancer, stft_cfg: StftConfig = StftConfig(),
            floor_epsilon: float = 1e-10) -> np.ndarray:
    """STFT, gains, masked magnitude with degraded phase, inverse STFT.

    The input is zero-padded so every sample lies in the fully overlapped
    interior; the output is trimmed back to the input length.
    """
    degraded = np.asarray(degraded, dtype=np.float64)
    win, hop = stft_cfg.window_length, stft_cfg.hop_length
    front = win - hop
    back = front + (-(len(degraded) + 2 * front - win)) % hop
    padded = np.pad(degraded, (front, back))
    x = stft(padded, stft_cfg)
    with ad.no_grad():
        g = model.gains(log_power(x, floor_epsilon)).data.astype(np.float64)
    y = istft(recombine_phase(apply_gain(g, x), x), stft_cfg, length=len(padded))
    return y[front:front + len(degraded)]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def supervised_loss(s_hat_mag, s_mag) -> Tensor:
    s_hat_mag = s_hat_mag if isinstance(s_hat_mag, Tensor) else Tensor(np.asarray(s_hat_mag))
    s_mag = np.asarray(s_mag.data if isinstance(s_mag, Tensor) else s_mag)
    if s_hat_mag.shape != s_mag.shape:
        raise InvalidInputError(f"shape mismatch {s_hat_mag.shape} vs {s_mag.shape}")
    return ad.mean(ad.square(s_hat_mag - Tensor(s_mag.astype(s_hat_mag.dtype))))


def _const(x, dtype) -> Tensor:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    return Tensor(data.astype(dtype))


def embedding_triplet_loss(e, q_s, q_n, margin: float) -> Tensor:
    """Mean over bins of ``max(d(e, q_s) - d(e, q_n) + margin, 0)``; the
    quantized embeddings are constants."""
    e = e if isinstance(e, Tensor) else Tensor(np.asarray(e))
    if not (e.shape == np.shape(_data(q_s)) == np.shape(_data(q_n))):
        raise InvalidInputError(f"shape mismatch {e.shape}, {np.shape(_data(q_s))}, {np.shape(_data(q_n))}")
    d_pos = ad.cosine_distance(e, _const(q_s, e.dtype))
    d_neg = ad.cosine_distance(e, _const(q_n, e.dtype))
    return ad.mean(ad.relu(d_pos - d_neg + margin))


def feature_triplet_loss(anchor, f_s, f_n, margin: float, patch: int = 3) -> Tensor:
    """Per-bin triplet hinge on ``(N, T, F)`` or ``(T, F)`` features, with
    cosine distance over the ``patch x patch`` neighbourhood of each bin."""
    anchor = anchor if isinstance(anchor, Tensor) else Tensor(np.asarray(anchor))
    if not (anchor.shape == np.shape(_data(f_s)) == np.shape(_data(f_n))):
        raise InvalidInputError(f"shape mismatch {anchor.shape}, {np.shape(_data(f_s))}, {np.shape(_data(f_n))}")
    if anchor.ndim == 2:
        anchor = anchor.reshape((1,) + anchor.shape)
        f_s, f_n = _data(f_s)[None], _data(f_n)[None]
    pa = ad.local_patches(anchor, patch)
    ps = ad.local_patches(_const(f_s, anchor.dtype), patch)
    pn = ad.local_patches(_const(f_n, anchor.dtype), patch)
    return ad.mean(ad.relu(ad.cosine_distance(pa, ps) - ad.cosine_distance(pa, pn) + margin))


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


# ---------------------------------------------------------------------------
# semi-supervised step and training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SemiSupConfig:
    mode: TrainMode = TrainMode.BASELINE
    margin: float = 0.2
    unsup_weight: float = 0.1
    batch_size: int = 8
    unpaired_batch_size: int = 8
    steps: int = 1000
    lr: float = 1e-4
    feature_anchor: str = "input"  # or "decoded"
    validate_every: int = 100
    val_mixtures: int = 16
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", TrainMode(self.mode))
        if self.margin < 0 or self.unsup_weight < 0:
            raise ConfigurationError("margin and unsupervised weight must be nonnegative")
        if self.feature_anchor not in ("input", "decoded"):
            raise ConfigurationError(f"feature_anchor must be 'input' or 'decoded', got {self.feature_anchor!r}")


@dataclass
class StepReport:
    total: float
    sup_loss: float
    embedding_loss: float | None = None
    feature_loss: float | None = None
    mean_margin: float | None = None
    terms: tuple = ()


def _spectra(waves: Sequence[np.ndarray], stft_cfg: StftConfig) -> np.ndarray:
    return np.stack([stft(w, stft_cfg) for w in waves])


def _unsupervised(s_hat: Tensor, vqvae, cfg: SemiSupConfig, eps: float):
    """Unsupervised loss on enhanced magnitudes ``(N, T, F)``.

    Returns (loss tensor, per-bin margins).
    """
    f_enh = ad.log(ad.clamp_min(ad.square(s_hat), eps))
    kind = cfg.mode.unsupervised_loss
    if kind == "embedding":
        e = vqvae.encode(f_enh)
        with ad.no_grad():
            _, q_s, _ = vqvae.quantize(e, "s")
            _, q_n, _ = vqvae.quantize(e, "n")
        loss = embedding_triplet_loss(e, q_s, q_n, cfg.margin)
        margins = ad.cosine_distance(e.data, q_s.data).data - ad.cosine_distance(e.data, q_n.data).data
        return loss, margins
    with ad.no_grad():
        e = vqvae.encode(f_enh.data)
        _, q_s, _ = vqvae.quantize(e, "s")
        _, q_n, _ = vqvae.quantize(e, "n")
        f_s = vqvae.standardize(vqvae.decode(q_s)).data
        f_n = vqvae.standardize(vqvae.decode(q_n)).data
        margins = ad.cosine_distance(e, q_s).data - ad.cosine_distance(e, q_n).data
    if cfg.feature_anchor == "input":
        anchor = vqvae.standardize(f_enh)
    else:
        e_grad = vqvae.encode(f_enh)
        q_d, _, _ = vqvae.quantize(e_grad, "d")
        anchor = vqvae.standardize(vqvae.decode(q_d))
    return feature_triplet_loss(anchor, f_s, f_n, cfg.margin), margins


def semi_supervised_step(paired: Sequence[PairedExample], unpaired: Sequence[UnpairedExample] | None,
                         model: Enhancer, vqvae, cfg: SemiSupConfig, optimizer: ad.Adam,
                         stft_cfg: StftConfig = StftConfig(), floor_epsilon: float = 1e-10) -> StepReport:
    """One parameter update of the enhancer: ``L_s + weight * L_u``.

    ``L_u`` is averaged over the bins of the paired batch (Paired-* modes) or
    of the paired and unpaired batches together (Unpaired-* modes). The
    VQ-VAE must be frozen; it only supplies forward passes and gradients
    with respect to its input.
    """
    if any(p.requires_grad for p in vqvae.params.values()) or vqvae.training:
        raise ConfigurationError("the VQ-VAE must be frozen (call .freeze()) before enhancer training")
    if cfg.mode.uses_unpaired and not unpaired:
        raise ConfigurationError(f"mode {cfg.mode.value} needs an unpaired batch")
    dt = np.dtype(model.cfg.dtype)
    terms = ["L_s:paired"]

    x = _spectra([p.degraded for p in paired], stft_cfg)
    s = _spectra([p.clean for p in paired], stft_cfg)
    g = model.gains(log_power(x, floor_epsilon))
    s_hat = g * Tensor(np.abs(x).astype(dt))
    sup = supervised_loss(s_hat, np.abs(s))
    total = sup
    report = StepReport(total=0.0, sup_loss=float(sup.data))

    kind = cfg.mode.unsupervised_loss
    if kind is not None:
        batches = [("paired", s_hat)]
        if cfg.mode.uses_unpaired:
            xu = _spectra([u.degraded for u in unpaired], stft_cfg)
            gu = model.gains(log_power(xu, floor_epsilon))
            batches.append(("unpaired", gu * Tensor(np.abs(xu).astype(dt))))
        losses, margins, sizes = [], [], []
        for name, mag in batches:
            loss, m = _unsupervised(mag, vqvae, cfg, floor_epsilon)
            losses.append(loss)
            margins.append(m.ravel())
            sizes.append(m.size)
            terms.append(f"L_{'embed' if kind == 'embedding' else 'feat'}:{name}")
        n_total = sum(sizes)
        unsup = losses[0] * (sizes[0] / n_total)
        for loss, n in zip(losses[1:], sizes[1:]):
            unsup = unsup + loss * (n / n_total)
        total = total + unsup * cfg.unsup_weight
        if kind == "embedding":
            report.embedding_loss = float(unsup.data)
        else:
            report.feature_loss = float(unsup.data)
        report.mean_margin = float(np.concatenate(margins).mean())

    optimizer.zero_grad()
    ad.backward(total)
    optimizer.step()
    report.total = float(total.data)
    report.terms = tuple(terms)
    return report


HISTORY_COLUMNS = ("step", "L_s", "L_embed", "L_feat", "mean_margin", "val_si_sdr")


@dataclass
class SeTrainResult:
    history: list[dict] = field(default_factory=list)
    reports: list[StepReport] = field(default_factory=list)


def validation_si_sdr(model: Enhancer, val_set: Sequence[PairedExample], stft_cfg: StftConfig,
                      eps: float) -> float:
    return float(np.mean([si_sdr(enhance(p.degraded, model, stft_cfg, eps), p.clean) for p in val_set]))


def save_enhancer(path, model: Enhancer, optimizer: ad.Adam | None = None, extra_meta: dict | None = None):
    arrays = model.state_arrays()
    meta = {"kind": "enhancer", "config": asdict(model.cfg)}
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
        meta["optimizer_step"] = optimizer.step_count
    meta.update(extra_meta or {})
    ckpt.save(path, arrays, meta)


def load_enhancer(path) -> tuple[Enhancer, dict, dict]:
    arrays, meta = ckpt.load(path)
    if meta.get("kind") != "enhancer":
        raise ckpt.CheckpointError(f"{path} is not an enhancer checkpoint")
    model = Enhancer(EnhancerConfig(**meta["config"]))
    model.load_state_arrays(arrays)
    return model, arrays, meta


def train_se(clean: Sequence[np.ndarray], noise: Sequence[np.ndarray], unpaired: Sequence[np.ndarray] | None,
             model: Enhancer, vqvae, cfg: SemiSupConfig, mix_cfg: MixConfig,
             paired_rng: np.random.Generator, unpaired_rng: np.random.Generator,
             val_set: Sequence[PairedExample] = (), stft_cfg: StftConfig = StftConfig(),
             floor_epsilon: float = 1e-10, checkpoint_path: str | Path | None = None,
             callback: Callable[[int, StepReport], None] | None = None) -> SeTrainResult:
    """Semi-supervised training loop with periodic validation SI-SDR.

    Paired and unpaired batches come from separate RNG streams and are
    drawn 1:1 per step in Unpaired-* modes.
    """
    if len(clean) == 0 or len(noise) == 0:
        raise ConfigurationError("enhancer training needs paired data")
    if cfg.mode.uses_unpaired and not unpaired:
        raise ConfigurationError(f"mode {cfg.mode.value} needs unpaired data")
    vqvae.freeze()
    opt = ad.Adam(model.params, lr=cfg.lr)
    result = SeTrainResult()
    for step in range(cfg.steps):
        paired = [draw_paired(clean, noise, mix_cfg, paired_rng) for _ in range(cfg.batch_size)]
        batch_u = None
        if cfg.mode.uses_unpaired:
            batch_u = [draw_unpaired(unpaired, mix_cfg, unpaired_rng) for _ in range(cfg.unpaired_batch_size)]
        rep = semi_supervised_step(paired, batch_u, model, vqvae, cfg, opt, stft_cfg, floor_epsilon)
        row = {"step": step + 1, "L_s": rep.sup_loss, "L_embed": rep.embedding_loss,
               "L_feat": rep.feature_loss, "mean_margin": rep.mean_margin, "val_si_sdr": None}
        if val_set and cfg.validate_every and ((step + 1) % cfg.validate_every == 0 or step + 1 == cfg.steps):
            row["val_si_sdr"] = validation_si_sdr(model, val_set, stft_cfg, floor_epsilon)
            log.info("se step %d L_s %.4f val SI-SDR %.3f", step + 1, rep.sup_loss, row["val_si_sdr"])
        result.history.append(row)
        result.reports.append(rep)
        if callback is not None:
            callback(step, rep)
        if checkpoint_path is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_enhancer(checkpoint_path, model, opt, {"step": step + 1, "mode": cfg.mode.value,
                                                         "paired_rng": rng_state(paired_rng),
                                                         "unpaired_rng": rng_state(unpaired_rng)})
    return result
