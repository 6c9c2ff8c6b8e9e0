"""VQ-VAE with a codebook split into a speech half and a noise half.

The encoder maps every bin of a ``T x F`` log-power spectrogram to an
``L``-dimensional embedding (all convolutions are stride 1, same padding).
Each embedding is quantized three times, against the speech half, the noise
half and the whole codebook, and each quantized map is decoded back to a
log-power spectrogram. Indices are 0-based: the speech half is
``[0, K/2)`` and the noise half ``[K/2, K)``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Parameter, Tensor
from .autodiff import checkpoint as ckpt
from .datagen import MixConfig, PairedExample, draw_paired
from .dsp import InvalidInputError, ConfigurationError, StftConfig, log_power, stft
from .seeding import restore_rng, rng_state

log = logging.getLogger(__name__)

PARTITIONS = ("s", "n", "d")


@dataclass(frozen=True)
class VqVaeConfig:
    embedding_dim: int = 32
    codebook_size: int = 256
    channels: tuple = (32, 64)
    kernel_size: int = 3
    n_residual: int = 2
    beta: float = 0.25
    embedding_relu: bool = False
    floor_epsilon: float = 1e-10
    dtype: str = "float32"

    def __post_init__(self):
        if self.codebook_size < 2 or self.codebook_size % 2:
            raise ConfigurationError(f"codebook size must be even and >= 2, got {self.codebook_size}")
        if self.kernel_size % 2 != 1:
            raise ConfigurationError("kernel size must be odd to preserve resolution")


class VqVae:
    def __init__(self, cfg: VqVaeConfig = VqVaeConfig(), stft_cfg: StftConfig = StftConfig(),
                 rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.stft_cfg = stft_cfg
        self.training = True
        self.feature_mean = 0.0
        self.feature_std = 1.0
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = np.dtype(cfg.dtype)
        k = cfg.kernel_size
        c1, c2 = cfg.channels
        L = cfg.embedding_dim
        self.params: dict[str, Parameter] = {}
        self.bn: dict[str, BatchNormState] = {}

        def conv(name, cin, cout, bn=True):
            std = np.sqrt(2.0 / (k * k * cin))
            self.params[f"{name}.w"] = Parameter(rng.normal(0, std, (k, k, cin, cout)).astype(dt), name)
            self.params[f"{name}.b"] = Parameter(np.zeros(cout, dt), name)
            if bn:
                self.params[f"{name}.gamma"] = Parameter(np.ones(cout, dt), name)
                self.params[f"{name}.beta"] = Parameter(np.zeros(cout, dt), name)
                self.bn[name] = BatchNormState(cout, dt)

        def convt(name, cin, cout, bn=True):
            # transposed-conv weight has the shape of the conv it mirrors
            std = np.sqrt(2.0 / (k * k * cin))
            self.params[f"{name}.w"] = Parameter(rng.normal(0, std, (k, k, cout, cin)).astype(dt), name)
            self.params[f"{name}.b"] = Parameter(np.zeros(cout, dt), name)
            if bn:
                self.params[f"{name}.gamma"] = Parameter(np.ones(cout, dt), name)
                self.params[f"{name}.beta"] = Parameter(np.zeros(cout, dt), name)
                self.bn[name] = BatchNormState(cout, dt)

        conv("enc1", 1, c1)
        conv("enc2", c1, c2)
        conv("enc3", c2, L)
        for r in range(cfg.n_residual):
            conv(f"enc_res{r}a", L, L, bn=False)
            conv(f"enc_res{r}b", L, L, bn=False)
        for r in range(cfg.n_residual):
            convt(f"dec_res{r}a", L, L, bn=False)
            convt(f"dec_res{r}b", L, L, bn=False)
        convt("dec3", L, c2)
        convt("dec2", c2, c1)
        convt("dec1", c1, 1, bn=False)

        cb = rng.normal(size=(cfg.codebook_size, L))
        cb /= np.linalg.norm(cb, axis=1, keepdims=True)
        self.params["codebook"] = Parameter(cb.astype(dt), "codebook")

    # -- bookkeeping ------------------------------------------------------
    @property
    def codebook(self) -> Parameter:
        return self.params["codebook"]

    @property
    def half(self) -> int:
        return self.cfg.codebook_size // 2

    def partition_range(self, part: str) -> tuple[int, int]:
        if part == "s":
            return 0, self.half
        if part == "n":
            return self.half, self.cfg.codebook_size
        if part == "d":
            return 0, self.cfg.codebook_size
        raise ConfigurationError(f"unknown partition {part!r}")

    def train(self) -> "VqVae":
        self.training = True
        return self

    def eval(self) -> "VqVae":
        self.training = False
        return self

    def freeze(self) -> "VqVae":
        """Eval mode with every parameter excluded from differentiation."""
        for p in self.params.values():
            p.freeze()
        return self.eval()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": p.data for k, p in self.params.items()}
        for k, s in self.bn.items():
            out[f"bn.{k}.mean"] = s.running_mean
            out[f"bn.{k}.var"] = s.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.array(arrays[f"param.{k}"], copy=True)
        for k, s in self.bn.items():
            s.running_mean = np.array(arrays[f"bn.{k}.mean"], copy=True)
            s.running_var = np.array(arrays[f"bn.{k}.var"], copy=True)

    def meta(self) -> dict:
        return {"kind": "vqvae", "config": asdict(self.cfg), "stft": asdict(self.stft_cfg),
                "feature_mean": self.feature_mean, "feature_std": self.feature_std}

    def checksum(self) -> bytes:
        """Bytes of every parameter and running statistic, in a fixed order."""
        arrays = self.state_arrays()
        return b"".join(np.ascontiguousarray(arrays[k]).tobytes() for k in sorted(arrays))

    # -- network ----------------------------------------------------------
    def _conv_block(self, x, name, transpose=False, bn=True, act=True):
        p = self.params
        pad = self.cfg.kernel_size // 2
        op = ad.conv_transpose2d if transpose else ad.conv2d
        y = op(x, p[f"{name}.w"], p[f"{name}.b"], 1, pad)
        if bn:
            y = ad.batch_norm2d(y, p[f"{name}.gamma"], p[f"{name}.beta"], self.bn[name], self.training)
        return ad.relu(y) if act else y

    def _residual(self, x, name, transpose=False):
        h = self._conv_block(x, f"{name}a", transpose, bn=False, act=True)
        h = self._conv_block(h, f"{name}b", transpose, bn=False, act=False)
        return x + h

    def _as_batch(self, f) -> Tensor:
        f = f if isinstance(f, Tensor) else Tensor(np.asarray(f))
        if f.ndim == 2:
            f = f.reshape((1,) + f.shape)
        if f.ndim != 3:
            raise InvalidInputError(f"expected (T, F) or (N, T, F) features, got {f.shape}")
        dt = np.dtype(self.cfg.dtype)
        if f.dtype != dt and not f.requires_grad:
            f = Tensor(f.data.astype(dt))
        return f

    def standardize(self, f) -> Tensor:
        return (f - self.feature_mean) * (1.0 / self.feature_std)

    def encode(self, f) -> Tensor:
        """Log-power features ``(N, T, F)`` -> embeddings ``(N, T, F, L)``."""
        x = self.standardize(self._as_batch(f))
        x = x.reshape(x.shape + (1,))
        x = self._conv_block(x, "enc1")
        x = self._conv_block(x, "enc2")
        x = self._conv_block(x, "enc3", act=self.cfg.embedding_relu)
        for r in range(self.cfg.n_residual):
            x = self._residual(x, f"enc_res{r}")
        return x

    def decode(self, q) -> Tensor:
        """Quantized embeddings ``(N, T, F, L)`` -> log-power features ``(N, T, F)``."""
        q = q if isinstance(q, Tensor) else Tensor(np.asarray(q))
        if q.ndim == 3:
            q = q.reshape((1,) + q.shape)
        if q.ndim != 4 or q.shape[-1] != self.cfg.embedding_dim:
            raise InvalidInputError(f"expected (..., {self.cfg.embedding_dim}) embeddings, got {q.shape}")
        x = q
        for r in range(self.cfg.n_residual):
            x = self._residual(x, f"dec_res{r}", transpose=True)
        x = self._conv_block(x, "dec3", transpose=True)
        x = self._conv_block(x, "dec2", transpose=True)
        x = self._conv_block(x, "dec1", transpose=True, bn=False, act=False)
        x = x.reshape(x.shape[:-1])
        return x * self.feature_std + self.feature_mean

    def quantize(self, e: Tensor, part: str) -> tuple[Tensor, Tensor, np.ndarray]:
        """Nearest codeword (cosine distance) within a partition.

        Returns ``(q_st, q, idx)``: the straight-through output (value of
        ``q``, gradient identity to ``e``), the gathered codewords (gradient
        to the codebook) and the global codeword indices.
        """
        if e.shape[-1] != self.cfg.embedding_dim:
            raise InvalidInputError(f"embedding dim {e.shape[-1]} != {self.cfg.embedding_dim}")
        lo, hi = self.partition_range(part)
        if hi <= lo:
            raise ConfigurationError(f"partition {part!r} is empty")
        idx = nearest_codeword(e.data, self.codebook.data[lo:hi]) + lo
        idx = ad.constant_choice(idx)
        q = self.codebook[idx]
        q_st = e + ad.stop_gradient(q - e)
        return q_st, q, idx


def nearest_codeword(e: np.ndarray, codebook: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Index of the cosine-nearest row of ``codebook`` for every vector in
    ``e`` (last axis); ties go to the lowest index."""
    flat = e.reshape(-1, e.shape[-1]).astype(np.float64)
    cb = codebook.astype(np.float64)
    en = flat / np.maximum(np.linalg.norm(flat, axis=1, keepdims=True), eps)
    cn = cb / np.maximum(np.linalg.norm(cb, axis=1, keepdims=True), eps)
    dist = 1.0 - en @ cn.T
    return np.argmin(dist, axis=1).reshape(e.shape[:-1])


@dataclass
class VqVaeOutput:
    e: Tensor
    q: dict  # partition -> straight-through quantized embedding
    q_raw: dict  # partition -> gathered codewords (gradient to the codebook)
    idx: dict  # partition -> int array (N, T, F)
    f_hat: dict  # partition -> decoded log-power features (N, T, F)


def vqvae_forward(f_degraded, model: VqVae, decode: Sequence[str] = PARTITIONS) -> VqVaeOutput:
    """One encode, three quantizations, and decodes for the requested partitions."""
    e = model.encode(f_degraded)
    q, q_raw, idx, f_hat = {}, {}, {}, {}
    for k in PARTITIONS:
        q[k], q_raw[k], idx[k] = model.quantize(e, k)
        if k in decode:
            f_hat[k] = model.decode(q[k])
    return VqVaeOutput(e, q, q_raw, idx, f_hat)


@dataclass
class VqVaeLossReport:
    rec_s: float
    rec_n: float
    rec_d: float
    vq_s: float
    vq_n: float
    vq_d: float
    commit_s: float
    commit_n: float
    commit_d: float
    total: float

    FIELDS = ("rec_s", "rec_n", "rec_d", "vq_s", "vq_n", "vq_d", "commit_s", "commit_n", "commit_d", "total")

    def as_row(self) -> list[float]:
        return [getattr(self, k) for k in self.FIELDS]


def vqvae_loss(out: VqVaeOutput, f_d, f_s, f_n, beta: float, feature_std: float = 1.0
               ) -> tuple[Tensor, VqVaeLossReport]:
    """Reconstruction + VQ + beta * commitment, summed over the three partitions.

    Reconstruction is the MSE of decoded vs target features in units of
    ``feature_std``. The VQ term moves codewords toward the (stopped)
    embeddings; the commitment term moves embeddings toward the (stopped)
    codewords. Both use cosine distance averaged over bins.
    """
    targets = {"s": f_s, "n": f_n, "d": f_d}
    terms = {}
    total = None
    e_stop = ad.stop_gradient(out.e)
    for k in PARTITIONS:
        t = targets[k]
        t = t if isinstance(t, Tensor) else Tensor(np.asarray(t))
        if t.ndim == 2:
            t = t.reshape((1,) + t.shape)
        fh = out.f_hat[k]
        if t.shape != fh.shape:
            raise InvalidInputError(f"target {k} shape {t.shape} != decoded shape {fh.shape}")
        diff = (fh - Tensor(t.data.astype(fh.dtype))) * (1.0 / feature_std)
        rec = ad.mean(ad.square(diff))
        vq = ad.mean(ad.cosine_distance(e_stop, out.q_raw[k]))
        commit = ad.mean(ad.cosine_distance(out.e, ad.stop_gradient(out.q_raw[k])))
        terms[f"rec_{k}"], terms[f"vq_{k}"], terms[f"commit_{k}"] = rec, vq, commit
        part = rec + vq + commit * beta
        total = part if total is None else total + part
    report = VqVaeLossReport(**{k: float(v.data) for k, v in terms.items()}, total=float(total.data))
    return total, report


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VqVaeTrainConfig:
    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-4
    checkpoint_every: int = 0
    steps_per_epoch: int = 50
    stats_examples: int = 32


def paired_features(p: PairedExample, stft_cfg: StftConfig, eps: float) -> tuple[np.ndarray, ...]:
    return tuple(log_power(stft(x, stft_cfg), eps) for x in (p.degraded, p.clean, p.noise))


def batch_features(examples: Sequence[PairedExample], stft_cfg: StftConfig, eps: float):
    feats = [paired_features(p, stft_cfg, eps) for p in examples]
    return tuple(np.stack([f[i] for f in feats]) for i in range(3))


@dataclass
class VqVaeTrainResult:
    history: list[VqVaeLossReport]
    usage: list[dict] = field(default_factory=list)


def fit_feature_stats(model: VqVae, clean, noise, mix_cfg: MixConfig, rng: np.random.Generator,
                      n: int) -> None:
    feats = [paired_features(draw_paired(clean, noise, mix_cfg, rng), model.stft_cfg,
                             model.cfg.floor_epsilon)[0] for _ in range(n)]
    allf = np.concatenate([f.ravel() for f in feats])
    model.feature_mean = float(allf.mean())
    model.feature_std = float(allf.std())


def save_vqvae(path, model: VqVae, optimizer: ad.Adam | None = None, extra_meta: dict | None = None) -> None:
    arrays = model.state_arrays()
    meta = model.meta()
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
        meta["optimizer_step"] = optimizer.step_count
    meta.update(extra_meta or {})
    ckpt.save(path, arrays, meta)


def load_vqvae(path) -> tuple[VqVae, dict, dict]:
    arrays, meta = ckpt.load(path)
    if meta.get("kind") != "vqvae":
        raise ckpt.CheckpointError(f"{path} is not a VQ-VAE checkpoint")
    cfg = meta["config"]
    cfg["channels"] = tuple(cfg["channels"])
    model = VqVae(VqVaeConfig(**cfg), StftConfig(**meta["stft"]))
    model.load_state_arrays(arrays)
    model.feature_mean = meta["feature_mean"]
    model.feature_std = meta["feature_std"]
    return model, arrays, meta


def train_vqvae(clean: Sequence[np.ndarray], noise: Sequence[np.ndarray], model: VqVae,
                train_cfg: VqVaeTrainConfig, mix_cfg: MixConfig, rng: np.random.Generator,
                checkpoint_path: str | Path | None = None, resume: bool = False,
                callback: Callable[[int, VqVaeLossReport], None] | None = None) -> VqVaeTrainResult:
    """Supervised stage: mix, featurise, forward, loss, Adam step.

    With ``resume`` and an existing checkpoint, training continues from the
    saved step with the saved optimiser and RNG state.
    """
    if len(clean) == 0 or len(noise) == 0:
        raise ConfigurationError("training needs at least one clean and one noise source")
    model.train()
    opt = ad.Adam({k: p for k, p in model.params.items() if p.trainable}, lr=train_cfg.lr)
    history: list[VqVaeLossReport] = []
    usage: list[dict] = []
    start = 0
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        arrays, meta = ckpt.load(checkpoint_path)
        model.load_state_arrays(arrays)
        model.feature_mean, model.feature_std = meta["feature_mean"], meta["feature_std"]
        opt.load_state_arrays(arrays, meta["optimizer_step"])
        rng = restore_rng(meta["rng_state"])
        start = meta["step"]
        history = [VqVaeLossReport(*row) for row in meta["history"]]
        usage = meta.get("usage", [])
    else:
        fit_feature_stats(model, clean, noise, mix_cfg, rng, train_cfg.stats_examples)

    half = model.half
    counts = {"s": np.zeros(half, np.int64), "n": np.zeros(half, np.int64)}
    for step in range(start, train_cfg.steps):
        batch = [draw_paired(clean, noise, mix_cfg, rng) for _ in range(train_cfg.batch_size)]
        f_d, f_s, f_n = batch_features(batch, model.stft_cfg, model.cfg.floor_epsilon)
        out = vqvae_forward(f_d, model)
        loss, report = vqvae_loss(out, f_d, f_s, f_n, model.cfg.beta, model.feature_std)
        opt.zero_grad()
        ad.backward(loss)
        opt.step()
        history.append(report)
        counts["s"] += np.bincount(out.idx["s"].ravel(), minlength=half)[:half]
        counts["n"] += np.bincount(out.idx["n"].ravel() - half, minlength=half)[:half]
        if (step + 1) % train_cfg.steps_per_epoch == 0:
            usage.append({"step": step + 1,
                          "speech_fraction": float((counts["s"] > 0).mean()),
                          "noise_fraction": float((counts["n"] > 0).mean())})
            counts = {"s": np.zeros(half, np.int64), "n": np.zeros(half, np.int64)}
        if callback is not None:
            callback(step, report)
        if step % 25 == 0:
            log.info("vqvae step %d total %.4f", step, report.total)
        if checkpoint_path is not None and train_cfg.checkpoint_every and (step + 1) % train_cfg.checkpoint_every == 0:
            save_vqvae(checkpoint_path, model, opt, {
                "step": step + 1, "rng_state": rng_state(rng),
                "history": [r.as_row() for r in history], "usage": usage})
    model.eval()
    return VqVaeTrainResult(history, usage)
