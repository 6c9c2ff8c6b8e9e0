import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vqse import autodiff as ad
from vqse.autodiff import Tensor
from vqse.datagen import MixConfig, ToyCorpusSpec, UnpairedExample, draw_paired, draw_unpaired, toy_corpus
from vqse.dsp import ConfigurationError, StftConfig, log_power, stft
from vqse.enhancer import (HISTORY_COLUMNS, Enhancer, EnhancerConfig, SemiSupConfig, TrainMode, _unsupervised,
                           embedding_triplet_loss, enhance, feature_triplet_loss, load_enhancer, save_enhancer,
                           semi_supervised_step, supervised_loss, train_se)
from vqse.vqvae import VqVae, VqVaeConfig

STFT = StftConfig(window_length=64, hop_length=32, fft_size=64)
ENH = EnhancerConfig(n_bins=STFT.n_bins, hidden=8, layers=2)
MIX = MixConfig(segment_seconds=0.05)
CORPUS = ToyCorpusSpec(clean_per_split={"train": 3, "valid": 1, "test": 1, "unpaired": 2},
                       noise_per_class={"train": 1, "valid": 1, "test": 1, "unpaired": 1},
                       n_unpaired=3, item_seconds=0.3)


@pytest.fixture(scope="module")
def data():
    c = toy_corpus(np.random.default_rng(0), CORPUS)
    return ([s.samples for s in c.select("clean", "train")], [s.samples for s in c.select("noise", "train")],
            [s.samples for s in c.unpaired])


def frozen_vqvae(seed=0):
    m = VqVae(VqVaeConfig(embedding_dim=4, codebook_size=8, channels=(4, 4), n_residual=1), STFT,
              np.random.default_rng(seed))
    m.feature_mean, m.feature_std = -8.0, 5.0
    return m.freeze()


def unit(theta):
    return np.array([np.cos(theta), np.sin(theta)])


# ---------------------------------------------------------------------------
# gain estimator
# ---------------------------------------------------------------------------

def test_gains_in_unit_interval_and_deterministic():
    m = Enhancer(ENH, np.random.default_rng(0))
    f = np.random.default_rng(1).normal(-5, 5, (2, 7, STFT.n_bins))
    g = m.gains(f).data
    assert g.shape == f.shape
    assert np.all((g >= 0) & (g <= 1))
    np.testing.assert_array_equal(g, m.gains(f).data)


@settings(max_examples=15, deadline=None)
@given(t=st.integers(0, 8), seed=st.integers(0, 1000))
def test_gains_causal(t, seed):
    m = Enhancer(ENH, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    f = rng.normal(-5, 5, (1, 10, STFT.n_bins))
    g = m.gains(f).data
    f2 = f.copy()
    f2[:, t + 1:] += rng.normal(0, 10, f2[:, t + 1:].shape)
    np.testing.assert_array_equal(m.gains(f2).data[:, :t + 1], g[:, :t + 1])


def test_identity_gain_reproduces_input():
    m = Enhancer(ENH).set_constant_gain(1.0)
    for n in (2000, 2017):
        x = np.random.default_rng(2).standard_normal(n)
        y = enhance(x, m, STFT)
        assert len(y) == n
        # padding puts every sample in the fully overlapped interior
        np.testing.assert_allclose(y, x, atol=1e-6)


def test_zero_gain_is_near_silent():
    m = Enhancer(ENH).set_constant_gain(0.0)
    x = np.random.default_rng(3).standard_normal(2000)
    assert np.max(np.abs(enhance(x, m, STFT))) < 1e-10


def test_enhancer_checkpoint_round_trip(tmp_path):
    m = Enhancer(ENH, np.random.default_rng(4))
    save_enhancer(tmp_path / "e.ckpt", m)
    back, _, meta = load_enhancer(tmp_path / "e.ckpt")
    assert back.cfg == m.cfg and meta["kind"] == "enhancer"
    f = np.random.default_rng(5).normal(-5, 5, (1, 6, STFT.n_bins))
    np.testing.assert_array_equal(back.gains(f).data, m.gains(f).data)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def test_supervised_loss_examples():
    s = np.random.default_rng(6).uniform(0, 3, (4, 5))
    assert float(supervised_loss(s, s).data) == 0.0
    assert float(supervised_loss(s + 1.0, s).data) == pytest.approx(1.0, abs=1e-12)
    a = np.random.default_rng(7).uniform(0, 3, (4, 5))
    assert float(supervised_loss(a, s).data) == pytest.approx(np.mean((a - s) ** 2), rel=1e-12)


def test_embedding_triplet_examples():
    e = unit(0.0)[None]
    m = 0.2
    # d(e, q_s) = 0 and d(e, q_n) = m: boundary of the hinge
    q_n = unit(np.arccos(1 - m))[None]
    assert float(embedding_triplet_loss(e, e, q_n, m).data) == pytest.approx(0.0, abs=1e-12)
    # equal distances give exactly the margin
    q = unit(1.0)[None]
    assert float(embedding_triplet_loss(e, q, q, m).data) == pytest.approx(m, abs=1e-12)
    # d_pos = 0.9, d_neg = 0.1
    loss = embedding_triplet_loss(e, unit(np.arccos(0.1))[None], unit(np.arccos(0.9))[None], m)
    assert float(loss.data) == pytest.approx(1.0, abs=1e-12)


def _patches(x, size=3):
    r = size // 2
    t, f = x.shape
    out = np.zeros((t, f, size * size))
    for i in range(t):
        for j in range(f):
            k = 0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    if 0 <= i + di < t and 0 <= j + dj < f:
                        out[i, j, k] = x[i + di, j + dj]
                    k += 1
    return out


def _cos(a, b):
    return 1 - np.sum(a * b, -1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))


def test_feature_triplet_examples():
    rng = np.random.default_rng(8)
    f_s = rng.normal(-5, 3, (5, 6))
    # anchor == f_s and every patch distance to f_n equals the margin (2 for f_n = -f_s)
    assert float(feature_triplet_loss(f_s, f_s, -f_s, 2.0).data) == pytest.approx(0.0, abs=1e-12)
    # f_s == f_n -> loss == m
    assert float(feature_triplet_loss(rng.normal(size=(5, 6)), f_s, f_s, 0.2).data) == pytest.approx(0.2, abs=1e-12)
    # random triple against a hand-rolled per-bin computation with clipped edge patches
    a, s, n = rng.normal(-5, 3, (3, 4, 7))
    pa, ps, pn = _patches(a), _patches(s), _patches(n)
    expected = np.mean(np.maximum(_cos(pa, ps) - _cos(pa, pn) + 0.3, 0))
    assert float(feature_triplet_loss(a, s, n, 0.3).data) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), m=st.floats(0, 1))
def test_triplets_nonnegative(seed, m):
    rng = np.random.default_rng(seed)
    e, q_s, q_n = rng.standard_normal((3, 2, 3, 4))
    assert float(embedding_triplet_loss(e, q_s, q_n, m).data) >= 0
    a, s, n = rng.standard_normal((3, 2, 3, 4))
    assert float(feature_triplet_loss(a, s, n, m).data) >= 0


# ---------------------------------------------------------------------------
# semi-supervised step
# ---------------------------------------------------------------------------

def _batches(data, seed, n=2):
    clean, noise, unpaired = data
    rng = np.random.default_rng(seed)
    return ([draw_paired(clean, noise, MIX, rng) for _ in range(n)],
            [draw_unpaired(unpaired, MIX, rng) for _ in range(n)])


def _step(mode, data, steps=3, weight=0.1, vq=None, seed=0):
    vq = vq or frozen_vqvae()
    model = Enhancer(ENH, np.random.default_rng(seed))
    cfg = SemiSupConfig(mode=mode, unsup_weight=weight, lr=1e-3)
    opt = ad.Adam(model.params, lr=cfg.lr)
    reports = []
    for i in range(steps):
        paired, unpaired = _batches(data, 100 + i)
        reports.append(semi_supervised_step(paired, unpaired if mode.uses_unpaired else None, model, vq, cfg,
                                            opt, STFT))
    return model, reports


EXPECTED_TERMS = {
    TrainMode.BASELINE: ("L_s:paired",),
    TrainMode.PAIRED_EMBEDDING: ("L_s:paired", "L_embed:paired"),
    TrainMode.PAIRED_FEATURE: ("L_s:paired", "L_feat:paired"),
    TrainMode.UNPAIRED_EMBEDDING: ("L_s:paired", "L_embed:paired", "L_embed:unpaired"),
    TrainMode.UNPAIRED_FEATURE: ("L_s:paired", "L_feat:paired", "L_feat:unpaired"),
}


@pytest.mark.parametrize("mode", list(TrainMode))
def test_mode_terms_and_frozen_vqvae(mode, data):
    vq = frozen_vqvae()
    before = vq.checksum()
    _, reports = _step(mode, data, steps=3, vq=vq)
    assert vq.checksum() == before
    assert all(r.terms == EXPECTED_TERMS[mode] for r in reports)
    assert all(p.grad is None for p in vq.params.values())


def test_baseline_total_is_supervised(data):
    _, reports = _step(TrainMode.BASELINE, data, steps=2)
    for r in reports:
        assert r.total == r.sup_loss
        assert r.embedding_loss is None and r.feature_loss is None


def test_zero_weight_matches_baseline(data):
    base, _ = _step(TrainMode.BASELINE, data, steps=3)
    other, _ = _step(TrainMode.UNPAIRED_EMBEDDING, data, steps=3, weight=0.0)
    for k in base.params:
        np.testing.assert_array_equal(base.params[k].data, other.params[k].data)


def test_unfrozen_vqvae_rejected(data):
    vq = frozen_vqvae()
    vq.train()
    with pytest.raises(ConfigurationError):
        _step(TrainMode.PAIRED_EMBEDDING, data, steps=1, vq=vq)


def test_unpaired_mode_needs_unpaired_batch(data):
    model = Enhancer(ENH)
    paired, _ = _batches(data, 0)
    cfg = SemiSupConfig(mode=TrainMode.UNPAIRED_FEATURE)
    with pytest.raises(ConfigurationError):
        semi_supervised_step(paired, None, model, frozen_vqvae(), cfg, ad.Adam(model.params), STFT)


@pytest.mark.parametrize("mode", [TrainMode.PAIRED_EMBEDDING, TrainMode.PAIRED_FEATURE])
@pytest.mark.parametrize("anchor", ["input", "decoded"])
def test_unsupervised_gradient_routing(mode, anchor, data):
    vq = frozen_vqvae()
    model = Enhancer(ENH, np.random.default_rng(1))
    paired, _ = _batches(data, 3)
    x = np.stack([stft(p.degraded, STFT) for p in paired])
    g = model.gains(log_power(x))
    loss, _ = _unsupervised(g * Tensor(np.abs(x).astype(np.float32)), vq,
                            SemiSupConfig(mode=mode, margin=1.0, feature_anchor=anchor), 1e-10)
    ad.backward(loss)
    assert all(p.grad is None for p in vq.params.values())
    assert any(p.grad is not None and np.any(p.grad != 0) for p in model.params.values())


def test_semisup_config_validation():
    with pytest.raises(ConfigurationError):
        SemiSupConfig(margin=-1)
    with pytest.raises(ConfigurationError):
        SemiSupConfig(feature_anchor="other")
    assert SemiSupConfig(mode="PairedFeature").mode is TrainMode.PAIRED_FEATURE


def test_unpaired_example_type():
    assert isinstance(draw_unpaired([np.ones(1000)], MIX, np.random.default_rng(0)), UnpairedExample)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _train(data, mode, steps=4):
    clean, noise, unpaired = data
    vq = frozen_vqvae()
    model = Enhancer(ENH, np.random.default_rng(2))
    cfg = SemiSupConfig(mode=mode, steps=steps, batch_size=2, unpaired_batch_size=2, validate_every=2, lr=1e-3)
    val = [draw_paired(clean, noise, MIX, np.random.default_rng(9)) for _ in range(2)]
    res = train_se(clean, noise, unpaired, model, vq, cfg, MIX, np.random.default_rng(3),
                   np.random.default_rng(4), val, STFT)
    return res, model


def test_train_se_history_reproducible(data):
    a, ma = _train(data, TrainMode.UNPAIRED_FEATURE)
    b, mb = _train(data, TrainMode.UNPAIRED_FEATURE)
    assert a.history == b.history
    assert set(a.history[0]) == set(HISTORY_COLUMNS)
    assert a.history[1]["val_si_sdr"] is not None and a.history[0]["val_si_sdr"] is None
    for k in ma.params:
        np.testing.assert_array_equal(ma.params[k].data, mb.params[k].data)


def test_train_se_unpaired_mode_without_data(data):
    clean, noise, _ = data
    cfg = SemiSupConfig(mode=TrainMode.UNPAIRED_EMBEDDING, steps=1)
    with pytest.raises(ConfigurationError):
        train_se(clean, noise, None, Enhancer(ENH), frozen_vqvae(), cfg, MIX, np.random.default_rng(0),
                 np.random.default_rng(1), (), STFT)
