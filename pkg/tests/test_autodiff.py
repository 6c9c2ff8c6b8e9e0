import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vqse import autodiff as ad
from vqse.autodiff import Tensor, backward, grad_check
from vqse.autodiff import checkpoint as ckpt
from vqse.vqvae import VqVae, VqVaeConfig, vqvae_forward, vqvae_loss

SEEDS = range(20)
TOL = 1e-4


def _rng(seed):
    return np.random.default_rng(1000 + seed)


# ---------------------------------------------------------------------------
# core graph behaviour
# ---------------------------------------------------------------------------

def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)), requires_grad=True)
    backward(ad.sum_(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_half_squared_norm_gradient_is_x():
    data = np.random.default_rng(1).standard_normal(7)
    x = Tensor(data, requires_grad=True)
    backward(ad.sum_(ad.square(x)) * 0.5)
    np.testing.assert_allclose(x.grad, data, rtol=0, atol=1e-15)


def test_fan_out_accumulates():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    y = x * x + x * 3.0 + x
    backward(ad.sum_(y))
    np.testing.assert_allclose(x.grad, 2 * x.data + 4.0)


def test_diamond_graph_visits_each_node_once():
    x = Tensor(np.array(1.5), requires_grad=True)
    a = ad.exp(x)
    b = a * a + a
    backward(b)
    assert x.grad == pytest.approx(2 * np.exp(3.0) + np.exp(1.5))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.GraphError):
        backward(x * 2.0)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_stop_gradient_blocks():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(ad.sum_(ad.stop_gradient(x) * x))
    np.testing.assert_array_equal(x.grad, x.data)


# ---------------------------------------------------------------------------
# layer examples
# ---------------------------------------------------------------------------

def test_conv_identity_kernel():
    x = _rng(0).standard_normal((2, 5, 6, 3))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0] = np.eye(3)
    np.testing.assert_allclose(ad.conv2d(x, w).data, x, atol=1e-15)


def test_conv_all_ones_sum():
    out = ad.conv2d(np.ones((1, 3, 3, 1)), np.ones((3, 3, 1, 1))).data
    assert out.shape == (1, 1, 1, 1) and out.item() == 9.0


@pytest.mark.parametrize("stride,padding,size", [(1, 0, 7), (1, 1, 6), (2, 0, 7), (2, 1, 7), (2, 1, 6)])
def test_conv_transpose_is_adjoint(stride, padding, size):
    rng = _rng(stride * 10 + padding + size)
    x = rng.standard_normal((2, size, size, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    y = rng.standard_normal(ad.conv2d(x, w, stride=stride, padding=padding).shape)
    lhs = np.sum(ad.conv2d(x, w, stride=stride, padding=padding).data * y)
    extra = size - ((y.shape[1] - 1) * stride + 3 - 2 * padding)
    back = ad.conv_transpose2d(y, w, stride=stride, padding=padding, output_padding=extra).data
    assert back.shape == x.shape
    rhs = np.sum(x * back)
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))


def test_batch_norm_examples():
    rng = _rng(3)
    x = rng.standard_normal((4, 5, 5, 2))
    x = (x - x.mean(axis=(0, 1, 2))) / x.std(axis=(0, 1, 2))
    st_ = ad.BatchNormState(2, np.float64)
    out = ad.batch_norm2d(x, np.ones(2), np.zeros(2), st_, True).data
    np.testing.assert_allclose(out, x, rtol=1e-5, atol=0)
    beta = np.array([0.3, -1.0])
    out0 = ad.batch_norm2d(x, np.zeros(2), beta, st_, True).data
    np.testing.assert_array_equal(out0, np.broadcast_to(beta, x.shape))


def test_batch_norm_statistics_match_gamma_beta():
    x = _rng(4).normal(3.0, 2.0, (3, 6, 6, 2))
    gamma, beta = np.array([0.5, 2.0]), np.array([1.0, -2.0])
    out = ad.batch_norm2d(x, gamma, beta, ad.BatchNormState(2, np.float64), True).data
    np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), beta, atol=1e-10)
    np.testing.assert_allclose(out.std(axis=(0, 1, 2)), gamma, rtol=1e-4)


def test_batch_norm_eval_uses_running_stats():
    state = ad.BatchNormState(1, np.float64)
    state.running_mean[:] = 2.0
    state.running_var[:] = 4.0
    out = ad.batch_norm2d(np.full((1, 1, 1, 1), 4.0), np.ones(1), np.zeros(1), state, False).data
    assert out.item() == pytest.approx(2.0 / np.sqrt(4.0 + state.eps))


def test_elementwise_examples():
    np.testing.assert_array_equal(ad.relu(np.array([-1.0, 2.0])).data, [0.0, 2.0])
    assert ad.sigmoid(np.array(0.0)).data == 0.5
    x = _rng(5).standard_normal((3, 4))
    np.testing.assert_array_equal(ad.linear(x, np.eye(4), np.zeros(4)).data, x)


def _gru_params(rng, d, h, scale=0.5):
    return [rng.normal(0, scale, s) for s in ((d, 3 * h), (h, 3 * h), (3 * h,), (3 * h,))]


def _gru_cell(x, h, w_ih, w_hh, b_ih, b_hh):
    def sig(v):
        return 1 / (1 + np.exp(-v))
    gi, gh = x @ w_ih + b_ih, h @ w_hh + b_hh
    H = h.shape[-1]
    r = sig(gi[..., :H] + gh[..., :H])
    z = sig(gi[..., H:2 * H] + gh[..., H:2 * H])
    n = np.tanh(gi[..., 2 * H:] + r * gh[..., 2 * H:])
    return (1 - z) * n + z * h


def test_gru_zero_weights_give_zero_output():
    x = _rng(6).standard_normal((2, 5, 3))
    out = ad.gru_layer(x, np.zeros((3, 12)), np.zeros((4, 12)), np.zeros(12), np.zeros(12)).data
    np.testing.assert_array_equal(out, np.zeros((2, 5, 4)))


def test_gru_matches_hand_rolled_cell():
    rng = _rng(7)
    x = rng.standard_normal((2, 6, 3))
    params = _gru_params(rng, 3, 4)
    out = ad.gru_layer(x, *params).data
    h = np.zeros((2, 4))
    for t in range(6):
        h = _gru_cell(x[:, t], h, *params)
        np.testing.assert_allclose(out[:, t], h, atol=1e-12)


def test_gru_single_step_is_one_cell():
    rng = _rng(8)
    x = rng.standard_normal((1, 1, 3))
    params = _gru_params(rng, 3, 4)
    np.testing.assert_allclose(ad.gru_layer(x, *params).data[:, 0], _gru_cell(x[:, 0], np.zeros((1, 4)), *params),
                               atol=1e-14)


@pytest.mark.parametrize("a,b,d", [((1.0, 2.0), (1.0, 2.0), 0.0), ((1.0, 2.0), (-1.0, -2.0), 2.0),
                                   ((1.0, 0.0), (0.0, 1.0), 1.0)])
def test_cosine_distance_examples(a, b, d):
    assert ad.cosine_distance(np.array(a), np.array(b)).data == pytest.approx(d, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_cosine_distance_range(seed):
    rng = np.random.default_rng(seed)
    d = ad.cosine_distance(rng.standard_normal((10, 5)), rng.standard_normal((10, 5))).data
    assert np.all((d >= -1e-12) & (d <= 2 + 1e-12))


# ---------------------------------------------------------------------------
# gradient suite: >= 20 random seeds per layer
# ---------------------------------------------------------------------------

def _weighted(out, w):
    return ad.sum_(out * Tensor(w))


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv2d(seed):
    rng = _rng(seed)
    stride, pad = [(1, 1), (2, 0), (1, 0), (2, 1)][seed % 4]
    x, w, b = rng.standard_normal((2, 5, 4, 2)), rng.standard_normal((3, 3, 2, 3)), rng.standard_normal(3)
    wout = rng.standard_normal(ad.conv2d(x, w, b, stride, pad).shape)
    assert grad_check(lambda x, w, b: _weighted(ad.conv2d(x, w, b, stride, pad), wout), [x, w, b]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_conv_transpose2d(seed):
    rng = _rng(seed)
    stride, pad, opad = [(1, 1, 0), (2, 0, 0), (1, 0, 0), (2, 1, 1)][seed % 4]
    x, w, b = rng.standard_normal((2, 3, 4, 3)), rng.standard_normal((3, 3, 2, 3)), rng.standard_normal(2)
    wout = rng.standard_normal(ad.conv_transpose2d(x, w, b, stride, pad, opad).shape)
    assert grad_check(lambda x, w, b: _weighted(ad.conv_transpose2d(x, w, b, stride, pad, opad), wout),
                      [x, w, b]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("training", [True, False])
def test_grad_batch_norm(seed, training):
    rng = _rng(seed)
    x, g, b = rng.standard_normal((2, 3, 3, 2)), rng.uniform(0.5, 2, 2), rng.standard_normal(2)
    wout = rng.standard_normal(x.shape)
    state = ad.BatchNormState(2, np.float64)
    state.running_mean[:] = rng.standard_normal(2)
    state.running_var[:] = rng.uniform(0.5, 2, 2)
    assert grad_check(lambda x, g, b: _weighted(ad.batch_norm2d(x, g, b, state, training), wout), [x, g, b]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("op", ["relu", "sigmoid", "tanh", "exp", "log", "sqrt", "square"])
def test_grad_elementwise(seed, op):
    rng = _rng(seed)
    x = rng.uniform(0.2, 2.0, (3, 4)) if op in ("log", "sqrt") else rng.standard_normal((3, 4))
    if op == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep away from the kink
    wout = rng.standard_normal(x.shape)
    fn = getattr(ad, op)
    assert grad_check(lambda x: _weighted(fn(x), wout), [x]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_linear(seed):
    rng = _rng(seed)
    x, w, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
    wout = rng.standard_normal((2, 3, 5))
    assert grad_check(lambda x, w, b: _weighted(ad.linear(x, w, b), wout), [x, w, b]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_gru_stack(seed):
    rng = _rng(seed)
    x = rng.standard_normal((2, 3, 3))
    p1, p2 = _gru_params(rng, 3, 4), _gru_params(rng, 4, 4)
    wout = rng.standard_normal((2, 3, 4))

    def fn(x, *ps):
        return _weighted(ad.gru_stack(x, [ps[:4], ps[4:]]), wout)

    assert grad_check(fn, [x, *p1, *p2]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_cosine_distance(seed):
    rng = _rng(seed)
    a, b = rng.standard_normal((3, 4, 5)), rng.standard_normal((3, 4, 5))
    wout = rng.standard_normal((3, 4))
    assert grad_check(lambda a, b: _weighted(ad.cosine_distance(a, b), wout), [a, b]) < TOL
    # broadcast against a single vector
    c = rng.standard_normal(5)
    assert grad_check(lambda a, c: _weighted(ad.cosine_distance(a, c), wout), [a, c]) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_grad_local_patches(seed):
    rng = _rng(seed)
    x = rng.standard_normal((2, 4, 5))
    wout = rng.standard_normal((2, 4, 5, 9))
    assert grad_check(lambda x: _weighted(ad.local_patches(x), wout), [x]) < TOL


@pytest.mark.parametrize("seed", range(5))
def test_grad_shape_ops(seed):
    rng = _rng(seed)
    x, y = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    wout = rng.standard_normal((2, 3, 2))

    def fn(x, y):
        z = ad.concat([x @ y, (x[:, ::-1] @ y) / 3.0], axis=0).reshape((2, 3, 2))
        return ad.mean(z * Tensor(wout)) + ad.sum_(ad.clamp_min(x, 0.1)) - ad.mean(ad.transpose(x) * 2.0)

    assert grad_check(fn, [x, y]) < TOL


def _tiny_vqvae(seed):
    cfg = VqVaeConfig(embedding_dim=3, codebook_size=4, channels=(2, 3), n_residual=1, dtype="float64")
    model = VqVae(cfg, rng=np.random.default_rng(seed))
    model.feature_mean, model.feature_std = -2.0, 3.0
    return model


@pytest.mark.parametrize("seed", range(3))
def test_grad_full_vqvae_forward(seed):
    """Whole forward (encode, three quantizations, decode, loss) on a 4x4
    spectrogram with K=4, checked against input and selected parameters."""
    model = _tiny_vqvae(seed)
    rng = _rng(seed)
    f_d, f_s, f_n = rng.normal(-2, 3, (3, 2, 4, 4))
    names = ["enc1.w", "codebook", "dec1.w", "enc_res0a.w"]
    originals = {k: model.params[k] for k in names}

    def fn(f, *ps):
        for k, p in zip(names, ps):
            model.params[k] = p
        try:
            loss, _ = vqvae_loss(vqvae_forward(f, model), f_d, f_s, f_n, 0.25, model.feature_std)
        finally:
            model.params.update(originals)
        return loss

    assert grad_check(fn, [f_d] + [originals[k].data for k in names]) < TOL


def test_straight_through_is_identity():
    model = _tiny_vqvae(0)
    e = Tensor(_rng(0).standard_normal((1, 4, 4, 3)), requires_grad=True)
    q_st, q, _ = model.quantize(e, "d")
    np.testing.assert_allclose(q_st.data, q.data, rtol=0, atol=1e-15)
    backward(ad.mean(q_st))
    np.testing.assert_allclose(e.grad, np.full(e.shape, 1.0 / e.data.size))


# ---------------------------------------------------------------------------
# optimiser and checkpoint container
# ---------------------------------------------------------------------------

def test_adam_first_step_is_lr_sign():
    p = ad.Parameter(np.array([1.0, -1.0]))
    opt = ad.Adam({"p": p}, lr=0.1)
    p.grad = np.array([2.0, -3.0])
    opt.step()
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-7)


def test_adam_skips_frozen():
    p = ad.Parameter(np.ones(2))
    p.freeze()
    opt = ad.Adam({"p": p}, lr=0.1)
    p.grad = np.ones(2)
    opt.step()
    np.testing.assert_array_equal(p.data, np.ones(2))


def test_adam_minimises_quadratic():
    p = ad.Parameter(np.array([3.0, -2.0]))
    opt = ad.Adam({"p": p}, lr=0.05)
    for _ in range(500):
        opt.zero_grad()
        backward(ad.sum_(ad.square(p - 1.0)))
        opt.step()
    np.testing.assert_allclose(p.data, [1.0, 1.0], atol=1e-2)


def test_checkpoint_round_trip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5, -2.0]),
              "i": np.array([[1, 2]], dtype=np.int64), "s": np.float64(3.0).reshape(())}
    meta = {"kind": "test", "nested": {"x": [1, 2]}}
    path = tmp_path / "m.ckpt"
    ckpt.save(path, arrays, meta)
    back, meta2 = ckpt.load(path)
    assert meta2 == meta
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype
        np.testing.assert_array_equal(back[k], arrays[k])
    assert path.read_bytes()[:4] == b"VQSE"


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"nope")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load(path)
