"""Differentiable layers with hand-written backward passes.

Image-like tensors use channels-last layout ``(N, H, W, C)`` so that the
per-bin embedding of a spectrogram is the trailing axis. Convolution weights
have shape ``(kh, kw, C_in, C_out)``; :func:`conv_transpose2d` takes a weight
of the same shape as the :func:`conv2d` it is the adjoint of.
"""

from __future__ import annotations

import numpy as np

from .tensor import GraphError, Tensor, _sigmoid, as_tensor, make_op


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is ``(D_in, D_out)``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise GraphError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise GraphError(f"linear: bias {bias.shape} != ({weight.shape[1]},)")
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(x.shape[:-1] + (weight.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        grads = [(g2 @ weight.data.T).reshape(x.shape), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_op(out, parents, bw)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _window(xp: np.ndarray, i: int, j: int, ho: int, wo: int, stride: int) -> np.ndarray:
    return xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]


def _corr(xp: np.ndarray, w: np.ndarray, ho: int, wo: int, stride: int) -> np.ndarray:
    # one GEMM per kernel offset; cheaper than a full im2col matrix when
    # memory bandwidth is the bottleneck
    kh, kw, cin, cout = w.shape
    n = xp.shape[0]
    out = np.zeros((n * ho * wo, cout), dtype=np.result_type(xp, w))
    for i in range(kh):
        for j in range(kw):
            patch = np.ascontiguousarray(_window(xp, i, j, ho, wo, stride)).reshape(-1, cin)
            out += patch @ w[i, j]
    return out.reshape(n, ho, wo, cout)


def _corr_adjoint(g: np.ndarray, w: np.ndarray, padded_shape, stride: int) -> np.ndarray:
    """Adjoint of :func:`_corr` with respect to the padded input."""
    kh, kw, cin, cout = w.shape
    n, ho, wo, _ = g.shape
    gp = np.zeros(padded_shape, dtype=np.result_type(g, w))
    g2 = g.reshape(-1, cout)
    for i in range(kh):
        for j in range(kw):
            contrib = (g2 @ w[i, j].T).reshape(n, ho, wo, cin)
            gp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += contrib
    return gp


def _corr_weight_grad(xp: np.ndarray, g: np.ndarray, wshape, stride: int) -> np.ndarray:
    kh, kw, cin, cout = wshape
    _, ho, wo, _ = g.shape
    g2 = g.reshape(-1, cout)
    gw = np.zeros(wshape, dtype=np.result_type(xp, g))
    for i in range(kh):
        for j in range(kw):
            patch = np.ascontiguousarray(_window(xp, i, j, ho, wo, stride)).reshape(-1, cin)
            gw[i, j] = patch.T @ g2
    return gw


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def _crop(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return x[:, p:-p, p:-p, :]


def _check_conv(x: Tensor, w: Tensor, cin_axis: int, name: str):
    if x.ndim != 4 or w.ndim != 4:
        raise GraphError(f"{name}: expected 4-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[3] != w.shape[cin_axis]:
        raise GraphError(f"{name}: input has {x.shape[3]} channels, weight expects {w.shape[cin_axis]}")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, NHWC."""
    x, weight = as_tensor(x), as_tensor(weight)
    _check_conv(x, weight, 2, "conv2d")
    kh, kw, cin, cout = weight.shape
    ho = _out_size(x.shape[1], kh, stride, padding)
    wo = _out_size(x.shape[2], kw, stride, padding)
    if ho < 1 or wo < 1:
        raise GraphError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape[1:3]}")
    xp = _pad(x.data, padding)
    out = _corr(xp, weight.data, ho, wo, stride)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gx = _crop(_corr_adjoint(g, weight.data, xp.shape, stride), padding)
        # trailing rows/cols skipped by the stride receive no gradient
        gx = _fit(gx, x.shape)
        grads = [gx, _corr_weight_grad(xp, g, weight.shape, stride)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return make_op(out, parents, bw)


def _fit(a: np.ndarray, shape) -> np.ndarray:
    if a.shape == tuple(shape):
        return a
    out = np.zeros(shape, dtype=a.dtype)
    h = min(a.shape[1], shape[1])
    w = min(a.shape[2], shape[2])
    out[:, :h, :w, :] = a[:, :h, :w, :]
    return out


def conv_transpose2d(x, weight, bias=None, stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Transposed convolution: the adjoint of :func:`conv2d` in its input.

    ``weight`` has the shape ``(kh, kw, C_out, C_in)`` of the forward
    convolution mapping ``C_out -> C_in`` channels; this op maps ``C_in``
    channels back to ``C_out``. Output size is
    ``(h - 1) * stride + k - 2 * padding + output_padding``; ``output_padding``
    recovers rows that a strided forward convolution reads but whose
    position the output size alone does not determine.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check_conv(x, weight, 3, "conv_transpose2d")
    if not 0 <= output_padding < stride and output_padding != 0:
        raise GraphError(f"conv_transpose2d: output_padding must be < stride, got {output_padding}")
    kh, kw, cout, cin = weight.shape
    n, h, w, _ = x.shape
    hp = (h - 1) * stride + kh + output_padding
    wp = (w - 1) * stride + kw + output_padding
    if hp - 2 * padding < 1 or wp - 2 * padding < 1:
        raise GraphError("conv_transpose2d: padding removes the whole output")
    outp = _corr_adjoint(x.data, weight.data, (n, hp, wp, cout), stride)
    out = _crop(outp, padding)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gp = _pad(g, padding)
        grads = [_corr(gp, weight.data, h, w, stride), _corr_weight_grad(gp, x.data, weight.shape, stride)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return make_op(out, parents, bw)


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm2d(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalisation over ``(N, H, W)`` of an NHWC tensor.

    In training mode the batch statistics are used and the running
    statistics are updated (unbiased variance, as is conventional); in eval
    mode the running statistics are used.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise GraphError(f"batch_norm2d: {c} channels but gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 1, 2)
    if not training:
        invstd = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x.data - state.running_mean) * invstd
        out = gamma.data * xhat + beta.data

        def bw_eval(g):
            return g * (gamma.data * invstd), (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_op(out.astype(x.dtype), (x, gamma, beta), bw_eval)

    m = x.data.size // c
    mu = x.data.mean(axis=axes)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axes)
    invstd = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * invstd
    out = gamma.data * xhat + beta.data

    mom = state.momentum
    unbiased = var * m / (m - 1) if m > 1 else var
    state.running_mean = ((1 - mom) * state.running_mean + mom * mu).astype(state.running_mean.dtype)
    state.running_var = ((1 - mom) * state.running_var + mom * unbiased).astype(state.running_var.dtype)

    def bw(g):
        gxhat = g * gamma.data
        s1 = gxhat.sum(axis=axes)
        s2 = (gxhat * xhat).sum(axis=axes)
        gx = invstd / m * (m * gxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_op(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------

def gru_layer(x, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """One causal GRU layer over ``x`` of shape ``(N, T, D)``; zero initial state.

    Gate blocks in the ``3H`` axis are ordered (reset, update, candidate):

        r = sigma(x W_ir + b_ir + h W_hr + b_hr)
        z = sigma(x W_iz + b_iz + h W_hz + b_hz)
        n = tanh(x W_in + b_in + r * (h W_hn + b_hn))
        h' = (1 - z) * n + z * h
    """
    x, w_ih, w_hh, b_ih, b_hh = (as_tensor(t) for t in (x, w_ih, w_hh, b_ih, b_hh))
    if x.ndim != 3:
        raise GraphError(f"gru_layer expects (N, T, D) input, got {x.shape}")
    n_batch, steps, d = x.shape
    if steps == 0:
        raise GraphError("gru_layer: empty sequence")
    hdim = w_hh.shape[0]
    if w_ih.shape != (d, 3 * hdim) or w_hh.shape != (hdim, 3 * hdim):
        raise GraphError(f"gru_layer: weights {w_ih.shape}, {w_hh.shape} do not match input dim {d}")
    dtype = np.result_type(x.data, w_ih.data)

    xw = (x.data.reshape(-1, d) @ w_ih.data + b_ih.data).reshape(n_batch, steps, 3 * hdim)
    hs = np.zeros((n_batch, steps + 1, hdim), dtype=dtype)
    rs = np.empty((n_batch, steps, hdim), dtype=dtype)
    zs = np.empty_like(rs)
    ns = np.empty_like(rs)
    hns = np.empty_like(rs)
    for t in range(steps):
        h = hs[:, t]
        hw = h @ w_hh.data + b_hh.data
        r = _sigmoid(xw[:, t, :hdim] + hw[:, :hdim])
        z = _sigmoid(xw[:, t, hdim:2 * hdim] + hw[:, hdim:2 * hdim])
        hn = hw[:, 2 * hdim:]
        cand = np.tanh(xw[:, t, 2 * hdim:] + r * hn)
        hs[:, t + 1] = (1.0 - z) * cand + z * h
        rs[:, t], zs[:, t], ns[:, t], hns[:, t] = r, z, cand, hn
    out = hs[:, 1:].copy()

    def bw(g):
        gx_pre = np.empty((n_batch, steps, 3 * hdim), dtype=dtype)
        gw_hh = np.zeros_like(w_hh.data)
        gb_hh = np.zeros_like(b_hh.data)
        gh_next = np.zeros((n_batch, hdim), dtype=dtype)
        for t in range(steps - 1, -1, -1):
            gh = g[:, t] + gh_next
            r, z, cand, hn, h = rs[:, t], zs[:, t], ns[:, t], hns[:, t], hs[:, t]
            gcand = gh * (1.0 - z)
            gz = gh * (h - cand)
            gcand_pre = gcand * (1.0 - cand * cand)
            gr_pre = gcand_pre * hn * r * (1.0 - r)
            gz_pre = gz * z * (1.0 - z)
            gi = np.concatenate([gr_pre, gz_pre, gcand_pre], axis=1)
            ghw = np.concatenate([gr_pre, gz_pre, gcand_pre * r], axis=1)
            gx_pre[:, t] = gi
            gw_hh += h.T @ ghw
            gb_hh += ghw.sum(axis=0)
            gh_next = gh * z + ghw @ w_hh.data.T
        gx2 = gx_pre.reshape(-1, 3 * hdim)
        gx = (gx2 @ w_ih.data.T).reshape(x.shape)
        gw_ih = x.data.reshape(-1, d).T @ gx2
        return gx, gw_ih, gw_hh, gx2.sum(axis=0), gb_hh

    return make_op(out, (x, w_ih, w_hh, b_ih, b_hh), bw)


def gru_stack(x, layers) -> Tensor:
    """Apply GRU layers in sequence; ``layers`` is a list of
    ``(w_ih, w_hh, b_ih, b_hh)`` tuples."""
    if len(layers) == 0:
        raise GraphError("gru_stack needs at least one layer")
    h = as_tensor(x)
    for params in layers:
        h = gru_layer(h, *params)
    return h


# ---------------------------------------------------------------------------
# distances and patches
# ---------------------------------------------------------------------------

def cosine_distance(a, b, eps: float = 1e-12) -> Tensor:
    """``1 - <a, b> / (|a| |b|)`` over the last axis, norms floored at ``eps``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        a_data, b_data = np.broadcast_arrays(a.data, b.data)
    else:
        a_data, b_data = a.data, b.data
    na_raw = np.sqrt((a_data * a_data).sum(axis=-1, keepdims=True))
    nb_raw = np.sqrt((b_data * b_data).sum(axis=-1, keepdims=True))
    na = np.maximum(na_raw, eps)
    nb = np.maximum(nb_raw, eps)
    dot = (a_data * b_data).sum(axis=-1, keepdims=True)
    cos = dot / (na * nb)
    out = (1.0 - cos)[..., 0]

    def bw(g):
        g = g[..., None]
        # the floored norm is constant below eps
        ca = (na_raw > eps).astype(a_data.dtype)
        cb = (nb_raw > eps).astype(b_data.dtype)
        ga = -g * (b_data / (na * nb) - ca * cos * a_data / (na * na))
        gb = -g * (a_data / (na * nb) - cb * cos * b_data / (nb * nb))
        return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

    return make_op(out, (a, b), bw)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def local_patches(x, size: int = 3) -> Tensor:
    """Stack the ``size x size`` neighbourhood of every bin of ``(N, T, F)``
    into a trailing axis, giving ``(N, T, F, size*size)``.

    Out-of-range neighbours are zero, which for cosine distance is the same as
    clipping the patch at the edges.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise GraphError(f"local_patches expects (N, T, F), got {x.shape}")
    r = size // 2
    n, t, f = x.shape
    xp = np.pad(x.data, ((0, 0), (r, r), (r, r)))
    out = np.stack([xp[:, i:i + t, j:j + f] for i in range(size) for j in range(size)], axis=-1)

    def bw(g):
        gp = np.zeros_like(xp)
        k = 0
        for i in range(size):
            for j in range(size):
                gp[:, i:i + t, j:j + f] += g[..., k]
                k += 1
        return (gp[:, r:r + t, r:r + f],)

    return make_op(out, (x,), bw)
