"""Layers with hand-written forward/backward passes, Adam, and a
finite-difference gradient checker.

Tensors are plain float64 numpy arrays; image batches are NHWC.  Every
``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes the upstream gradient and that cache.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def _as_batch(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeError(f"expected HxWxC or NxHxWxC input, got shape {x.shape}")
    return x, False


# --------------------------------------------------------------------------
# convolution


def conv2d_forward(x, K, b, stride: int = 1, pad: int = 0):
    """Cross-correlation ``out[p,q,f] = sum K[u,v,c,f] x[p*s+u-pad, q*s+v-pad, c] + b[f]``.

    ``K`` is (k, k, C, F).  Accepts a single HxWxC image or an NHWC batch.
    """
    xb, single = _as_batch(x)
    kh, kw, C, F = K.shape
    if xb.shape[3] != C:
        raise ShapeError(f"input has {xb.shape[3]} channels, kernel expects {C}")
    if b.shape != (F,):
        raise ShapeError(f"bias shape {b.shape} != ({F},)")
    if stride < 1:
        raise ShapeError("stride must be >= 1")
    if pad:
        xb = np.pad(xb, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    N, Hp, Wp, _ = xb.shape
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    win = sliding_window_view(xb, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    # (N, Ho, Wo, C, kh, kw) -> rows of (kh, kw, C) patches matching K's layout
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(N * Ho * Wo, kh * kw * C)
    out = (cols @ K.reshape(-1, F) + b).reshape(N, Ho, Wo, F)
    cache = (cols, K, xb.shape, stride, pad, single)
    return (out[0] if single else out), cache


def conv2d_backward(dout, cache):
    cols, K, padded_shape, stride, pad, single = cache
    kh, kw, C, F = K.shape
    N, Hp, Wp, _ = padded_shape
    dout = dout[None] if single else dout
    _, Ho, Wo, _ = dout.shape
    d2 = dout.reshape(-1, F)
    dK = (cols.T @ d2).reshape(K.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ K.reshape(-1, F).T).reshape(N, Ho, Wo, kh, kw, C)
    dxp = np.zeros(padded_shape)
    for u in range(kh):
        for v in range(kw):
            dxp[:, u : u + stride * (Ho - 1) + 1 : stride, v : v + stride * (Wo - 1) + 1 : stride] += dcols[:, :, :, u, v]
    dx = dxp[:, pad : Hp - pad, pad : Wp - pad] if pad else dxp
    return (dx[0] if single else dx), dK, db


def depthwise_conv2d_forward(x, K, b, stride: int = 1, pad: int = 0):
    """Per-channel k x k filtering; ``K`` is (k, k, C)."""
    xb, single = _as_batch(x)
    kh, kw, C = K.shape
    if xb.shape[3] != C:
        raise ShapeError(f"input has {xb.shape[3]} channels, depthwise kernel expects {C}")
    if pad:
        xb = np.pad(xb, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    N, Hp, Wp, _ = xb.shape
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    out = np.broadcast_to(b, (N, Ho, Wo, C)).copy()
    for u in range(kh):
        for v in range(kw):
            out += xb[:, u : u + stride * (Ho - 1) + 1 : stride, v : v + stride * (Wo - 1) + 1 : stride] * K[u, v]
    cache = (xb, K, stride, pad, single)
    return (out[0] if single else out), cache


def depthwise_conv2d_backward(dout, cache):
    xb, K, stride, pad, single = cache
    kh, kw, C = K.shape
    N, Hp, Wp, _ = xb.shape
    dout = dout[None] if single else dout
    _, Ho, Wo, _ = dout.shape
    dK = np.zeros_like(K)
    dxp = np.zeros_like(xb)
    for u in range(kh):
        for v in range(kw):
            sl = (slice(None), slice(u, u + stride * (Ho - 1) + 1, stride), slice(v, v + stride * (Wo - 1) + 1, stride))
            dK[u, v] = np.einsum("nhwc,nhwc->c", xb[sl], dout)
            dxp[sl] += dout * K[u, v]
    dx = dxp[:, pad : Hp - pad, pad : Wp - pad] if pad else dxp
    return (dx[0] if single else dx), dK, dout.sum(axis=(0, 1, 2))


# --------------------------------------------------------------------------
# pooling and activations


def maxpool2d_forward(x, window: int = 2, stride: Optional[int] = None):
    """Max over each window; ties go to the first element in row-major order."""
    stride = window if stride is None else stride
    xb, single = _as_batch(x)
    N, H, W, C = xb.shape
    if window > H or window > W:
        raise ShapeError(f"pool window {window} larger than input {H}x{W}")
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    win = sliding_window_view(xb, (window, window), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    flat = win.reshape(N, Ho, Wo, C, window * window)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    cache = (arg, xb.shape, window, stride, single)
    return (out[0] if single else out), cache


def maxpool2d_backward(dout, cache):
    arg, shape, window, stride, single = cache
    dout = dout[None] if single else dout
    _, Ho, Wo, _ = dout.shape
    dx = np.zeros(shape)
    for u in range(window):
        for v in range(window):
            hit = arg == u * window + v
            dx[:, u : u + stride * (Ho - 1) + 1 : stride, v : v + stride * (Wo - 1) + 1 : stride] += dout * hit
    return dx[0] if single else dx


def relu_forward(x):
    x = np.asarray(x, dtype=np.float64)
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    # derivative at exactly 0 is taken as 0
    return dout * mask


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# --------------------------------------------------------------------------
# dense and normalisation


def dense_forward(x, W, b):
    """``x @ W + b`` (i.e. W^T x + b per sample); x is (D,) or (N, D)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"dense: x {x.shape}, W {W.shape}, b {b.shape} incompatible")
    return x @ W + b, x


def dense_backward(dout, cache, W=None):
    """Returns (dx, dW, db).  ``W`` is needed only for dx."""
    x = cache
    if x.ndim == 1:
        dW = np.outer(x, dout)
        db = dout.copy()
    else:
        dW = x.T @ dout
        db = dout.sum(axis=0)
    dx = dout @ W.T if W is not None else None
    return dx, dW, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool, momentum: float = 0.9, eps: float = 1e-5):
    """Normalise over the batch axis of an (N, D) array.

    In train mode ``running_mean``/``running_var`` are updated in place with
    ``r = momentum * r + (1 - momentum) * batch_stat``.
    """
    x = np.asarray(x, dtype=np.float64)
    if train:
        if x.shape[0] < 2:
            raise ShapeError("batch norm in train mode needs a batch of at least 2")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gamma + beta
    return out, (xhat, inv, gamma, train)


def batchnorm_backward(dout, cache):
    xhat, inv, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    if train:
        n = dout.shape[0]
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    else:
        dx = dxhat * inv
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# recurrent


def lstm_forward(x, W, U, b, reverse: bool = False):
    """Single-direction LSTM over (N, T, D) input, zero initial state.

    Gate blocks in ``W`` (D, 4H), ``U`` (H, 4H) and ``b`` (4H,) are ordered
    input, forget, candidate, output.  Returns hidden states (N, T, H) in
    the original time order.
    """
    x = np.asarray(x, dtype=np.float64)
    N, T, D = x.shape
    H = U.shape[0]
    if W.shape != (D, 4 * H) or U.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError(f"lstm: x {x.shape}, W {W.shape}, U {U.shape}, b {b.shape} incompatible")
    steps = range(T - 1, -1, -1) if reverse else range(T)
    xw = x @ W + b
    h = np.zeros((N, H))
    c = np.zeros((N, H))
    hs = np.zeros((N, T, H))
    tape = []
    for t in steps:
        z = xw[:, t] + h @ U
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = sigmoid(z[:, 3 * H :])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        tape.append((t, i, f, g, o, c_prev, h_prev, tc))
    return hs, (x, W, U, tape)


def lstm_backward(dhs, cache):
    x, W, U, tape = cache
    N, T, D = x.shape
    H = U.shape[0]
    dz_all = np.zeros((N, T, 4 * H))
    dU = np.zeros_like(U)
    dh_next = np.zeros((N, H))
    dc_next = np.zeros((N, H))
    for t, i, f, g, o, c_prev, h_prev, tc in reversed(tape):
        dh = dhs[:, t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc**2)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dz = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), dg * (1 - g**2), do * o * (1 - o)], axis=1
        )
        dz_all[:, t] = dz
        dU += h_prev.T @ dz
        dh_next = dz @ U.T
        dc_next = dc * f
    dW = x.reshape(-1, D).T @ dz_all.reshape(-1, 4 * H)
    db = dz_all.sum(axis=(0, 1))
    dx = dz_all @ W.T
    return dx, dW, dU, db


def bilstm_forward(x, fwd: tuple, bwd: tuple):
    """Bidirectional LSTM: (N, T, D) -> (N, T, 2H), forward block first.

    ``fwd``/``bwd`` are (W, U, b) triples for each direction.
    """
    hf, cf = lstm_forward(x, *fwd, reverse=False)
    hb, cb = lstm_forward(x, *bwd, reverse=True)
    return np.concatenate([hf, hb], axis=2), (cf, cb, hf.shape[2])


def bilstm_backward(dout, cache):
    cf, cb, H = cache
    dxf, *gf = lstm_backward(dout[:, :, :H], cf)
    dxb, *gb = lstm_backward(dout[:, :, H:], cb)
    return dxf + dxb, tuple(gf), tuple(gb)


# --------------------------------------------------------------------------
# loss


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, onehot):
    """Softmax probabilities and mean cross-entropy; gradient is (p - y)/N."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    if logits.shape != y.shape or logits.shape[-1] < 2:
        raise ShapeError(f"logits {logits.shape} and target {y.shape} must match with K >= 2")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=-1) == 1)):
        raise ValueError("target must be exactly one-hot")
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    p = np.exp(logp)
    n = 1 if logits.ndim == 1 else logits.shape[0]
    loss = -float((logp * y).sum()) / n
    return p, loss, (p - y) / n


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros(labels.shape + (n_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


# --------------------------------------------------------------------------
# optimisation


class Adam:
    """Adam with bias correction; defaults are the usual framework ones."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], names: Optional[Iterable[str]] = None) -> None:
        """Update ``params`` in place for every name in ``names`` (default: all grads)."""
        names = list(grads) if names is None else list(names)
        for k in names:
            if grads[k].shape != params[k].shape:
                raise ShapeError(f"{k}: gradient {grads[k].shape} vs parameter {params[k].shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k in names:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            params[k] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(params, grads, state: Adam, names=None):
    state.step(params, grads, names)
    return params


# --------------------------------------------------------------------------
# verification


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max abs difference scaled by the tensor's largest gradient magnitude.

    Tensors whose gradients are all below ``floor`` (e.g. a conv bias that a
    following batch norm cancels) are compared against ``floor`` instead,
    since central differences there are pure roundoff.
    """
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_gradient(fn: Callable[[], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``fn()`` w.r.t. ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        fp = fn()
        x[idx] = orig - eps
        fm = fn()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * eps)
    return grad


def grad_check(fn: Callable[[], float], arrays: Mapping[str, np.ndarray], analytic: Mapping[str, np.ndarray], eps: float = 1e-5) -> float:
    """Worst relative error between ``analytic`` gradients and central
    differences of the scalar ``fn`` over every named array."""
    worst = 0.0
    for name, arr in arrays.items():
        worst = max(worst, relative_error(analytic[name], numeric_gradient(fn, arr, eps)))
    return worst
