"""Pure-NumPy MLP kernels.

Fallback backend for :mod:`dattr.kernels`. Every function here has a twin in the
compiled ``_ckernels`` extension with an identical signature; the two are tested
against each other and against JAX autodiff.

Parameter layout (shared by both backends): for each affine layer ``l`` the
weight matrix ``W_l`` of shape ``(out_l, in_l)`` in row-major order, followed
by the bias ``b_l`` of length ``out_l``. Hidden layers apply exact GeLU; the
final layer is affine. Loss code 0 is half-MSE, 1 is softmax cross-entropy
against (one-hot) float targets.
"""

import math

import numpy as np
from scipy.special import ndtr

BACKEND = "python"

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu_parts(a):
    cdf = ndtr(a)
    pdf = np.exp(-0.5 * a * a) * _INV_SQRT_2PI
    return a * cdf, cdf + a * pdf, pdf * (2.0 - a * a)


def _unpack(dims, theta):
    layers = []
    off = 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        W = theta[off:off + fan_in * fan_out].reshape(fan_out, fan_in)
        off += fan_in * fan_out
        b = theta[off:off + fan_out]
        off += fan_out
        layers.append((W, b))
    return layers


def n_params(dims):
    return sum((a + 1) * b for a, b in zip(dims[:-1], dims[1:]))


def _forward(dims, theta, X):
    """Forward pass caching pre-activations, activations and GeLU derivatives."""
    layers = _unpack(dims, theta)
    acts = [X]
    d1 = []
    d2 = []
    h = X
    last = len(layers) - 1
    for l, (W, b) in enumerate(layers):
        a = h @ W.T + b
        if l < last:
            h, g1, g2 = _gelu_parts(a)
            d1.append(g1)
            d2.append(g2)
            acts.append(h)
        else:
            h = a
    return layers, acts, d1, d2, h


def forward(dims, theta, X):
    return _forward(dims, theta, X)[4]


def _loss_terms(loss, F, Y):
    """Per-example losses and output-gradients."""
    if loss == 0:
        R = F - Y
        return 0.5 * np.sum(R * R, axis=1), R, None
    shift = F.max(axis=1, keepdims=True)
    E = np.exp(F - shift)
    Z = E.sum(axis=1, keepdims=True)
    P = E / Z
    lse = (np.log(Z) + shift)[:, 0]
    ysum = Y.sum(axis=1)
    losses = lse * ysum - np.sum(Y * F, axis=1)
    return losses, P * ysum[:, None] - Y, P


def _backward(layers, acts, d1, delta, out):
    """Accumulate parameter gradients for output-gradient ``delta`` into ``out``."""
    offs = _offsets(layers)
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        o = offs[l]
        nw = W.size
        out[o:o + nw] = (delta.T @ acts[l]).ravel()
        out[o + nw:o + nw + W.shape[0]] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ W) * d1[l - 1]


def _offsets(layers):
    offs = []
    off = 0
    for W, b in layers:
        offs.append(off)
        off += W.size + b.size
    return offs


def loss_grad(dims, loss, theta, X, Y, idx, coef, grad_out):
    """Weighted loss ``sum_j coef_j * l_{idx_j}`` and its gradient (into ``grad_out``)."""
    Xb = X[idx]
    Yb = Y[idx]
    layers, acts, d1, _, F = _forward(dims, theta, Xb)
    losses, G, _ = _loss_terms(loss, F, Yb)
    _backward(layers, acts, d1, G * coef[:, None], grad_out)
    return float(np.dot(coef, losses))


def per_example_losses(dims, loss, theta, X, Y, idx):
    F = forward(dims, theta, X[idx])
    return _loss_terms(loss, F, Y[idx])[0]


def per_example_grads(dims, loss, theta, X, Y, idx, out):
    """Row ``j`` of ``out`` receives the gradient of the unweighted loss of ``idx[j]``."""
    Xb = X[idx]
    layers, acts, d1, _, F = _forward(dims, theta, Xb)
    _, delta, _ = _loss_terms(loss, F, Y[idx])
    offs = _offsets(layers)
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        o = offs[l]
        nw = W.size
        out[:, o:o + nw] = (delta[:, :, None] * acts[l][:, None, :]).reshape(len(idx), nw)
        out[:, o + nw:o + nw + W.shape[0]] = delta
        if l > 0:
            delta = (delta @ W) * d1[l - 1]


def hvp(dims, loss, theta, X, Y, idx, coef, V, out):
    """``out[k] = sum_j coef_j * Hess(l_{idx_j}) @ V[k]`` via the R-operator."""
    Xb = X[idx]
    layers, acts, d1, d2, F = _forward(dims, theta, Xb)
    _, G, P = _loss_terms(loss, F, Y[idx])
    c = coef[:, None]
    K = V.shape[0]
    rlayers = [_unpack(dims, V[k]) for k in range(K)]
    RW = [np.stack([r[l][0] for r in rlayers]) for l in range(len(layers))]
    Rb = [np.stack([r[l][1] for r in rlayers]) for l in range(len(layers))]

    # R-forward: RA[l] has shape (K, n, out_l); RH[l] is the R of acts[l].
    RA = []
    RH = [None]
    for l, (W, _) in enumerate(layers):
        ra = np.matmul(acts[l], np.swapaxes(RW[l], 1, 2)) + Rb[l][:, None, :]
        if RH[l] is not None:
            ra += RH[l] @ W.T
        RA.append(ra)
        if l < len(layers) - 1:
            RH.append(d1[l] * ra)

    RF = RA[-1]
    if loss == 0:
        Rdelta = RF * c
    else:
        ysum = Y[idx].sum(axis=1)[:, None]
        pr = P * RF
        Rdelta = (pr - P * pr.sum(axis=2, keepdims=True)) * (c * ysum)
    delta = G * c

    offs = _offsets(layers)
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        o = offs[l]
        nw = W.size
        rg = np.matmul(np.swapaxes(Rdelta, 1, 2), acts[l])
        if RH[l] is not None:
            rg += np.matmul(delta.T, RH[l])
        out[:, o:o + nw] = rg.reshape(K, nw)
        out[:, o + nw:o + nw + W.shape[0]] = Rdelta.sum(axis=1)
        if l > 0:
            gh = delta @ W
            rgh = Rdelta @ W + np.matmul(delta, RW[l])
            Rdelta = rgh * d1[l - 1] + gh * d2[l - 1] * RA[l - 1]
            delta = gh * d1[l - 1]


def sgd_update(theta, velocity, g, lr, momentum, clip):
    """Clip ``g`` by global norm, heavy-ball update of ``velocity`` then ``theta``.

    Returns ``(norm, scale)``; ``clip <= 0`` disables clipping.
    """
    norm = math.sqrt(float(np.dot(g, g)))
    scale = 1.0
    if clip > 0.0 and norm > clip:
        scale = clip / norm
        gc = g * scale
    else:
        gc = g
    velocity *= momentum
    velocity += gc
    theta -= lr * velocity
    return norm, scale


def train_step(dims, loss, theta, velocity, X, Y, idx, coef, wd, lr, momentum, clip, gbuf):
    value = loss_grad(dims, loss, theta, X, Y, idx, coef, gbuf)
    gbuf += wd * theta
    sgd_update(theta, velocity, gbuf, lr, momentum, clip)
    return value


def train_loop(dims, loss, theta, velocity, X, Y, schedule, w, lr, wd, momentum, clip):
    """Run every step of ``schedule`` in place; return the diverging step or -1."""
    B = schedule.shape[1]
    gbuf = np.empty_like(theta)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(schedule.shape[0]):
            idx = schedule[t]
            coef = w[idx] / B
            value = train_step(dims, loss, theta, velocity, X, Y, idx, coef, wd, lr[t],
                               momentum, clip, gbuf)
            if not math.isfinite(value):
                return t
    return -1
