"""Compiled per-sample backprop and SGD loops for the small networks in ``nn``.

Networks here have at most four layers of at most a few dozen units, where
numpy call overhead dominates; explicit loops under numba are an order of
magnitude faster and, having a fixed summation order, fully deterministic.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LINEAR, RELU, ELU = 0, 1, 2
ACT_CODES = {"linear": LINEAR, "relu": RELU, "elu": ELU}


def layout(arch):
    """Integer arrays describing an Architecture for the kernels."""
    dims = np.array([arch.input_dim] + [fo for _, fo, _ in arch.layers], dtype=np.int64)
    woff = np.array([w.start for w, _ in arch.offsets], dtype=np.int64)
    boff = np.array([b.start for _, b in arch.offsets], dtype=np.int64)
    acts = np.array([ACT_CODES[a] for _, _, a in arch.layers], dtype=np.int64)
    return dims, woff, boff, acts


@njit(cache=True, nogil=True)
def _act(z, code):
    if code == ELU:
        return z if z > 0.0 else math.expm1(z)
    if code == RELU:
        return z if z > 0.0 else 0.0
    return z


@njit(cache=True, nogil=True)
def _act_grad(z, code):
    if code == ELU:
        return 1.0 if z > 0.0 else math.exp(z)
    if code == RELU:
        return 1.0 if z > 0.0 else 0.0
    return 1.0


@njit(cache=True, nogil=True)
def batch_gradient(w, x, t, idx, start, stop, dims, woff, boff, acts, grad):
    """Gradient of the mean squared error over rows idx[start:stop] into ``grad``.

    Returns -1 on success, else the index of the first layer that produced a
    non-finite value.
    """
    n_layers = acts.shape[0]
    width = 1
    for d in dims:
        if d > width:
            width = d
    z = np.empty((n_layers, width))
    a = np.empty((n_layers + 1, width))
    delta = np.empty(width)
    prev = np.empty(width)
    grad[:] = 0.0
    m = stop - start
    scale = 2.0 / m
    for s in range(start, stop):
        r = idx[s]
        for j in range(dims[0]):
            a[0, j] = x[r, j]
        for layer in range(n_layers):
            fi = dims[layer]
            fo = dims[layer + 1]
            for o in range(fo):
                acc = w[boff[layer] + o]
                base = woff[layer] + o * fi
                for i in range(fi):
                    acc += w[base + i] * a[layer, i]
                if not math.isfinite(acc):
                    return layer
                z[layer, o] = acc
                a[layer + 1, o] = _act(acc, acts[layer])
        delta[0] = scale * (a[n_layers, 0] - t[r])
        for layer in range(n_layers - 1, -1, -1):
            fi = dims[layer]
            fo = dims[layer + 1]
            for o in range(fo):
                delta[o] *= _act_grad(z[layer, o], acts[layer])
                if not math.isfinite(delta[o]):
                    return layer
            for o in range(fo):
                d = delta[o]
                grad[boff[layer] + o] += d
                base = woff[layer] + o * fi
                for i in range(fi):
                    grad[base + i] += d * a[layer, i]
            if layer > 0:
                for i in range(fi):
                    acc = 0.0
                    for o in range(fo):
                        acc += delta[o] * w[woff[layer] + o * fi + i]
                    prev[i] = acc
                for i in range(fi):
                    delta[i] = prev[i]
    return -1


@njit(cache=True, nogil=True)
def nesterov_update(w, v, g, lr, mu, first):
    # v' = mu*v - lr*g ; w' = w + mu*v' - lr*g, left to right
    for i in range(first, w.shape[0]):
        step = lr * g[i]
        v[i] = mu * v[i] - step
        w[i] = w[i] + mu * v[i] - step


@njit(cache=True, nogil=True)
def train_epoch(w, v, x, t, order, batch_size, lr, mu, first, dims, woff, boff, acts, grad):
    """One pass over ``order`` in mini-batches; returns -1 or a failing layer index."""
    n = order.shape[0]
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        bad = batch_gradient(w, x, t, order, start, stop, dims, woff, boff, acts, grad)
        if bad >= 0:
            return bad
        nesterov_update(w, v, grad, lr, mu, first)
    return -1
