"""numba-compiled kernels; row loops, single-threaded so reductions keep a fixed order."""
import math

import numpy as np
from numba import njit

GELU_C = 0.7978845608028654
GELU_A = 0.044715


@njit(cache=True)
def _gelu_fwd(x, out, tanh_out):
    one = x.dtype.type(1.0)
    two = x.dtype.type(2.0)
    half = x.dtype.type(0.5)
    c = x.dtype.type(GELU_C)
    a = x.dtype.type(GELU_A)
    for i in range(x.size):
        v = x[i]
        u = c * (v + a * v * v * v)
        # tanh via exp: libm tanh is several times slower here
        t = one - two / (math.exp(two * u) + one)
        tanh_out[i] = t
        out[i] = half * v * (one + t)


@njit(cache=True)
def _gelu_bwd(x, t, dy, out):
    one = x.dtype.type(1.0)
    half = x.dtype.type(0.5)
    c = x.dtype.type(GELU_C)
    a3 = x.dtype.type(3.0 * GELU_A)
    for i in range(x.size):
        v = x[i]
        ti = t[i]
        du = c * (one + a3 * v * v)
        out[i] = dy[i] * (half * (one + ti) + half * v * (one - ti * ti) * du)


def gelu_fwd(x):
    flat = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(flat)
    t = np.empty_like(flat)
    _gelu_fwd(flat, out, t)
    return out.reshape(x.shape), t.reshape(x.shape)


def gelu_bwd(x, t, dy):
    flat = np.ascontiguousarray(x).reshape(-1)
    out = np.empty_like(flat)
    _gelu_bwd(flat, np.ascontiguousarray(t).reshape(-1), np.ascontiguousarray(dy).reshape(-1), out)
    return out.reshape(x.shape)


@njit(cache=True)
def _layernorm_fwd(x, gamma, beta, eps, y, xhat, rstd):
    n, d = x.shape
    for r in range(n):
        mean = 0.0
        for j in range(d):
            mean += x[r, j]
        mean /= d
        var = 0.0
        for j in range(d):
            c = x[r, j] - mean
            var += c * c
        var /= d
        s = 1.0 / math.sqrt(var + eps)
        rstd[r] = s
        for j in range(d):
            h = (x[r, j] - mean) * s
            xhat[r, j] = h
            y[r, j] = h * gamma[j] + beta[j]


def layernorm_fwd(x, gamma, beta, eps):
    x = np.ascontiguousarray(x)
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(x.shape[0], dtype=x.dtype)
    _layernorm_fwd(x, gamma, beta, eps, y, xhat, rstd)
    return y, xhat, rstd


@njit(cache=True)
def _layernorm_bwd(dy, xhat, rstd, gamma, dx, dgamma, dbeta):
    n, d = dy.shape
    for r in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            g = dy[r, j] * gamma[j]
            m1 += g
            m2 += g * xhat[r, j]
            dgamma[j] += dy[r, j] * xhat[r, j]
            dbeta[j] += dy[r, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            dx[r, j] = (dy[r, j] * gamma[j] - m1 - xhat[r, j] * m2) * rstd[r]


def layernorm_bwd(dy, xhat, rstd, gamma):
    dy = np.ascontiguousarray(dy)
    dx = np.empty_like(dy)
    dgamma = np.zeros(dy.shape[1], dtype=dy.dtype)
    dbeta = np.zeros(dy.shape[1], dtype=dy.dtype)
    _layernorm_bwd(dy, xhat, rstd, gamma, dx, dgamma, dbeta)
    return dx, dgamma, dbeta


@njit(cache=True)
def _masked_softmax(x, valid, group, out):
    n, d = x.shape
    zero = x.dtype.type(0.0)
    for r in range(n):
        keys = valid[r // group]
        mx = -np.inf
        for j in range(d):
            if keys[j] and x[r, j] > mx:
                mx = x[r, j]
        s = zero
        for j in range(d):
            e = math.exp(x[r, j] - mx) if keys[j] else zero
            out[r, j] = e
            s += e
        inv = x.dtype.type(1.0) / s
        for j in range(d):
            out[r, j] *= inv


@njit(cache=True)
def _softmax(x, out):
    n, d = x.shape
    zero = x.dtype.type(0.0)
    for r in range(n):
        mx = x[r, 0]
        for j in range(1, d):
            if x[r, j] > mx:
                mx = x[r, j]
        s = zero
        for j in range(d):
            e = math.exp(x[r, j] - mx)
            out[r, j] = e
            s += e
        inv = x.dtype.type(1.0) / s
        for j in range(d):
            out[r, j] *= inv


def softmax_fwd(x):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _softmax(x, out)
    return out


def masked_softmax_fwd(x, valid, group=1):
    x = np.ascontiguousarray(x)
    out = np.empty_like(x)
    _masked_softmax(x, np.ascontiguousarray(valid), group, out)
    return out


@njit(cache=True)
def _softmax_bwd(y, dy, out):
    n, d = y.shape
    for r in range(n):
        s = y.dtype.type(0.0)
        for j in range(d):
            s += dy[r, j] * y[r, j]
        for j in range(d):
            out[r, j] = y[r, j] * (dy[r, j] - s)


def softmax_bwd(y, dy):
    y = np.ascontiguousarray(y)
    out = np.empty_like(y)
    _softmax_bwd(y, np.ascontiguousarray(dy), out)
    return out


@njit(cache=True)
def _cross_entropy(logits, targets, loss, probs):
    n, v = logits.shape
    for r in range(n):
        mx = logits[r, 0]
        for j in range(1, v):
            if logits[r, j] > mx:
                mx = logits[r, j]
        s = 0.0
        for j in range(v):
            s += math.exp(logits[r, j] - mx)
        lse = math.log(s)
        for j in range(v):
            probs[r, j] = math.exp(logits[r, j] - mx - lse)
        loss[r] = lse - (logits[r, targets[r]] - mx)


def cross_entropy_fwd(logits, targets):
    logits = np.ascontiguousarray(logits)
    loss = np.empty(logits.shape[0], dtype=logits.dtype)
    probs = np.empty_like(logits)
    _cross_entropy(logits, np.ascontiguousarray(targets, dtype=np.int64), loss, probs)
    return loss, probs


@njit(cache=True)
def _slot_combine(contrib, tok, slot, slots, y):
    r_total, d = contrib.shape
    for r in range(r_total):
        for j in range(d):
            slots[tok[r], slot[r], j] = contrib[r, j]
    n, k, _ = slots.shape
    for t in range(n):
        for j in range(d):
            y[t, j] = slots[t, 0, j]
        for s in range(1, k):
            for j in range(d):
                y[t, j] += slots[t, s, j]


def slot_combine(contrib, tok, slot, n_tokens, k):
    contrib = np.ascontiguousarray(contrib)
    slots = np.zeros((n_tokens, k, contrib.shape[1]), dtype=contrib.dtype)
    y = np.empty((n_tokens, contrib.shape[1]), dtype=contrib.dtype)
    _slot_combine(contrib, tok.astype(np.int64), slot.astype(np.int64), slots, y)
    return y


@njit(cache=True)
def _adamw(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    decay = 1.0 - lr * wd
    for i in range(p.size):
        if wd != 0.0:
            p[i] *= decay
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * (m[i] / bc1) / (math.sqrt(v[i] / bc2) + eps)


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    _adamw(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1),
           v.reshape(-1), lr, beta1, beta2, eps, wd, bc1, bc2)
