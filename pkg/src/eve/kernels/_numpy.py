"""Pure-numpy reference kernels.

Every function here has a twin with the same signature in ``_numba``.
"""
import numpy as np

GELU_C = 0.7978845608028654  # sqrt(2 / pi)
GELU_A = 0.044715


def gelu_fwd(x):
    """Returns (gelu(x), tanh term) so backward can skip recomputing tanh."""
    t = np.tanh(GELU_C * (x + GELU_A * x * x * x))
    return 0.5 * x * (1.0 + t), t


def gelu_bwd(x, t, dy):
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def layernorm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_bwd(dy, xhat, rstd, gamma):
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    d = xhat.shape[1]
    m1 = dxhat.sum(axis=1, keepdims=True) / d
    m2 = (dxhat * xhat).sum(axis=1, keepdims=True) / d
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dgamma, dbeta


def softmax_fwd(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def masked_softmax_fwd(x, valid, group=1):
    """Row r of ``x`` uses key mask ``valid[r // group]``."""
    valid = np.repeat(valid, group, axis=0)
    z = np.where(valid, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def cross_entropy_fwd(logits, targets):
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(logits.shape[0])
    probs = np.exp(z - lse[:, None])
    return lse - z[rows, targets], probs


def slot_combine(contrib, tok, slot, n_tokens, k):
    slots = np.zeros((n_tokens, k, contrib.shape[1]), dtype=contrib.dtype)
    slots[tok, slot] = contrib
    y = slots[:, 0].copy()
    for j in range(1, k):
        y += slots[:, j]
    return y


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    if wd != 0.0:
        p *= 1.0 - lr * wd
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
