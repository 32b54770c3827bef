"""Modality-aware mixture-of-experts routing.

Soft routing computes ``softmax(W (x + b_m))`` over all N experts, keeps the
top-k per token (ties go to the lower expert index) and sums the selected
experts' outputs weighted by their full-softmax gate values (no
renormalisation over the top-k). Every token is kept: there is no capacity.

Dispatch gathers each expert's tokens into one contiguous buffer, runs the
expert once, and scatters the weighted rows into a (T, k, D) slot buffer that
is summed in rank order. ``naive_moe`` is the per-token loop it must match.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .embedding import IMAGE, TEXT
from .nn import Module


class RoutingError(ValueError):
    pass


@dataclass
class DispatchRecord:
    topk: np.ndarray                 # (T, k) expert ids in rank order
    tokens: list = field(default_factory=list)   # per expert: token rows routed there
    slots: list = field(default_factory=list)    # per expert: rank slot of each row

    @property
    def assignments(self):
        return sum(len(t) for t in self.tokens)


@dataclass
class RouterStats:
    f: np.ndarray            # dispatch fraction per expert
    p: np.ndarray            # mean gate probability per expert
    aux: float
    tokens: int
    image_counts: np.ndarray = None
    text_counts: np.ndarray = None
    aux_tensor: T.Tensor = None
    layer: int = -1

    def to_record(self, step):
        return {"step": int(step), "layer": int(self.layer), "f": [float(v) for v in self.f],
                "p": [float(v) for v in self.p], "aux": float(self.aux)}


def topk_indices(gates, k):
    """Top-k expert ids per row in descending gate order; equal gates keep the lower index first."""
    order = np.argsort(-gates, axis=1, kind="stable")
    return order[:, :k]


def gate(x, tags, w, b_img=None, b_txt=None):
    """Full gate distribution softmax(W (x + b_tag)) for (T, D) tokens."""
    tags = np.asarray(tags)
    if b_img is not None:
        if np.any((tags != IMAGE) & (tags != TEXT)):
            raise RoutingError("gate: modality tags must be IMAGE or TEXT")
        table = T.concat([T.reshape(b_img, (1, -1)), T.reshape(b_txt, (1, -1))], axis=0)
        x = x + T.take(table, tags.astype(np.int64))
    return T.softmax(T.matmul(x, w), axis=-1)


def _combine(contrib, tok, slot, n_tokens, k):
    y = kernels.slot_combine(contrib.data, tok, slot, n_tokens, k)
    return T.custom_op(y, (contrib,), lambda g: (g[tok],), "moe_combine")


def dispatch_combine(x, gates, k, experts):
    """Top-k sparse mixture: y_t = sum over selected i of gates[t, i] * expert_i(x_t)."""
    n_tok, n_exp = gates.shape
    if not 1 <= k <= n_exp:
        raise RoutingError(f"top-k {k} outside 1..{n_exp}")
    top = topk_indices(gates.data, k)
    flat_gates = T.reshape(gates, (-1,))
    rec = DispatchRecord(top)
    parts, toks, slots = [], [], []
    for e, expert in enumerate(experts):
        tok, slot = np.nonzero(top == e)
        rec.tokens.append(tok)
        rec.slots.append(slot)
        if len(tok) == 0:
            continue
        h = expert(T.take(x, tok))
        w = T.take(flat_gates, tok * n_exp + e)
        parts.append(T.scale_rows(h, w))
        toks.append(tok)
        slots.append(slot)
    contrib = T.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    y = _combine(contrib, np.concatenate(toks), np.concatenate(slots), n_tok, k)
    return y, rec


def naive_moe(x, gates, k, experts):
    """Reference per-token loop over numpy arrays; used to pin ``dispatch_combine``."""
    xd, gd = x.data, gates.data
    top = topk_indices(gd, k)
    out = np.empty_like(xd)
    with T.no_grad():
        for t in range(xd.shape[0]):
            row = T.Tensor(xd[t:t + 1])
            acc = None
            for e in top[t]:
                term = (experts[e](row).data * gd[t, e])[0]
                acc = term if acc is None else acc + term
            out[t] = acc
    return out


def load_stats(gates, top, n_exp, valid=None, alpha=0.001, tags=None):
    """Dispatch fraction f (constant), mean gate p (differentiable) and alpha*N*sum(f*p).

    f counts top-k slots per expert over T*k; both f and p use the valid tokens only.
    """
    rows = np.arange(gates.shape[0]) if valid is None else np.flatnonzero(valid)
    if len(rows) == 0:
        raise RoutingError("load statistics need at least one token")
    k = top.shape[1]
    counts = np.bincount(top[rows].reshape(-1), minlength=n_exp)
    f = counts / (len(rows) * k)
    g_valid = gates if valid is None else T.take(gates, rows)
    p = T.mean(g_valid, axis=0)
    aux = T.tsum(p * T.Tensor(f.astype(gates.dtype))) * (alpha * n_exp)
    stats = RouterStats(f=f, p=p.data.astype(np.float64), aux=float(aux.data), tokens=len(rows),
                        aux_tensor=aux)
    if tags is not None:
        tv = np.asarray(tags)[rows]
        stats.image_counts = np.bincount(top[rows][tv == IMAGE].reshape(-1), minlength=n_exp)
        stats.text_counts = np.bincount(top[rows][tv == TEXT].reshape(-1), minlength=n_exp)
    return stats


def aux_loss(f, p, alpha=0.001):
    """Load-balancing penalty alpha * N * sum_i f_i p_i on plain arrays."""
    f, p = np.asarray(f, dtype=np.float64), np.asarray(p, dtype=np.float64)
    if f.shape != p.shape or f.size == 0:
        raise RoutingError("aux_loss: f and p must be non-empty and the same length")
    return alpha * f.size * float(np.dot(f, p))


def hard_route(x, tags, experts):
    """Image tokens through expert 0, text tokens through expert 1, weight exactly 1."""
    if len(experts) != 2:
        raise RoutingError("hard routing needs exactly two experts")
    tags = np.asarray(tags)
    if np.any((tags != IMAGE) & (tags != TEXT)):
        raise RoutingError("hard_route: unknown modality tag")
    parts, toks = [], []
    for e, expert in enumerate(experts):
        tok = np.flatnonzero(tags == e)
        if len(tok):
            parts.append(expert(T.take(x, tok)))
            toks.append(tok)
    contrib = T.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    tok = np.concatenate(toks)
    return _combine(contrib, tok, np.zeros_like(tok), x.shape[0], 1)


class SoftRouter(Module):
    def __init__(self, dim, experts, k, modality_routing=True, std=0.02):
        if not 1 <= k <= len(experts):
            raise RoutingError(f"top-k {k} outside 1..{len(experts)}")
        self.experts = list(experts)
        self.k = k
        self.modality_routing = modality_routing
        self.param("w", (dim, len(experts)), std=std)
        if modality_routing:
            self.param("b_img", (dim,), "zeros")
            self.param("b_txt", (dim,), "zeros")
        self.last_gates = None
        self.gate_log = None  # set to a list to collect the gates of valid tokens on every call

    @property
    def num_experts(self):
        return len(self.experts)

    def gates(self, x, tags):
        if self.modality_routing:
            return gate(x, tags, self.w, self.b_img, self.b_txt)
        return gate(x, tags, self.w)

    def __call__(self, x, tags, valid=None, alpha=0.001):
        g = self.gates(x, tags)
        self.last_gates = g.data
        if self.gate_log is not None:
            self.gate_log.append(g.data if valid is None else g.data[np.asarray(valid, dtype=bool)])
        y, rec = dispatch_combine(x, g, self.k, self.experts)
        stats = load_stats(g, rec.topk, self.num_experts, valid, alpha, tags)
        return y, stats


class HardRouter(Module):
    def __init__(self, experts):
        if len(experts) != 2:
            raise RoutingError("hard router has one expert per modality")
        self.experts = list(experts)

    def __call__(self, x, tags, valid=None, alpha=0.0):
        return hard_route(x, tags, self.experts), None


class SharedFFN(Module):
    def __init__(self, expert):
        self.expert = expert

    def __call__(self, x, tags, valid=None, alpha=0.0):
        return self.expert(x), None
