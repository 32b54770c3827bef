"""Pre-LN Transformer blocks with shared attention and a per-layer FFN mode."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .config import FFNMode, LayerSpec
from .moe import HardRouter, SharedFFN, SoftRouter
from .nn import Module


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.eps = eps
        self.param("gamma", (dim,), "ones")
        self.param("beta", (dim,), "zeros")

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class ExpertFFN(Module):
    def __init__(self, dim, hidden, std=0.02, out_std=None):
        self.param("w1", (dim, hidden), std=std)
        self.param("b1", (hidden,), "zeros")
        self.param("w2", (hidden, dim), std=std if out_std is None else out_std)
        self.param("b2", (dim,), "zeros")

    def __call__(self, x):
        return T.linear(T.gelu(T.linear(x, self.w1, self.b1)), self.w2, self.b2)


class Attention(Module):
    def __init__(self, dim, heads, std=0.02, out_std=None, dropout=0.0):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.dropout = dropout
        self.rng = None
        self.last_weights = None
        self.ln = LayerNorm(dim)
        for name in ("wq", "wk", "wv"):
            self.param(name, (dim, dim), std=std)
            self.param("b" + name[1], (dim,), "zeros")
        self.param("wo", (dim, dim), std=std if out_std is None else out_std)
        self.param("bo", (dim,), "zeros")

    def _split(self, x, b, l):
        dh = self.dim // self.heads
        return T.transpose(T.reshape(x, (b, l, self.heads, dh)), (0, 2, 1, 3))

    def __call__(self, x, valid):
        """x + MHSA(LN(x)); keys where ``valid`` is False get zero weight."""
        b, l, d = x.shape
        h = self.ln(x)
        q = self._split(T.linear(h, self.wq, self.bq), b, l)
        k = self._split(T.linear(h, self.wk, self.bk), b, l)
        v = self._split(T.linear(h, self.wv, self.bv), b, l)
        scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(d // self.heads))
        attn = T.masked_softmax(scores, np.asarray(valid)[:, None, None, :])
        self.last_weights = attn.data
        ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, l, d))
        out = T.linear(ctx, self.wo, self.bo)
        if self.training and self.dropout > 0 and self.rng is not None:
            out = T.dropout(out, self.dropout, self.rng)
        return x + out


def make_ffn(spec, dim, ratio, std, out_std, modality_routing):
    experts = [ExpertFFN(dim, ratio * dim, std, out_std) for _ in range(spec.num_experts)]
    if spec.mode is FFNMode.SHARED:
        return SharedFFN(experts[0])
    if spec.mode is FFNMode.HARD:
        return HardRouter(experts)
    return SoftRouter(dim, experts, spec.top_k, modality_routing, std)


class Block(Module):
    def __init__(self, dim, heads, spec=LayerSpec(FFNMode.SHARED), ratio=4, std=0.02, out_std=None,
                 modality_routing=True, dropout=0.0):
        self.spec = spec
        self.attn = Attention(dim, heads, std, out_std, dropout)
        self.ln = LayerNorm(dim)
        self.ffn = make_ffn(spec, dim, ratio, std, out_std, modality_routing)

    def __call__(self, x, tags, valid, alpha=0.001):
        x = self.attn(x, valid)
        b, l, d = x.shape
        flat = T.reshape(self.ln(x), (b * l, d))
        y, stats = self.ffn(flat, np.tile(tags, b), valid.reshape(-1), alpha)
        return x + T.reshape(y, (b, l, d)), stats


class Encoder(Module):
    def __init__(self, dim, heads, specs, ratio=4, std=0.02, modality_routing=True, dropout=0.0):
        out_std = std / math.sqrt(2 * max(len(specs), 1))
        self.blocks = [Block(dim, heads, s, ratio, std, out_std, modality_routing, dropout) for s in specs]
        self.ln = LayerNorm(dim)

    def __call__(self, batch, alpha=0.001, final_norm=True):
        """Returns (hidden states, router stats for each soft layer).

        With no blocks the embeddings pass through unchanged (no final norm either).
        """
        x = batch.x
        stats = []
        for i, blk in enumerate(self.blocks):
            x, st = blk(x, batch.tags, batch.valid, alpha)
            if st is not None:
                st.layer = i + 1  # 1-based, as in layer layouts
                stats.append(st)
        if self.blocks and final_norm:
            x = self.ln(x)
        return x, stats

    def set_rng(self, rng):
        for blk in self.blocks:
            blk.attn.rng = rng


def encoder_forward(encoder, batch, alpha=0.001):
    return encoder(batch, alpha)
