"""AdamW with decoupled weight decay, global-norm clipping, warmup + cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels


class OptimizerError(ValueError):
    pass


def decays(name, p):
    # biases, LayerNorm params and other vectors (cls/type/modality embeddings) are exempt
    return p.ndim >= 2


class AdamW:
    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.98), eps=1e-8, weight_decay=0.05,
                 decay_filter=decays):
        self.params = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = {n: decay_filter(n, p) for n, p in self.params.items()}
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.t = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for n, p in self.params.items():
            if p.grad is None:
                continue
            if p.grad.shape != p.shape:
                raise OptimizerError(f"{n}: gradient shape {p.grad.shape} != parameter shape {p.shape}")
            wd = self.weight_decay if self.decay[n] else 0.0
            kernels.adamw_update(p.data, p.grad.astype(p.dtype, copy=False), self.m[n], self.v[n],
                                 lr, self.beta1, self.beta2, self.eps, wd, bc1, bc2)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- state ---------------------------------------------------------------
    def state_tensors(self):
        out = {}
        for n in self.params:
            out[f"opt.m/{n}"] = self.m[n]
            out[f"opt.v/{n}"] = self.v[n]
        return out

    def load_state_tensors(self, tensors, t):
        for n in self.params:
            m, v = tensors[f"opt.m/{n}"], tensors[f"opt.v/{n}"]
            if m.shape != self.m[n].shape:
                raise OptimizerError(f"optimizer state for {n} has shape {m.shape}")
            self.m[n] = np.array(m, dtype=self.m[n].dtype)
            self.v[n] = np.array(v, dtype=self.v[n].dtype)
        self.t = int(t)


def grad_norms(params):
    return {n: float(np.sqrt(np.sum(np.square(p.grad, dtype=np.float64))))
            for n, p in params.items() if p.grad is not None}


def clip_grad_norm(params, max_norm):
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64)))
                          for p in params if p.grad is not None))
    if max_norm and max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


@dataclass(frozen=True)
class Schedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int
    floor_lr: float = 0.0

    def __post_init__(self):
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise OptimizerError("warmup_steps must be smaller than total_steps")


def lr_at(t, s):
    """Linear warmup to the peak, then cosine decay to the floor; clamps past the end."""
    if t >= s.total_steps:
        return s.floor_lr
    if s.warmup_steps > 0 and t <= s.warmup_steps:
        return s.peak_lr * t / s.warmup_steps
    frac = (t - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.floor_lr + (s.peak_lr - s.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))
