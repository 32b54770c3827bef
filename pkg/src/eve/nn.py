"""Minimal module tree: named parameters and name-keyed initialisation."""
import zlib

import numpy as np

from . import rng as rng_mod
from .tensor import Tensor, get_default_dtype


class Module:
    training = True

    def param(self, name, shape, init="normal", std=0.02):
        t = Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad=True)
        self.__dict__.setdefault("_inits", {})[name] = (init, std)
        setattr(self, name, t)
        return t

    def children(self):
        for name, v in self.__dict__.items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)) and v and isinstance(v[0], Module):
                for i, m in enumerate(v):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix=""):
        for name, v in self.__dict__.items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + name, v
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, p in own.items():
            if p.shape != state[n].shape:
                raise ValueError(f"{n}: shape {state[n].shape} does not match {p.shape}")
            p.data = np.array(state[n], dtype=p.dtype)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def train(self, mode=True):
        self.training = mode
        for _, c in self.children():
            c.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def init_parameters(self, seed, prefix=""):
        """Draw each parameter from its own stream keyed by its full name."""
        for name, (kind, std) in self.__dict__.get("_inits", {}).items():
            t = getattr(self, name)
            full = prefix + name
            if kind == "zeros":
                t.data[...] = 0
            elif kind == "ones":
                t.data[...] = 1
            elif kind == "const":
                t.data[...] = std
            elif kind == "normal":
                g = rng_mod.stream(seed, "init", zlib.crc32(full.encode()))
                t.data[...] = trunc_normal(g, t.shape, std)
            else:
                raise ValueError(f"unknown init {kind!r}")
        for name, child in self.children():
            child.init_parameters(seed, f"{prefix}{name}.")
        return self

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def trunc_normal(g, shape, std, bound=2.0):
    """Normal(0, std) truncated at +-bound*std by resampling."""
    x = g.standard_normal(shape)
    bad = np.abs(x) > bound
    while bad.any():
        x[bad] = g.standard_normal(int(bad.sum()))
        bad = np.abs(x) > bound
    return x * std
