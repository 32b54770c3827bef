"""Finite-difference verification of every parameter group and every primitive op.

Checks run in float64 on a micro-sized copy of the config (same depth, layer
layout, expert count and top-k; narrow widths). The loss exercises all four
objectives so every head and the decoder receive gradient. Soft routing is
piecewise smooth, so the data point is resampled until every token's gap
between its k-th and (k+1)-th gate exceeds ``margin``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import generate_corpus, make_batch
from .model import EveModel
from .moe import SoftRouter
from .objectives import compute_losses, sample_masks
from .rng import stream

TASKS = frozenset({"mlm", "mim", "itc", "itm"})


def micro_config(cfg):
    """Narrow copy of ``cfg`` that keeps its structure (depth, layout, N, k)."""
    return cfg.replace(dim=8, heads=2, ffn_ratio=2, image_size=8, patch_size=4, max_text_len=14,
                       dec_dim=8, dec_heads=2, init_std=0.3, aux_alpha=0.5, dropout=0.0,
                       dtype="float64", augment_flip=False, augment_crop=False)


def param_group(name):
    """Parameter group of a dotted parameter name, e.g. ``encoder.4.router``."""
    m = re.match(r"(encoder|decoder)\.blocks\.(\d+)\.(attn|ln|ffn)\.?(.*)", name)
    if m:
        stack, i, part, rest = m.groups()
        if part == "ffn" and not rest.startswith("expert"):
            part = "router"
        return f"{stack}.{int(i) + 1}.{part}"
    if name.startswith("itc_") or name == "log_temp":
        return "itc"
    if name.startswith("itm_"):
        return "itm"
    return name.split(".")[0]


def param_groups(model):
    groups = {}
    for n, p in model.named_parameters():
        groups.setdefault(param_group(n), []).append((n, p))
    return groups


def rel_error(analytic, numeric):
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)


def fd_grad(f, arr, idx, h):
    """Central difference of scalar ``f()`` w.r.t. ``arr.flat[idx]`` (perturbed in place)."""
    out = np.empty(len(idx))
    flat = arr.reshape(-1)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out


@dataclass
class GroupResult:
    group: str
    max_rel_error: float
    checked: int
    passed: bool
    skipped: bool = False

    def as_dict(self):
        return {"group": self.group, "max_rel_error": self.max_rel_error, "checked": self.checked,
                "passed": self.passed, "skipped": self.skipped}


@dataclass
class GradcheckReport:
    tolerance: float
    groups: list = field(default_factory=list)
    ops: list = field(default_factory=list)
    seed: int = 0
    resamples: int = 0
    min_margin: float = float("nan")
    margin_exhausted: bool = False

    @property
    def passed(self):
        return all(g.passed or g.skipped for g in self.groups + self.ops)

    @property
    def worst(self):
        return max((g.max_rel_error for g in self.groups + self.ops if not g.skipped), default=0.0)

    def as_dict(self):
        return {"tolerance": self.tolerance, "passed": self.passed, "worst": self.worst,
                "param_groups": len(self.groups), "op_checks": len(self.ops), "seed": self.seed,
                "resamples": self.resamples, "min_margin": self.min_margin,
                "margin_exhausted": self.margin_exhausted,
                "groups": [g.as_dict() for g in self.groups], "ops": [g.as_dict() for g in self.ops]}


def _routers(model):
    out = []
    for blk in model.encoder.blocks:
        if isinstance(blk.ffn, SoftRouter):
            out.append(blk.ffn)
    return out


def topk_margin(gates, k):
    """Smallest gap between the k-th and (k+1)-th largest gate over rows (inf if k == N)."""
    if gates.shape[1] <= k:
        return float("inf")
    s = -np.sort(-gates, axis=1)
    return float(np.min(s[:, k - 1] - s[:, k]))


def _setup(cfg, seed, batch):
    model = EveModel.build(cfg, seed)
    pairs = generate_corpus(batch, cfg.image_size, seed, cfg.patch_size, split="val")
    raw = make_batch(pairs, cfg.max_text_len, cfg.patch_size)
    plan = sample_masks(raw.ids, raw.text_valid, cfg.num_patches, cfg.mask_ratio_image,
                        cfg.mask_ratio_text, stream(seed, "mask", 0))

    def loss():
        return compute_losses(model, raw, plan, TASKS, cfg.simultaneous_masking, cfg.norm_pix_target,
                              stream(seed, "itm", 0))

    return model, loss


def check_model(cfg, tolerance=1e-4, seed=1, batch=2, per_tensor=4, h=1e-5, margin=1e-3,
                max_resamples=20):
    """FD check of every parameter group; returns a GradcheckReport."""
    cfg = micro_config(cfg)
    report = GradcheckReport(tolerance, seed=seed)
    with T.default_dtype(np.float64):
        for attempt in range(max_resamples + 1):
            s = seed + attempt
            model, loss = _setup(cfg, s, batch)
            routers = _routers(model)
            for r in routers:
                r.gate_log = []
            out = loss()
            margins = [topk_margin(gm, r.k) for r in routers for gm in r.gate_log]
            for r in routers:
                r.gate_log = None
            m = min(margins, default=float("inf"))
            if m > margin:
                break
        else:
            report.margin_exhausted = True
        report.seed, report.resamples, report.min_margin = s, attempt, m
        model.zero_grad()
        out.total.backward()

        def f():
            return float(loss().total.data)

        g = stream(s, "gradcheck")
        for name, members in param_groups(model).items():
            worst, count = 0.0, 0
            ana, num = [], []
            for pname, p in members:
                idx = g.choice(p.size, size=min(per_tensor, p.size), replace=False)
                grad = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1)
                ana.append(grad[idx])
                num.append(fd_grad(f, p.data, idx, h))
                count += len(idx)
            worst = rel_error(np.concatenate(ana), np.concatenate(num))
            soft = name.endswith(".router") or (name.startswith("encoder.") and name.endswith(".ffn")
                                                 and _is_soft(model, name))
            skipped = report.margin_exhausted and soft
            report.groups.append(GroupResult(name, worst, count, worst <= tolerance, skipped))
    return report


def _is_soft(model, group):
    i = int(group.split(".")[1]) - 1
    return isinstance(model.encoder.blocks[i].ffn, SoftRouter)


# -- primitive ops ----------------------------------------------------------

def _op_cases(g):
    def r(*shape):
        return g.standard_normal(shape)

    valid = np.array([[True, True, False, True], [True, False, False, False]])
    idx = np.array([2, 0, 2, 1])
    rows = np.array([[1, 0], [2, 2]])
    return {
        "add": ([r(3, 4), r(4)], lambda a, b: T.add(a, b)),
        "sub": ([r(3, 4), r(3, 4)], lambda a, b: T.sub(a, b)),
        "mul": ([r(3, 4), r(3, 4)], lambda a, b: T.mul(a, b)),
        "scale_rows": ([r(3, 4), r(3)], lambda a, w: T.scale_rows(a, w)),
        "exp": ([r(3, 4)], lambda a: T.exp(a)),
        "log": ([np.abs(r(3, 4)) + 0.5], lambda a: T.log(a)),
        "sqrt": ([np.abs(r(3, 4)) + 0.5], lambda a: T.sqrt(a)),
        "gelu": ([r(3, 4)], lambda a: T.gelu(a)),
        "sum": ([r(3, 4)], lambda a: T.tsum(a, axis=0)),
        "mean": ([r(3, 4)], lambda a: T.mean(a, axis=1)),
        "reshape": ([r(3, 4)], lambda a: T.reshape(a, (2, 6))),
        "transpose": ([r(2, 3, 4)], lambda a: T.transpose(a, (0, 2, 1))),
        "expand": ([r(4)], lambda a: T.expand(a, (3, 4))),
        "concat": ([r(2, 4), r(3, 4)], lambda a, b: T.concat([a, b], axis=0)),
        "take": ([r(3, 4)], lambda a: T.take(a, idx)),
        "gather_rows": ([r(2, 3, 4)], lambda a: T.gather_rows(a, rows)),
        "matmul": ([r(3, 4), r(4, 5)], lambda a, b: T.matmul(a, b)),
        "matmul_batched": ([r(2, 3, 4), r(2, 4, 5)], lambda a, b: T.matmul(a, b)),
        "linear": ([r(2, 3, 4), r(4, 5), r(5)], lambda x, w, b: T.linear(x, w, b)),
        "softmax": ([r(3, 5)], lambda a: T.softmax(a)),
        "masked_softmax": ([r(2, 3, 4)], lambda a: T.masked_softmax(a, valid[:, None, :])),
        "layer_norm": ([r(3, 6), r(6), r(6)], lambda x, gm, bt: T.layer_norm(x, gm, bt)),
        "l2_normalize": ([r(3, 4)], lambda a: T.l2_normalize(a)),
        "cross_entropy": ([r(4, 5)], lambda a: T.cross_entropy(a, np.array([0, 4, 2, 2]))),
        "mse": ([r(3, 4), r(3, 4)], lambda a, b: T.mse(a, b)),
    }


def check_ops(tolerance=1e-4, seed=0, h=1e-5):
    """FD check of each primitive op against a random linear functional of its output."""
    out = []
    with T.default_dtype(np.float64):
        g = stream(seed, "gradcheck-ops")
        for name, (inputs, fn) in _op_cases(g).items():
            ts = [T.Tensor(x.copy(), requires_grad=True) for x in inputs]
            y = fn(*ts)
            w = g.standard_normal(y.shape)

            def f():
                return float(np.sum(fn(*[T.Tensor(t.data) for t in ts]).data * w))

            T.tsum(y * T.Tensor(w)).backward()
            ana = np.concatenate([t.grad.reshape(-1) for t in ts])
            num = np.concatenate([fd_grad(f, t.data, np.arange(t.size), h) for t in ts])
            err = rel_error(ana, num)
            out.append(GroupResult(f"op:{name}", err, len(ana), err <= tolerance))
    return out


def gradcheck(cfg, tolerance=1e-4, seed=1, **kw):
    report = check_model(cfg, tolerance, seed, **kw)
    report.ops = check_ops(tolerance, seed)
    return report
