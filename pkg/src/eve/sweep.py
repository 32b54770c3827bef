"""Cartesian ablation runner over config keys.

An axis is ``key=v1;v2;...`` (semicolons separate values because layer
layouts contain commas). Every cell trains from scratch on the same corpus and
reports its final losses and routing balance.
"""
from __future__ import annotations

import csv
import io
import itertools

import numpy as np

from . import config as config_mod
from . import train
from .data import generate_corpus
from .probes import summarize_stats

SCHEMA_VERSION = 1

# the ablation axes and the config keys that express them
AXES = {
    "masking ratios": ("mask_ratio_image", "mask_ratio_text", "simultaneous_masking"),
    "experts": ("num_experts",),
    "top-k": ("top_k",),
    "task subsets": ("tasks",),
    "FFN mode per layer band / router position": ("layers",),
    "decoder depth": ("dec_depth", "dec_dim"),
    "modality routing": ("modality_routing",),
    "load balancing": ("aux_alpha",),
    "pixel targets": ("norm_pix_target",),
}


def parse_axis(text):
    if "=" not in text:
        raise config_mod.ConfigError(f"grid axis {text!r}: expected key=v1;v2")
    key, raw = text.split("=", 1)
    key = key.strip()
    values = [config_mod.coerce(key, v) for v in raw.split(";") if v.strip()]
    if not values:
        raise config_mod.ConfigError(f"grid axis {key!r} has no values")
    return key, values


def cells(axes):
    keys = [k for k, _ in axes]
    for combo in itertools.product(*[v for _, v in axes]):
        yield dict(zip(keys, combo))


def run_cell(cfg, pairs, steps, seed):
    res = train.pretrain(cfg, pairs, seed, steps=steps)
    last = res.history[-1]
    row = {k: last.get(k) for k in ("total", "mlm_loss", "mim_loss", "itc_loss", "itm_loss", "aux_loss")}
    row["initial_total"] = res.history[0]["total"]
    layers = summarize_stats(res.last_stats)
    row["max_f"] = max((l["max_f"] for l in layers), default=None)
    row["jsd"] = float(np.mean([l["jsd"] for l in layers if "jsd" in l])) if layers else None
    return row


def run_sweep(base, axes, steps=None, seed=None, corpus_size=None):
    """One row per grid cell; the corpus is shared by cells with the same image size."""
    axes = [parse_axis(a) if isinstance(a, str) else a for a in axes]
    steps = base.steps if steps is None else steps
    seed = base.seed if seed is None else seed
    corpora = {}
    rows = []
    for cell in cells(axes):
        cfg = base.replace(**cell)
        if cfg.warmup_steps >= steps:
            cfg = cfg.replace(warmup_steps=max(steps // 10, 0))
        cfg = cfg.replace(steps=steps)
        key = (cfg.image_size, cfg.patch_size, cfg.grid)
        if key not in corpora:
            corpora[key] = generate_corpus(corpus_size or cfg.corpus_size, cfg.image_size, seed,
                                           cfg.patch_size, grid=cfg.grid)
        rows.append({**{k: v for k, v in cell.items()}, **run_cell(cfg, corpora[key], steps, seed)})
    return {"schema_version": SCHEMA_VERSION, "axes": {k: v for k, v in axes}, "steps": steps,
            "seed": seed, "rows": rows}


def to_csv(rows):
    buf = io.StringIO()
    keys = list(dict.fromkeys(k for r in rows for k in r))
    w = csv.DictWriter(buf, fieldnames=keys)
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()
