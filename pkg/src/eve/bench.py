"""Training throughput per objective set at a fixed batch size."""
from __future__ import annotations

import os
import platform
import tracemalloc

import numpy as np

from . import train
from .data import generate_corpus
from .objectives import image_mask_count
from .optim import Schedule

SCHEMA_VERSION = 1
DEFAULT_TASK_SETS = ("mlm+mim", "mlm+mim+itc", "mlm+mim+itm", "mlm+mim+itc+itm")
MIN_STABLE_STEPS = 100

NOTE = ("Ratios compare compute per step at equal batch size. The published 3.5x speedup also "
        "reflects the larger batch that fits in memory without the extra ITC/ITM passes; that "
        "batch-size effect is not reproduced here.")


def parse_task_sets(text):
    if isinstance(text, str):
        text = [t for t in text.split(",") if t.strip()]
    return [frozenset(x.strip().lower() for x in t.split("+")) for t in text]


def task_label(tasks):
    order = ("mlm", "mim", "itc", "itm")
    return "+".join(t for t in order if t in tasks)


def analytic_tokens(cfg, tasks):
    """Encoder positions per step from the config alone."""
    n = cfg.num_patches
    keep = n - image_mask_count(n, cfg.mask_ratio_image)
    return train.tokens_per_step(cfg.batch_size, n, keep, cfg.max_text_len, tasks, cfg.simultaneous_masking)


def thread_info():
    keys = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS")
    return {"cpu_count": os.cpu_count(), **{k.lower(): os.environ.get(k) for k in keys}}


def _peak_bytes(cfg, pairs, tasks):
    tracemalloc.start()
    try:
        train.run(cfg, pairs, tasks=tasks, steps=2, schedule=Schedule(cfg.peak_lr, 1, 2))
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def run_bench(cfg, task_sets=DEFAULT_TASK_SETS, steps=100, warmup=5, pairs=None, memory=True):
    """Time ``steps`` training steps per task set after ``warmup`` untimed ones."""
    cfg = cfg.replace(deterministic=False, dropout=0.0)
    task_sets = parse_task_sets(task_sets)
    if pairs is None:
        need = max(cfg.batch_size * 2, 64)
        pairs = generate_corpus(need, cfg.image_size, cfg.seed, cfg.patch_size)
    rows = []
    for tasks in task_sets:
        total = warmup + steps
        res = train.run(cfg, pairs, tasks=tasks, steps=total, schedule=Schedule(cfg.peak_lr, 1, total + 1))
        times = np.array([r["step_time"] for r in res.history[warmup:]])
        tok = analytic_tokens(cfg, tasks)
        row = {"tasks": task_label(tasks), "batch_size": min(cfg.batch_size, len(pairs)),
               "steps": len(times), "steps_per_sec": float(len(times) / times.sum()),
               "tokens_per_step": tok, "tokens_per_sec": float(tok * len(times) / times.sum()),
               "step_time_median": float(np.median(times)),
               "peak_memory_estimate": _peak_bytes(cfg, pairs, tasks) if memory else None}
        rows.append(row)
    base = rows[0]["steps_per_sec"]
    for r in rows:
        r["speedup_of_baseline"] = base / r["steps_per_sec"]
    return {
        "schema_version": SCHEMA_VERSION,
        "baseline": rows[0]["tasks"],
        "rows": rows,
        "warning": (f"fewer than {MIN_STABLE_STEPS} timed steps; measurements may be unstable"
                    if steps < MIN_STABLE_STEPS else None),
        "warmup_steps_excluded": warmup,
        "deterministic": False,
        "threads": thread_info(),
        "machine": platform.machine(),
        "note": NOTE,
    }
