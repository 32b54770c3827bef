"""Pre-training and retrieval fine-tuning loops.

Every random draw in a step comes from a stream keyed by (seed, purpose, step)
or (seed, purpose, epoch), so a run resumed from a checkpoint replays exactly
the batches, masks and negatives the uninterrupted run would have used.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import flip_pair, make_batch, random_resized_crop, Pair
from .model import EveModel
from .moe import RouterStats, aux_loss
from .objectives import compute_losses, sample_masks
from .optim import AdamW, Schedule, clip_grad_norm, grad_norms, lr_at
from .rng import Streams

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainResult:
    model: EveModel
    optimizer: AdamW
    step: int
    history: list = field(default_factory=list)        # metric records
    router_history: list = field(default_factory=list)  # router records
    last_stats: list = field(default_factory=list)      # merged RouterStats of the final step

    @property
    def losses(self):
        return [r["total"] for r in self.history]


def merge_stats(stats, alpha):
    """Combine one step's per-pass RouterStats into one entry per layer (token-weighted)."""
    by_layer = {}
    for s in stats:
        by_layer.setdefault(s.layer, []).append(s)
    out = []
    for layer in sorted(by_layer):
        group = by_layer[layer]
        n = sum(s.tokens for s in group)
        f = sum(s.f * s.tokens for s in group) / n
        p = sum(s.p * s.tokens for s in group) / n
        img = txt = None
        if group[0].image_counts is not None:
            img = sum(s.image_counts for s in group)
            txt = sum(s.text_counts for s in group)
        out.append(RouterStats(f=f, p=p, aux=aux_loss(f, p, alpha), tokens=n,
                               image_counts=img, text_counts=txt, layer=layer))
    return out


class BatchSource:
    """Per-epoch seeded permutation over the corpus; batches of fixed size (last partial batch dropped)."""

    def __init__(self, pairs, batch_size, streams, augment_flip=False, augment_crop=False):
        if not pairs:
            raise ValueError("training corpus is empty")
        self.pairs = pairs
        self.batch_size = min(batch_size, len(pairs))
        self.per_epoch = len(pairs) // self.batch_size
        self.streams = streams
        self.flip = augment_flip
        self.crop = augment_crop
        self._perm = (None, None)

    def indices(self, step):
        """Corpus indices of the batch consumed at 1-based ``step``."""
        epoch, j = divmod(step - 1, self.per_epoch)
        if self._perm[0] != epoch:
            self._perm = (epoch, self.streams("data", epoch).permutation(len(self.pairs)))
        b = self.batch_size
        return self._perm[1][j * b:(j + 1) * b]

    def pairs_at(self, step):
        chosen = [self.pairs[i] for i in self.indices(step)]
        if not (self.flip or self.crop):
            return chosen
        g = self.streams("augment", step)
        out = []
        for q in chosen:
            img, ids = q.image, list(q.ids)
            if self.flip and g.random() < 0.5:
                img, ids = flip_pair(img, ids)
            if self.crop:
                img = random_resized_crop(img, g)
            out.append(Pair(img, ids, None))
        return out


def _write_jsonl(fh, rec):
    if fh is not None:
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()


def run(cfg, pairs, seed=None, *, model=None, tasks=None, steps=None, schedule=None,
        weight_decay=None, resume=None, metrics_path=None, router_path=None, out_dir=None,
        stop_at=None, console=False):
    """Generic training loop used by pre-training and fine-tuning.

    ``resume`` is a Checkpoint (or path) to continue from; ``stop_at`` ends the
    run early at that step without changing the schedule (for resume tests).
    """
    seed = cfg.seed if seed is None else int(seed)
    tasks = cfg.task_set if tasks is None else frozenset(tasks)
    steps = cfg.steps if steps is None else int(steps)
    schedule = schedule or Schedule(cfg.peak_lr, cfg.warmup_steps, steps, cfg.floor_lr)
    wd = cfg.weight_decay if weight_decay is None else weight_decay
    streams = Streams(seed)

    with T.default_dtype(np.dtype(cfg.dtype)):
        if model is None:
            model = EveModel.build(cfg, seed)
        opt = AdamW(model.named_parameters(), lr=cfg.peak_lr, betas=(cfg.beta1, cfg.beta2),
                    eps=cfg.adam_eps, weight_decay=wd)
        start = 0
        if resume is not None:
            if isinstance(resume, (str, os.PathLike)):
                resume = ckpt.load(resume)
            ckpt.restore(resume, model, opt, cfg)
            start = resume.step
        meta = {"tasks": sorted(set(resume.meta.get("tasks", [])) | set(tasks)) if resume is not None
                else sorted(tasks | set(getattr(model, "trained_tasks", ())))}
        model.trained_tasks = tuple(meta["tasks"])
        source = BatchSource(pairs, cfg.batch_size, streams, cfg.augment_flip, cfg.augment_crop)
        result = TrainResult(model, opt, start)
        last = steps if stop_at is None else min(stop_at, steps)
        params = list(opt.params.values())
        mode = "a" if resume is not None else "w"
        mfh = open(metrics_path, mode) if metrics_path else None
        rfh = open(router_path, mode) if router_path else None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
        model.train()
        try:
            for step in range(start + 1, last + 1):
                t0 = time.perf_counter()
                raw = make_batch(source.pairs_at(step), cfg.max_text_len, cfg.patch_size)
                plan = sample_masks(raw.ids, raw.text_valid, cfg.num_patches, cfg.mask_ratio_image,
                                    cfg.mask_ratio_text, streams("mask", step))
                model.encoder.set_rng(streams("dropout", step) if cfg.dropout > 0 else None)
                lr = lr_at(step, schedule)
                out = compute_losses(model, raw, plan, tasks, cfg.simultaneous_masking,
                                     cfg.norm_pix_target, streams("itm", step))
                loss = float(out.total.data)
                opt.zero_grad()
                if not math.isfinite(loss):
                    raise TrainingAborted(f"non-finite loss {loss} at step {step}",
                                          {"step": step, "lr": lr, "losses": out.record(),
                                           "grad_norms": {}})
                out.total.backward()
                norm = clip_grad_norm(params, cfg.grad_clip)
                if not math.isfinite(norm):
                    raise TrainingAborted(f"non-finite gradient norm at step {step}",
                                          {"step": step, "lr": lr, "losses": out.record(),
                                           "grad_norms": grad_norms(opt.params)})
                opt.step(lr)
                opt.zero_grad()
                dt = time.perf_counter() - t0
                n_tok = _tokens(raw, plan, tasks, cfg.simultaneous_masking)
                rec = {"step": step, "lr": lr, "grad_norm": norm,
                       "mlm_loss": None, "mim_loss": None} | out.record()
                # wall-clock is the one non-reproducible quantity; keep it out of deterministic traces
                rec["tokens_per_sec"] = None if cfg.deterministic else n_tok / dt
                if not cfg.deterministic:
                    rec["step_time"] = dt
                result.history.append(rec)
                _write_jsonl(mfh, rec)
                merged = merge_stats(out.stats, model.alpha) if out.stats else []
                result.last_stats = merged
                k = cfg.router_stats_every
                if merged and k > 0 and (step % k == 0 or step == last):
                    for s in merged:
                        r = s.to_record(step)
                        result.router_history.append(r)
                        _write_jsonl(rfh, r)
                if console and (step % max(cfg.log_every, 1) == 0 or step == last):
                    log.info("step %d total %.4f lr %.2e |g| %.3f %.0f tok/s", step, rec["total"], lr,
                             norm, n_tok / dt)
                result.step = step
                if out_dir and cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0:
                    ckpt.save(os.path.join(out_dir, f"step{step:06d}.evek"),
                              ckpt.capture(cfg, model, opt, step, streams.state(), meta))
        finally:
            if mfh:
                mfh.close()
            if rfh:
                rfh.close()
        if out_dir:
            ckpt.save(os.path.join(out_dir, "final.evek"),
                      ckpt.capture(cfg, model, opt, result.step, streams.state(), meta))
        model.eval()
    return result


def _tokens(raw, plan, tasks, simultaneous):
    """Encoder tokens processed in one step (closed form, see ``tokens_per_step``)."""
    b, n_img, _ = raw.patches.shape
    return tokens_per_step(b, n_img, plan.img_keep.shape[1], raw.ids.shape[1], tasks, simultaneous)


def tokens_per_step(batch, n_patches, n_keep, text_len, tasks, simultaneous=False):
    """Encoder sequence positions (including [CLS] and padding) summed over all passes."""
    img_full, img_kept, txt = n_patches + 1, n_keep + 1, text_len + 1
    total = 0
    if simultaneous and {"mlm", "mim"} & tasks:
        total += img_kept + txt
    else:
        if "mim" in tasks:
            total += img_kept + txt
        if "mlm" in tasks:
            total += img_full + txt
    if "itc" in tasks:
        total += img_full + txt
    if "itm" in tasks:
        total += 2 * (img_full + txt)
    return batch * total


def pretrain(cfg, pairs, seed=None, **kw):
    """Masked signal modeling pre-training with the config's task set."""
    return run(cfg, pairs, seed, **kw)


def finetune_retrieval(model, cfg, pairs, steps=500, seed=None, peak_lr=None, **kw):
    """ITC + ITM fine-tuning: cosine schedule with 10% warmup, weight decay 0.01."""
    lr = cfg.peak_lr if peak_lr is None else peak_lr
    sched = Schedule(lr, max(1, steps // 10), steps, 0.0)
    ft_cfg = cfg.replace(augment_flip=False, augment_crop=False)
    return run(ft_cfg, pairs, seed, model=model, tasks={"itc", "itm"}, steps=steps, schedule=sched,
               weight_decay=0.01, **kw)
