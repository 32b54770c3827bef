"""Masked signal modeling: mask sampling, MLM / MIM heads and losses, ITC / ITM auxiliaries."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import MASK
from .nn import Module
from .transformer import Block, LayerNorm


class ObjectiveError(ValueError):
    pass


@dataclass
class MaskPlan:
    img_mask: np.ndarray     # (B, M) sorted masked patch indices
    img_keep: np.ndarray     # (B, N-M) sorted visible patch indices
    txt_rows: np.ndarray     # (R,) sample of each masked text position
    txt_pos: np.ndarray      # (R,) position in the caption (0-based, [CLS] excluded)
    txt_targets: np.ndarray  # (R,) original ids
    r_img: float
    r_txt: float

    def masked_ids(self, ids):
        out = np.array(ids, copy=True)
        out[self.txt_rows, self.txt_pos] = MASK
        return out


def _count(ratio, n, lo, hi):
    return int(min(max(math.floor(ratio * n + 1e-9), lo), hi))


def image_mask_count(n, ratio):
    return _count(ratio, n, 1, n - 1)


def text_mask_count(n_valid, ratio):
    return _count(ratio, n_valid, 1, n_valid)


def sample_masks(ids, text_valid, num_patches, r_img, r_txt, rng):
    """Uniform masks without replacement; [CLS] and [PAD] are never candidates."""
    if not (0 < r_img < 1 and 0 < r_txt < 1):
        raise ObjectiveError(f"masking ratios must lie in (0, 1), got {r_img}, {r_txt}")
    if num_patches < 2:
        raise ObjectiveError("image masking needs at least 2 patches")
    ids = np.asarray(ids)
    text_valid = np.asarray(text_valid, dtype=bool)
    b = ids.shape[0]
    m = image_mask_count(num_patches, r_img)
    masks, keeps = [], []
    rows, pos = [], []
    for i in range(b):
        perm = rng.permutation(num_patches)
        masks.append(np.sort(perm[:m]))
        keeps.append(np.sort(perm[m:]))
        cand = np.flatnonzero(text_valid[i])
        if len(cand) == 0:
            raise ObjectiveError(f"sample {i} has no maskable text tokens")
        c = text_mask_count(len(cand), r_txt)
        chosen = np.sort(rng.choice(cand, size=c, replace=False))
        rows.append(np.full(c, i))
        pos.append(chosen)
    rows = np.concatenate(rows)
    pos = np.concatenate(pos)
    return MaskPlan(np.stack(masks), np.stack(keeps), rows, pos, ids[rows, pos].astype(np.int64), r_img, r_txt)


class MlmHead(Module):
    """Two-layer MLP text decoder D -> D -> V."""

    def __init__(self, dim, vocab_size, std=0.02):
        self.param("w1", (dim, dim), std=std)
        self.param("b1", (dim,), "zeros")
        self.param("w2", (dim, vocab_size), std=std)
        self.param("b2", (vocab_size,), "zeros")

    def __call__(self, h):
        return T.linear(T.gelu(T.linear(h, self.w1, self.b1)), self.w2, self.b2)


class MimDecoder(Module):
    """Narrow Transformer decoder over the image sequence: [CLS], visible states, mask tokens."""

    def __init__(self, dim, dec_dim, depth, heads, num_patches, patch_dim, ratio=4, std=0.02):
        self.num_patches = num_patches
        self.param("proj_w", (dim, dec_dim), std=std)
        self.param("proj_b", (dec_dim,), "zeros")
        self.param("mask_token", (dec_dim,), std=std)
        self.param("pos", (num_patches + 1, dec_dim), std=std)
        out_std = std / math.sqrt(2 * max(depth, 1))
        self.blocks = [Block(dec_dim, heads, ratio=ratio, std=std, out_std=out_std) for _ in range(depth)]
        self.ln = LayerNorm(dec_dim)
        self.param("head_w", (dec_dim, patch_dim), std=std)
        self.param("head_b", (patch_dim,), "zeros")
        self.last_input = None

    def assemble(self, image_states, keep, mask):
        """Place projected visible states at their slots and mask tokens elsewhere, plus positions."""
        b, kp1, _ = image_states.shape
        m = mask.shape[1]
        proj = T.linear(image_states, self.proj_w, self.proj_b)
        dd = proj.shape[2]
        tokens = T.concat([proj, T.expand(self.mask_token, (b, m, dd))], axis=1)
        src = np.zeros((b, self.num_patches + 1), dtype=np.int64)
        rows = np.arange(b)[:, None]
        src[rows, keep + 1] = np.arange(1, kp1)[None]
        src[rows, mask + 1] = np.arange(kp1, kp1 + m)[None]
        return T.gather_rows(tokens, src) + self.pos

    def __call__(self, image_states, keep, mask):
        x = self.assemble(image_states, keep, mask)
        self.last_input = x.data
        b, l, _ = x.shape
        tags = np.zeros(l, dtype=np.int8)
        valid = np.ones((b, l), dtype=bool)
        for blk in self.blocks:
            x, _ = blk(x, tags, valid)
        return T.linear(self.ln(x), self.head_w, self.head_b)


def patch_targets(patches, mask, normalize=False):
    tgt = patches[np.arange(patches.shape[0])[:, None], mask]
    if normalize:
        mu = tgt.mean(axis=-1, keepdims=True)
        var = tgt.var(axis=-1, keepdims=True)
        tgt = (tgt - mu) / np.sqrt(var + 1e-6)
    return tgt


def mlm_loss(logits, targets):
    """Mean cross-entropy over masked positions only (``logits`` holds just those rows)."""
    if logits.shape[0] == 0:
        raise ObjectiveError("MLM loss needs at least one masked token")
    return T.cross_entropy(logits, targets)


def mim_loss(pred, target):
    """Pixel MSE averaged over the masked patches' pixels."""
    if pred.shape != np.shape(target):
        raise ObjectiveError(f"reconstruction {pred.shape} does not match targets {np.shape(target)}")
    return T.mse(pred, T.Tensor(target, dtype=pred.dtype))


def itc_loss(img_feats, txt_feats, temperature):
    """Symmetric InfoNCE over in-batch pairs from cosine similarities scaled by 1/temperature.

    ``temperature`` is a float or a scalar Tensor.
    """
    b = img_feats.shape[0]
    if b < 2:
        raise ObjectiveError("contrastive loss needs a batch of at least 2")
    sim = T.matmul(T.l2_normalize(img_feats), T.transpose(T.l2_normalize(txt_feats)))
    if isinstance(temperature, T.Tensor):
        logits = sim * T.exp(T.neg(T.log(temperature)))
    else:
        logits = sim * (1.0 / temperature)
    return similarity_loss(logits)


def similarity_loss(logits):
    labels = np.arange(logits.shape[0])
    return (T.cross_entropy(logits, labels) + T.cross_entropy(T.transpose(logits), labels)) * 0.5


def itm_loss(logits, labels):
    """Binary cross-entropy on one matching logit per pair."""
    if logits.shape[0] < 2:
        raise ObjectiveError("matching loss needs a batch of at least 2")
    z = T.reshape(logits, (-1, 1))
    two = T.concat([T.Tensor(np.zeros_like(z.data)), z], axis=1)
    return T.cross_entropy(two, np.asarray(labels, dtype=np.int64))


@dataclass
class StepLosses:
    total: T.Tensor
    parts: dict             # name -> float
    stats: list             # RouterStats from every encoder pass

    def record(self):
        return {k: float(v) for k, v in self.parts.items()} | {"total": float(self.total.data)}


def _pass_aux(stats):
    # soft layers averaged within one encoder pass
    return None if not stats else sum((s.aux_tensor for s in stats[1:]), stats[0].aux_tensor) * (1.0 / len(stats))


def compute_losses(model, raw, plan, tasks=frozenset({"mlm", "mim"}), simultaneous=False,
                   norm_pix=False, rng=None):
    """Sum of the requested objectives plus the load-balancing term.

    MSM runs two encoder passes: (masked image, full text) for MIM and
    (full image, masked text) for MLM. ``simultaneous`` instead runs one pass
    with both modalities masked. ITC adds two unimodal passes, ITM one fused
    pass over positives and in-batch negatives.
    """
    terms, parts, all_stats, pass_aux = [], {}, [], []

    def note(stats):
        all_stats.extend(stats)
        a = _pass_aux(stats)
        if a is not None:
            pass_aux.append(a)

    if simultaneous and {"mlm", "mim"} & tasks:
        hidden, batch, stats = model.encode(raw.patches, plan.masked_ids(raw.ids), raw.text_valid, plan.img_keep)
        note(stats)
        if "mim" in tasks:
            pred = model.reconstruct(hidden, batch, plan)
            l_mim = mim_loss(pred, patch_targets(raw.patches, plan.img_mask, norm_pix))
            terms.append(l_mim)
            parts["mim_loss"] = float(l_mim.data)
        if "mlm" in tasks:
            l_mlm = mlm_loss(model.mlm_logits(hidden, batch, plan), plan.txt_targets)
            terms.append(l_mlm)
            parts["mlm_loss"] = float(l_mlm.data)
    else:
        if "mim" in tasks:
            hidden, batch, stats = model.encode(raw.patches, raw.ids, raw.text_valid, plan.img_keep)
            note(stats)
            pred = model.reconstruct(hidden, batch, plan)
            l_mim = mim_loss(pred, patch_targets(raw.patches, plan.img_mask, norm_pix))
            terms.append(l_mim)
            parts["mim_loss"] = float(l_mim.data)
        if "mlm" in tasks:
            hidden, batch, stats = model.encode(raw.patches, plan.masked_ids(raw.ids), raw.text_valid)
            note(stats)
            l_mlm = mlm_loss(model.mlm_logits(hidden, batch, plan), plan.txt_targets)
            terms.append(l_mlm)
            parts["mlm_loss"] = float(l_mlm.data)
    if "itc" in tasks:
        fi, ft, stats = model.itc_features(raw.patches, raw.ids, raw.text_valid)
        note(stats)
        l_itc = itc_loss(fi, ft, T.exp(model.log_temp))
        terms.append(l_itc)
        parts["itc_loss"] = float(l_itc.data)
    if "itm" in tasks:
        b = len(raw)
        shift = 1 if rng is None or b < 3 else int(rng.integers(1, b))
        neg = (np.arange(b) + shift) % b
        patches = np.concatenate([raw.patches, raw.patches[neg]])
        ids = np.concatenate([raw.ids, raw.ids])
        valid = np.concatenate([raw.text_valid, raw.text_valid])
        logits, stats = model.itm_logits(patches, ids, valid)
        note(stats)
        l_itm = itm_loss(logits, np.concatenate([np.ones(b), np.zeros(b)]))
        terms.append(l_itm)
        parts["itm_loss"] = float(l_itm.data)
    if not terms:
        raise ObjectiveError(f"no objective selected from {sorted(tasks)}")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    if pass_aux:
        aux = pass_aux[0]
        for a in pass_aux[1:]:
            aux = aux + a
        aux = aux * (1.0 / len(pass_aux))
        total = total + aux
        parts["aux_loss"] = float(aux.data)
    else:
        parts["aux_loss"] = 0.0
    return StepLosses(total, parts, all_stats)


def msm_step(model, raw, plan, **kw):
    """L = L_mlm + L_mim (+ load balancing); the caller runs backward on ``.total``."""
    return compute_losses(model, raw, plan, frozenset({"mlm", "mim"}), **kw)
