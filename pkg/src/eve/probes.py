"""Evaluation probes: color grounding, image-text retrieval and router balance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import COLORS, VOCAB, make_batch, patchify
from .objectives import MaskPlan
from .train import merge_stats

COLOR_IDS = VOCAB.color_ids
SHAPE_IDS = {VOCAB[s]: s for s in ("circle", "square", "triangle", "cross")}


class ProbeError(ValueError):
    pass


# -- grounding ------------------------------------------------------------

@dataclass
class GroundingItem:
    index: int       # pair index
    pos: int         # caption position of the masked color word
    target: int      # color id
    excluded: tuple  # colors the rest of the caption rules out


def grounding_items(pairs):
    """One item per caption: its first color word."""
    items = []
    color_set = set(COLOR_IDS.tolist())
    for i, q in enumerate(pairs):
        ids = list(q.ids)
        pos = next((j for j, t in enumerate(ids) if t in color_set), None)
        if pos is None:
            continue
        shape = ids[pos + 1]
        # (shape, color) pairs are unique within a scene, so other mentions of this shape exclude colors
        others = tuple(sorted({ids[j] for j, t in enumerate(ids)
                               if t in color_set and j != pos and ids[j + 1] == shape}))
        items.append(GroundingItem(i, pos, ids[pos], others))
    if not items:
        raise ProbeError("no caption contains a color word")
    return items


def unigram_prior(train_pairs):
    """Color-word frequencies over the training captions."""
    counts = np.zeros(len(COLOR_IDS))
    lookup = {c: i for i, c in enumerate(COLOR_IDS.tolist())}
    for q in train_pairs:
        for t in q.ids:
            if t in lookup:
                counts[lookup[t]] += 1
    return counts / max(counts.sum(), 1)


def unigram_accuracy(prior, items):
    """Top-1 accuracy of always predicting the most frequent training color."""
    guess = COLOR_IDS[int(np.argmax(prior))]
    return float(np.mean([it.target == guess for it in items]))


def caption_prior_accuracy(items):
    """Best expected accuracy attainable from the caption alone.

    Scene colors are uniform over the (shape, color) pairs not used by the
    other objects, all of which the caption mentions, so the text-only
    posterior is uniform over the colors not excluded.
    """
    n = len(COLOR_IDS)
    return float(np.mean([1.0 / (n - len(it.excluded)) for it in items]))


def _color_predictions(model, pairs, items, images, batch_size):
    cfg = model.cfg
    preds = np.empty(len(items), dtype=np.int64)
    with T.no_grad():
        for s in range(0, len(items), batch_size):
            chunk = items[s:s + batch_size]
            sub = [pairs[it.index] for it in chunk]
            raw = make_batch(sub, cfg.max_text_len, cfg.patch_size)
            if images is not None:
                imgs = np.stack([images[it.index] for it in chunk]).astype(np.float32)
                raw.images, raw.patches = imgs, patchify(imgs, cfg.patch_size)
            rows = np.arange(len(chunk))
            pos = np.array([it.pos for it in chunk])
            plan = MaskPlan(None, None, rows, pos, raw.ids[rows, pos], 0.0, 0.0)
            hidden, batch, _ = model.encode(raw.patches, plan.masked_ids(raw.ids), raw.text_valid)
            logits = model.mlm_logits(hidden, batch, plan).data[:, COLOR_IDS]
            preds[s:s + len(chunk)] = COLOR_IDS[np.argmax(logits, axis=1)]
    return preds


def grounding_probe(model, pairs, train_pairs=None, batch_size=64, shuffle_seed=0):
    """Masked-color-word top-1 accuracy with the true, a blank, and a shuffled image."""
    items = grounding_items(pairs)
    targets = np.array([it.target for it in items])
    model.eval()
    n = len(pairs)
    blank = [np.zeros_like(pairs[0].image)] * n
    # derangement: every caption is paired with some other sample's image
    g = np.random.default_rng(shuffle_seed)
    shift = int(g.integers(1, n)) if n > 1 else 0
    shuffled = [pairs[(i + shift) % n].image for i in range(n)]
    report = {"items": len(items), "chance": 1.0 / len(COLOR_IDS)}
    for name, imgs in (("true", None), ("blank", blank), ("shuffled", shuffled)):
        preds = _color_predictions(model, pairs, items, imgs, batch_size)
        report[name] = float(np.mean(preds == targets))
    report["caption_prior"] = caption_prior_accuracy(items)
    if train_pairs is not None:
        prior = unigram_prior(train_pairs)
        report["unigram_prior"] = unigram_accuracy(prior, items)
        report["unigram_distribution"] = dict(zip(COLORS, prior.round(4).tolist()))
    report["margin_vs_blank"] = report["true"] - report["blank"]
    report["margin_vs_shuffled"] = report["true"] - report["shuffled"]
    return report


# -- retrieval ------------------------------------------------------------

def recall_at_1(sim, rerank=None, shortlist=8):
    """Recall@1 in both directions for an (n, n) score matrix whose diagonal holds the matches.

    ``rerank(img_idx, txt_idx) -> scores`` rescores the ``shortlist`` best
    candidates per query; without it the shortlist order is used.
    """
    n = sim.shape[0]
    k = min(shortlist, n)
    out = {}
    for direction, s in (("i2t", sim), ("t2i", sim.T)):
        cand = np.argsort(-s, axis=1, kind="stable")[:, :k]
        if rerank is not None:
            q = np.repeat(np.arange(n), k)
            c = cand.reshape(-1)
            scores = rerank(q, c) if direction == "i2t" else rerank(c, q)
            best = cand[np.arange(n), np.argmax(np.asarray(scores).reshape(n, k), axis=1)]
        else:
            best = cand[:, 0]
        out[direction] = float(np.mean(best == np.arange(n)))
    return out


def retrieval_probe(model, pairs, shortlist=8, batch_size=64):
    """ITC shortlist then ITM rerank over a held-out gallery; recall@1 both ways."""
    trained = set(getattr(model, "trained_tasks", ()))
    if not {"itc", "itm"} <= trained:
        raise ProbeError("retrieval needs a model fine-tuned with the itc and itm objectives "
                         f"(trained: {sorted(trained) or 'unknown'})")
    cfg = model.cfg
    model.eval()
    raw = make_batch(pairs, cfg.max_text_len, cfg.patch_size)
    n = len(pairs)
    fi, ft = [], []
    with T.no_grad():
        for s in range(0, n, batch_size):
            a, b, _ = model.itc_features(raw.patches[s:s + batch_size], raw.ids[s:s + batch_size],
                                         raw.text_valid[s:s + batch_size])
            fi.append(a.data)
            ft.append(b.data)
    fi, ft = np.concatenate(fi), np.concatenate(ft)
    fi /= np.linalg.norm(fi, axis=1, keepdims=True) + 1e-12
    ft /= np.linalg.norm(ft, axis=1, keepdims=True) + 1e-12
    sim = fi @ ft.T

    def rerank(img_idx, txt_idx):
        scores = []
        with T.no_grad():
            for s in range(0, len(img_idx), batch_size):
                ii, tt = img_idx[s:s + batch_size], txt_idx[s:s + batch_size]
                logits, _ = model.itm_logits(raw.patches[ii], raw.ids[tt], raw.text_valid[tt])
                scores.append(logits.data)
        return np.concatenate(scores)

    report = {"gallery": n, "shortlist": shortlist, "random_baseline": 1.0 / n}
    report["itc_only"] = recall_at_1(sim, None, shortlist)
    report.update(recall_at_1(sim, rerank, shortlist))
    return report


# -- router balance -------------------------------------------------------

def jensen_shannon(p, q):
    """JS divergence (natural log) between two distributions; 0 when either is empty."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.sum() == 0 or q.sum() == 0:
        return 0.0
    p, q = p / p.sum(), q / q.sum()
    m = 0.5 * (p + q)

    def kl(a, b):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / b[nz])))

    return 0.5 * kl(p, m) + 0.5 * kl(q, m)


def summarize_stats(stats):
    """Per-layer f, p, aux plus modality usage histograms, CV balance score and JSD."""
    layers = []
    for s in stats:
        f = np.asarray(s.f)
        row = {"layer": s.layer, "f": f.tolist(), "p": np.asarray(s.p).tolist(), "aux": s.aux,
               "max_f": float(f.max()), "cv": float(f.std() / f.mean()) if f.mean() > 0 else 0.0,
               "tokens": s.tokens}
        if s.image_counts is not None:
            img, txt = np.asarray(s.image_counts), np.asarray(s.text_counts)
            row["image_usage"] = (img / max(img.sum(), 1)).tolist()
            row["text_usage"] = (txt / max(txt.sum(), 1)).tolist()
            row["jsd"] = jensen_shannon(img, txt)
        layers.append(row)
    return layers


def router_stats(model, pairs, batch_size=64):
    """Routing statistics of every soft layer over a corpus slice (fused, unmasked passes)."""
    if not any(sp.mode == "soft" for sp in model.cfg.layer_specs()):
        raise ProbeError("model has no soft-routed layers; router statistics need at least one")
    cfg = model.cfg
    model.eval()
    collected = []
    with T.no_grad():
        for s in range(0, len(pairs), batch_size):
            raw = make_batch(pairs[s:s + batch_size], cfg.max_text_len, cfg.patch_size)
            _, _, st = model.encode(raw.patches, raw.ids, raw.text_valid)
            collected.extend(st)
    return summarize_stats(merge_stats(collected, model.alpha))
