"""Image/text token embeddings and the concatenated multimodal sequence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import VocabularyError
from .nn import Module

IMAGE, TEXT = 0, 1


@dataclass
class TokenBatch:
    x: T.Tensor              # (B, L, D)
    tags: np.ndarray         # (L,) IMAGE / TEXT
    valid: np.ndarray        # (B, L) bool
    n_image: int             # length of the image segment (0 for text-only)

    @property
    def batch_size(self):
        return self.x.shape[0]

    @property
    def length(self):
        return self.x.shape[1]

    @property
    def text_cls_index(self):
        return self.n_image

    def token_tags(self):
        """Modality tag per flattened (B*L) token."""
        return np.tile(self.tags, self.batch_size)

    def replace_x(self, x):
        return TokenBatch(x, self.tags, self.valid, self.n_image)

    @classmethod
    def image_only(cls, img_emb):
        b, l, _ = img_emb.shape
        return cls(img_emb, np.full(l, IMAGE, dtype=np.int8), np.ones((b, l), dtype=bool), l)

    @classmethod
    def text_only(cls, txt_emb, text_valid):
        b, l, _ = txt_emb.shape
        return cls(txt_emb, np.full(l, TEXT, dtype=np.int8), _text_mask(text_valid), 0)


def _text_mask(text_valid):
    b = text_valid.shape[0]
    return np.concatenate([np.ones((b, 1), dtype=bool), text_valid.astype(bool)], axis=1)


def check_indices(idx, n):
    idx = np.asarray(idx)
    if idx.ndim == 1:
        idx = idx[None]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"patch index out of range [0, {n})")
    if idx.shape[1] > 1 and np.any(np.diff(idx, axis=1) <= 0):
        raise IndexError("patch indices must be sorted and unique")
    return idx


class Embeddings(Module):
    def __init__(self, patch_dim, dim, vocab_size, num_patches, max_text_len, std=0.02):
        self.dim, self.vocab_size = dim, vocab_size
        self.num_patches, self.max_text_len = num_patches, max_text_len
        self.param("patch_w", (patch_dim, dim), std=std)
        self.param("patch_b", (dim,), "zeros")
        self.param("word", (vocab_size, dim), std=std)
        self.param("img_cls", (dim,), std=std)
        self.param("txt_cls", (dim,), std=std)
        self.param("img_pos", (num_patches + 1, dim), std=std)
        self.param("txt_pos", (max_text_len + 1, dim), std=std)
        self.param("img_type", (dim,), std=std)
        self.param("txt_type", (dim,), std=std)

    def embed_image(self, patches, keep=None):
        """Project the kept patches, prepend [CLS], add positions at original slots and the type vector.

        ``patches`` is raw (B, N, P*P*3); patches outside ``keep`` are never read.
        """
        b, n, _ = patches.shape
        if n > self.num_patches:
            raise ValueError(f"{n} patches but positional table holds {self.num_patches}")
        keep = np.broadcast_to(np.arange(n), (b, n)) if keep is None else check_indices(keep, n)
        if keep.shape[0] == 1 and b > 1:
            keep = np.broadcast_to(keep, (b, keep.shape[1]))
        kept = patches[np.arange(b)[:, None], keep]
        proj = T.linear(T.Tensor(kept, dtype=self.patch_w.dtype), self.patch_w, self.patch_b)
        cls = T.expand(self.img_cls, (b, 1, self.dim))
        seq = T.concat([cls, proj], axis=1)
        slots = np.concatenate([np.zeros((b, 1), dtype=np.int64), keep + 1], axis=1)
        pos = T.reshape(T.take(self.img_pos, slots.reshape(-1)), (b, slots.shape[1], self.dim))
        return seq + pos + self.img_type

    def embed_text(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        b, n = ids.shape
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise VocabularyError(f"token id outside vocabulary of {self.vocab_size}")
        if n > self.max_text_len:
            raise ValueError(f"text length {n} exceeds max_text_len {self.max_text_len}")
        words = T.reshape(T.take(self.word, ids.reshape(-1)), (b, n, self.dim))
        cls = T.expand(self.txt_cls, (b, 1, self.dim))
        seq = T.concat([cls, words], axis=1)
        pos = T.take(self.txt_pos, np.arange(n + 1))
        return seq + pos + self.txt_type


def concat(img_emb, txt_emb, text_valid):
    """Image segment first, then text; both segments are required."""
    if img_emb.shape[1] == 0 or txt_emb.shape[1] == 0:
        raise ValueError("concat needs a non-empty image segment and a non-empty text segment")
    if img_emb.shape[0] != txt_emb.shape[0] or img_emb.shape[2] != txt_emb.shape[2]:
        raise T.ShapeError(f"concat: image {img_emb.shape} vs text {txt_emb.shape}")
    b, li, _ = img_emb.shape
    lt = txt_emb.shape[1]
    tags = np.concatenate([np.full(li, IMAGE, dtype=np.int8), np.full(lt, TEXT, dtype=np.int8)])
    valid = np.concatenate([np.ones((b, li), dtype=bool), _text_mask(text_valid)], axis=1)
    if valid.shape[1] != li + lt:
        raise T.ShapeError("text validity mask does not match the text segment")
    return TokenBatch(T.concat([img_emb, txt_emb], axis=1), tags, valid, li)
