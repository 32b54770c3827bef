"""The full network: embeddings, shared encoder, MLM head, MIM decoder, ITC/ITM heads."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .data import VOCAB
from .embedding import Embeddings, TokenBatch, concat
from .nn import Module
from .objectives import MimDecoder, MlmHead
from .transformer import Encoder


class EveModel(Module):
    def __init__(self, cfg):
        self.cfg = cfg
        std = cfg.init_std
        d = cfg.dim
        self.emb = Embeddings(cfg.patch_dim, d, len(VOCAB), cfg.num_patches, cfg.max_text_len, std)
        self.encoder = Encoder(d, cfg.heads, cfg.layer_specs() if cfg.depth else [], cfg.ffn_ratio, std,
                               cfg.modality_routing, cfg.dropout)
        self.mlm_head = MlmHead(d, len(VOCAB), std)
        self.decoder = MimDecoder(d, cfg.dec_dim, cfg.dec_depth, cfg.dec_heads, cfg.num_patches,
                                  cfg.patch_dim, cfg.ffn_ratio, std)
        self.param("itc_img_w", (d, d), std=std)
        self.param("itc_txt_w", (d, d), std=std)
        self.param("log_temp", (), "const", std=math.log(cfg.itc_temperature))
        self.param("itm_w", (d, 1), std=std)
        self.param("itm_b", (1,), "zeros")

    @classmethod
    def build(cls, cfg, seed=None):
        m = cls(cfg)
        m.init_parameters(cfg.seed if seed is None else seed)
        return m

    @property
    def alpha(self):
        return self.cfg.aux_alpha

    # -- encoder passes --------------------------------------------------
    def encode(self, patches, ids, text_valid, keep=None):
        """Fused pass over (kept) image patches and text ids. Returns (hidden, batch, stats)."""
        img = self.emb.embed_image(patches, keep)
        txt = self.emb.embed_text(ids)
        batch = concat(img, txt, text_valid)
        hidden, stats = self.encoder(batch, self.alpha)
        return hidden, batch, stats

    def encode_image(self, patches):
        batch = TokenBatch.image_only(self.emb.embed_image(patches))
        return self.encoder(batch, self.alpha)

    def encode_text(self, ids, text_valid):
        batch = TokenBatch.text_only(self.emb.embed_text(ids), text_valid)
        return self.encoder(batch, self.alpha)

    @staticmethod
    def _rows(hidden, flat_index):
        b, l, d = hidden.shape
        return T.take(T.reshape(hidden, (b * l, d)), flat_index)

    def text_positions(self, batch, rows, pos):
        return rows * batch.length + batch.n_image + 1 + pos

    def mlm_logits(self, hidden, batch, plan):
        h = self._rows(hidden, self.text_positions(batch, plan.txt_rows, plan.txt_pos))
        return self.mlm_head(h)

    def reconstruct(self, hidden, batch, plan):
        """Decoder output for the masked patches only, (B, M, P*P*3)."""
        n_img = batch.n_image
        img_states = T.take(hidden, np.arange(n_img), axis=1)
        out = self.decoder(img_states, plan.img_keep, plan.img_mask)
        return T.gather_rows(out, plan.img_mask + 1)

    # -- contrastive / matching heads --------------------------------------
    def itc_features(self, patches, ids, text_valid):
        hi, si = self.encode_image(patches)
        ht, st = self.encode_text(ids, text_valid)
        fi = T.linear(T.take(hi, 0, axis=1), self.itc_img_w)
        ft = T.linear(T.take(ht, 0, axis=1), self.itc_txt_w)
        return fi, ft, si + st

    def itm_logits(self, patches, ids, text_valid):
        hidden, batch, stats = self.encode(patches, ids, text_valid)
        cls = T.take(hidden, batch.text_cls_index, axis=1)
        return T.reshape(T.linear(cls, self.itm_w, self.itm_b), (-1,)), stats

    def temperature(self):
        return float(np.exp(self.log_temp.data))
