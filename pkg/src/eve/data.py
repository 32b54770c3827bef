"""Shape world: grounded synthetic image-caption pairs.

A scene is a G x G grid with 1-3 occupied cells, each holding a colored
shape on a black background. Captions come from a small closed grammar and
are always true of their scene; ``entails`` is the decision procedure and
``cell_color`` reads the color back out of the rendered pixels.
"""
from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_mod
from .config import ConfigError

log = logging.getLogger(__name__)

GRAMMAR_VERSION = 1

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "white": (1.0, 1.0, 1.0),
}
SHAPES = ("circle", "square", "triangle", "cross")
RELATIONS = {
    # words -> predicate on ((r1, c1), (r2, c2))
    ("left", "of"): lambda a, b: a[1] < b[1],
    ("right", "of"): lambda a, b: a[1] > b[1],
    ("above",): lambda a, b: a[0] < b[0],
    ("below",): lambda a, b: a[0] > b[0],
}
FUNCTION_WORDS = ("a", "there", "is", "in", "the", "top", "bottom", "left", "right", "of",
                  "above", "below", "and")

PAD, CLS, MASK = 0, 1, 2
SPECIALS = ("[PAD]", "[CLS]", "[MASK]")


class VocabularyError(KeyError):
    def __str__(self):
        return str(self.args[0])


class Vocabulary:
    """Bidirectional word <-> id map; ids 0-2 are reserved for [PAD], [CLS], [MASK]."""

    def __init__(self, words):
        self.itos = list(SPECIALS) + list(words)
        if len(set(self.itos)) != len(self.itos):
            raise ValueError("duplicate vocabulary entries")
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __getitem__(self, word):
        try:
            return self.stoi[word]
        except KeyError:
            raise VocabularyError(f"word {word!r} is not in the vocabulary") from None

    def tokenize(self, text):
        return [self[w] for w in text.split()]

    def detokenize(self, ids):
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.itos):
                raise VocabularyError(f"id {i} is outside the vocabulary of {len(self.itos)}")
            out.append(self.itos[i])
        return " ".join(out)

    @property
    def color_ids(self):
        return np.array([self.stoi[c] for c in COLORS])


VOCAB = Vocabulary(list(COLORS) + list(SHAPES) + list(FUNCTION_WORDS))


def tokenize(text):
    return VOCAB.tokenize(text)


def detokenize(ids):
    return VOCAB.detokenize(ids)


# -- scenes -------------------------------------------------------------

@dataclass(frozen=True)
class Obj:
    shape: str
    color: str
    cell: tuple


@dataclass
class Scene:
    grid: int
    objects: list = field(default_factory=list)

    def find(self, color, shape):
        for o in self.objects:
            if o.color == color and o.shape == shape:
                return o
        return None


def random_scene(rng, grid=2):
    cells = [(r, c) for r in range(grid) for c in range(grid)]
    count = int(rng.integers(1, min(3, len(cells)) + 1))
    picked = rng.choice(len(cells), size=count, replace=False)
    objs, used = [], set()
    for idx in picked:
        while True:
            pair = (SHAPES[rng.integers(len(SHAPES))], list(COLORS)[rng.integers(len(COLORS))])
            if pair not in used:
                break
        used.add(pair)
        objs.append(Obj(pair[0], pair[1], cells[idx]))
    return Scene(grid, objs)


def _shape_mask(shape, size, cell_px, cell):
    r0, c0 = cell[0] * cell_px, cell[1] * cell_px
    ys = np.arange(size)[:, None] + 0.5
    xs = np.arange(size)[None, :] + 0.5
    cy, cx = r0 + cell_px / 2.0, c0 + cell_px / 2.0
    rad = 0.35 * cell_px
    dy, dx = ys - cy, xs - cx
    if shape == "circle":
        return dx * dx + dy * dy <= rad * rad
    if shape == "square":
        return (np.abs(dx) <= 0.8 * rad) & (np.abs(dy) <= 0.8 * rad)
    if shape == "triangle":
        depth = dy + rad  # 0 at the apex, 2*rad at the base
        return (depth >= 0) & (depth <= 2 * rad) & (np.abs(dx) <= 0.45 * depth)
    if shape == "cross":
        arm = rad / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= rad)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= rad))
    raise ValueError(f"unknown shape {shape!r}")


def render(scene, size):
    """Pure function of the scene: H x W x 3 float32 in [0, 1]."""
    if size % scene.grid:
        raise ConfigError(f"image size {size} not divisible by grid {scene.grid}")
    img = np.zeros((size, size, 3), dtype=np.float32)
    cell_px = size // scene.grid
    for o in scene.objects:
        img[_shape_mask(o.shape, size, cell_px, o.cell)] = COLORS[o.color]
    return img


def cell_color(image, cell, grid):
    """Nearest palette color of the lit pixels in ``cell``; None if the cell is empty."""
    cp = image.shape[0] // grid
    patch = image[cell[0] * cp:(cell[0] + 1) * cp, cell[1] * cp:(cell[1] + 1) * cp].reshape(-1, 3)
    lit = patch[patch.max(axis=1) > 0.5]
    if len(lit) == 0:
        return None
    mean = lit.mean(axis=0)
    names = list(COLORS)
    dists = [np.sum((mean - np.array(COLORS[n])) ** 2) for n in names]
    return names[int(np.argmin(dists))]


# -- grammar ------------------------------------------------------------

def _np(o):
    return ["a", o.color, o.shape]


def _relations_between(a, b):
    return [words for words, pred in RELATIONS.items() if pred(a.cell, b.cell)]


def describe(scene, rng, relation_free=False):
    """Sample a true caption for ``scene``."""
    objs = list(scene.objects)
    order = rng.permutation(len(objs))
    objs = [objs[i] for i in order]
    if relation_free or len(objs) == 1:
        if len(objs) == 1 and not relation_free and scene.grid == 2 and rng.random() < 0.5:
            r, c = objs[0].cell
            return ["there", "is"] + _np(objs[0]) + ["in", "the", ("top", "bottom")[r], ("left", "right")[c]]
        words = _np(objs[0])
        for o in objs[1:]:
            words += ["and"] + _np(o)
        return words
    rels = _relations_between(objs[0], objs[1])
    rel = rels[int(rng.integers(len(rels)))]
    words = _np(objs[0]) + ["is", *rel] + _np(objs[1])
    for o in objs[2:]:
        words += ["and"] + _np(o)
    return words


def _parse_np(words, i):
    if i + 3 > len(words) or words[i] != "a" or words[i + 1] not in COLORS or words[i + 2] not in SHAPES:
        raise ValueError
    return (words[i + 1], words[i + 2]), i + 3


def entails(scene, words):
    """Decision procedure: does ``scene`` make caption ``words`` true?"""
    if isinstance(words, str):
        words = words.split()
    words = list(words)
    try:
        position = None
        if words[:2] == ["there", "is"]:
            np0, i = _parse_np(words, 2)
            if words[i:i + 2] != ["in", "the"] or len(words) != i + 4:
                return False
            position = (words[i + 2], words[i + 3])
            mentions, relation = [np0], None
        else:
            np0, i = _parse_np(words, 0)
            mentions, relation = [np0], None
            if i < len(words) and words[i] == "is":
                for rw in RELATIONS:
                    if tuple(words[i + 1:i + 1 + len(rw)]) == rw:
                        relation = rw
                        break
                else:
                    return False
                np1, i = _parse_np(words, i + 1 + len(relation))
                mentions.append(np1)
            while i < len(words):
                if words[i] != "and":
                    return False
                npx, i = _parse_np(words, i + 1)
                mentions.append(npx)
    except (ValueError, IndexError):
        return False
    found = [scene.find(c, s) for c, s in mentions]
    if any(o is None for o in found):
        return False
    if relation is not None and not RELATIONS[relation](found[0].cell, found[1].cell):
        return False
    if position is not None:
        if scene.grid != 2:
            return False
        r, c = found[0].cell
        if position != (("top", "bottom")[r], ("left", "right")[c]):
            return False
    return True


def flip_scene(scene):
    g = scene.grid
    return Scene(g, [Obj(o.shape, o.color, (o.cell[0], g - 1 - o.cell[1])) for o in scene.objects])


_SWAP = {VOCAB["left"]: VOCAB["right"], VOCAB["right"]: VOCAB["left"]}


def flip_pair(image, ids):
    """Horizontal flip with the caption's left/right words swapped so it stays true."""
    return image[:, ::-1].copy(), [_SWAP.get(int(i), int(i)) for i in ids]


def random_resized_crop(image, rng, scale=(0.6, 1.0)):
    """Square crop covering ``scale`` of the area, nearest-neighbour resized back."""
    h = image.shape[0]
    side = max(1, int(round(h * np.sqrt(rng.uniform(*scale)))))
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, h - side + 1))
    src = (np.arange(h) * side / h).astype(int)
    return image[y0 + src][:, x0 + src].copy()


# -- corpus -------------------------------------------------------------

@dataclass
class Pair:
    image: np.ndarray
    ids: list
    scene: Scene | None = None

    @property
    def text(self):
        return detokenize(self.ids)


SPLITS = {"train": 0, "val": 1, "probe": 2}


def make_pair(index, image_size, seed, split="train", grid=2, relation_free=False):
    g = rng_mod.stream(seed, "corpus", SPLITS[split], index)
    scene = random_scene(g, grid)
    words = describe(scene, g, relation_free=relation_free)
    return Pair(render(scene, image_size), [VOCAB[w] for w in words], scene)


def generate_corpus(count, image_size, seed, patch_size=16, split="train", grid=2,
                    relation_free=False, workers=1):
    """Deterministic list of grounded pairs; each sample depends only on (seed, split, index)."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    if image_size % patch_size:
        raise ConfigError(f"image size {image_size} not divisible by patch size {patch_size}")
    if image_size % grid:
        raise ConfigError(f"image size {image_size} not divisible by grid {grid}")

    def one(i):
        return make_pair(i, image_size, seed, split, grid, relation_free)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(one, range(count)))
    return [one(i) for i in range(count)]


MAGIC = b"EVEC"
FORMAT_VERSION = 1


def write_corpus(path, pairs, max_len):
    h, w, c = pairs[0].image.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<6I", FORMAT_VERSION, len(pairs), h, w, c, max_len))
        for p in pairs:
            if p.image.shape != (h, w, c):
                raise ValueError("all images in a corpus must share one shape")
            fh.write(np.ascontiguousarray(p.image, dtype="<f4").tobytes())
            fh.write(struct.pack("<I", len(p.ids)))
            fh.write(np.asarray(p.ids, dtype="<u4").tobytes())


def read_corpus(path):
    """Returns (pairs, max_len)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a corpus file (bad magic)")
    version, count, h, w, c, max_len = struct.unpack_from("<6I", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: corpus version {version} unsupported")
    off = 28
    npx = h * w * c
    pairs = []
    for _ in range(count):
        img = np.frombuffer(buf, dtype="<f4", count=npx, offset=off).reshape(h, w, c).astype(np.float32)
        off += 4 * npx
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        ids = np.frombuffer(buf, dtype="<u4", count=n, offset=off).astype(int).tolist()
        off += 4 * n
        pairs.append(Pair(img, ids))
    return pairs, max_len


# -- batching -----------------------------------------------------------

def patchify(images, p):
    """(B, H, W, C) -> (B, H*W/p^2, p*p*C), patches in row-major order."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(patches, p, h, w, c=3):
    b = patches.shape[0]
    x = patches.reshape(b, h // p, w // p, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


@dataclass
class RawBatch:
    images: np.ndarray       # (B, H, W, 3)
    patches: np.ndarray      # (B, N, P*P*3)
    ids: np.ndarray          # (B, n) padded with [PAD]
    text_valid: np.ndarray   # (B, n) bool

    def __len__(self):
        return len(self.ids)


def make_batch(pairs, n, p):
    images = np.stack([q.image for q in pairs]).astype(np.float32)
    ids = np.full((len(pairs), n), PAD, dtype=np.int64)
    valid = np.zeros((len(pairs), n), dtype=bool)
    for i, q in enumerate(pairs):
        cap = list(q.ids)
        if len(cap) > n:
            log.info("truncating caption of length %d to %d", len(cap), n)
            cap = cap[:n]
        ids[i, :len(cap)] = cap
        valid[i, :len(cap)] = True
    return RawBatch(images, patchify(images, p), ids, valid)
