import numpy as np
import pytest

from eve import config, data, probes
from eve.model import EveModel


@pytest.fixture(scope="module")
def untrained():
    cfg = config.tiny().replace(dim=32, heads=2, image_size=32, patch_size=8, dec_dim=16, dec_heads=2)
    return EveModel.build(cfg, 0)


@pytest.fixture(scope="module")
def held(untrained):
    cfg = untrained.cfg
    return data.generate_corpus(300, cfg.image_size, 0, cfg.patch_size, split="probe")


def test_untrained_grounding_is_chance(untrained, held):
    train_pairs = data.generate_corpus(300, untrained.cfg.image_size, 0, untrained.cfg.patch_size)
    rep = probes.grounding_probe(untrained, held, train_pairs)
    for cond in ("true", "blank", "shuffled"):
        assert abs(rep[cond] - 0.2) <= 0.1
        assert 0.0 <= rep[cond] <= 1.0
    assert rep["blank"] <= rep["caption_prior"] + 0.1


def test_caption_prior_oracle():
    items = [probes.GroundingItem(0, 1, 3, ()), probes.GroundingItem(1, 1, 3, (4,))]
    assert probes.caption_prior_accuracy(items) == pytest.approx((1 / 5 + 1 / 4) / 2)


def test_grounding_items_mask_the_color_word(held):
    items = probes.grounding_items(held)
    colors = set(data.VOCAB.color_ids.tolist())
    for it in items:
        assert held[it.index].ids[it.pos] in colors
        assert it.target not in it.excluded


def test_unigram_prior_matches_counts():
    pairs = [data.Pair(None, data.tokenize("a red circle and a red square")),
             data.Pair(None, data.tokenize("a blue cross"))]
    prior = probes.unigram_prior(pairs)
    assert prior[list(data.COLORS).index("red")] == pytest.approx(2 / 3)


def test_perfect_matcher_recall_is_one():
    n = 16
    sim = np.eye(n) + 0.01 * np.random.default_rng(0).random((n, n))
    assert probes.recall_at_1(sim) == {"i2t": 1.0, "t2i": 1.0}

    def rerank(i, t):
        return (i == t).astype(float)

    # a shortlist that misses nothing plus an exact reranker also gives 1.0
    noisy = np.random.default_rng(1).random((n, n))
    assert probes.recall_at_1(noisy, rerank, shortlist=n) == {"i2t": 1.0, "t2i": 1.0}


def test_retrieval_requires_fine_tuned_heads(untrained, held):
    with pytest.raises(probes.ProbeError):
        probes.retrieval_probe(untrained, held[:8])


def test_untrained_router_stats(untrained, held):
    layers = probes.router_stats(untrained, held[:64])
    assert [l["layer"] for l in layers] == [4]
    l = layers[0]
    assert l["aux"] == pytest.approx(untrained.cfg.aux_alpha, rel=0.05)
    assert max(l["f"]) < 0.45
    assert sum(l["image_usage"]) == pytest.approx(1.0)
    assert l["jsd"] >= 0.0


def test_no_soft_layers_is_an_error():
    cfg = config.tiny().replace(layers="all:hard", dim=16, heads=2, image_size=16, patch_size=8,
                                dec_dim=8, dec_heads=2)
    m = EveModel.build(cfg, 0)
    with pytest.raises(probes.ProbeError):
        probes.router_stats(m, data.generate_corpus(4, 16, 0, 8))


def test_jensen_shannon():
    assert probes.jensen_shannon([1, 0], [1, 0]) == 0.0
    assert probes.jensen_shannon([1, 0], [0, 1]) == pytest.approx(np.log(2))
