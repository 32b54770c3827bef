"""Acceptance gate: one test per criterion, each records a PASS/FAIL summary line.

The long training runs (criteria 7, 8, 9, 11) are marked slow; the full gate
takes roughly half an hour on one CPU core.
"""
import json
import time

import numpy as np
import pytest

from conftest import record
from eve import checkpoint as ckpt
from eve import cli, config, data, moe, probes, sweep, train
from eve import objectives as obj
from eve import tensor as T
from eve.bench import NOTE, run_bench
from eve.data import CLS, PAD
from eve.embedding import IMAGE, TEXT
from eve.model import EveModel
from eve.rng import stream
from eve.transformer import ExpertFFN

PAIRED_STEPS = 300       # criteria 8 and 9: shortened paired runs, see the decisions ledger
GROUND_STEPS = 2000
CORPUS = 2000
HELD_OUT = 256


def experts(n, dim=8, seed=0):
    ex = [ExpertFFN(dim, 2 * dim, std=0.3) for _ in range(n)]
    for i, e in enumerate(ex):
        e.init_parameters(seed + i)
    return ex


def softmax_rows(z):
    e = np.exp(z - z.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


@pytest.fixture(scope="module")
def tiny_corpus():
    cfg = config.tiny()
    train_pairs = data.generate_corpus(CORPUS, cfg.image_size, 0, cfg.patch_size)
    held = data.generate_corpus(HELD_OUT, cfg.image_size, 0, cfg.patch_size, split="probe")
    return cfg, train_pairs, held


@pytest.fixture(scope="module")
def grounded(tiny_corpus):
    """Tiny model pre-trained for 2k steps, probed for grounding before anything else mutates it."""
    cfg, train_pairs, held = tiny_corpus
    t0 = time.time()
    res = train.pretrain(cfg.replace(steps=GROUND_STEPS), train_pairs, 0)
    rep = probes.grounding_probe(res.model, held, train_pairs)
    return res, rep, time.time() - t0


# 1 ---------------------------------------------------------------------------

def test_criterion_01_gradcheck(capsys):
    t0 = time.time()
    code = cli.main(["gradcheck", "--tolerance", "1e-4"])
    elapsed = time.time() - t0
    rep = json.loads(capsys.readouterr().out)
    groups = {g["group"] for g in rep["groups"]}
    ok = (code == 0 and rep["passed"] and rep["worst"] <= 1e-4 and elapsed < 300
          and rep["min_margin"] > 1e-3 and any(g.endswith(".router") for g in groups))
    record(1, ok, f"worst rel err {rep['worst']:.2e} over {rep['param_groups']} groups + {rep['op_checks']} ops, "
                  f"top-k margin {rep['min_margin']:.2e}, {elapsed:.0f}s")
    assert ok


# 2 ---------------------------------------------------------------------------

def brute_aux(gates, k, alpha):
    t, n = gates.shape
    counts = [0] * n
    for row in gates:
        chosen = sorted(range(n), key=lambda i: (-row[i], i))[:k]
        for i in chosen:
            counts[i] += 1
    total = 0.0
    for i in range(n):
        f_i = counts[i] / (t * k)
        p_i = sum(gates[r, i] for r in range(t)) / t
        total += f_i * p_i
    return alpha * n * total


def test_criterion_02_aux_oracle():
    g = np.random.default_rng(2)
    worst = 0.0
    for n in (2, 4, 8, 32):
        for _ in range(50):
            t = int(g.integers(1, 64))
            k = int(g.integers(1, n + 1))
            alpha = float(g.choice([0.001, 0.01, 1.0]))
            gates = softmax_rows(g.standard_normal((t, n)) * 3)
            with T.default_dtype(np.float64):
                s = moe.load_stats(T.Tensor(gates), moe.topk_indices(gates, k), n, alpha=alpha)
            worst = max(worst, abs(s.aux - brute_aux(gates, k, alpha)))
    uniform = []
    with T.default_dtype(np.float64):
        for n in (2, 4, 8, 32):
            router = moe.SoftRouter(8, experts(n), min(2, n))
            router.init_parameters(0)
            router.w.data[:] = 0.0
            x = T.Tensor(g.standard_normal((20, 8)))
            _, stats = router(x, np.array([IMAGE, TEXT] * 10), np.ones(20, dtype=bool), 0.001)
            uniform.append(stats.aux)
    ok = worst <= 1e-6 and all(abs(u - 0.001) <= 1e-15 for u in uniform)
    record(2, ok, f"max |aux - brute force| {worst:.1e} over 200 configs; uniform aux {uniform}")
    assert ok


# 3 ---------------------------------------------------------------------------

def test_criterion_03_dispatch_bit_exact():
    g = np.random.default_rng(3)
    ex = experts(8)
    mismatches = 0
    for b in range(100):
        k = (1, 2, 4)[b % 3]
        t = int(g.integers(1, 48))
        x = T.Tensor(g.standard_normal((t, 8)).astype(np.float32))
        gates = T.Tensor(softmax_rows(g.standard_normal((t, 8))).astype(np.float32))
        y, _ = moe.dispatch_combine(x, gates, k, ex)
        mismatches += not np.array_equal(y.data, moe.naive_moe(x, gates, k, ex))
    record(3, mismatches == 0, f"{mismatches}/100 batches differ from the per-token loop")
    assert mismatches == 0


# 4 ---------------------------------------------------------------------------

def test_criterion_04_routing_invariants():
    g = np.random.default_rng(4)
    failures = []
    for trial in range(200):
        n = int(g.choice([2, 4, 8]))
        k = int(g.integers(1, n + 1))
        t = int(g.integers(1, 40))
        x = T.Tensor(g.standard_normal((t, 8)))
        tags = g.integers(0, 2, t)
        gates = moe.gate(x, tags, T.Tensor(g.standard_normal((8, n))), T.Tensor(g.standard_normal(8)),
                         T.Tensor(g.standard_normal(8)))
        if not np.allclose(gates.data.sum(1), 1.0, rtol=1e-6):
            failures.append(("normalization", trial))
        _, rec = moe.dispatch_combine(x, gates, k, experts(n))
        per_token = np.bincount(np.concatenate(rec.tokens), minlength=t)
        if rec.assignments != t * k or not np.all(per_token == k):
            failures.append(("preservation", trial))
    tied = np.array([[0.25] * 4, [0.1, 0.4, 0.4, 0.1], [0.3, 0.3, 0.2, 0.2]])
    if moe.topk_indices(tied, 2).tolist() != [[0, 1], [1, 2], [0, 1]]:
        failures.append(("tie-break", None))
    if not all(np.array_equal(moe.topk_indices(tied, 3), moe.topk_indices(tied.copy(), 3)) for _ in range(5)):
        failures.append(("tie determinism", None))
    ex = experts(2)
    x = T.Tensor(g.standard_normal((10, 8)))
    tags = g.integers(0, 2, 10)
    y = moe.hard_route(x, tags, ex).data
    with T.no_grad():
        for i, m in enumerate(tags):
            if not np.array_equal(y[i], ex[m](T.Tensor(x.data[i:i + 1])).data[0]):
                failures.append(("hard isolation", i))
    record(4, not failures, f"200 random routings + ties + hard isolation; failures {failures[:3]}")
    assert not failures


# 5 ---------------------------------------------------------------------------

def test_criterion_05_loss_locality():
    cfg = config.tiny()
    model = EveModel.build(cfg, 0)
    pairs = data.generate_corpus(8, cfg.image_size, 5, cfg.patch_size)
    raw = data.make_batch(pairs, cfg.max_text_len, cfg.patch_size)
    plan = obj.sample_masks(raw.ids, raw.text_valid, cfg.num_patches, 0.75, 0.5, stream(0, "mask", 1))
    checks = {}
    with T.no_grad():
        hidden, batch, _ = model.encode(raw.patches, plan.masked_ids(raw.ids), raw.text_valid)
        logits = model.mlm_logits(hidden, batch, plan)
        base = float(obj.mlm_loss(logits, plan.txt_targets).data)
        ids2 = raw.ids.copy()
        unmasked = raw.text_valid.copy()
        unmasked[plan.txt_rows, plan.txt_pos] = False
        ids2[unmasked] = (ids2[unmasked] % 20) + 3
        plan2 = obj.MaskPlan(plan.img_mask, plan.img_keep, plan.txt_rows, plan.txt_pos,
                             ids2[plan.txt_rows, plan.txt_pos], 0.75, 0.5)
        checks["mlm"] = float(obj.mlm_loss(logits, plan2.txt_targets).data) == base

        h, b, _ = model.encode(raw.patches, raw.ids, raw.text_valid, plan.img_keep)
        pred = model.reconstruct(h, b, plan)
        dec_in = model.decoder.last_input.copy()
        mim = float(obj.mim_loss(pred, obj.patch_targets(raw.patches, plan.img_mask)).data)
        rows = np.arange(len(pairs))[:, None]
        visible_changed = raw.patches.copy()
        visible_changed[rows, plan.img_keep] += 1.0
        checks["mim"] = float(obj.mim_loss(pred, obj.patch_targets(visible_changed, plan.img_mask)).data) == mim

        poisoned = raw.patches.copy()
        poisoned[rows, plan.img_mask] = 1e6
        h2, b2, _ = model.encode(poisoned, raw.ids, raw.text_valid, plan.img_keep)
        model.reconstruct(h2, b2, plan)
        checks["flow"] = np.array_equal(h.data, h2.data) and np.array_equal(dec_in, model.decoder.last_input)
    ok = all(checks.values())
    record(5, ok, " ".join(f"{k}={'exact' if v else 'CHANGED'}" for k, v in checks.items()))
    assert ok


# 6 ---------------------------------------------------------------------------

def test_criterion_06_masking_ratios():
    g = np.random.default_rng(6)
    n_patches, bad, plans = 64, 0, 0
    for _ in range(100):
        lengths = g.integers(6, 13, 100)
        ids = np.full((100, 12), PAD, dtype=np.int64)
        for i, n in enumerate(lengths):
            ids[i, :n] = g.integers(3, len(data.VOCAB), n)
        valid = ids != PAD
        plan = obj.sample_masks(ids, valid, n_patches, 0.75, 0.5, g)
        plans += 100
        bad += int(plan.img_mask.shape[1] != 48)
        counts = np.bincount(plan.txt_rows, minlength=100)
        bad += int(np.sum(counts != lengths // 2))
        masked = ids[plan.txt_rows, plan.txt_pos]
        bad += int(np.sum((masked == PAD) | (masked == CLS)))
        bad += int(not np.all(valid[plan.txt_rows, plan.txt_pos]))
    record(6, bad == 0, f"{plans} plans, {bad} violations (image 48/64, text floor(L/2))")
    assert bad == 0


# 7 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_07_grounding(grounded):
    res, rep, elapsed = grounded
    m_blank = rep["true"] - rep["blank"]
    m_shuf = rep["true"] - rep["shuffled"]
    ok = m_blank >= 0.15 and m_shuf >= 0.15 and rep["true"] > rep["unigram_prior"] and elapsed < 900
    record(7, ok, f"true {rep['true']:.3f} blank {rep['blank']:.3f} shuffled {rep['shuffled']:.3f} "
                  f"unigram {rep['unigram_prior']:.3f} caption-prior {rep['caption_prior']:.3f}, {elapsed:.0f}s")
    assert ok


# 8 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_08_load_balancing(tiny_corpus):
    cfg, train_pairs, held = tiny_corpus
    cfg = cfg.replace(num_experts=8, steps=PAIRED_STEPS, warmup_steps=PAIRED_STEPS // 10)
    max_f = {}
    for alpha in (0.001, 0.0):
        res = train.pretrain(cfg.replace(aux_alpha=alpha), train_pairs, 0)
        max_f[alpha] = probes.router_stats(res.model, held)[0]["max_f"]
    ok = max_f[0.001] < max_f[0.0] and max_f[0.001] <= 3 / 8
    record(8, ok, f"final max f: alpha=0.001 {max_f[0.001]:.3f}, alpha=0 {max_f[0.0]:.3f} (bound 0.375)")
    assert ok


# 9 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_09_modality_routing(tiny_corpus):
    cfg, train_pairs, held = tiny_corpus
    cfg = cfg.replace(steps=PAIRED_STEPS, warmup_steps=PAIRED_STEPS // 10)
    loss, jsd = {True: [], False: []}, {True: [], False: []}
    for seed in range(3):
        for mr in (True, False):
            res = train.pretrain(cfg.replace(modality_routing=mr), train_pairs, seed)
            loss[mr].append(res.history[-1]["total"])
            jsd[mr].append(probes.router_stats(res.model, held)[0]["jsd"])
    ml = {k: float(np.mean(v)) for k, v in loss.items()}
    mj = {k: float(np.mean(v)) for k, v in jsd.items()}
    ok = ml[True] <= ml[False] and mj[True] > mj[False]
    record(9, ok, f"mean final loss with b_m {ml[True]:.4f} vs without {ml[False]:.4f}; "
                  f"mean JSD {mj[True]:.4f} vs {mj[False]:.4f}")
    assert ok


# 10 --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_10_efficiency_direction():
    rep = run_bench(config.tiny(), "mlm+mim,mlm+mim+itc+itm", steps=100, warmup=5, memory=False)
    msm, full = rep["rows"]
    ratio = msm["steps_per_sec"] / full["steps_per_sec"]
    ok = ratio > 1.0 and msm["batch_size"] == full["batch_size"] and "3.5x" in rep["note"] and NOTE
    record(10, ok, f"steps/sec ratio MLM+MIM vs all four = {ratio:.2f} at batch {msm['batch_size']}")
    assert ok


# 11 --------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_11_retrieval(grounded, tiny_corpus):
    cfg, train_pairs, held = tiny_corpus
    res = grounded[0]
    model = train.finetune_retrieval(res.model, cfg, train_pairs, steps=500).model
    rep = probes.retrieval_probe(model, held)
    floor = 3.0 / HELD_OUT
    ok = rep["gallery"] == HELD_OUT and rep["i2t"] > floor and rep["t2i"] > floor
    record(11, ok, f"R@1 i2t {rep['i2t']:.3f} t2i {rep['t2i']:.3f} on {rep['gallery']} held-out pairs "
                   f"(floor {floor:.4f})")
    assert ok


# 12 --------------------------------------------------------------------------

def test_criterion_12_determinism_and_persistence(tmp_path, tiny_corpus):
    cfg, train_pairs, _ = tiny_corpus
    cfg = cfg.replace(steps=20, warmup_steps=2, checkpoint_every=10)
    pairs = train_pairs[:256]
    a = train.pretrain(cfg, pairs, 3, metrics_path=tmp_path / "a.jsonl")
    b = train.pretrain(cfg, pairs, 3, metrics_path=tmp_path / "b.jsonl")
    same = a.history == b.history and (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    part = train.pretrain(cfg, pairs, 3, stop_at=10, out_dir=tmp_path / "part")
    rest = train.pretrain(cfg, pairs, 3, resume=str(tmp_path / "part" / "step000010.evek"))
    resumed = part.history + rest.history == a.history
    raw = (tmp_path / "part" / "step000010.evek").read_bytes()
    roundtrip = ckpt.to_bytes(ckpt.from_bytes(raw)) == raw
    ok = same and resumed and roundtrip
    record(12, ok, f"identical traces {same}, resume matches {resumed}, byte round-trip {roundtrip}")
    assert ok


# 13 --------------------------------------------------------------------------

SMALL = dict(dim=16, heads=2, image_size=16, patch_size=4, dec_dim=8, dec_heads=2, batch_size=8)

AXIS_VALUES = {
    "mask_ratio_image": "0.5;0.75", "mask_ratio_text": "0.25;0.5", "simultaneous_masking": "false;true",
    "num_experts": "2;4", "top_k": "1;2", "tasks": "mlm;mlm+mim+itc+itm", "layers": "all:hard;1-3:hard,4:soft",
    "dec_depth": "1;2", "dec_dim": "8;16", "modality_routing": "true;false", "aux_alpha": "0;0.001",
    "norm_pix_target": "false;true",
}


def test_criterion_13_ablation_harness(tmp_path, capsys):
    base = config.tiny().replace(**SMALL)
    keys = {k for ks in sweep.AXES.values() for k in ks}
    missing = keys - set(AXIS_VALUES)
    executed = 0
    for key in sorted(keys & set(AXIS_VALUES)):
        rep = sweep.run_sweep(base, [f"{key}={AXIS_VALUES[key]}"], steps=2, corpus_size=16)
        executed += len(rep["rows"]) == 2
    csv_path = tmp_path / "grid.csv"
    flags = [x for k, v in SMALL.items() for x in ("--set", f"{k}={v}")]
    code = cli.main(["sweep", *flags, "--grid", "num_experts=2;4", "--grid", "top_k=1;2", "--steps", "2",
                     "--count", "16", "--csv", str(csv_path)])
    grid = json.loads(capsys.readouterr().out)
    csv_rows = len(csv_path.read_text().strip().splitlines()) - 1
    ok = not missing and executed == len(keys) and code == 0 and len(grid["rows"]) == 4 and csv_rows == 4
    record(13, ok, f"{executed}/{len(keys)} axes executed, 2x2 grid rows {len(grid['rows'])} (csv {csv_rows})")
    assert ok
