"""``eve`` command line.

Exit codes: 0 success, 1 check/acceptance failure or aborted run, 2 usage error.
Reports go to stdout as JSON; ``--json`` / ``--csv`` also write them to files.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from . import bench as bench_mod
from . import checkpoint as ckpt
from . import config as config_mod
from . import data
from . import gradcheck as gc
from . import probes
from . import sweep as sweep_mod
from . import train as train_mod
from .model import EveModel

log = logging.getLogger("eve")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# -- shared helpers -------------------------------------------------------

def _overrides(args):
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    for flag, key in (("layers", "layers"), ("seed", "seed"), ("steps", "steps"),
                      ("batch_size", "batch_size"), ("tasks", "tasks")):
        v = getattr(args, flag, None)
        if v is not None:
            out[key] = v
    return out


def _config(args):
    ov = _overrides(args)
    path = getattr(args, "config", None)
    try:
        return config_mod.load(path, ov)
    except config_mod.ConfigError:
        # a short --steps run keeps a warmup of 10% unless warmup_steps was set explicitly
        if "steps" not in ov or "warmup_steps" in ov:
            raise
        ov["warmup_steps"] = int(ov["steps"]) // 10
        return config_mod.load(path, ov)


def _emit(report, args, rows=None):
    text = json.dumps(report, indent=2, sort_keys=True, default=_jsonable)
    print(text)
    if getattr(args, "json", None):
        with open(args.json, "w") as fh:
            fh.write(text + "\n")
    if getattr(args, "csv", None) and rows is not None:
        with open(args.csv, "w", newline="") as fh:
            fh.write(sweep_mod.to_csv(rows))


def _jsonable(o):
    if hasattr(o, "tolist"):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _corpus(args, cfg, split, default_count):
    if getattr(args, "corpus", None):
        pairs, max_len = data.read_corpus(args.corpus)
        if pairs[0].image.shape[0] != cfg.image_size:
            raise UsageError(f"corpus images are {pairs[0].image.shape[0]}px but the config expects "
                             f"{cfg.image_size}px")
        return pairs
    count = getattr(args, "count", None) or default_count
    # cropping can move objects across cells, so it only trains on relation-free captions
    return data.generate_corpus(count, cfg.image_size, args.data_seed, cfg.patch_size, split=split,
                                grid=cfg.grid, relation_free=cfg.augment_crop)


def _load_model(path):
    ck = ckpt.load(path)
    cfg = ck.config
    model = EveModel(cfg)
    ckpt.restore(ck, model)
    return model, cfg, ck


# -- commands -------------------------------------------------------------

def cmd_data_gen(args):
    cfg = _config(args)
    pairs = data.generate_corpus(args.count or cfg.corpus_size, cfg.image_size, args.data_seed,
                                 cfg.patch_size, split=args.split, grid=cfg.grid,
                                 relation_free=args.relation_free)
    data.write_corpus(args.out, pairs, cfg.max_text_len)
    _emit({"path": args.out, "count": len(pairs), "image_size": cfg.image_size, "split": args.split,
           "seed": args.data_seed, "grammar_version": data.GRAMMAR_VERSION}, args)
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    pairs = _corpus(args, cfg, "train", cfg.corpus_size)
    os.makedirs(args.out, exist_ok=True)
    config_mod.save(cfg, os.path.join(args.out, "config.cfg"))
    model = None
    if args.init:
        model, _, _ = _load_model(args.init)
        if model.cfg.digest() != cfg.digest():
            raise UsageError("--init checkpoint has a different architecture than the config")
        model.cfg = cfg
    try:
        res = train_mod.pretrain(cfg, pairs, cfg.seed, model=model, resume=args.resume,
                                 metrics_path=os.path.join(args.out, "metrics.jsonl"),
                                 router_path=os.path.join(args.out, "router.jsonl"),
                                 out_dir=args.out, console=True)
    except train_mod.TrainingAborted as e:
        dump = os.path.join(args.out, "abort.json")
        with open(dump, "w") as fh:
            json.dump(e.diagnostics, fh, indent=2, default=_jsonable)
        _emit({"status": "aborted", "reason": str(e), "diagnostics": dump}, args)
        return EXIT_FAIL
    first, last = res.history[0] if res.history else {}, res.history[-1] if res.history else {}
    _emit({"status": "ok", "steps": res.step, "initial_total": first.get("total"),
           "final": last, "checkpoint": os.path.join(args.out, "final.evek"),
           "metrics": os.path.join(args.out, "metrics.jsonl")}, args)
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _config(args)
    rep = gc.gradcheck(cfg, args.tolerance, args.seed if args.seed is not None else 1)
    _emit(rep.as_dict(), args, [g.as_dict() for g in rep.groups + rep.ops])
    return EXIT_OK if rep.passed else EXIT_FAIL


def cmd_router_stats(args):
    model, cfg, _ = _load_model(args.checkpoint)
    pairs = _corpus(args, cfg, args.split, 256)
    try:
        layers = probes.router_stats(model, pairs)
    except probes.ProbeError as e:
        raise UsageError(str(e))
    _emit({"schema_version": 1, "checkpoint": args.checkpoint, "pairs": len(pairs), "alpha": cfg.aux_alpha,
           "layers": layers}, args, layers)
    return EXIT_OK


def cmd_probe(args):
    model, cfg, _ = _load_model(args.checkpoint)
    if args.mode == "grounding":
        held = _corpus(args, cfg, "probe", 500)
        train_pairs = data.generate_corpus(cfg.corpus_size, cfg.image_size, args.data_seed, cfg.patch_size,
                                           grid=cfg.grid)
        rep = probes.grounding_probe(model, held, train_pairs)
    else:
        held = _corpus(args, cfg, "probe", 256)
        if args.finetune_steps:
            ft_pairs = data.generate_corpus(cfg.corpus_size, cfg.image_size, args.data_seed, cfg.patch_size,
                                            grid=cfg.grid)
            train_mod.finetune_retrieval(model, cfg, ft_pairs, steps=args.finetune_steps)
        try:
            rep = probes.retrieval_probe(model, held, args.shortlist)
        except probes.ProbeError as e:
            raise UsageError(f"{e}; pass --finetune-steps N to fine-tune first")
    _emit({"schema_version": 1, "mode": args.mode, **rep}, args)
    return EXIT_OK


def cmd_bench(args):
    cfg = _config(args)
    rep = bench_mod.run_bench(cfg, args.task_sets, steps=args.duration, warmup=args.warmup)
    _emit(rep, args, rep["rows"])
    return EXIT_OK


def cmd_sweep(args):
    cfg = _config(args)
    if not args.grid:
        raise UsageError("give at least one --grid key=v1;v2 axis")
    rep = sweep_mod.run_sweep(cfg, args.grid, steps=args.steps, corpus_size=args.count)
    _emit(rep, args, rep["rows"])
    return EXIT_OK


# -- parser ---------------------------------------------------------------

def _common(p, with_config=True):
    if with_config:
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int)
    p.add_argument("--json", help="also write the report to this file")
    p.add_argument("--csv", help="also write tabular rows to this CSV file")
    p.add_argument("--data-seed", type=int, default=0, help="seed of the generated corpus")


def build_parser():
    ap = argparse.ArgumentParser(prog="eve", description="Desk-scale unified vision-language pre-training.")
    ap.add_argument("--version", action="version", version=f"eve {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    d = sub.add_parser("data", help="corpus utilities")
    dsub = d.add_subparsers(dest="data_command", required=True)
    g = dsub.add_parser("gen", help="generate a shape-world corpus file")
    _common(g)
    g.add_argument("--count", type=int)
    g.add_argument("--split", choices=sorted(data.SPLITS), default="train")
    g.add_argument("--relation-free", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_data_gen)

    t = sub.add_parser("train", help="pre-train (or fine-tune with --init)")
    _common(t)
    t.add_argument("--layers", "--ffn", dest="layers", help="FFN layout, e.g. 1-10:hard,11-12:soft or all:shared")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--tasks", help="e.g. mlm+mim or itc+itm")
    t.add_argument("--corpus", help="corpus file from 'eve data gen' (default: generate)")
    t.add_argument("--count", type=int)
    t.add_argument("--out", default="run", help="output directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--init", help="checkpoint whose weights initialise a fresh run")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _common(c)
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("router-stats", help="routing balance of a checkpoint")
    _common(r, with_config=False)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--corpus")
    r.add_argument("--count", type=int)
    r.add_argument("--split", choices=sorted(data.SPLITS), default="val")
    r.set_defaults(func=cmd_router_stats)

    pr = sub.add_parser("probe", help="grounding or retrieval probe")
    _common(pr, with_config=False)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--mode", choices=("grounding", "retrieval"), required=True)
    pr.add_argument("--corpus")
    pr.add_argument("--count", type=int)
    pr.add_argument("--shortlist", type=int, default=8)
    pr.add_argument("--finetune-steps", type=int, default=0,
                    help="retrieval: fine-tune with itc+itm for this many steps first")
    pr.set_defaults(func=cmd_probe)

    b = sub.add_parser("bench", help="throughput per objective set at equal batch size")
    _common(b)
    b.add_argument("--task-sets", default=",".join(bench_mod.DEFAULT_TASK_SETS))
    b.add_argument("--duration", type=int, default=100, help="timed steps per task set")
    b.add_argument("--warmup", type=int, default=5)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", help="cartesian ablation grid")
    _common(s)
    s.add_argument("--grid", action="append", metavar="KEY=V1;V2", help="one axis; repeat for more")
    s.add_argument("--steps", type=int)
    s.add_argument("--count", type=int, help="corpus size")
    s.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, config_mod.ConfigError, ckpt.CheckpointError, FileNotFoundError) as e:
        print(f"eve: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
