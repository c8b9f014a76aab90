"""Build the shipped base language model (src/graft/assets/base_lm).

Pretrains on soft-text instruction samples from a stream of freshly drawn
SBM graphs (sparse and dense alternate), then reports greedy graph-matching and
classification accuracy on a graph drawn with a different seed.

    python scripts/pretrain_lm.py [--steps N] [--out DIR]
    python scripts/pretrain_lm.py --init DIR --steps N --copy-steps 0 --lr 5e-4 --mixture '{"pair": 0.85, "classification_std": 0.15}'

The second form continues from an existing checkpoint and appends a phase
record to pretrain.json instead of replacing it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from graft import instructions as ins
from graft import numerics as nx
from graft.evaluation import evaluate
from graft.graph_store import generate_sbm
from graft.lm_pretrain import PretrainConfig, base_vocab, load_base_lm, pretrain_lm
from graft.tokenizer import save_vocab

SPARSE = dict(blocks=2, per_block=100, p_in=0.04, p_out=0.005)
DENSE = dict(blocks=2, per_block=100, p_in=0.3, p_out=0.02)
DEFAULT_OUT = os.path.join(os.path.dirname(__file__), "..", "src", "graft", "assets", "base_lm")


def make_graph(rng: np.random.Generator):
    return generate_sbm(**(SPARSE if rng.random() < 0.5 else DENSE), rng=rng)


def soft_text_check(params, vocab, heads: int, n: int = 60) -> dict:
    rng = np.random.default_rng(4242)
    g = generate_sbm(2, 100, 0.04, 0.005, rng=rng)
    match = ins.build_matching_corpus(g, rng.choice(g.node_count, n, replace=False), ins.CorpusConfig(hops=1, fanout=4), rng)
    cls = ins.build_classification_corpus(g, rng.choice(g.node_count, n, replace=False), ins.CorpusConfig(hops=2, fanout=3), "std", rng)
    out = {}
    for name, corpus in (("graph_matching", match), ("node_classification", cls)):
        out[name] = evaluate(params, vocab, g, corpus, heads=heads, slot_mode="text").accuracy
    return out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=PretrainConfig.steps)
    ap.add_argument("--out", default=DEFAULT_OUT)
    ap.add_argument("--init", default=None, help="base-LM directory to continue from")
    ap.add_argument("--copy-steps", type=int, default=PretrainConfig.copy_steps)
    ap.add_argument("--lr", type=float, default=PretrainConfig.lr)
    ap.add_argument("--warmup", type=int, default=PretrainConfig.warmup_steps)
    ap.add_argument("--mixture", type=json.loads, default=None, help='task weights as JSON, e.g. \'{"pair": 0.85, "classification_std": 0.15}\'')
    ap.add_argument("--seed", type=int, default=PretrainConfig.seed)
    args = ap.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    cfg = PretrainConfig(steps=args.steps, copy_steps=args.copy_steps, lr=args.lr, warmup_steps=args.warmup, seed=args.seed)
    if args.mixture is not None:
        cfg.mixture = args.mixture
    init, phases = None, []
    if args.init is not None:
        init, init_vocab = load_base_lm(args.init)
        previous = os.path.join(args.init, "pretrain.json")
        if os.path.exists(previous):
            with open(previous, encoding="utf-8") as fh:
                old = json.load(fh)
            phases = old.get("phases", [old])
    vocab = base_vocab()
    if init is not None and init_vocab.id_to_token != vocab.id_to_token:
        raise SystemExit("vocabulary of --init differs from the base vocabulary")
    save_vocab(vocab, os.path.join(args.out, "vocab.txt"))
    ckpt = os.path.join(args.out, "lm.ckpt")
    history = []

    def on_checkpoint(params, step):
        nx.save_checkpoint(params, ckpt)
        if step % (4 * cfg.log_every) == 0 or step == cfg.steps:
            acc = soft_text_check(params, vocab, cfg.heads)
            history.append({"step": step, **acc})
            print(f"step {step} soft-text accuracy {acc}", flush=True)

    start = time.time()
    params, report = pretrain_lm(make_graph, vocab, cfg, log=lambda m: print(m, flush=True), on_checkpoint=on_checkpoint, init=init)
    nx.save_checkpoint(params, ckpt)
    phase = {
        "init": None if args.init is None else "previous phase",
        "config": {k: v for k, v in vars(cfg).items() if not k.startswith("_") and k not in ("matching", "classification")},
        "graphs": {"sparse": SPARSE, "dense": DENSE},
        "final_loss": float(np.mean(report["loss_curve"][-100:])),
        "soft_text_accuracy": soft_text_check(params, vocab, cfg.heads),
        "history": history,
        "seconds": time.time() - start,
    }
    tmp = os.path.join(args.out, "pretrain.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump({"phases": phases + [phase]}, fh, indent=2)
    os.replace(tmp, os.path.join(args.out, "pretrain.json"))
    print(json.dumps(phase["soft_text_accuracy"]))
    return 0


if __name__ == "__main__":
    sys.exit(main())
