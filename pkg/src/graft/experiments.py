"""Desk-scale experiments on synthetic SBM graphs, shared by the acceptance suite and scripts.

Each function returns plain dictionaries (JSON-ready) next to any
parameters it produces, so callers can chain the stages:

    ground -> stage 1 (matching) -> stage 2 (classification) -> zero-shot
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import instructions as ins
from . import numerics as nx
from .evaluation import evaluate
from .graph_store import Graph, generate_sbm
from .grounding import GroundingConfig, init_grounding_params, run_grounding
from .lm_pretrain import load_base_lm
from .model import precompute_structure
from .tuning import TuneConfig, fresh_projector, tune_stage1, tune_stage2

ENCODER_GROUPS = ("lm", "graph_encoder", "text_encoder")


@dataclass
class SbmSpec:
    blocks: int = 2
    per_block: int = 100
    p_in: float = 0.3
    p_out: float = 0.02
    seed: int = 0

    def build(self) -> Graph:
        return generate_sbm(self.blocks, self.per_block, self.p_in, self.p_out, rng=np.random.default_rng(self.seed))


@dataclass
class DeskConfig:
    """Sizes and seeds for the full desk-scale pipeline."""

    matching_graph: SbmSpec = field(default_factory=lambda: SbmSpec(p_in=0.04, p_out=0.005, seed=101))
    task_graph: SbmSpec = field(default_factory=lambda: SbmSpec(seed=202))
    transfer_graph: SbmSpec = field(default_factory=lambda: SbmSpec(seed=303))
    grounding: GroundingConfig = field(default_factory=GroundingConfig)
    matching_samples: int = 2000
    matching: ins.CorpusConfig = field(default_factory=lambda: ins.CorpusConfig(hops=1, fanout=4))
    classification_per_node: int = 2
    classification: ins.CorpusConfig = field(default_factory=lambda: ins.CorpusConfig(hops=2, fanout=3))
    link_pairs: int = 400
    link: ins.CorpusConfig = field(default_factory=lambda: ins.CorpusConfig(hops=1, fanout=3))
    stage1: TuneConfig = field(default_factory=lambda: TuneConfig(stage=1, batch_size=16, lr=5e-3, seed=1))
    stage2: TuneConfig = field(default_factory=lambda: TuneConfig(stage=2, batch_size=16, lr=5e-3, seed=2))
    transfer_samples: int = 200
    seed: int = 0


def grounded_stack(g: Graph, cfg: DeskConfig, base=None) -> tuple[nx.ParamStore, object, dict]:
    """Base LM + encoders grounded on ``g`` + a fresh projector."""
    params, vocab = base if base is not None else load_base_lm()
    params = params.copy()
    enc = init_grounding_params(vocab, cfg.grounding, np.random.default_rng(cfg.grounding.seed))
    start = time.time()
    enc, report = run_grounding(g, vocab, enc, cfg.grounding)
    report = {k: v for k, v in report.items() if k != "loss_curve"} | {"seconds": time.time() - start}
    params.merge(enc)
    return fresh_projector(params, cfg.stage1.seed), vocab, report


def matching_corpus(g: Graph, cfg: DeskConfig) -> list:
    rng = np.random.default_rng([cfg.seed, 1])
    centers = rng.choice(g.node_count, cfg.matching_samples, replace=cfg.matching_samples > g.node_count)
    return ins.build_matching_corpus(g, centers, cfg.matching, rng)


def classification_corpus(g: Graph, cfg: DeskConfig, style: str = "std", seed_offset: int = 2) -> list:
    rng = np.random.default_rng([cfg.seed, seed_offset])
    centers = np.tile(np.arange(g.node_count), cfg.classification_per_node)
    return ins.build_classification_corpus(g, centers, cfg.classification, style, rng)


def link_corpus(g: Graph, cfg: DeskConfig, pairs: int | None = None, seed_offset: int = 3) -> list:
    rng = np.random.default_rng([cfg.seed, seed_offset])
    return ins.build_link_corpus(g, cfg.link_pairs if pairs is None else pairs, cfg.link, rng)


def stage1_experiment(params: nx.ParamStore, vocab, g: Graph, cfg: DeskConfig, log=None) -> tuple[nx.ParamStore, dict]:
    """Projector-only graph-matching tuning with the freezing contract checked by hash."""
    corpus = matching_corpus(g, cfg)
    before = {grp: params.group_hash(grp) for grp in ENCODER_GROUPS}
    start = time.time()
    params, report = tune_stage1(cfg.stage1, params, vocab, g, corpus, log=log)
    after = {grp: params.group_hash(grp) for grp in ENCODER_GROUPS}
    report = _summary(report) | {
        "seconds": time.time() - start,
        "max_subgraph_nodes": max(len(s.subgraphs[0]) for s in corpus),
        "hashes_unchanged": before == after,
    }
    return params, report


def stage2_experiment(params: nx.ParamStore, vocab, g: Graph, corpus, cfg: DeskConfig, log=None) -> tuple[nx.ParamStore, dict]:
    start = time.time()
    params, report = tune_stage2(cfg.stage2, params, vocab, g, corpus, log=log)
    return params, _summary(report) | {"seconds": time.time() - start}


def transfer_eval(params: nx.ParamStore, vocab, g: Graph, cfg: DeskConfig, heads: int = 4) -> dict:
    """Zero-shot classification on a graph never seen during tuning."""
    rng = np.random.default_rng([cfg.seed, 4])
    centers = rng.choice(g.node_count, cfg.transfer_samples, replace=False)
    corpus = ins.build_classification_corpus(g, centers, cfg.classification, "std", rng)
    start = time.time()
    rep = evaluate(params, vocab, g, corpus, heads=heads, structures=precompute_structure(params, vocab, g, corpus))
    return rep.to_json() | {"seconds": time.time() - start}


def link_auc(params: nx.ParamStore, vocab, g: Graph, corpus, heads: int = 4) -> float:
    rep = evaluate(params, vocab, g, corpus, heads=heads, structures=precompute_structure(params, vocab, g, corpus))
    return rep.auc


def link_mixing(params: nx.ParamStore, vocab, g: Graph, cfg: DeskConfig, seed: int, test_pairs: int = 200) -> dict:
    """Stage 2 with and without link-prediction samples; link AUC of each on the same unseen pairs.

    Both runs start from the same projector in ``params`` and see the same
    classification samples.
    """
    cls = classification_corpus(g, cfg, seed_offset=10 + seed)
    links = link_corpus(g, cfg, seed_offset=20 + seed)
    test = link_corpus(g, cfg, pairs=test_pairs, seed_offset=30 + seed)
    rng = np.random.default_rng([cfg.seed, 40 + seed])
    corpora = {
        "with_link": ins.mix_corpora([(cls, 1.0), (links, 1.0)], "with_link", rng),
        "without_link": ins.mix_corpora([(cls, 1.0)], "std", rng),
    }
    out = {}
    for name, corpus in corpora.items():
        tune = TuneConfig(**{**vars(cfg.stage2), "seed": seed, "max_eval": 0})
        tuned, _ = tune_stage2(tune, params.copy(), vocab, g, corpus)
        out[name] = link_auc(tuned, vocab, g, test, heads=tune.heads)
    return out


def _summary(report: dict) -> dict:
    out = {k: v for k, v in report.items() if k not in ("loss_curve", "frozen_hashes")}
    curve = report["loss_curve"]
    out["first_loss"] = curve[0] if curve else None
    out["last_loss"] = float(np.mean(curve[-20:])) if curve else None
    return out
