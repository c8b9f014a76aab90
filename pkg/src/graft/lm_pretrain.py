"""Base language model: vocabulary and text-only pretraining.

Instruction tuning keeps the language model frozen, so the model must
already read and write the instruction language before any graph token is
seen.  It is pretrained here on templated text tasks in which each graph
slot holds the mean token embedding of that node's text (a "soft text"
slot), never a projected structural embedding.
"""

from __future__ import annotations

import math
import os
import re
import time
from dataclasses import dataclass, field

import numpy as np

from . import instructions as ins
from . import numerics as nx
from .graph_encoder import block_diagonal, normalized_adjacency
from .graph_store import Graph, block_name, block_word, noise_word
from .model import build_sequence
from .projector_lm import ASSISTANT_TAG, USER_TAG, LmConfig, MixedSequence, init_lm, instruction_loss, splice_graph_tokens
from .tokenizer import BOS_ID, EOS_ID, Vocab, build_vocab, encode, load_vocab

TEMPLATES = (
    ins.MATCHING_INPUT,
    ins.MATCHING_OUTPUT,
    ins.MATCHING_PAIR,
    ins.CLASSIFICATION_HEAD,
    ins.CLASSIFICATION_STD_TAIL,
    ins.CLASSIFICATION_COT_TAIL,
    ins.COT_OUTPUT,
    ins.LINK_INPUT,
    f"{USER_TAG} {ASSISTANT_TAG} yes no",
)

# text-only topic judgment; worded apart from the link template so that link answers are not pretrained
PAIR_INPUT = (
    "Abstract: {abstract_a}. Title: {title_a}. Question: does this paper belong to the subcategories "
    "of the following paper: Abstract: {abstract_b}. Title: {title_b}?"
)


def base_vocab(max_blocks: int = 4, vocab_per_block: int = 40, noise_vocab: int = 20, max_index: int = 256) -> Vocab:
    """Vocabulary covering every template and every synthetic word up to the given sizes.

    Graphs drawn with any seed inside these limits tokenize without UNK.
    """
    corpus = list(TEMPLATES)
    corpus.append(" ".join(str(i) for i in range(max_index + 1)))
    corpus.append(" ".join(block_name(b) for b in range(max_blocks)))
    corpus.append(" ".join(block_word(b, j) for b in range(max_blocks) for j in range(vocab_per_block)))
    corpus.append(" ".join(noise_word(j) for j in range(noise_vocab)))
    corpus.append(ins.cot_reasoning(Graph.from_edges(1, [], [("x",)]), 0))
    return build_vocab(corpus)


@dataclass
class PretrainConfig:
    steps: int = 6000
    batch_size: int = 16
    lr: float = 2e-3
    warmup_steps: int = 100
    final_lr_ratio: float = 0.05  # cosine decay to this fraction of lr
    seed: int = 0
    heads: int = 4
    dim: int = 64
    # three hops: fetch slot i at its index, carry it to the answer, match it in the listing
    layers: int = 3
    ff_mult: int = 4
    max_len: int = 512
    # copy-only warm-up: short "repeat the words" sequences that make copying circuits form early
    copy_steps: int = 2500
    copy_len: tuple = (12, 30)
    # copy segments start after up to this many filler words; the bound ramps up over the
    # second half of the copy phase so copying is learned at every position
    copy_offset_max: int = 320
    # task mixture: (task, style) -> weight; link prediction is deliberately absent,
    # "pair" is the text-only topic judgment (answers yes / no)
    mixture: dict = field(
        default_factory=lambda: {"graph_matching": 0.45, "classification_std": 0.2, "classification_cot": 0.2, "copy": 0.15}
    )
    matching: ins.CorpusConfig = field(default_factory=lambda: ins.CorpusConfig(hops=1, fanout=4))
    classification: ins.CorpusConfig = field(default_factory=lambda: ins.CorpusConfig(hops=2, fanout=3))
    # probability that a sample's slots are smoothed over its subgraph (A_norm^k, k in 1..2)
    smoothing: float = 0.5
    # a fresh graph is drawn every this many steps, so titles cannot be memorized
    graph_refresh: int = 10
    log_every: int = 250


def copy_sequence(vocab: Vocab, words, rng: np.random.Generator, length: tuple, offset_max: int = 0) -> MixedSequence:
    """``<bos> human : [filler] w1 .. wk gpt : w1 .. wk <eos>`` with the loss on the repeat."""
    k = int(rng.integers(length[0], length[1] + 1))
    body = [int(w) for w in rng.choice(words, k)]
    filler = [int(w) for w in rng.choice(words, int(rng.integers(0, offset_max + 1)))]
    head = [BOS_ID] + encode(vocab, USER_TAG) + filler
    tail = encode(vocab, ASSISTANT_TAG)
    ids = head + body + tail + body + [EOS_ID]
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(head) + k + len(tail) :] = True
    return MixedSequence(np.array(ids), np.full(len(ids), -1), None, mask)


def copy_offset_bound(step: int, cfg: PretrainConfig) -> int:
    """Filler bound at ``step``: 0 for the first half of the copy phase, then a linear ramp."""
    half = cfg.copy_steps // 2
    if step >= cfg.copy_steps:
        return cfg.copy_offset_max
    if step < half:
        return 0
    return int(cfg.copy_offset_max * (step - half + 1) / max(cfg.copy_steps - half, 1))


def content_word_ids(vocab: Vocab) -> np.ndarray:
    """Ids of the synthetic node-text words (block and noise words)."""
    return np.array([i for i, t in enumerate(vocab.id_to_token) if re.fullmatch(r"b\d+w\d+|nz\d+", t)])


@dataclass
class PairSample:
    input_text: str
    output_text: str
    subgraphs: tuple = ()


def pair_sample(g: Graph, rng: np.random.Generator) -> PairSample:
    """Two node texts; the answer is "yes" iff both nodes share a block (balanced)."""
    u = int(rng.integers(g.node_count))
    same = rng.random() < 0.5
    labels = np.array(g.node_labels)
    pool = np.flatnonzero((labels == labels[u]) == same)
    v = int(rng.choice(pool[pool != u]))
    text = PAIR_INPUT.format(
        abstract_a=g.text(u), title_a=ins.title_of(g, u), abstract_b=g.text(v), title_b=ins.title_of(g, v)
    )
    return PairSample(text, "yes" if same else "no")


def _draw_sample(g: Graph, kind: str, cfg: PretrainConfig, rng: np.random.Generator):
    c = int(rng.integers(g.node_count))
    if kind == "graph_matching":
        sub = ins._sample(g, c, cfg.matching, rng)
        return ins.render_graph_matching(g, sub, rng, resample=lambda: ins._sample(g, c, cfg.matching, rng))
    style = kind.split("_", 1)[1]
    return ins.render_node_classification(g, ins._sample(g, c, cfg.classification, rng), style)


def smoothing_matrix(subgraphs, power: int) -> np.ndarray:
    """Block-diagonal ``A_norm ** power`` over the sample's subgraphs (graph-encoder-like mixing)."""
    a = block_diagonal([normalized_adjacency(s.local_adjacency) for s in subgraphs])
    return np.linalg.matrix_power(a, power)


def pretrain_lr(step: int, cfg: PretrainConfig) -> float:
    """Linear warmup, then cosine decay to ``final_lr_ratio * lr`` over copy and main phases."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    total = cfg.copy_steps + cfg.steps
    frac = (step - cfg.warmup_steps) / max(total - cfg.warmup_steps, 1)
    return cfg.lr * (cfg.final_lr_ratio + (1 - cfg.final_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac)))


def pretrain_lm(
    make_graph, vocab: Vocab, cfg: PretrainConfig, log=None, on_checkpoint=None, init: nx.ParamStore | None = None
) -> tuple[nx.ParamStore, dict]:
    """Train an LM on soft-text instruction samples.

    ``make_graph(rng)`` returns a new graph; one is drawn every
    ``cfg.graph_refresh`` steps.  ``on_checkpoint(params, step)`` is called
    every ``log_every`` steps.  ``init`` continues from existing weights
    instead of a fresh initialization.
    """
    rng = np.random.default_rng(cfg.seed)
    graph_rng = np.random.default_rng([cfg.seed, 1])
    params = init_lm(LmConfig(len(vocab), cfg.dim, cfg.heads, cfg.layers, cfg.ff_mult, cfg.max_len), rng)
    if init is not None:
        params = init.copy()
    kinds = list(cfg.mixture)
    weights = np.array([cfg.mixture[k] for k in kinds], dtype=float)
    weights /= weights.sum()
    state = nx.AdamState()
    curve = []
    start = time.time()
    words = content_word_ids(vocab)
    g = None
    total = cfg.copy_steps + cfg.steps
    for step in range(total):
        main = step >= cfg.copy_steps
        if main and (step - cfg.copy_steps) % cfg.graph_refresh == 0:
            g = make_graph(graph_rng)
        batch = []
        for _ in range(cfg.batch_size):
            kind = kinds[int(rng.choice(len(kinds), p=weights))] if main else "copy"
            if kind == "copy":
                batch.append(copy_sequence(vocab, words, rng, cfg.copy_len, copy_offset_bound(step, cfg)))
                continue
            if kind == "pair":
                batch.append(splice_graph_tokens(vocab, pair_sample(g, rng), None))
                continue
            while True:
                try:
                    s = _draw_sample(g, kind, cfg, rng)
                    break
                except ins.InstructionError:
                    continue
            mix = None
            if rng.random() < cfg.smoothing:
                mix = smoothing_matrix(s.subgraphs, int(rng.integers(1, 3)))
            batch.append(build_sequence(params, vocab, g, s, slot_mode="text", mix=mix))
        loss = instruction_loss(params, batch, cfg.heads)
        params.zero_grad()
        nx.backward(loss)
        lr = pretrain_lr(step, cfg)
        nx.adam_step(params, nx.collect_grads(params), state, lr)
        curve.append(loss.item())
        if log is not None and (step + 1) % cfg.log_every == 0:
            phase = "main" if main else "copy"
            log(f"pretrain {phase} step {step + 1} loss {np.mean(curve[-cfg.log_every:]):.4f} lr {lr:.2e} ({time.time() - start:.0f}s)")
        if on_checkpoint is not None and (step + 1) % cfg.log_every == 0:
            on_checkpoint(params, step + 1)
    return params, {"steps": total, "loss_curve": curve, "seconds": time.time() - start}


BASE_LM_DIR = os.path.join(os.path.dirname(__file__), "assets", "base_lm")


def load_base_lm(path: str | os.PathLike | None = None) -> tuple[nx.ParamStore, Vocab]:
    """Load ``lm.ckpt`` and ``vocab.txt`` from a base-LM directory (default: the shipped one)."""
    path = os.fspath(path) if path is not None else BASE_LM_DIR
    ckpt = os.path.join(path, "lm.ckpt")
    if not os.path.exists(ckpt):
        raise FileNotFoundError(f"no base LM checkpoint at {ckpt} (run scripts/pretrain_lm.py)")
    params = nx.load_checkpoint(ckpt)
    vocab = load_vocab(os.path.join(path, "vocab.txt"))
    if params["lm.token_embeddings"].shape[0] != len(vocab):
        raise nx.CheckpointError("base LM and vocabulary sizes differ")
    return params, vocab
