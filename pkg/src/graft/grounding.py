"""Contrastive text-structure grounding of the graph and text encoders."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .graph_encoder import GraphEncoderConfig, bag_of_words_matrix, block_diagonal, init_graph_encoder, normalized_adjacency, propagate
from .graph_store import Graph, sample_subgraph
from .text_encoder import TextEncoderConfig, encode_all_nodes, init_text_encoder
from .tokenizer import Vocab

TAU_NAME = "grounding.tau"
MAX_LOGIT_SCALE = 100.0


@dataclass
class GroundingBatch:
    H_hat: nx.Tensor
    T_hat: nx.Tensor
    T_prime: nx.Tensor

    @property
    def labels(self) -> np.ndarray:
        return np.arange(self.H_hat.shape[0])


@dataclass
class GroundingLossConfig:
    lambdas: tuple = (1 / 3, 1 / 3, 1 / 3)
    tau_init: float = math.log(1 / 0.07)


@dataclass
class GroundingConfig:
    steps: int = 300
    batch_size: int = 16
    lr: float = 2e-3
    hops: int = 1
    fanout: int = 5
    neighbor_fanout: int = 5
    seed: int = 0
    loss: GroundingLossConfig = field(default_factory=GroundingLossConfig)
    graph_encoder: GraphEncoderConfig = field(default_factory=GraphEncoderConfig)
    text_encoder: TextEncoderConfig = field(default_factory=TextEncoderConfig)


def init_grounding_params(vocab: Vocab, cfg: GroundingConfig, rng: np.random.Generator) -> nx.ParamStore:
    if cfg.graph_encoder.hidden_dim != cfg.text_encoder.dim:
        raise ValueError("graph and text encoders must share an embedding width")
    store = init_text_encoder(len(vocab), cfg.text_encoder, rng)
    store.merge(init_graph_encoder(cfg.graph_encoder, rng))
    store.add(TAU_NAME, nx.tensor([[cfg.loss.tau_init]]))
    return store


def neighbor_average(T_hat: nx.Tensor, adjacency: np.ndarray) -> nx.Tensor:
    """Row i = mean of T_hat over i's neighbors; isolated rows keep their own embedding."""
    a = np.asarray(adjacency, dtype=float)
    deg = a.sum(axis=1)
    w = np.where(deg[:, None] > 0, a / np.maximum(deg, 1)[:, None], np.eye(a.shape[0]))
    return nx.matmul(nx.tensor(w), T_hat)


def _ce_both_ways(gamma: nx.Tensor, y: np.ndarray) -> nx.Tensor:
    return nx.add(nx.cross_entropy_rows(gamma, y), nx.cross_entropy_rows(nx.transpose(gamma), y))


def similarity_matrices(batch: GroundingBatch, tau: nx.Tensor) -> list[nx.Tensor]:
    s = nx.exp(tau)
    return [
        nx.mul(nx.matmul(batch.H_hat, nx.transpose(batch.T_hat)), s),
        nx.mul(nx.matmul(batch.H_hat, nx.transpose(batch.T_prime)), s),
        nx.mul(nx.matmul(batch.T_hat, nx.transpose(batch.T_prime)), s),
    ]


def grounding_loss(batch: GroundingBatch, tau: nx.Tensor, cfg: GroundingLossConfig | None = None) -> nx.Tensor:
    """Sum over the three pairings of 1/2 * lambda * (CE(G, y) + CE(G^T, y))."""
    cfg = cfg or GroundingLossConfig()
    n = batch.H_hat.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 rows")
    y = batch.labels
    total = None
    for lam, gamma in zip(cfg.lambdas, similarity_matrices(batch, tau)):
        term = nx.scale(_ce_both_ways(gamma, y), 0.5 * lam)
        total = term if total is None else nx.add(total, term)
    return total


def retrieval_accuracy(batch: GroundingBatch) -> float:
    """Fraction of rows whose graph-to-text similarity peaks on the diagonal."""
    sim = batch.H_hat.data @ batch.T_hat.data.T
    return float(np.mean(np.argmax(sim, axis=1) == np.arange(sim.shape[0])))


def structural_embeddings(params: nx.ParamStore, vocab: Vocab, g: Graph, subgraphs) -> nx.Tensor:
    """Row-normalized graph embeddings of every node of every subgraph, stacked in order."""
    nodes = [i for sub in subgraphs for i in sub.node_ids]
    bow = bag_of_words_matrix(vocab, [g.node_texts[i] for i in nodes])
    features = nx.matmul(nx.tensor(bow), params["text_encoder.token_embeddings"])
    a = block_diagonal([normalized_adjacency(s.local_adjacency) for s in subgraphs])
    return nx.row_l2_normalize(propagate(params, a, features))


def center_rows(subgraphs) -> list[int]:
    rows, off = [], 0
    for s in subgraphs:
        rows.append(off)
        off += len(s)
    return rows


def make_batch(params: nx.ParamStore, vocab: Vocab, g: Graph, nodes, cfg: GroundingConfig, rng: np.random.Generator) -> GroundingBatch:
    """Embeddings for ``nodes``: structure from each node's sampled subgraph, text from the node and its neighbors."""
    nodes = [int(i) for i in nodes]
    subs = [sample_subgraph(g, i, cfg.hops, cfg.fanout, rng) for i in nodes]
    H_hat = nx.take_rows(structural_embeddings(params, vocab, g, subs), center_rows(subs))
    # text side: batch nodes first, then a sample of each one's neighbors
    union = list(nodes)
    index = {u: k for k, u in enumerate(union)}
    nbr_lists = []
    for u in nodes:
        nbrs = list(g.neighbors[u])
        if len(nbrs) > cfg.neighbor_fanout:
            nbrs = [nbrs[j] for j in sorted(rng.choice(len(nbrs), cfg.neighbor_fanout, replace=False))]
        for v in nbrs:
            if v not in index:
                index[v] = len(union)
                union.append(v)
        nbr_lists.append(nbrs)
    adj = np.zeros((len(union), len(union)))
    for k, nbrs in enumerate(nbr_lists):
        for v in nbrs:
            adj[k, index[v]] = 1.0
    T_all = nx.row_l2_normalize(encode_all_nodes(params, vocab, [g.node_texts[u] for u in union]))
    T_prime_all = neighbor_average(T_all, adj)
    rows = list(range(len(nodes)))
    return GroundingBatch(H_hat, nx.take_rows(T_all, rows), nx.take_rows(T_prime_all, rows))


def clamp_tau(params: nx.ParamStore) -> None:
    tau = params[TAU_NAME]
    np.minimum(tau.data, math.log(MAX_LOGIT_SCALE), out=tau.data)


def run_grounding(g: Graph, vocab: Vocab, params: nx.ParamStore, cfg: GroundingConfig) -> tuple[nx.ParamStore, dict]:
    """Train both encoders and the temperature on random node minibatches.

    Returns the (updated in place) parameters and a report with the loss
    curve and the retrieval accuracy on a fixed evaluation batch.
    """
    if not 2 <= cfg.batch_size <= g.node_count:
        raise ValueError(f"batch size {cfg.batch_size} must lie in [2, {g.node_count}]")
    rng = np.random.default_rng(cfg.seed)
    eval_rng = np.random.default_rng(cfg.seed + 7919)
    eval_nodes = [eval_rng.choice(g.node_count, cfg.batch_size, replace=False) for _ in range(4)]

    def evaluate():
        accs, losses = [], []
        r = np.random.default_rng(cfg.seed + 104729)
        for nodes in eval_nodes:
            b = make_batch(params, vocab, g, nodes, cfg, r)
            accs.append(retrieval_accuracy(b))
            losses.append(grounding_loss(b, params[TAU_NAME], cfg.loss).item())
        return float(np.mean(accs)), float(np.mean(losses))

    acc0, loss0 = evaluate()
    curve = [loss0] if cfg.steps == 0 else []
    state = nx.AdamState()
    for step in range(cfg.steps):
        nodes = rng.choice(g.node_count, cfg.batch_size, replace=False)
        batch = make_batch(params, vocab, g, nodes, cfg, rng)
        loss = grounding_loss(batch, params[TAU_NAME], cfg.loss)
        params.zero_grad()
        nx.backward(loss)
        nx.adam_step(params, nx.collect_grads(params), state, cfg.lr)
        clamp_tau(params)
        curve.append(loss.item())
    acc, final_loss = evaluate()
    report = {
        "steps": cfg.steps,
        "batch_size": cfg.batch_size,
        "loss_curve": curve,
        "initial_loss": loss0,
        "final_eval_loss": final_loss,
        "initial_retrieval_accuracy": acc0,
        "retrieval_accuracy": acc,
        "logit_scale": float(np.exp(params[TAU_NAME].data.item())),
    }
    return params, report
