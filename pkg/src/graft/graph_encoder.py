"""Structure encoder: stacked message passing over a self-loop, degree-normalized adjacency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .graph_store import Graph, Subgraph
from .tokenizer import Vocab, encode


@dataclass
class GraphEncoderConfig:
    num_layers: int = 2
    hidden_dim: int = 32


PREFIX = "graph_encoder"


def init_graph_encoder(cfg: GraphEncoderConfig, rng: np.random.Generator) -> nx.ParamStore:
    if cfg.num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    d = cfg.hidden_dim
    store = nx.ParamStore()
    for layer in range(cfg.num_layers):
        # near-identity start keeps the text signal readable before grounding
        w = np.eye(d) + rng.normal(0.0, 0.3 / np.sqrt(d), size=(d, d))
        store.add(f"{PREFIX}.w{layer}", nx.tensor(w))
    return store


def layer_weights(params: nx.ParamStore) -> list[nx.Tensor]:
    ws = []
    while f"{PREFIX}.w{len(ws)}" in params:
        ws.append(params[f"{PREFIX}.w{len(ws)}"])
    if not ws:
        raise KeyError("no graph encoder weights in parameter store")
    return ws


def normalized_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """D^-1/2 (A + I) D^-1/2."""
    a = np.asarray(adjacency, dtype=float) + np.eye(adjacency.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a.sum(axis=1))
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


def block_diagonal(mats) -> np.ndarray:
    n = sum(m.shape[0] for m in mats)
    out = np.zeros((n, n))
    off = 0
    for m in mats:
        k = m.shape[0]
        out[off : off + k, off : off + k] = m
        off += k
    return out


def propagate(params: nx.ParamStore, a_norm: np.ndarray, features: nx.Tensor) -> nx.Tensor:
    """H_l = relu(A_norm H_{l-1} W_l); the last layer has no activation."""
    ws = layer_weights(params)
    if features.shape != (a_norm.shape[0], ws[0].shape[0]):
        raise nx.NumericsError(f"features {features.shape} do not match {a_norm.shape[0]} nodes x {ws[0].shape[0]} dims")
    a = nx.tensor(a_norm)
    h = features
    for i, w in enumerate(ws):
        h = nx.matmul(nx.matmul(a, h), w)
        if i < len(ws) - 1:
            h = nx.relu(h)
    return h


def encode_graph(params: nx.ParamStore, sub: Subgraph, node_features: nx.Tensor) -> nx.Tensor:
    """Structural embedding per subgraph node (pre-normalization)."""
    if node_features.shape[0] != len(sub):
        raise nx.NumericsError(f"{node_features.shape[0]} feature rows for a {len(sub)}-node subgraph")
    return propagate(params, normalized_adjacency(sub.local_adjacency), node_features)


def bag_of_words_matrix(v: Vocab, texts) -> np.ndarray:
    """Row i averages the one-hot ids of ``texts[i]``: (n, |V|)."""
    m = np.zeros((len(texts), len(v)))
    for i, toks in enumerate(texts):
        ids = encode(v, " ".join(toks))
        if not ids:
            raise ValueError(f"node {i} has no tokens")
        np.add.at(m[i], ids, 1.0 / len(ids))
    return m


def init_node_features(v: Vocab, sub: Subgraph, g: Graph, text_emb: nx.Tensor) -> nx.Tensor:
    """Mean token embedding of each subgraph node's text, in subgraph order."""
    bow = bag_of_words_matrix(v, [g.node_texts[i] for i in sub.node_ids])
    return nx.matmul(nx.tensor(bow), text_emb)
