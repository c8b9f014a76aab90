"""Text-attributed graphs: loading, h-hop neighbor sampling, SBM generation."""

from __future__ import annotations

import json
import os
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GraphFormatError(ValueError):
    """A graph bundle on disk is missing or malformed."""


@dataclass(frozen=True)
class Graph:
    node_count: int
    edges: frozenset  # ordered pairs, both directions present
    node_texts: tuple  # tuple of tuples of token strings
    node_labels: tuple | None = None
    class_names: tuple | None = None
    adjacency: np.ndarray = field(default=None, repr=False, compare=False)
    neighbors: tuple = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = self.node_count
        if n < 1:
            raise GraphFormatError("graph needs at least one node")
        if len(self.node_texts) != n:
            raise GraphFormatError(f"{len(self.node_texts)} node texts for {n} nodes")
        for i, toks in enumerate(self.node_texts):
            if not toks:
                raise GraphFormatError(f"node {i} has no text")
        adj = np.zeros((n, n), dtype=np.int8)
        for u, v in self.edges:
            if not (0 <= u < n and 0 <= v < n):
                raise GraphFormatError(f"edge index out of range: ({u}, {v})")
            if u == v:
                raise GraphFormatError(f"self-loop in input at node {u}")
            adj[u, v] = adj[v, u] = 1
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "neighbors", tuple(tuple(np.flatnonzero(row).tolist()) for row in adj))

    @classmethod
    def from_edges(cls, node_count, edge_list, node_texts, node_labels=None, class_names=None) -> "Graph":
        """Symmetrize and deduplicate ``edge_list`` and build the graph."""
        edges = set()
        for u, v in edge_list:
            edges.add((int(u), int(v)))
            edges.add((int(v), int(u)))
        texts = tuple(tuple(t.split()) if isinstance(t, str) else tuple(t) for t in node_texts)
        labels = None if node_labels is None else tuple(None if x is None else int(x) for x in node_labels)
        names = None if class_names is None else tuple(class_names)
        return cls(int(node_count), frozenset(edges), texts, labels, names)

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    def title(self, i: int, length: int = 6) -> tuple:
        return self.node_texts[i][:length]

    def text(self, i: int) -> str:
        return " ".join(self.node_texts[i])

    def undirected_edges(self) -> list[tuple[int, int]]:
        return sorted((u, v) for u, v in self.edges if u < v)

    def without_edge(self, u: int, v: int) -> "Graph":
        edges = self.edges - {(u, v), (v, u)}
        return Graph(self.node_count, frozenset(edges), self.node_texts, self.node_labels, self.class_names)


@dataclass(frozen=True)
class Subgraph:
    node_ids: tuple
    local_adjacency: np.ndarray = field(repr=False, compare=False)
    hop_of: tuple

    def __len__(self) -> int:
        return len(self.node_ids)

    @property
    def center(self) -> int:
        return self.node_ids[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Subgraph)
            and self.node_ids == other.node_ids
            and self.hop_of == other.hop_of
            and np.array_equal(self.local_adjacency, other.local_adjacency)
        )

    def __hash__(self) -> int:
        return hash((self.node_ids, self.hop_of))


def induced_subgraph(g: Graph, node_ids, hop_of=None) -> Subgraph:
    ids = tuple(int(i) for i in node_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("subgraph node ids must be distinct")
    local = g.adjacency[np.ix_(ids, ids)].copy()
    if hop_of is None:
        hop_of = bfs_layers(local)
    return Subgraph(ids, local, tuple(hop_of))


def sample_subgraph(g: Graph, center: int, hops: int = 2, fanout: int = 10, rng: np.random.Generator | None = None) -> Subgraph:
    """Layered breadth-first neighbor sampling around ``center``.

    Each frontier node contributes at most ``fanout`` of its not-yet-visited
    neighbors, drawn uniformly without replacement.  Nodes are ordered by
    hop, center first.
    """
    if not 0 <= center < g.node_count:
        raise IndexError(f"center {center} outside graph of {g.node_count} nodes")
    if hops < 1 or fanout < 1:
        raise ValueError("hops and fanout must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    order = [center]
    hop_of = [0]
    visited = {center}
    frontier = [center]
    for hop in range(1, hops + 1):
        nxt = []
        for u in frontier:
            cand = [v for v in g.neighbors[u] if v not in visited]
            if len(cand) > fanout:
                picked = rng.choice(len(cand), size=fanout, replace=False)
                cand = [cand[i] for i in sorted(picked)]
            for v in cand:
                visited.add(v)
                nxt.append(v)
        order.extend(nxt)
        hop_of.extend([hop] * len(nxt))
        frontier = nxt
        if not frontier:
            break
    return induced_subgraph(g, order, hop_of)


def bfs_layers(local_adjacency: np.ndarray) -> list[int]:
    """Hop distance from node 0 inside a local adjacency matrix (-1 if unreachable)."""
    n = local_adjacency.shape[0]
    dist = [-1] * n
    dist[0] = 0
    q = deque([0])
    while q:
        u = q.popleft()
        for v in np.flatnonzero(local_adjacency[u]):
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                q.append(v)
    return dist


# ----------------------------------------------------------------------------
# synthetic corpora
# ----------------------------------------------------------------------------


def block_name(b: int) -> str:
    return f"block{chr(ord('A') + b)}" if b < 26 else f"block{b}"


def block_word(b: int, j: int) -> str:
    return f"b{b}w{j}"


def noise_word(j: int) -> str:
    return f"nz{j}"


def generate_sbm(
    blocks: int,
    per_block: int,
    p_in: float,
    p_out: float,
    vocab_per_block: int = 40,
    rng: np.random.Generator | None = None,
    text_len: int = 16,
    noise_vocab: int = 20,
    noise_frac: float = 0.25,
) -> Graph:
    """Stochastic block model with block-correlated node texts.

    Node text: ``text_len`` tokens, each a noise word with probability
    ``noise_frac`` and otherwise a word from the node's block vocabulary.
    Block words are named ``b{block}w{j}`` so graphs drawn with different
    seeds share a vocabulary.
    """
    if not 0 <= p_out < p_in <= 1:
        raise ValueError("need 0 <= p_out < p_in <= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = blocks * per_block
    labels = np.repeat(np.arange(blocks), per_block)
    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    draws = rng.random((n, n))
    upper = np.triu(draws < prob, k=1)
    edges = list(zip(*np.nonzero(upper)))
    texts = []
    for i in range(n):
        b = labels[i]
        words = rng.permutation(vocab_per_block)
        toks, k = [], 0
        for _ in range(text_len):
            if rng.random() < noise_frac:
                toks.append(noise_word(int(rng.integers(noise_vocab))))
            else:
                toks.append(block_word(b, int(words[k % vocab_per_block])))
                k += 1
        texts.append(tuple(toks))
    return Graph.from_edges(n, edges, texts, labels.tolist(), [block_name(b) for b in range(blocks)])


# ----------------------------------------------------------------------------
# on-disk bundle: edges.tsv, nodes.jsonl, classes.txt
# ----------------------------------------------------------------------------


def load_graph(path: str | os.PathLike) -> Graph:
    root = Path(path)
    edges_path, nodes_path = root / "edges.tsv", root / "nodes.jsonl"
    for p in (edges_path, nodes_path):
        if not p.is_file():
            raise GraphFormatError(f"missing file: {p}")
    nodes = {}
    with open(nodes_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                nid, text = int(obj["id"]), obj["text"]
            except (ValueError, KeyError, TypeError) as exc:
                raise GraphFormatError(f"{nodes_path}:{lineno}: malformed line") from exc
            if not isinstance(text, str) or not text.split():
                raise GraphFormatError(f"{nodes_path}:{lineno}: node {nid} without text")
            nodes[nid] = (text.split(), obj.get("label"))
    n = len(nodes)
    if sorted(nodes) != list(range(n)):
        raise GraphFormatError(f"{nodes_path}: node ids must be exactly 0..{n - 1}")
    edge_list = []
    with open(edges_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            try:
                u, v = (int(x) for x in parts)
            except ValueError as exc:
                raise GraphFormatError(f"{edges_path}:{lineno}: malformed line") from exc
            if not (0 <= u < n and 0 <= v < n):
                raise GraphFormatError(f"{edges_path}:{lineno}: edge index out of range ({u}, {v})")
            if u == v:
                raise GraphFormatError(f"{edges_path}:{lineno}: self-loop in input")
            edge_list.append((u, v))
    classes_path = root / "classes.txt"
    class_names = None
    if classes_path.is_file():
        class_names = [c.strip() for c in classes_path.read_text(encoding="utf-8").splitlines() if c.strip()]
    labels = [nodes[i][1] for i in range(n)]
    if all(x is None for x in labels):
        labels = None
    return Graph.from_edges(n, edge_list, [nodes[i][0] for i in range(n)], labels, class_names)


def save_graph(g: Graph, path: str | os.PathLike) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "edges.tsv", "w", encoding="utf-8") as fh:
        for u, v in g.undirected_edges():
            fh.write(f"{u}\t{v}\n")
    with open(root / "nodes.jsonl", "w", encoding="utf-8") as fh:
        for i in range(g.node_count):
            label = None if g.node_labels is None else g.node_labels[i]
            fh.write(json.dumps({"id": i, "text": g.text(i), "label": label}) + "\n")
    if g.class_names is not None:
        (root / "classes.txt").write_text("".join(c + "\n" for c in g.class_names), encoding="utf-8")
