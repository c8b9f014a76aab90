"""Instruction rendering for graph matching, node classification and link prediction."""

from __future__ import annotations

import json
import os
import re
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .graph_store import Graph, Subgraph, induced_subgraph, sample_subgraph
from .tokenizer import split_words

TASKS = ("graph_matching", "node_classification", "link_prediction")
STYLES = ("std", "cot")
TITLE_LEN = 6
MAX_RESAMPLES = 8

MATCHING_INPUT = (
    "Given a sequence of graph tokens <graph> that constitute a subgraph of a citation graph, "
    "where the first token represents the central node of the subgraph, and the remaining nodes "
    "represent the first and second order neighbors of the central node. Each graph token contains "
    "the title and abstract information of the paper at this node. Here is a list of paper titles: "
    "{titles}, please reorder the list of papers according to the order of graph tokens "
    "(i.e., complete the matching of graph tokens and papers)."
)
MATCHING_OUTPUT = (
    "Based on the given graph tokens and the list of paper titles, we obtain the matching of graph "
    "tokens and papers as follows: {pairs}."
)
MATCHING_PAIR = "Graph token {i} corresponds to {title}"
_PAIR_RE = re.compile(r"graph token (\d+) corresponds to (.*?)(?=, graph token \d+ corresponds to |\s*\.?\s*$)")

CLASSIFICATION_HEAD = (
    "Given a citation graph: <graph> where the 0th node is the target paper, with the following "
    "information: Abstract: {abstract}. Title: {title}. Question: Which of the following "
    "subcategories of computer science does this paper belong to: {classes}? "
)
CLASSIFICATION_STD_TAIL = "Directly give the full name of the most likely category of this paper."
CLASSIFICATION_COT_TAIL = (
    "Give 5 likely categories as a comma-separated list ordered from most to least likely. "
    "Please think about the categorization in a step by step manner and avoid making false "
    "associations. Then provide your reasoning for each choice."
)
COT_OUTPUT = "Based on the information, {reasoning}{answer}"

LINK_INPUT = (
    "Given a sequence of graph tokens: <graph> that constitute a subgraph of a citation graph, "
    "where the first token represents the central node of the subgraph, and the remaining nodes "
    "represent the first and second order neighbors of the central node. The information of the "
    "central node is as follow: Abstract: {abstract_a}. Title: {title_a}. The other sequence of "
    "graph tokens: <graph>, where the first token (the central node) with the following information: "
    "Abstract: {abstract_b}. Title: {title_b}. If the connections between nodes represent the "
    "citation relationships between papers, are these two central nodes connected? "
    'Give me a direct answer of "yes" or "no".'
)


class InstructionError(ValueError):
    pass


@dataclass
class InstructionSample:
    task: str
    style: str
    input_text: str
    output_text: str
    subgraphs: list  # list[Subgraph]
    center_ids: list = field(default_factory=list)
    label: object = None
    permutation: list | None = None  # graph matching: list position j shows node permutation[j]

    def __post_init__(self):
        if self.task not in TASKS:
            raise InstructionError(f"unknown task {self.task!r}")
        if self.style not in STYLES:
            raise InstructionError(f"unknown style {self.style!r}")
        want = 2 if self.task == "link_prediction" else 1
        if len(self.subgraphs) != want:
            raise InstructionError(f"{self.task} needs {want} subgraph(s), got {len(self.subgraphs)}")

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "style": self.style,
            "input": self.input_text,
            "output": self.output_text,
            "subgraph_nodes": [list(s.node_ids) for s in self.subgraphs],
            "center_ids": list(self.center_ids),
            "label": self.label,
        }


def title_of(g: Graph, i: int) -> str:
    return " ".join(g.title(i, TITLE_LEN))


def _class_list(names) -> str:
    return " ".join(f"{k}. {c}." for k, c in enumerate(names, 1))


# ----------------------------------------------------------------------------
# graph matching
# ----------------------------------------------------------------------------


def render_graph_matching(g: Graph, sub: Subgraph, rng: np.random.Generator, resample=None) -> InstructionSample:
    """Shuffle the subgraph's titles; the answer names, per graph token, its paper's title.

    ``resample`` (optional, no-arg callable returning a Subgraph) is tried up
    to ``MAX_RESAMPLES`` times when titles collide.
    """
    for _ in range(MAX_RESAMPLES + 1):
        titles = [title_of(g, i) for i in sub.node_ids]
        if len(set(titles)) == len(titles):
            break
        if resample is None:
            raise InstructionError("duplicate titles in subgraph")
        sub = resample()
    else:
        raise InstructionError(f"duplicate titles after {MAX_RESAMPLES} resamples")
    n = len(sub)
    perm = [int(x) for x in rng.permutation(n)]
    listing = " ".join(f"{j + 1}. {titles[perm[j]]}." for j in range(n))
    pairs = ", ".join(MATCHING_PAIR.format(i=i + 1, title=titles[i]) for i in range(n))
    return InstructionSample(
        task="graph_matching",
        style="std",
        input_text=MATCHING_INPUT.format(titles=listing),
        output_text=MATCHING_OUTPUT.format(pairs=pairs),
        subgraphs=[sub],
        center_ids=[sub.center],
        label=None,
        permutation=perm,
    )


def parse_matching(output_text: str, listing: list[str]) -> list[int] | None:
    """Graph-token-ordered list of 0-based positions in ``listing``, or None if malformed.

    Text is compared after tokenizer normalization, so casing and spacing
    around punctuation do not matter.
    """
    norm = " ".join(split_words(output_text))
    body = norm.split(" : ", 1)[-1]
    pairs = _PAIR_RE.findall(body)
    if not pairs:
        return None
    if [int(a) for a, _ in pairs] != list(range(1, len(pairs) + 1)):
        return None
    where = {" ".join(split_words(t)): j for j, t in enumerate(listing)}
    positions = [where.get(t.strip()) for _, t in pairs]
    if any(p is None for p in positions):
        return None
    return positions


def parse_listing(input_text: str) -> list[str]:
    """Titles in list order, recovered from a rendered matching input."""
    body = input_text.split("Here is a list of paper titles: ", 1)[1].split(", please reorder", 1)[0]
    return [t for _, t in re.findall(r"(\d+)\. (.*?)\.(?= \d+\. |$)", body)]


# ----------------------------------------------------------------------------
# node classification
# ----------------------------------------------------------------------------


def cot_reasoning(g: Graph, center: int, top: int = 3) -> str:
    """Deterministic step-by-step rationale citing the center's most frequent words."""
    counts = Counter(g.node_texts[center])
    words = [w for w, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))][:top]
    return (
        f"thinking step by step, the paper mentions {', '.join(words)}, "
        "which are typical of its category. the most likely category is "
    )


def render_node_classification(g: Graph, sub: Subgraph, style: str = "std") -> InstructionSample:
    center = sub.center
    if g.node_labels is None or g.node_labels[center] is None:
        raise InstructionError(f"node {center} has no label")
    if g.class_names is None:
        raise InstructionError("graph has no class names")
    label = g.node_labels[center]
    answer = g.class_names[label]
    head = CLASSIFICATION_HEAD.format(abstract=g.text(center), title=title_of(g, center), classes=_class_list(g.class_names))
    if style == "std":
        text_in, text_out = head + CLASSIFICATION_STD_TAIL, answer
    elif style == "cot":
        text_in = head + CLASSIFICATION_COT_TAIL
        text_out = COT_OUTPUT.format(reasoning=cot_reasoning(g, center), answer=answer)
    else:
        raise InstructionError(f"unknown style {style!r}")
    return InstructionSample("node_classification", style, text_in, text_out, [sub], [center], answer)


# ----------------------------------------------------------------------------
# link prediction
# ----------------------------------------------------------------------------


def render_link_prediction(g: Graph, sub_a: Subgraph, sub_b: Subgraph) -> InstructionSample:
    u, v = sub_a.center, sub_b.center
    for c in (u, v):
        if not 0 <= c < g.node_count:
            raise InstructionError(f"center {c} out of range")
    answer = "yes" if g.adjacency[u, v] else "no"
    text_in = LINK_INPUT.format(
        abstract_a=g.text(u), title_a=title_of(g, u), abstract_b=g.text(v), title_b=title_of(g, v)
    )
    return InstructionSample("link_prediction", "std", text_in, answer, [sub_a, sub_b], [u, v], answer)


# ----------------------------------------------------------------------------
# corpus builders
# ----------------------------------------------------------------------------


@dataclass
class CorpusConfig:
    hops: int = 2
    fanout: int = 10
    max_nodes: int | None = None


def _sample(g: Graph, center: int, cfg: CorpusConfig, rng) -> Subgraph:
    sub = sample_subgraph(g, center, cfg.hops, cfg.fanout, rng)
    if cfg.max_nodes is not None and len(sub) > cfg.max_nodes:
        keep = sub.node_ids[: cfg.max_nodes]
        sub = induced_subgraph(g, keep, sub.hop_of[: cfg.max_nodes])
    return sub


def build_matching_corpus(g: Graph, centers, cfg: CorpusConfig, rng: np.random.Generator) -> list[InstructionSample]:
    out = []
    for c in centers:
        sub = _sample(g, int(c), cfg, rng)
        try:
            out.append(render_graph_matching(g, sub, rng, resample=lambda c=c: _sample(g, int(c), cfg, rng)))
        except InstructionError:
            continue
    return out


def build_classification_corpus(g: Graph, centers, cfg: CorpusConfig, style: str, rng: np.random.Generator) -> list[InstructionSample]:
    return [render_node_classification(g, _sample(g, int(c), cfg, rng), style) for c in centers]


def build_link_corpus(g: Graph, num_pairs: int, cfg: CorpusConfig, rng: np.random.Generator) -> list[InstructionSample]:
    """Balanced positives (existing edges) and negatives (random non-adjacent pairs)."""
    edges = g.undirected_edges()
    if not edges:
        raise InstructionError("graph has no edges for link prediction")
    out = []
    for k in range(num_pairs):
        if k % 2 == 0:
            u, v = edges[int(rng.integers(len(edges)))]
            if rng.random() < 0.5:
                u, v = v, u
        else:
            while True:
                u, v = (int(x) for x in rng.choice(g.node_count, 2, replace=False))
                if not g.adjacency[u, v]:
                    break
        out.append(render_link_prediction(g, _sample(g, u, cfg, rng), _sample(g, v, cfg, rng)))
    return out


MIX_STRATEGIES = ("std", "cot", "mix_50_50", "with_link")


def mix_corpora(parts, strategy: str, rng: np.random.Generator) -> list[InstructionSample]:
    """Combine weighted corpora and shuffle deterministically.

    ``parts`` is a list of ``(corpus, weight)``; a weight of 1 keeps the
    corpus whole, smaller weights subsample it.  ``std``/``cot`` keep only
    samples of that style, ``mix_50_50`` takes half of each style per task,
    ``with_link`` keeps everything (link-prediction parts included).
    """
    if not parts:
        raise InstructionError("no corpora to mix")
    if any(w < 0 for _, w in parts) or sum(w for _, w in parts) <= 0:
        raise InstructionError("weights must be nonnegative with a positive sum")
    if strategy not in MIX_STRATEGIES:
        raise InstructionError(f"unknown mixing strategy {strategy!r}")
    pool = []
    for corpus, w in parts:
        corpus = list(corpus)
        k = min(len(corpus), int(round(w * len(corpus))))
        idx = sorted(rng.choice(len(corpus), k, replace=False)) if k < len(corpus) else range(len(corpus))
        pool.extend(corpus[i] for i in idx)
    if strategy == "std":
        pool = [s for s in pool if s.style == "std" and s.task != "link_prediction"]
    elif strategy == "cot":
        pool = [s for s in pool if s.style == "cot" or s.task == "graph_matching"]
    elif strategy == "mix_50_50":
        pool = _half_and_half(pool, rng)
    if len(pool) > 1:
        pool = [pool[i] for i in rng.permutation(len(pool))]
    return pool


def _half_and_half(pool, rng) -> list[InstructionSample]:
    """Per task with both styles present: equal std and cot counts (differ by at most one)."""
    out = []
    for task in TASKS:
        std = [s for s in pool if s.task == task and s.style == "std"]
        cot = [s for s in pool if s.task == task and s.style == "cot"]
        if not cot or not std:
            if task != "link_prediction":
                out.extend(std or cot)
            continue
        total = min(len(std) + len(cot), 2 * min(len(std), len(cot)) + 1)
        n_std = (total + 1) // 2 if len(std) >= len(cot) else total // 2
        n_cot = total - n_std
        out.extend(std[i] for i in sorted(rng.choice(len(std), n_std, replace=False)))
        out.extend(cot[i] for i in sorted(rng.choice(len(cot), n_cot, replace=False)))
    return out


# ----------------------------------------------------------------------------
# JSONL
# ----------------------------------------------------------------------------


def save_corpus(samples, path: str | os.PathLike) -> None:
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), ensure_ascii=False) + "\n")
    os.replace(tmp, path)


def load_corpus(path: str | os.PathLike, g: Graph) -> list[InstructionSample]:
    """Read a corpus back, re-deriving subgraph adjacency (and matching shuffles) from ``g``."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            subs = [induced_subgraph(g, ids) for ids in obj["subgraph_nodes"]]
            perm = None
            if obj["task"] == "graph_matching":
                positions = parse_matching(obj["output"], parse_listing(obj["input"]))
                if positions is None:
                    raise InstructionError("unparseable graph matching answer in corpus")
                perm = [0] * len(positions)
                for node, j in enumerate(positions):
                    perm[j] = node
            out.append(
                InstructionSample(
                    task=obj["task"],
                    style=obj["style"],
                    input_text=obj["input"],
                    output_text=obj["output"],
                    subgraphs=subs,
                    center_ids=obj["center_ids"],
                    label=obj["label"],
                    permutation=perm,
                )
            )
    return out
