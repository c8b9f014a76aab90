"""Answer parsing, metrics (accuracy, macro-F1, AUC, AP), evaluation and token budgets."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .instructions import InstructionSample, parse_listing, parse_matching
from .model import build_sequence
from .projector_lm import generate, next_token_distribution
from .tokenizer import GRAPH_ID, Vocab, decode, encode, split_words

ABSTAIN = "<abstain>"


class MetricError(ValueError):
    pass


# ----------------------------------------------------------------------------
# answer parsing
# ----------------------------------------------------------------------------


def _find_subsequence(hay: list[str], needle: list[str]) -> int:
    k = len(needle)
    for i in range(len(hay) - k + 1):
        if hay[i : i + k] == needle:
            return i
    return -1


def parse_answer(task: str, generated: str, class_names=None, listing=None):
    """Extract the answer from generated text; unparseable output gives ``ABSTAIN``.

    Classification returns the class name appearing earliest (as a token
    subsequence); link prediction the first yes/no; matching the list of
    0-based positions in ``listing`` (the shuffled titles) per graph token.
    """
    words = split_words(generated)
    if task == "node_classification":
        best, best_pos = ABSTAIN, None
        for name in class_names or ():
            pos = _find_subsequence(words, split_words(name))
            if pos >= 0 and (best_pos is None or pos < best_pos):
                best, best_pos = name, pos
        return best
    if task == "link_prediction":
        for w in words:
            if w in ("yes", "no"):
                return w
        return ABSTAIN
    if task == "graph_matching":
        perm = parse_matching(generated, list(listing or ()))
        if perm is None or sorted(perm) != list(range(len(perm))):
            return ABSTAIN
        return perm
    raise ValueError(f"unknown task {task!r}")


# ----------------------------------------------------------------------------
# metrics
# ----------------------------------------------------------------------------


def accuracy(preds, golds) -> float:
    if len(preds) != len(golds):
        raise MetricError("preds and golds differ in length")
    if not preds:
        raise MetricError("empty input")
    return sum(p == g for p, g in zip(preds, golds)) / len(preds)


def macro_f1(preds, golds, num_classes: int) -> float:
    """Unweighted mean of per-class F1; a class with no TP, FP or FN scores 0.

    Predictions outside ``range(num_classes)`` (e.g. abstentions) count as
    misses for the gold class.
    """
    if len(preds) != len(golds):
        raise MetricError("preds and golds differ in length")
    if len(preds) == 0:
        raise MetricError("empty input")
    total = 0.0
    for c in range(num_classes):
        tp = sum(1 for p, g in zip(preds, golds) if p == c and g == c)
        fp = sum(1 for p, g in zip(preds, golds) if p == c and g != c)
        fn = sum(1 for p, g in zip(preds, golds) if p != c and g == c)
        denom = 2 * tp + fp + fn
        total += 0.0 if denom == 0 else 2 * tp / denom
    return total / num_classes


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney statistic with midranks (ties count one half)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError("scores and labels must be equal-length vectors")
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        raise MetricError("auc needs both positive and negative labels")
    r = _midranks(s)
    return float((r[y].sum() - pos * (pos + 1) / 2) / (pos * neg))


def ap(scores, labels) -> float:
    """Average precision: sum over score thresholds of (R_k - R_{k-1}) * P_k.

    Tied scores form one threshold.  With no positives the value is 0.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError("scores and labels must be equal-length vectors")
    pos = int(y.sum())
    if pos == 0:
        return 0.0
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    total, tp, seen, prev_recall = 0.0, 0, 0, 0.0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        tp += int(y[i : j + 1].sum())
        seen = j + 1
        recall = tp / pos
        total += (recall - prev_recall) * (tp / seen)
        prev_recall = recall
        i = j + 1
    return float(total)


# ----------------------------------------------------------------------------
# token budget
# ----------------------------------------------------------------------------


def textify_graph(sub, g) -> str:
    """Natural-language rendering of a subgraph: node list with full texts, then edges."""
    lines = [f"node {k}: {g.text(node)}." for k, node in enumerate(sub.node_ids)]
    a = sub.local_adjacency
    for i in range(len(sub)):
        for j in range(i + 1, len(sub)):
            if a[i, j]:
                lines.append(f"node {i} cites node {j}.")
    return " ".join(lines)


def token_budget(sample: InstructionSample, v: Vocab, g) -> tuple[int, int]:
    """(graph-token prompt length, textified prompt length) of one instruction input.

    Graph regime: text tokens plus n + 2 positions per subgraph.  Textified
    regime: each ``<graph>`` replaced by :func:`textify_graph` and tokenized.
    """
    ids = encode(v, sample.input_text)
    text_tokens = sum(1 for t in ids if t != GRAPH_ID)
    graph_regime = text_tokens + sum(len(s) + 2 for s in sample.subgraphs)
    pieces = sample.input_text.split("<graph>")
    if len(pieces) - 1 != len(sample.subgraphs):
        raise ValueError("indicator count does not match subgraph count")
    text = pieces[0]
    for sub, rest in zip(sample.subgraphs, pieces[1:]):
        text += " " + textify_graph(sub, g) + " " + rest
    return graph_regime, len(encode(v, text))


# ----------------------------------------------------------------------------
# reports
# ----------------------------------------------------------------------------


@dataclass
class EvalReport:
    task: str
    n_samples: int
    accuracy: float
    macro_f1: float | None = None
    auc: float | None = None
    ap: float | None = None
    abstain_rate: float = 0.0
    token_budget: dict = field(default_factory=dict)
    transcripts: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("accuracy", "macro_f1", "auc", "ap"):
            val = getattr(self, name)
            if val is not None and not (0.0 <= val <= 1.0 and math.isfinite(val)):
                raise MetricError(f"{name}={val} outside [0, 1]")
        if self.task != "link_prediction" and (self.auc is not None or self.ap is not None):
            raise MetricError("auc/ap are reported for link prediction only")

    def to_json(self, with_transcripts: bool = False) -> dict:
        out = asdict(self)
        if not with_transcripts:
            out.pop("transcripts")
        return out


# ----------------------------------------------------------------------------
# generate -> parse -> score
# ----------------------------------------------------------------------------


def gold_answer(sample: InstructionSample, class_names=None, listing=None):
    return parse_answer(sample.task, sample.output_text, class_names, listing)


def generation_budget(sample: InstructionSample) -> int:
    if sample.task == "graph_matching":
        return 32 + 16 * len(sample.subgraphs[0])
    if sample.task == "link_prediction":
        return 4
    return 64 if sample.style == "cot" else 8


def link_score(params: nx.ParamStore, vocab: Vocab, prompt, heads: int) -> float:
    """p(yes) / (p(yes) + p(no)) at the first response position."""
    p = next_token_distribution(params, prompt, heads)
    yes, no = p[vocab.id("yes")], p[vocab.id("no")]
    return float(yes / (yes + no))


def evaluate(
    params: nx.ParamStore,
    vocab: Vocab,
    g,
    corpus,
    class_names=None,
    heads: int = 4,
    structures=None,
    slot_mode: str = "graph",
    config: dict | None = None,
) -> EvalReport:
    """Greedy-generate an answer for every sample of a single-task corpus and score it.

    Accuracy counts abstentions as wrong.  Classification adds macro-F1 over
    ``class_names`` (default: the graph's).  Link prediction adds AUC and AP
    of the yes-probability.  ``structures`` optionally supplies precomputed
    structural embeddings per sample.
    """
    corpus = list(corpus)
    if not corpus:
        raise MetricError("empty corpus")
    tasks = {s.task for s in corpus}
    if len(tasks) != 1:
        raise MetricError(f"evaluate needs a single-task corpus, got {sorted(tasks)}")
    task = tasks.pop()
    class_names = list(class_names if class_names is not None else (g.class_names or ()))
    preds, golds, scores, transcripts, budgets = [], [], [], [], []
    for k, sample in enumerate(corpus):
        structure = None if structures is None else structures[k]
        prompt = build_sequence(params, vocab, g, sample, with_response=False, slot_mode=slot_mode, structure=structure)
        text = decode(vocab, generate(params, prompt, generation_budget(sample), heads))
        listing = parse_listing(sample.input_text) if task == "graph_matching" else None
        pred = parse_answer(task, text, class_names, listing)
        gold = gold_answer(sample, class_names, listing)
        preds.append(pred)
        golds.append(gold)
        if task == "link_prediction":
            scores.append(link_score(params, vocab, prompt, heads))
        budgets.append(token_budget(sample, vocab, g))
        transcripts.append({"input": sample.input_text, "generated": text, "parsed": pred, "gold": gold})
    abstain = sum(1 for p in preds if isinstance(p, str) and p == ABSTAIN) / len(preds)
    report = dict(task=task, n_samples=len(corpus), accuracy=accuracy(preds, golds), abstain_rate=abstain)
    if task == "node_classification":
        index = {c: i for i, c in enumerate(class_names)}
        report["macro_f1"] = macro_f1([index.get(p, -1) for p in preds], [index[gl] for gl in golds], len(class_names))
    if task == "link_prediction":
        labels = [1 if gl == "yes" else 0 for gl in golds]
        report["ap"] = ap(scores, labels)
        report["auc"] = auc(scores, labels) if 0 < sum(labels) < len(labels) else None
    graph_tokens, text_tokens = (int(x) for x in np.sum(budgets, axis=0))
    report["token_budget"] = {"graph_prompt_tokens": graph_tokens, "text_prompt_tokens": text_tokens}
    return EvalReport(**report, transcripts=transcripts, config=dict(config or {}))


def evaluate_by_task(params, vocab, g, corpus, **kw) -> dict[str, EvalReport]:
    """Split a mixed corpus by task and evaluate each part."""
    structures = kw.pop("structures", None)
    out = {}
    for task in sorted({s.task for s in corpus}):
        idx = [k for k, s in enumerate(corpus) if s.task == task]
        sub_structures = None if structures is None else [structures[k] for k in idx]
        out[task] = evaluate(params, vocab, g, [corpus[k] for k in idx], structures=sub_structures, **kw)
    return out
