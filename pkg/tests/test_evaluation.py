import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graft import evaluation as ev
from graft import instructions as ins
from graft.graph_store import Graph, induced_subgraph
from graft.lm_pretrain import base_vocab
from graft.projector_lm import LmConfig, init_lm, init_projector
from graft.tokenizer import encode

N_INSTANCES = 1000
EXACT = 1e-12


# ----------------------------------------------------------------------------
# brute-force oracles
# ----------------------------------------------------------------------------


def macro_f1_oracle(preds, golds, k):
    cm = np.zeros((k + 1, k), dtype=np.int64)  # extra row: predictions outside the class set
    for p, g in zip(preds, golds):
        cm[p if 0 <= p < k else k, g] += 1
    f1 = []
    for c in range(k):
        tp = cm[c, c]
        precision_den = cm[c].sum()
        recall_den = cm[:, c].sum()
        if tp == 0:
            f1.append(0.0)
            continue
        prec, rec = tp / precision_den, tp / recall_den
        f1.append(2 * prec * rec / (prec + rec))
    return float(np.mean(f1))


def auc_oracle(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def ap_oracle(scores, labels):
    scores, labels = np.asarray(scores), np.asarray(labels, dtype=bool)
    total_pos = labels.sum()
    out, prev = 0.0, 0.0
    for t in sorted(set(scores.tolist()), reverse=True):
        chosen = scores >= t
        tp = (chosen & labels).sum()
        recall = tp / total_pos
        out += (recall - prev) * tp / chosen.sum()
        prev = recall
    return float(out)


def _instances(seed):
    rng = np.random.default_rng(seed)
    for _ in range(N_INSTANCES):
        n = int(rng.integers(2, 40))
        # few distinct values so ties are common
        scores = np.round(rng.random(n), int(rng.integers(1, 3)))
        labels = rng.random(n) < rng.uniform(0.1, 0.9)
        if labels.all() or not labels.any():
            labels[0] = not labels[0]
        yield scores, labels


def test_macro_f1_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(N_INSTANCES):
        k = int(rng.integers(1, 6))
        n = int(rng.integers(1, 50))
        golds = rng.integers(0, k, n).tolist()
        preds = rng.integers(-1, k, n).tolist()  # -1 stands for an abstention
        assert abs(ev.macro_f1(preds, golds, k) - macro_f1_oracle(preds, golds, k)) <= EXACT


def test_auc_matches_oracle():
    for scores, labels in _instances(1):
        assert abs(ev.auc(scores, labels) - auc_oracle(scores, labels)) <= EXACT


def test_ap_matches_oracle():
    for scores, labels in _instances(2):
        assert abs(ev.ap(scores, labels) - ap_oracle(scores, labels)) <= EXACT


def test_metric_known_values():
    assert ev.ap([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=EXACT)
    assert ev.auc([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.5, abs=EXACT)
    assert ev.auc([0.5, 0.5], [1, 0]) == 0.5
    assert ev.macro_f1([0, 1, 1], [0, 1, 0], 2) == pytest.approx((2 / 3 + 2 / 3) / 2)
    assert ev.macro_f1([0, 0], [0, 0], 2) == 0.5  # absent class scores zero
    assert ev.ap([0.1, 0.2], [0, 0]) == 0.0


def test_metric_errors():
    with pytest.raises(ev.MetricError):
        ev.auc([0.1, 0.2], [1, 1])
    with pytest.raises(ev.MetricError):
        ev.accuracy([], [])
    with pytest.raises(ev.MetricError):
        ev.macro_f1([0], [0, 1], 2)
    with pytest.raises(ev.MetricError):
        ev.EvalReport("node_classification", 1, 1.5)
    with pytest.raises(ev.MetricError):
        ev.EvalReport("node_classification", 1, 0.5, auc=0.5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=30), st.integers(0, 1000))
def test_auc_scale_and_flip(scores, seed):
    labels = np.random.default_rng(seed).random(len(scores)) < 0.5
    if labels.all() or not labels.any():
        return
    s = np.asarray(scores)
    assert ev.auc(s, labels) == pytest.approx(ev.auc(2 * s, labels), abs=EXACT)
    assert ev.auc(s, labels) + ev.auc(-s, labels) == pytest.approx(1.0, abs=EXACT)


# ----------------------------------------------------------------------------
# parsing
# ----------------------------------------------------------------------------

CLASSES = ["blockA", "blockB"]


@pytest.mark.parametrize(
    "text, expect",
    [
        ("blockA", "blockA"),
        ("Based on the information, the answer is blockB.", "blockB"),
        ("blockB then blockA", "blockB"),
        ("BLOCKA", "blockA"),
        ("no idea", ev.ABSTAIN),
        ("", ev.ABSTAIN),
    ],
)
def test_parse_classification(text, expect):
    assert ev.parse_answer("node_classification", text, CLASSES) == expect


@pytest.mark.parametrize("text, expect", [("yes", "yes"), ("No.", "no"), ("maybe so yes", "yes"), ("maybe", ev.ABSTAIN)])
def test_parse_link(text, expect):
    assert ev.parse_answer("link_prediction", text) == expect


def test_parse_matching_round_trip(sbm_sparse):
    rng = np.random.default_rng(3)
    s = ins.build_matching_corpus(sbm_sparse, [7], ins.CorpusConfig(1, 4), rng)[0]
    listing = ins.parse_listing(s.input_text)
    gold = ev.gold_answer(s, listing=listing)
    assert [s.permutation[p] for p in gold] == list(range(len(gold)))
    assert ev.parse_answer("graph_matching", "garbage", listing=listing) == ev.ABSTAIN


def test_unknown_task():
    with pytest.raises(ValueError):
        ev.parse_answer("summarize", "x")


# ----------------------------------------------------------------------------
# token budget
# ----------------------------------------------------------------------------


def _star(n, words=3):
    texts = [tuple(f"b0w{(i * words + j) % 40}" for j in range(words)) for i in range(n)]
    return Graph.from_edges(n, [(0, i) for i in range(1, n)], texts, [0] * n, ["blockA"])


@pytest.mark.parametrize("n", [1, 2, 5, 17])
def test_graph_regime_costs_n_plus_two(n):
    v = base_vocab()
    g = _star(n)
    sub = induced_subgraph(g, range(n))
    s = ins.InstructionSample("node_classification", "std", "classify <graph> now", "blockA", [sub])
    graph_tokens, text_tokens = ev.token_budget(s, v, g)
    assert graph_tokens == len(encode(v, "classify now")) + n + 2
    # each node contributes at least its words plus a label in the textified regime
    assert text_tokens >= len(encode(v, "classify now")) + n * 3


def test_token_budget_two_subgraphs(sbm_sparse):
    v = base_vocab()
    s = ins.build_link_corpus(sbm_sparse, 1, ins.CorpusConfig(1, 3), np.random.default_rng(0))[0]
    graph_tokens, _ = ev.token_budget(s, v, sbm_sparse)
    plain = sum(1 for t in encode(v, s.input_text) if t != 4)
    assert graph_tokens == plain + sum(len(x) + 2 for x in s.subgraphs)


# ----------------------------------------------------------------------------
# evaluate() plumbing
# ----------------------------------------------------------------------------


def _params(vocab, seed=0):
    from graft.graph_encoder import GraphEncoderConfig
    from graft.grounding import GroundingConfig, init_grounding_params
    from graft.text_encoder import TextEncoderConfig

    rng = np.random.default_rng(seed)
    cfg = GroundingConfig(graph_encoder=GraphEncoderConfig(2, 6), text_encoder=TextEncoderConfig(6))
    p = init_grounding_params(vocab, cfg, rng)
    p.merge(init_lm(LmConfig(len(vocab), 8, 2, 1, 2, 1024), rng))
    p.merge(init_projector(6, 8, rng))
    return p


def _oracle_generate(monkeypatch, answers):
    """Replace greedy decoding with a fixed sequence of answer strings."""
    from graft import tokenizer

    it = iter(answers)
    vocab = base_vocab()
    monkeypatch.setattr(ev, "generate", lambda *a, **k: tokenizer.encode(vocab, next(it)))


def test_evaluate_perfect_classifier(monkeypatch, vocab, sbm_dense):
    corpus = ins.build_classification_corpus(sbm_dense, range(0, 200, 20), ins.CorpusConfig(1, 2), "std", np.random.default_rng(0))
    _oracle_generate(monkeypatch, [s.output_text for s in corpus])
    rep = ev.evaluate(_params(vocab), vocab, sbm_dense, corpus)
    assert rep.accuracy == 1.0 and rep.macro_f1 == 1.0 and rep.abstain_rate == 0.0
    assert rep.n_samples == 10 and len(rep.transcripts) == 10
    assert rep.token_budget["graph_prompt_tokens"] < rep.token_budget["text_prompt_tokens"]


def test_evaluate_abstentions_count_as_wrong(monkeypatch, vocab, sbm_dense):
    corpus = ins.build_classification_corpus(sbm_dense, [0, 150], ins.CorpusConfig(1, 2), "std", np.random.default_rng(0))
    _oracle_generate(monkeypatch, ["hmm", corpus[1].output_text])
    rep = ev.evaluate(_params(vocab), vocab, sbm_dense, corpus)
    assert rep.accuracy == 0.5 and rep.abstain_rate == 0.5


def test_evaluate_matching(monkeypatch, vocab, sbm_sparse):
    corpus = ins.build_matching_corpus(sbm_sparse, [1, 2, 3], ins.CorpusConfig(1, 3), np.random.default_rng(0))
    _oracle_generate(monkeypatch, [corpus[0].output_text, "nothing", corpus[2].output_text])
    rep = ev.evaluate(_params(vocab), vocab, sbm_sparse, corpus)
    assert rep.accuracy == pytest.approx(2 / 3)
    assert rep.macro_f1 is None


def test_evaluate_link_prediction_reports_ranking_metrics(vocab, sbm_sparse):
    corpus = ins.build_link_corpus(sbm_sparse, 6, ins.CorpusConfig(1, 2), np.random.default_rng(0))
    rep = ev.evaluate(_params(vocab), vocab, sbm_sparse, corpus)
    assert rep.auc is not None and 0 <= rep.auc <= 1
    assert rep.ap is not None


def test_evaluate_rejects_mixed_corpus(vocab, sbm_sparse):
    rng = np.random.default_rng(0)
    corpus = ins.build_link_corpus(sbm_sparse, 1, ins.CorpusConfig(1, 2), rng)
    corpus += ins.build_classification_corpus(sbm_sparse, [0], ins.CorpusConfig(1, 2), "std", rng)
    with pytest.raises(ev.MetricError):
        ev.evaluate(_params(vocab), vocab, sbm_sparse, corpus)
    reps = ev.evaluate_by_task(_params(vocab), vocab, sbm_sparse, corpus)
    assert set(reps) == {"link_prediction", "node_classification"}
