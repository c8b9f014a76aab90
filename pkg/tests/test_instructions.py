import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graft import instructions as ins
from graft.graph_store import Graph, induced_subgraph
from graft.tokenizer import UNK_ID, encode


def _matching(g, center, seed, cfg=ins.CorpusConfig(1, 4)):
    rng = np.random.default_rng(seed)
    return ins.render_graph_matching(g, ins._sample(g, center, cfg, rng), rng)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 199), st.integers(0, 10_000))
def test_matching_answer_inverts_the_shuffle(center, seed):

    g = _SPARSE
    s = _matching(g, center, seed)
    listing = ins.parse_listing(s.input_text)
    positions = ins.parse_matching(s.output_text, listing)
    n = len(s.subgraphs[0])
    assert sorted(positions) == list(range(n))
    # graph token i sits at list position positions[i]; the permutation says which node each position shows
    assert [s.permutation[p] for p in positions] == list(range(n))
    titles = [ins.title_of(g, i) for i in s.subgraphs[0].node_ids]
    assert listing == [titles[s.permutation[j]] for j in range(n)]


def test_matching_parser_rejects_malformed(sbm_sparse):
    s = _matching(sbm_sparse, 3, 0)
    listing = ins.parse_listing(s.input_text)
    assert ins.parse_matching("no idea", listing) is None
    broken = s.output_text.replace("Graph token 1 corresponds", "Graph token 7 corresponds")
    assert ins.parse_matching(broken, listing) is None
    wrong_title = s.output_text.rsplit(" ", 1)[0] + " nz0 nz1."
    assert ins.parse_matching(wrong_title, listing) is None


def test_matching_parser_tolerates_case_and_spacing(sbm_sparse):
    s = _matching(sbm_sparse, 5, 1)
    listing = ins.parse_listing(s.input_text)
    messy = s.output_text.upper().replace(", ", " , ")
    assert ins.parse_matching(messy, listing) == ins.parse_matching(s.output_text, listing)


def test_duplicate_titles_are_resampled_or_rejected():
    g = Graph.from_edges(3, [(0, 1), (1, 2)], [("a", "b"), ("a", "b"), ("c",)])
    sub = induced_subgraph(g, [0, 1])
    rng = np.random.default_rng(0)
    with pytest.raises(ins.InstructionError):
        ins.render_graph_matching(g, sub, rng)
    good = induced_subgraph(g, [1, 2])
    s = ins.render_graph_matching(g, sub, rng, resample=lambda: good)
    assert list(s.subgraphs[0].node_ids) == [1, 2]
    with pytest.raises(ins.InstructionError, match="resamples"):
        ins.render_graph_matching(g, sub, rng, resample=lambda: sub)


def test_single_node_matching(path_graph):
    s = ins.render_graph_matching(path_graph, induced_subgraph(path_graph, [2]), np.random.default_rng(0))
    assert s.permutation == [0]
    assert ins.parse_matching(s.output_text, ins.parse_listing(s.input_text)) == [0]


def test_classification_templates(sbm_dense):
    sub = ins._sample(sbm_dense, 0, ins.CorpusConfig(2, 3), np.random.default_rng(0))
    std = ins.render_node_classification(sbm_dense, sub, "std")
    cot = ins.render_node_classification(sbm_dense, sub, "cot")
    name = sbm_dense.class_names[sbm_dense.node_labels[0]]
    assert std.output_text == name == std.label
    assert cot.output_text.endswith(name)
    assert std.input_text.count("<graph>") == cot.input_text.count("<graph>") == 1
    for c in sbm_dense.class_names:
        assert c in std.input_text
    with pytest.raises(ins.InstructionError):
        ins.render_node_classification(sbm_dense, sub, "free")


def test_unlabeled_node_rejected():
    g = Graph.from_edges(2, [(0, 1)], [("a",), ("b",)])
    with pytest.raises(ins.InstructionError):
        ins.render_node_classification(g, induced_subgraph(g, [0, 1]))


def test_link_corpus_is_balanced_and_correct(sbm_sparse):
    corpus = ins.build_link_corpus(sbm_sparse, 40, ins.CorpusConfig(1, 3), np.random.default_rng(0))
    assert sum(s.label == "yes" for s in corpus) == 20
    for s in corpus:
        u, v = s.center_ids
        assert (s.label == "yes") == bool(sbm_sparse.adjacency[u, v])
        assert s.input_text.count("<graph>") == 2
        assert [sub.center for sub in s.subgraphs] == [u, v]


def test_templates_tokenize_without_unknowns(vocab, sbm_dense, sbm_sparse):
    rng = np.random.default_rng(0)
    samples = ins.build_classification_corpus(sbm_dense, range(4), ins.CorpusConfig(2, 3), "cot", rng)
    samples += ins.build_classification_corpus(sbm_dense, range(4), ins.CorpusConfig(2, 3), "std", rng)
    samples += ins.build_matching_corpus(sbm_sparse, range(4), ins.CorpusConfig(1, 4), rng)
    samples += ins.build_link_corpus(sbm_sparse, 4, ins.CorpusConfig(1, 3), rng)
    for s in samples:
        assert UNK_ID not in encode(vocab, s.input_text + " " + s.output_text)


def test_sample_validation(path_graph):
    sub = induced_subgraph(path_graph, [0])
    with pytest.raises(ins.InstructionError):
        ins.InstructionSample("summarize", "std", "", "", [sub])
    with pytest.raises(ins.InstructionError):
        ins.InstructionSample("link_prediction", "std", "", "", [sub])


# ----------------------------------------------------------------------------
# mixing
# ----------------------------------------------------------------------------


def _corpora(g, rng):
    cls_std = ins.build_classification_corpus(g, range(10), ins.CorpusConfig(1, 2), "std", rng)
    cls_cot = ins.build_classification_corpus(g, range(10, 17), ins.CorpusConfig(1, 2), "cot", rng)
    link = ins.build_link_corpus(g, 6, ins.CorpusConfig(1, 2), rng)
    return cls_std, cls_cot, link


def test_mixing_strategies(sbm_sparse):
    rng = np.random.default_rng(0)
    cls_std, cls_cot, link = _corpora(sbm_sparse, rng)
    parts = [(cls_std, 1.0), (cls_cot, 1.0), (link, 1.0)]
    std = ins.mix_corpora(parts, "std", np.random.default_rng(1))
    assert len(std) == 10 and all(s.style == "std" and s.task == "node_classification" for s in std)
    cot = ins.mix_corpora(parts, "cot", np.random.default_rng(1))
    assert len(cot) == 7 and all(s.style == "cot" for s in cot)
    half = ins.mix_corpora(parts, "mix_50_50", np.random.default_rng(1))
    n_std = sum(s.style == "std" for s in half)
    assert abs(n_std - (len(half) - n_std)) <= 1
    assert not any(s.task == "link_prediction" for s in half)
    full = ins.mix_corpora(parts, "with_link", np.random.default_rng(1))
    assert len(full) == 23 and sum(s.task == "link_prediction" for s in full) == 6


def test_mixing_weights_and_determinism(sbm_sparse):
    cls_std, cls_cot, _ = _corpora(sbm_sparse, np.random.default_rng(0))
    parts = [(cls_std, 0.5), (cls_cot, 1.0)]
    a = ins.mix_corpora(parts, "with_link", np.random.default_rng(5))
    b = ins.mix_corpora(parts, "with_link", np.random.default_rng(5))
    assert [s.to_json() for s in a] == [s.to_json() for s in b]
    assert len(a) == 5 + 7
    with pytest.raises(ins.InstructionError):
        ins.mix_corpora([(cls_std, 0.0)], "std", np.random.default_rng(0))
    with pytest.raises(ins.InstructionError):
        ins.mix_corpora([], "std", np.random.default_rng(0))
    with pytest.raises(ins.InstructionError):
        ins.mix_corpora(parts, "shuffle", np.random.default_rng(0))


def test_corpus_jsonl_roundtrip(tmp_path, sbm_sparse):
    rng = np.random.default_rng(0)
    corpus = ins.build_matching_corpus(sbm_sparse, range(6), ins.CorpusConfig(1, 4), rng)
    corpus += ins.build_link_corpus(sbm_sparse, 2, ins.CorpusConfig(1, 2), rng)
    path = tmp_path / "c.jsonl"
    ins.save_corpus(corpus, path)
    back = ins.load_corpus(path, sbm_sparse)
    assert [s.to_json() for s in back] == [s.to_json() for s in corpus]
    assert [s.permutation for s in back] == [s.permutation for s in corpus]
    for a, b in zip(back, corpus):
        for sa, sb in zip(a.subgraphs, b.subgraphs):
            np.testing.assert_array_equal(sa.local_adjacency, sb.local_adjacency)


from graft.graph_store import generate_sbm  # noqa: E402

_SPARSE = generate_sbm(2, 100, 0.04, 0.005, rng=np.random.default_rng(11))
