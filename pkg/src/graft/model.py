"""Glue between the encoders, the projector and the language model for one instruction sample."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .graph_encoder import bag_of_words_matrix
from .grounding import structural_embeddings
from .projector_lm import MixedSequence, project, splice_graph_tokens, text_slot_vectors
from .tokenizer import Vocab

SLOT_MODES = ("graph", "text")


def structure_of(params: nx.ParamStore, vocab: Vocab, g, sample, track: bool = False):
    """Row-normalized structural embeddings of all of ``sample``'s subgraph nodes.

    With ``track`` False the result is a constant (no tape through the
    encoders), which is what frozen encoders need.
    """
    h = structural_embeddings(params, vocab, g, sample.subgraphs)
    return h if track else nx.tensor(h.data)


def precompute_structure(params: nx.ParamStore, vocab: Vocab, g, samples) -> list[nx.Tensor]:
    return [structure_of(params, vocab, g, s) for s in samples]


def graph_vectors(params: nx.ParamStore, vocab: Vocab, g, sample, structure: nx.Tensor | None = None, track: bool = False) -> nx.Tensor:
    """Graph tokens f_P(H) for every node of the sample's subgraphs, stacked in order."""
    h = structure if structure is not None else structure_of(params, vocab, g, sample, track)
    return project(params, h)


def soft_text_vectors(params: nx.ParamStore, vocab: Vocab, g, sample, mix: np.ndarray | None = None) -> nx.Tensor:
    """Text-only stand-in for graph tokens: mean LM embedding of each node's text.

    ``mix`` (nodes x nodes) optionally blends the rows, e.g. powers of the
    normalized subgraph adjacency.
    """
    nodes = [i for sub in sample.subgraphs for i in sub.node_ids]
    bow = bag_of_words_matrix(vocab, [g.node_texts[i] for i in nodes])
    return text_slot_vectors(params, bow if mix is None else mix @ bow)


def build_sequence(
    params: nx.ParamStore,
    vocab: Vocab,
    g,
    sample,
    with_response: bool = True,
    slot_mode: str = "graph",
    structure: nx.Tensor | None = None,
    mix: np.ndarray | None = None,
) -> MixedSequence:
    if slot_mode == "graph":
        vecs = graph_vectors(params, vocab, g, sample, structure)
    elif slot_mode == "text":
        vecs = soft_text_vectors(params, vocab, g, sample, mix)
    else:
        raise ValueError(f"unknown slot mode {slot_mode!r}")
    return splice_graph_tokens(vocab, sample, vecs, with_response=with_response)


def zero_graph_vectors(seq: MixedSequence) -> MixedSequence:
    """Same sequence with every graph slot set to the zero vector (text-only ablation)."""
    gv = None if seq.graph_vectors is None else nx.tensor(np.zeros(seq.graph_vectors.shape))
    return MixedSequence(seq.token_ids, seq.graph_slot, gv, seq.loss_mask)
