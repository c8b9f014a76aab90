"""Graph-to-token projector and a miniature causal language model.

A prompt is tokenized with ``<graph>`` indicators left in place; splicing
replaces each indicator by ``<graph_begin>``, one slot per subgraph node and
``<graph_end>``.  A slot's input embedding is the projected structural
embedding of that node instead of a token embedding.

Positions enter twice: a learned table added to the inputs, and rotary
encoding of queries and keys inside attention.  The rotary part gives the
small LM position-independent copying, which the frozen model needs for
graph matching answers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .tokenizer import (
    BOS_ID,
    EOS_ID,
    GRAPH_BEGIN_ID,
    GRAPH_END_ID,
    GRAPH_ID,
    GRAPH_SPECIAL_IDS,
    GRAPH_TOKEN_ID,
    PAD_ID,
    UNK_ID,
    Vocab,
    encode,
)

LM = "lm"
PROJ = "projector"
_MASKED = -1e9
ROPE_BASE = 10000.0
USER_TAG = "human :"
ASSISTANT_TAG = "gpt :"


class SequenceError(ValueError):
    pass


@dataclass
class LmConfig:
    vocab_size: int
    dim: int = 64
    heads: int = 4
    layers: int = 2
    ff_mult: int = 4
    max_len: int = 2048


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------


def init_projector(d_graph: int, d_lm: int, rng: np.random.Generator) -> nx.ParamStore:
    return nx.ParamStore(
        [
            (f"{PROJ}.weight", nx.init_normal(rng, (d_graph, d_lm), 1.0 / np.sqrt(d_graph))),
            (f"{PROJ}.bias", nx.tensor(np.zeros((1, d_lm)))),
        ]
    )


def init_lm(cfg: LmConfig, rng: np.random.Generator) -> nx.ParamStore:
    d, f = cfg.dim, cfg.dim * cfg.ff_mult
    if d % cfg.heads:
        raise ValueError("dim must be divisible by heads")
    s = 1.0 / np.sqrt(d)
    resid = s / np.sqrt(2 * cfg.layers)
    store = nx.ParamStore(
        [
            (f"{LM}.token_embeddings", nx.init_normal(rng, (cfg.vocab_size, d), 0.5)),
            (f"{LM}.positional_embeddings", nx.init_normal(rng, (cfg.max_len, d), 0.02)),
        ]
    )
    for i in range(cfg.layers):
        p = f"{LM}.layer{i}"
        store.add(f"{p}.ln1_gain", nx.tensor(np.ones(d)))
        store.add(f"{p}.ln1_bias", nx.tensor(np.zeros(d)))
        for w in ("wq", "wk", "wv"):
            store.add(f"{p}.{w}", nx.init_normal(rng, (d, d), s))
        store.add(f"{p}.wo", nx.init_normal(rng, (d, d), resid))
        store.add(f"{p}.ln2_gain", nx.tensor(np.ones(d)))
        store.add(f"{p}.ln2_bias", nx.tensor(np.zeros(d)))
        store.add(f"{p}.ff1", nx.init_normal(rng, (d, f), s))
        store.add(f"{p}.ff1_bias", nx.tensor(np.zeros(f)))
        store.add(f"{p}.ff2", nx.init_normal(rng, (f, d), resid))
        store.add(f"{p}.ff2_bias", nx.tensor(np.zeros(d)))
    store.add(f"{LM}.lnf_gain", nx.tensor(np.ones(d)))
    store.add(f"{LM}.lnf_bias", nx.tensor(np.zeros(d)))
    return store


def lm_config_of(params: nx.ParamStore, heads: int) -> LmConfig:
    v, d = params[f"{LM}.token_embeddings"].shape
    layers = 0
    while f"{LM}.layer{layers}.wq" in params:
        layers += 1
    f = params[f"{LM}.layer0.ff1"].shape[1]
    return LmConfig(v, d, heads, layers, f // d, params[f"{LM}.positional_embeddings"].shape[0])


def project(params: nx.ParamStore, H_hat: nx.Tensor) -> nx.Tensor:
    """Affine map of each structural embedding into the LM's input space."""
    w = params[f"{PROJ}.weight"]
    if H_hat.ndim != 2 or H_hat.shape[1] != w.shape[0]:
        raise nx.NumericsError(f"projector expects (*, {w.shape[0]}) input, got {H_hat.shape}")
    return nx.add(nx.matmul(H_hat, w), params[f"{PROJ}.bias"])


# ----------------------------------------------------------------------------
# mixed token / graph-vector sequences
# ----------------------------------------------------------------------------


@dataclass
class MixedSequence:
    """Token ids with graph slots marked; ``graph_slot[t]`` indexes ``graph_vectors`` or is -1."""

    token_ids: np.ndarray
    graph_slot: np.ndarray
    graph_vectors: nx.Tensor | None
    loss_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def slots(self) -> list:
        return [("graph", int(s)) if s >= 0 else ("token", int(t)) for t, s in zip(self.token_ids, self.graph_slot)]

    @property
    def prompt_length(self) -> int:
        nz = np.flatnonzero(self.loss_mask)
        return int(nz[0]) if nz.size else len(self)

    def prefix(self, length: int) -> "MixedSequence":
        """First ``length`` positions with the loss mask cleared (a generation prompt)."""
        return MixedSequence(self.token_ids[:length].copy(), self.graph_slot[:length].copy(), self.graph_vectors, np.zeros(length, dtype=bool))


def prompt_token_ids(vocab: Vocab, input_text: str) -> list[int]:
    """``<bos> human : {input} gpt :`` with ``<graph>`` indicators still present."""
    return [BOS_ID] + encode(vocab, f"{USER_TAG} {input_text} {ASSISTANT_TAG}")


def response_token_ids(vocab: Vocab, output_text: str) -> list[int]:
    return encode(vocab, output_text) + [EOS_ID]


def splice_graph_tokens(vocab: Vocab, sample, graph_vectors: nx.Tensor | None, with_response: bool = True) -> MixedSequence:
    """Replace each ``<graph>`` indicator by begin / one slot per node / end.

    ``graph_vectors`` stacks the vectors of all of the sample's subgraphs in
    order (sum of subgraph sizes rows).
    """
    prompt = prompt_token_ids(vocab, sample.input_text)
    sizes = [len(s) for s in sample.subgraphs]
    indicators = prompt.count(GRAPH_ID)
    if indicators != len(sizes):
        raise SequenceError(f"{indicators} <graph> indicator(s) but {len(sizes)} subgraph(s)")
    if sizes:
        if graph_vectors is None or graph_vectors.shape[0] != sum(sizes):
            got = None if graph_vectors is None else graph_vectors.shape[0]
            raise SequenceError(f"expected {sum(sizes)} graph vectors, got {got}")
    ids, slot = [], []
    which, offset = 0, 0
    for t in prompt:
        if t == GRAPH_ID:
            n = sizes[which]
            ids += [GRAPH_BEGIN_ID] + [GRAPH_TOKEN_ID] * n + [GRAPH_END_ID]
            slot += [-1] + list(range(offset, offset + n)) + [-1]
            offset += n
            which += 1
        else:
            ids.append(t)
            slot.append(-1)
    mask = [False] * len(ids)
    if with_response:
        resp = response_token_ids(vocab, sample.output_text)
        ids += resp
        slot += [-1] * len(resp)
        mask += [True] * len(resp)
    return MixedSequence(np.array(ids, dtype=np.int64), np.array(slot, dtype=np.int64), graph_vectors, np.array(mask, dtype=bool))


# ----------------------------------------------------------------------------
# forward pass
# ----------------------------------------------------------------------------


def _batch_inputs(params: nx.ParamStore, seqs) -> tuple[nx.Tensor, np.ndarray]:
    """Input embeddings (B, L, d) for right-padded sequences, plus the padded token ids."""
    emb = params[f"{LM}.token_embeddings"]
    v = emb.shape[0]
    max_len = params[f"{LM}.positional_embeddings"].shape[0]
    length = max(len(s) for s in seqs)
    if length > max_len:
        raise SequenceError(f"sequence of length {length} exceeds max_len {max_len}")
    parts = [emb]
    index = np.full((len(seqs), length), PAD_ID, dtype=np.int64)
    ids = np.full((len(seqs), length), PAD_ID, dtype=np.int64)
    offset = v
    for b, s in enumerate(seqs):
        n = len(s)
        ids[b, :n] = s.token_ids
        index[b, :n] = s.token_ids
        if s.graph_vectors is not None and (s.graph_slot >= 0).any():
            gpos = s.graph_slot >= 0
            index[b, :n][gpos] = offset + s.graph_slot[gpos]
            parts.append(s.graph_vectors)
            offset += s.graph_vectors.shape[0]
    table = parts[0] if len(parts) == 1 else nx.concat_rows(parts)
    x = nx.take_rows(table, index)
    pos = nx.take_rows(params[f"{LM}.positional_embeddings"], np.arange(length))
    return nx.add(x, pos), ids


def rotary_tables(positions: np.ndarray, dh: int) -> tuple[np.ndarray, np.ndarray]:
    """cos and sin tables (T, dh) for rotary position encoding (half-split pairing)."""
    half = dh // 2
    inv = ROPE_BASE ** (-np.arange(half) / half)
    ang = np.asarray(positions, dtype=float)[:, None] * inv[None, :]
    return np.concatenate([np.cos(ang)] * 2, axis=-1), np.concatenate([np.sin(ang)] * 2, axis=-1)


def _rotate_half_matrix(dh: int) -> np.ndarray:
    """R with x @ R = concat(-x[half:], x[:half])."""
    half = dh // 2
    r = np.zeros((dh, dh))
    r[np.arange(half) + half, np.arange(half)] = -1.0
    r[np.arange(half), np.arange(half) + half] = 1.0
    return r


def apply_rotary(t: nx.Tensor, cos: np.ndarray, sin: np.ndarray) -> nx.Tensor:
    """Rotate query/key features (..., T, dh) by their absolute positions."""
    rot = nx.matmul(t, nx.tensor(_rotate_half_matrix(t.shape[-1])))
    return nx.add(nx.mul(t, nx.tensor(cos)), nx.mul(rot, nx.tensor(sin)))


def _np_rotary(t: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    return t * cos + (t @ _rotate_half_matrix(t.shape[-1])) * sin


def _attention(params: nx.ParamStore, p: str, x: nx.Tensor, heads: int, mask: np.ndarray) -> nx.Tensor:
    b, length, d = x.shape
    dh = d // heads

    def split(t):
        return nx.transpose(nx.reshape(t, (b, length, heads, dh)), (0, 2, 1, 3))

    cos, sin = rotary_tables(np.arange(length), dh)
    q = apply_rotary(split(nx.matmul(x, params[f"{p}.wq"])), cos, sin)
    k = apply_rotary(split(nx.matmul(x, params[f"{p}.wk"])), cos, sin)
    v = split(nx.matmul(x, params[f"{p}.wv"]))
    probs = nx.masked_softmax(nx.matmul(q, nx.transpose(k)), mask, 1.0 / np.sqrt(dh))
    out = nx.matmul(probs, v)  # (b, h, L, dh)
    out = nx.reshape(nx.transpose(out, (0, 2, 1, 3)), (b, length, d))
    return nx.matmul(out, params[f"{p}.wo"])


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.full((length, length), _MASKED), k=1)


def lm_hidden(params: nx.ParamStore, seqs, heads: int = 4) -> tuple[nx.Tensor, np.ndarray]:
    x, ids = _batch_inputs(params, seqs)
    mask = causal_mask(x.shape[1])
    i = 0
    while f"{LM}.layer{i}.wq" in params:
        p = f"{LM}.layer{i}"
        h = nx.layer_norm(x, params[f"{p}.ln1_gain"], params[f"{p}.ln1_bias"])
        x = nx.add(x, _attention(params, p, h, heads, mask))
        h = nx.layer_norm(x, params[f"{p}.ln2_gain"], params[f"{p}.ln2_bias"])
        h = nx.relu(nx.add(nx.matmul(h, params[f"{p}.ff1"]), params[f"{p}.ff1_bias"]))
        x = nx.add(x, nx.add(nx.matmul(h, params[f"{p}.ff2"]), params[f"{p}.ff2_bias"]))
        i += 1
    return nx.layer_norm(x, params[f"{LM}.lnf_gain"], params[f"{LM}.lnf_bias"]), ids


def lm_forward(params: nx.ParamStore, seqs, heads: int = 4) -> nx.Tensor:
    """Next-token logits (B, L, |V|) for a batch of sequences (a single sequence gives B = 1)."""
    if isinstance(seqs, MixedSequence):
        seqs = [seqs]
    h, _ = lm_hidden(params, seqs, heads)
    return nx.matmul(h, nx.transpose(params[f"{LM}.token_embeddings"]))


def instruction_loss(params: nx.ParamStore, seqs, heads: int = 4) -> nx.Tensor:
    """Mean next-token NLL over response positions only.

    Logits are computed for the predicting positions alone, which is
    equivalent to masking a full logit tensor and much cheaper.
    """
    if isinstance(seqs, MixedSequence):
        seqs = [seqs]
    h, _ = lm_hidden(params, seqs, heads)
    b, length, d = h.shape
    rows, targets = [], []
    for k, s in enumerate(seqs):
        m = np.flatnonzero(s.loss_mask)
        if np.any(m == 0):
            raise SequenceError("the first position cannot be a response position")
        rows.append(k * length + m - 1)
        targets.append(s.token_ids[m])
    rows = np.concatenate(rows)
    if rows.size == 0:
        raise SequenceError("loss mask selects no response position")
    picked = nx.take_rows(nx.reshape(h, (b * length, d)), rows)
    logits = nx.matmul(picked, nx.transpose(params[f"{LM}.token_embeddings"]))
    return nx.cross_entropy_rows(logits, np.concatenate(targets))


# ----------------------------------------------------------------------------
# decoding
# ----------------------------------------------------------------------------

_NEVER_EMIT = (PAD_ID, BOS_ID, UNK_ID) + GRAPH_SPECIAL_IDS


def generation_mask(vocab_size: int) -> np.ndarray:
    m = np.zeros(vocab_size)
    m[list(_NEVER_EMIT)] = -np.inf
    return m


def _np_layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    xc = x - x.mean(axis=-1, keepdims=True)
    return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) * gain + bias


def _cached_step(params: nx.ParamStore, x: np.ndarray, cache: list, heads: int) -> np.ndarray:
    """Run ``x`` (T, d) (inputs incl. positions) through the LM, appending keys/values to ``cache``.

    Returns the final hidden states (T, d).  Inference only: no tape.
    """
    t, d = x.shape
    dh = d // heads
    i = 0
    while f"{LM}.layer{i}.wq" in params:
        p = f"{LM}.layer{i}"
        w = {k: params[f"{p}.{k}"].data for k in ("ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo", "ln2_gain", "ln2_bias", "ff1", "ff1_bias", "ff2", "ff2_bias")}
        h = _np_layer_norm(x, w["ln1_gain"], w["ln1_bias"])
        q, k, v = ((h @ w[n]).reshape(t, heads, dh).transpose(1, 0, 2) for n in ("wq", "wk", "wv"))
        start = cache[i][0].shape[1] if len(cache) > i else 0
        cos, sin = rotary_tables(np.arange(start, start + t), dh)
        q, k = _np_rotary(q, cos, sin), _np_rotary(k, cos, sin)
        if len(cache) <= i:
            cache.append((k, v))
        else:
            k = np.concatenate([cache[i][0], k], axis=1)
            v = np.concatenate([cache[i][1], v], axis=1)
            cache[i] = (k, v)
        past = k.shape[1] - t
        scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
        scores += np.triu(np.full((t, k.shape[1]), _MASKED), k=past + 1)
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        x = x + (probs @ v).transpose(1, 0, 2).reshape(t, d) @ w["wo"]
        h = _np_layer_norm(x, w["ln2_gain"], w["ln2_bias"])
        x = x + np.maximum(h @ w["ff1"] + w["ff1_bias"], 0.0) @ w["ff2"] + w["ff2_bias"]
        i += 1
    return _np_layer_norm(x, params[f"{LM}.lnf_gain"].data, params[f"{LM}.lnf_bias"].data)


def generate(params: nx.ParamStore, prompt: MixedSequence, max_new: int, heads: int = 4) -> list[int]:
    """Greedy decoding (ties to the lowest id) until EOS or ``max_new`` tokens.

    Uses a key/value cache; logits agree with :func:`lm_forward` on the
    extended sequence.
    """
    max_len = params[f"{LM}.positional_embeddings"].shape[0]
    if len(prompt) + max_new > max_len:
        raise SequenceError("prompt plus generation budget exceeds max_len")
    emb = params[f"{LM}.token_embeddings"].data
    pos = params[f"{LM}.positional_embeddings"].data
    vmask = generation_mask(emb.shape[0])
    x, _ = _batch_inputs(params, [prompt])
    cache: list = []
    h = _cached_step(params, x.data[0], cache, heads)[-1]
    out = []
    for step in range(max_new):
        nxt = int(np.argmax(h @ emb.T + vmask))
        if nxt == EOS_ID:
            break
        out.append(nxt)
        if step + 1 < max_new:
            h = _cached_step(params, (emb[nxt] + pos[len(prompt) + step])[None, :], cache, heads)[-1]
    return out


def next_token_distribution(params: nx.ParamStore, prompt: MixedSequence, heads: int = 4) -> np.ndarray:
    """Softmax over the vocabulary for the position right after ``prompt``."""
    logits = lm_forward(params, [prompt], heads).data[0, -1]
    z = np.exp(logits - logits.max())
    return z / z.sum()


# ----------------------------------------------------------------------------
# text-only graph slots for LM pretraining
# ----------------------------------------------------------------------------


def text_slot_vectors(params: nx.ParamStore, bow: np.ndarray) -> nx.Tensor:
    """Mean LM token embedding of each node's text; ``bow`` is (n, |V|) averaging weights."""
    return nx.matmul(nx.tensor(bow), params[f"{LM}.token_embeddings"])
