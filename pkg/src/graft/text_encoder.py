"""Text encoder: one bidirectional self-attention block, mean pooled.

There are no positional encodings, so an encoding depends only on the
multiset of tokens in the text.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .tokenizer import PAD_ID, Vocab, encode

PREFIX = "text_encoder"
_MASKED = -1e9


@dataclass
class TextEncoderConfig:
    dim: int = 32
    ff_mult: int = 2


def init_text_encoder(vocab_size: int, cfg: TextEncoderConfig, rng: np.random.Generator) -> nx.ParamStore:
    d, f = cfg.dim, cfg.dim * cfg.ff_mult
    s = 1.0 / np.sqrt(d)
    return nx.ParamStore(
        [
            (f"{PREFIX}.token_embeddings", nx.init_normal(rng, (vocab_size, d), 1.0)),
            (f"{PREFIX}.wq", nx.init_normal(rng, (d, d), s)),
            (f"{PREFIX}.wk", nx.init_normal(rng, (d, d), s)),
            (f"{PREFIX}.wv", nx.init_normal(rng, (d, d), s)),
            (f"{PREFIX}.wo", nx.init_normal(rng, (d, d), s)),
            (f"{PREFIX}.ff1", nx.init_normal(rng, (d, f), s)),
            (f"{PREFIX}.ff2", nx.init_normal(rng, (f, d), 1.0 / np.sqrt(f))),
        ]
    )


def pad_batch(id_lists) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token id lists; returns (ids, valid-mask)."""
    n = len(id_lists)
    length = max((len(x) for x in id_lists), default=0)
    ids = np.full((n, length), PAD_ID, dtype=np.int64)
    valid = np.zeros((n, length), dtype=bool)
    for i, x in enumerate(id_lists):
        if not x:
            raise ValueError("encode_text needs at least one token")
        ids[i, : len(x)] = x
        valid[i, : len(x)] = True
    return ids, valid


def encode_batch(params: nx.ParamStore, id_lists) -> nx.Tensor:
    """Encode several token-id lists at once: (n, d)."""
    emb = params[f"{PREFIX}.token_embeddings"]
    d = emb.shape[1]
    if len(id_lists) == 0:
        return nx.tensor(np.zeros((0, d)))
    ids, valid = pad_batch(id_lists)
    x = nx.take_rows(emb, ids)  # (n, L, d)
    q = nx.matmul(x, params[f"{PREFIX}.wq"])
    k = nx.matmul(x, params[f"{PREFIX}.wk"])
    v = nx.matmul(x, params[f"{PREFIX}.wv"])
    key_mask = np.where(valid[:, None, :], 0.0, _MASKED)
    attn = nx.masked_softmax(nx.matmul(q, nx.transpose(k)), key_mask, 1.0 / np.sqrt(d))
    h = nx.add(x, nx.matmul(nx.matmul(attn, v), params[f"{PREFIX}.wo"]))
    ff = nx.matmul(nx.relu(nx.matmul(h, params[f"{PREFIX}.ff1"])), params[f"{PREFIX}.ff2"])
    h = nx.add(h, ff)
    pool = valid / valid.sum(axis=1, keepdims=True)  # (n, L)
    pooled = nx.matmul(nx.tensor(pool[:, None, :]), h)  # (n, 1, d)
    return nx.reshape(pooled, (len(id_lists), d))


def encode_text(params: nx.ParamStore, token_ids) -> nx.Tensor:
    """One text -> (1, d)."""
    token_ids = list(token_ids)
    if not token_ids:
        raise ValueError("encode_text needs at least one token")
    return encode_batch(params, [token_ids])


def encode_all_nodes(params: nx.ParamStore, v: Vocab, texts) -> nx.Tensor:
    """Row-stack the encodings of ``texts`` (each a token tuple or a string)."""
    id_lists = [encode(v, t if isinstance(t, str) else " ".join(t)) for t in texts]
    return encode_batch(params, id_lists)
