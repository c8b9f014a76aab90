"""Word-level vocabulary shared by the text encoder and the language model."""

from __future__ import annotations

import os
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
GRAPH = "<graph>"
GRAPH_BEGIN, GRAPH_TOKEN, GRAPH_END = "<graph_begin>", "<graph_token>", "<graph_end>"
SPECIALS = (PAD, BOS, EOS, UNK, GRAPH, GRAPH_BEGIN, GRAPH_TOKEN, GRAPH_END)
PAD_ID, BOS_ID, EOS_ID, UNK_ID, GRAPH_ID, GRAPH_BEGIN_ID, GRAPH_TOKEN_ID, GRAPH_END_ID = range(8)
GRAPH_SPECIAL_IDS = (GRAPH_ID, GRAPH_BEGIN_ID, GRAPH_TOKEN_ID, GRAPH_END_ID)

# special tokens first, then words (letters/digits/underscore), then single punctuation marks
_TOKEN_RE = re.compile(r"<graph(?:_begin|_token|_end)?>|<pad>|<bos>|<eos>|<unk>|\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocab:
    id_to_token: tuple

    def __post_init__(self):
        if self.id_to_token[: len(SPECIALS)] != SPECIALS:
            raise ValueError("vocab must start with the special tokens in canonical order")
        mapping = {t: i for i, t in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ValueError("duplicate token in vocab")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)


def build_vocab(corpus, min_count: int = 1) -> Vocab:
    """Tokens with frequency >= ``min_count``, most frequent first, ties lexicographic."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("cannot build a vocab from an empty corpus")
    counts = Counter()
    for text in corpus:
        counts.update(t for t in split_words(text) if t not in SPECIALS)
    words = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    return Vocab(SPECIALS + tuple(words))


def encode(v: Vocab, text: str) -> list[int]:
    return [v.id(t) for t in split_words(text)]


def decode(v: Vocab, ids) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(v):
            raise IndexError(f"token id {i} out of range for vocab of size {len(v)}")
        out.append(v.id_to_token[i])
    return " ".join(out)


def save_vocab(v: Vocab, path: str | os.PathLike) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(t + "\n" for t in v.id_to_token), encoding="utf-8")
    os.replace(tmp, path)


def load_vocab(path: str | os.PathLike) -> Vocab:
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return Vocab(tuple(lines))
