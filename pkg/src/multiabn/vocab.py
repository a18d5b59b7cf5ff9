"""Token vocabulary with reserved special ids.

Ids 0..3 are fixed: <pad>, <bos>, <eos>, <unk>. Corpus words follow,
ordered by descending frequency then alphabetically, so a vocabulary
built twice from the same corpus is identical.
"""

from __future__ import annotations

from collections import Counter
from collections.abc import Iterable

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"

SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)


class Vocabulary:
    """Bidirectional word/id map. Unknown words encode to <unk>."""

    def __init__(self, words: Iterable[str] = ()):
        self._words = list(SPECIAL_TOKENS)
        self._index = {w: i for i, w in enumerate(self._words)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word in self._index:
            return self._index[word]
        self._index[word] = len(self._words)
        self._words.append(word)
        return self._index[word]

    @classmethod
    def from_sentences(cls, sentences: Iterable[list[str]]) -> "Vocabulary":
        counts = Counter()
        for sent in sentences:
            counts.update(sent)
        ordered = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(ordered)

    def encode_word(self, word: str) -> int:
        return self._index.get(word, UNK_ID)

    def encode(self, words: list[str]) -> list[int]:
        return [self.encode_word(w) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= i < len(self._words):
                raise IndexError(f"token id {i} outside vocabulary of size {len(self._words)}")
            out.append(self._words[i])
        return out

    def __len__(self) -> int:
        return len(self._words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._words == other._words

    @property
    def words(self) -> list[str]:
        return list(self._words)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self._words) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            words = [line.rstrip("\n") for line in fh if line.strip()]
        if tuple(words[:4]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary file {path} does not start with the reserved tokens")
        vocab = cls()
        for w in words[4:]:
            vocab.add(w)
        return vocab
