"""Synthetic corpus generation, word-level vocabulary, cropping, and batching.

The corpus is a seeded Markov chain over a closed set of pronounceable
nonsense words, so runs are license-free and fully reproducible. A paraphrase
generator emits sentence pairs with controlled lexical overlap (used by the
representation probes), alongside independently drawn random pairs.

Tokenization is lowercase whitespace splitting; sequences are wrapped as
[CLS] body [SEP]. Special ids are fixed: PAD=0, UNK=1, CLS=2, SEP=3, MASK=4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3
MASK_ID = 4
SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
NUM_SPECIALS = len(SPECIAL_TOKENS)

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _word_inventory(count: int) -> list[str]:
    """First ``count`` words from a fixed syllable enumeration."""
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    words = list(syllables)
    for a in syllables:
        for b in syllables:
            if len(words) >= count:
                return words[:count]
            words.append(a + b)
    return words[:count]


class Vocabulary:
    """Dense token/id maps with the five specials pinned to ids 0..4."""

    def __init__(self, tokens: list[str]):
        if tokens[:NUM_SPECIALS] != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate surface forms in vocabulary")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self):
        return len(self.id_to_token)

    @property
    def size(self):
        return len(self.id_to_token)

    @classmethod
    def build(cls, documents: list[str], max_size: int) -> "Vocabulary":
        """Keep the top-frequency words, ties broken lexicographically."""
        if max_size <= NUM_SPECIALS:
            raise ValueError(f"max_size must exceed {NUM_SPECIALS}")
        counts: dict[str, int] = {}
        for doc in documents:
            for tok in tokenize(doc):
                counts[tok] = counts.get(tok, 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        kept = [tok for tok, _ in ranked[: max_size - NUM_SPECIALS]]
        return cls(SPECIAL_TOKENS + kept)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.strip()])

    def encode(self, text: str, max_len: int | None = None) -> list[int]:
        """[CLS] body [SEP], truncating the body when max_len is given."""
        ids = [self.token_to_id.get(tok, UNK_ID) for tok in tokenize(text)]
        if max_len is not None and len(ids) > max_len - 2:
            ids = ids[: max_len - 2]
        return [CLS_ID] + ids + [SEP_ID]

    def decode(self, ids: list[int]) -> str:
        body = [i for i in ids if i >= NUM_SPECIALS or i == UNK_ID]
        return " ".join(self.id_to_token[i] for i in body)


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@dataclass
class SyntheticGrammar:
    """Seeded Markov chain over a closed word set plus a paraphrase transformer.

    Construction is a pure function of ``seed``: the transition sparsity
    pattern and probabilities are drawn once. Paraphrases substitute a small
    fraction of tokens, keeping average lexical overlap well above 0.6.
    """

    num_words: int = 1200
    branching: int = 8
    min_sentence_len: int = 8
    max_sentence_len: int = 24
    substitute_rate: float = 0.15
    seed: int = 0
    words: list[str] = field(init=False)
    _successors: np.ndarray = field(init=False)
    _probs: np.ndarray = field(init=False)

    def __post_init__(self):
        self.words = _word_inventory(self.num_words)
        rng = np.random.default_rng(self.seed)
        n = len(self.words)
        self._successors = np.empty((n, self.branching), dtype=np.int64)
        self._probs = np.empty((n, self.branching))
        for w in range(n):
            self._successors[w] = rng.choice(n, size=self.branching, replace=False)
            raw = rng.random(self.branching) + 0.1
            self._probs[w] = raw / raw.sum()

    def sentence(self, rng: np.random.Generator) -> list[str]:
        length = int(rng.integers(self.min_sentence_len, self.max_sentence_len + 1))
        idx = int(rng.integers(0, len(self.words)))
        out = [idx]
        for _ in range(length - 1):
            row = out[-1]
            idx = int(self._successors[row][rng.choice(self.branching, p=self._probs[row])])
            out.append(idx)
        return [self.words[i] for i in out]

    def paraphrase(self, tokens: list[str], rng: np.random.Generator) -> list[str]:
        out = []
        for tok in tokens:
            if rng.random() < self.substitute_rate:
                out.append(self.words[int(rng.integers(0, len(self.words)))])
            else:
                out.append(tok)
        return out


@dataclass
class CorpusBundle:
    documents: list[str]
    similar_pairs: list[tuple[str, str]]
    random_pairs: list[tuple[str, str]]


def generate_corpus(grammar: SyntheticGrammar, num_docs: int, seed: int,
                    num_pairs: int = 200) -> CorpusBundle:
    """Training documents plus held-out similar/random evaluation pairs.

    Byte-deterministic under (grammar, num_docs, seed).
    """
    if num_docs < 1:
        raise ValueError("num_docs must be >= 1")
    rng = np.random.default_rng([seed, 0xC0])
    documents = [" ".join(grammar.sentence(rng)) for _ in range(num_docs)]
    similar = []
    for _ in range(num_pairs):
        a = grammar.sentence(rng)
        similar.append((" ".join(a), " ".join(grammar.paraphrase(a, rng))))
    random_pairs = [(" ".join(grammar.sentence(rng)), " ".join(grammar.sentence(rng)))
                    for _ in range(num_pairs)]
    return CorpusBundle(documents, similar, random_pairs)


def save_corpus(bundle: CorpusBundle, out_dir) -> dict:
    """Write train.txt plus the two labelled pair TSVs; returns the paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "corpus": os.path.join(out_dir, "train.txt"),
        "pairs_similar": os.path.join(out_dir, "pairs_similar.tsv"),
        "pairs_random": os.path.join(out_dir, "pairs_random.tsv"),
    }
    with open(paths["corpus"], "w", encoding="utf-8") as fh:
        for doc in bundle.documents:
            fh.write(doc + "\n")
    for key, pairs, label in (("pairs_similar", bundle.similar_pairs, "similar"),
                              ("pairs_random", bundle.random_pairs, "random")):
        with open(paths[key], "w", encoding="utf-8") as fh:
            for a, b in pairs:
                fh.write(f"{a}\t{b}\t{label}\n")
    return paths


def load_pairs(path) -> list[tuple[str, str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            a, b, label = line.split("\t")
            out.append((a, b, label))
    return out


def crop(ids: list[int], keep_fraction: float, rng: np.random.Generator) -> tuple[list[int], bool]:
    """Keep a contiguous span of the body at a uniform random offset.

    The [CLS]/[SEP] wrapper is stripped, a span of ceil(keep_fraction * body)
    tokens is cut, and the wrapper is restored. Returns (sequence, cropped);
    bodies shorter than 2 tokens come back unchanged with cropped=False.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must be in (0, 1]")
    if ids[0] != CLS_ID or ids[-1] != SEP_ID:
        raise ValueError("sequence must be [CLS] body [SEP]")
    body = ids[1:-1]
    n = len(body)
    if n < 2:
        return list(ids), False
    keep = math.ceil(keep_fraction * n)
    if keep >= n:
        return list(ids), False
    start = int(rng.integers(0, n - keep + 1))
    return [CLS_ID] + body[start:start + keep] + [SEP_ID], True


def truncate(ids: list[int], max_len: int) -> list[int]:
    """Clip the body so the wrapped sequence fits max_len, re-appending [SEP]."""
    if len(ids) <= max_len:
        return list(ids)
    return ids[: max_len - 1] + [SEP_ID]


def make_batch(sequences: list[list[int]], batch_size: int, max_len: int,
               rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffle one epoch into right-padded (ids, mask) batches.

    Every sequence appears exactly once per epoch; padding goes to each
    batch's own max length.
    """
    order = rng.permutation(len(sequences))
    batches = []
    for lo in range(0, len(sequences), batch_size):
        chunk = [truncate(sequences[i], max_len) for i in order[lo:lo + batch_size]]
        width = max(len(s) for s in chunk)
        ids = np.full((len(chunk), width), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(chunk), width))
        for r, seq in enumerate(chunk):
            ids[r, : len(seq)] = seq
            mask[r, : len(seq)] = 1.0
        batches.append((ids, mask))
    return batches
