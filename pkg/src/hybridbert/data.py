"""Corpus ingestion, vocabulary, MLM corruption, and batch assembly.

Corpus format: UTF-8 plain text, one sentence per line, a blank line
separates documents. Tokenization is whitespace splitting; subword
learning is out of scope. Vocabulary files store one token per line,
where the line number equals the token id minus the reserved-id count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "PAD_ID",
    "CLS_ID",
    "SEP_ID",
    "MASK_ID",
    "UNK_ID",
    "NUM_RESERVED",
    "IGNORE_LABEL",
    "Vocab",
    "build_vocab",
    "CorruptionConfig",
    "corrupt_mlm",
    "DocStore",
    "read_documents",
    "make_sso_example",
    "pack_pair",
    "TokenBatch",
    "collate_batch",
    "make_batch",
    "rng_for_batch",
    "synthesize_bigram_corpus",
]

PAD_ID = 0
CLS_ID = 1
SEP_ID = 2
MASK_ID = 3
UNK_ID = 4
NUM_RESERVED = 5
RESERVED_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")

IGNORE_LABEL = -100  # label value for positions the MLM loss must skip


class Vocab:
    """Token/id mapping with fixed reserved ids 0..4."""

    def __init__(self, tokens: Sequence[str]):
        for t in tokens:
            if t in RESERVED_TOKENS:
                raise ValueError(f"corpus token collides with reserved token {t!r}")
        self._id_to_token = list(RESERVED_TOKENS) + list(tokens)
        self._token_to_id = {t: i for i, t in enumerate(self._id_to_token)}
        if len(self._token_to_id) != len(self._id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self._id_to_token)

    def id_of(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self._id_to_token[idx]

    def encode(self, text_or_tokens) -> np.ndarray:
        toks = text_or_tokens.split() if isinstance(text_or_tokens, str) else text_or_tokens
        return np.array([self.id_of(t) for t in toks], dtype=np.int64)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self._id_to_token[NUM_RESERVED:]:
                f.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.strip()]
        return cls(tokens)


def build_vocab(lines: Iterable[str], max_size: int) -> Vocab:
    """Frequency-ranked vocabulary (ties broken by first occurrence).

    `max_size` caps the total size including the reserved ids. Unknown
    tokens map to [UNK] at encode time.
    """
    counts: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    n = 0
    for line in lines:
        for tok in line.split():
            counts[tok] = counts.get(tok, 0) + 1
            if tok not in first_seen:
                first_seen[tok] = n
                n += 1
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if max_size <= NUM_RESERVED:
        raise ValueError(f"max_size must exceed the {NUM_RESERVED} reserved ids")
    ranked = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    return Vocab(ranked[: max_size - NUM_RESERVED])


@dataclass
class CorruptionConfig:
    """MLM corruption policy: selection rate and the mask/random/keep split."""

    mask_rate: float = 0.15
    frac_mask: float = 0.8
    frac_random: float = 0.1
    frac_keep: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mask_rate < 1.0:
            raise ValueError(f"mask_rate must be in (0, 1), got {self.mask_rate}")
        total = self.frac_mask + self.frac_random + self.frac_keep
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"corruption fractions must sum to 1, got {total}")


def corrupt_mlm(ids: np.ndarray, cfg: CorruptionConfig, rng: np.random.Generator,
                vocab_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corrupt one sequence for masked language modeling.

    Every non-special position is independently selected with probability
    `mask_rate`; selected positions become [MASK] / a random non-reserved
    token / stay unchanged per the configured split. Returns (corrupted
    ids, labels with original ids at selected positions and IGNORE_LABEL
    elsewhere, boolean mask-token positions).
    """
    ids = np.asarray(ids, dtype=np.int64)
    eligible = ids >= NUM_RESERVED
    u = rng.random(ids.shape)
    selected = eligible & (u < cfg.mask_rate)

    labels = np.full(ids.shape, IGNORE_LABEL, dtype=np.int64)
    labels[selected] = ids[selected]

    corrupted = ids.copy()
    kind = rng.random(ids.shape)
    to_mask = selected & (kind < cfg.frac_mask)
    to_random = selected & (kind >= cfg.frac_mask) & (kind < cfg.frac_mask + cfg.frac_random)
    corrupted[to_mask] = MASK_ID
    n_random = int(to_random.sum())
    if n_random:
        corrupted[to_random] = rng.integers(NUM_RESERVED, vocab_size, size=n_random)

    mask_positions = corrupted == MASK_ID
    return corrupted, labels, mask_positions


class DocStore:
    """Documents as lists of already-encoded sentences."""

    def __init__(self, docs: Sequence[Sequence[np.ndarray]]):
        self.docs = [list(d) for d in docs if len(d) > 0]

    def __len__(self) -> int:
        return len(self.docs)

    @classmethod
    def from_text_file(cls, path, vocab: Vocab) -> "DocStore":
        return cls([[vocab.encode(s) for s in doc] for doc in read_documents(path)])

    def split(self, eval_fraction: float) -> tuple["DocStore", "DocStore"]:
        """Deterministic train/eval split: the tail documents become eval."""
        n_eval = max(1, int(round(len(self.docs) * eval_fraction)))
        if n_eval >= len(self.docs):
            raise ValueError("eval fraction leaves no training documents")
        return DocStore(self.docs[:-n_eval]), DocStore(self.docs[-n_eval:])


def read_documents(path) -> list[list[str]]:
    """Parse the one-sentence-per-line, blank-line-delimited corpus format."""
    docs: list[list[str]] = []
    current: list[str] = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                current.append(line)
            elif current:
                docs.append(current)
                current = []
    if current:
        docs.append(current)
    if not docs:
        raise ValueError(f"no documents found in corpus {path}")
    return docs


def make_sso_example(store: DocStore, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, int]:
    """Draw one sentence-pair example for the sentence structure objective.

    Classes are sampled uniformly: 0 = B directly follows A in a document,
    1 = the same adjacent pair swapped, 2 = B comes from a different
    document.
    """
    multi = [i for i, d in enumerate(store.docs) if len(d) >= 2]
    if len(store.docs) < 2 or not multi:
        raise ValueError("SSO needs at least two documents and one with two or more sentences")
    label = int(rng.integers(0, 3))
    if label in (0, 1):
        di = multi[int(rng.integers(0, len(multi)))]
        doc = store.docs[di]
        i = int(rng.integers(0, len(doc) - 1))
        first, second = doc[i], doc[i + 1]
        return (first, second, 0) if label == 0 else (second, first, 1)
    da = int(rng.integers(0, len(store.docs)))
    db = int(rng.integers(0, len(store.docs) - 1))
    if db >= da:
        db += 1
    a_doc, b_doc = store.docs[da], store.docs[db]
    a = a_doc[int(rng.integers(0, len(a_doc)))]
    b = b_doc[int(rng.integers(0, len(b_doc)))]
    return a, b, 2


def pack_pair(a: np.ndarray, b: np.ndarray, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """[CLS] A [SEP] B [SEP] packing with longest-first truncation.

    Segment ids are 0 through the first [SEP] and 1 afterwards.
    """
    if max_len < 5:
        raise ValueError(f"max_len {max_len} cannot hold [CLS] A [SEP] B [SEP]")
    a = list(a)
    b = list(b)
    while len(a) + len(b) + 3 > max_len:
        if len(a) >= len(b):
            a.pop()
        else:
            b.pop()
    ids = np.array([CLS_ID] + a + [SEP_ID] + b + [SEP_ID], dtype=np.int64)
    segs = np.zeros(len(ids), dtype=np.int64)
    segs[len(a) + 2 :] = 1
    return ids, segs


@dataclass
class TokenBatch:
    """One corrupted, padded training batch."""

    input_ids: np.ndarray     # int64 (B, l)
    segment_ids: np.ndarray   # int64 (B, l), 0 or 1
    padding_mask: np.ndarray  # bool (B, l), True at padding
    mlm_labels: np.ndarray    # int64 (B, l), IGNORE_LABEL where not predicted
    mask_positions: np.ndarray  # bool (B, l), True exactly at [MASK] inputs
    sso_labels: np.ndarray    # int64 (B,), values 0/1/2

    def validate(self) -> None:
        """Raise if any structural batch invariant is broken."""
        if not np.array_equal(self.mask_positions, self.input_ids == MASK_ID):
            raise AssertionError("mask_positions out of sync with [MASK] input ids")
        pad = self.padding_mask
        if not np.array_equal(pad, self.input_ids == PAD_ID):
            raise AssertionError("padding_mask out of sync with PAD input ids")
        if np.any(self.mlm_labels[pad] != IGNORE_LABEL):
            raise AssertionError("padding positions carry MLM labels")
        if np.any(self.mask_positions & pad):
            raise AssertionError("padding positions marked as mask positions")
        if not np.isin(self.segment_ids, (0, 1)).all():
            raise AssertionError("segment ids outside {0, 1}")
        if not np.isin(self.sso_labels, (0, 1, 2)).all():
            raise AssertionError("SSO labels outside {0, 1, 2}")
        labeled = self.mlm_labels != IGNORE_LABEL
        if np.any(labeled & (self.input_ids < NUM_RESERVED) & ~self.mask_positions):
            # corrupted positions hold [MASK] or a non-reserved replacement
            raise AssertionError("reserved id at a corrupted position")


def collate_batch(examples: Sequence[tuple[np.ndarray, np.ndarray, int]], max_len: int,
                  cfg: CorruptionConfig, rng: np.random.Generator, vocab_size: int) -> TokenBatch:
    """Corrupt and right-pad packed examples into one TokenBatch."""
    batch = len(examples)
    input_ids = np.full((batch, max_len), PAD_ID, dtype=np.int64)
    segment_ids = np.zeros((batch, max_len), dtype=np.int64)
    mlm_labels = np.full((batch, max_len), IGNORE_LABEL, dtype=np.int64)
    mask_positions = np.zeros((batch, max_len), dtype=bool)
    sso_labels = np.zeros(batch, dtype=np.int64)

    for i, (ids, segs, label) in enumerate(examples):
        n = len(ids)
        if n > max_len:
            raise ValueError(f"example of length {n} exceeds max_len {max_len}")
        corrupted, labels, masked = corrupt_mlm(ids, cfg, rng, vocab_size)
        input_ids[i, :n] = corrupted
        segment_ids[i, :n] = segs
        mlm_labels[i, :n] = labels
        mask_positions[i, :n] = masked
        sso_labels[i] = label

    return TokenBatch(
        input_ids=input_ids,
        segment_ids=segment_ids,
        padding_mask=input_ids == PAD_ID,
        mlm_labels=mlm_labels,
        mask_positions=mask_positions,
        sso_labels=sso_labels,
    )


def make_batch(store: DocStore, batch_size: int, max_len: int, cfg: CorruptionConfig,
               rng: np.random.Generator, vocab_size: int) -> TokenBatch:
    """Sample, pack, corrupt, and collate one batch from a document store."""
    examples = []
    for _ in range(batch_size):
        a, b, label = make_sso_example(store, rng)
        ids, segs = pack_pair(a, b, max_len)
        examples.append((ids, segs, label))
    return collate_batch(examples, max_len, cfg, rng, vocab_size)


def rng_for_batch(seed: int, batch_index: int) -> np.random.Generator:
    """Deterministic per-batch stream: parallel and serial builds agree."""
    return np.random.default_rng(np.random.SeedSequence((seed, batch_index)))


def synthesize_bigram_corpus(path, num_sentences: int = 6000, vocab_words: int = 200,
                             successors: int = 4, zipf_s: float = 1.0,
                             sentences_per_doc: tuple[int, int] = (8, 12),
                             sentence_len: tuple[int, int] = (6, 12), seed: int = 20240601) -> Path:
    """Write a deterministic corpus drawn from a sparse first-order chain.

    Each word has a small successor set with peaked transition
    probabilities, and successors are drawn Zipf-weighted so the
    stationary word distribution is skewed like natural text. Both give
    a desk-scale run visible headroom: unigram structure alone already
    beats the uniform predictor, and neighbours carry most of the
    remaining information. Documents are blocks of consecutive sentences
    separated by blank lines.
    """
    rng = np.random.default_rng(seed)
    words = [f"w{i:03d}" for i in range(vocab_words)]
    zipf = 1.0 / np.arange(1, vocab_words + 1) ** zipf_s
    zipf /= zipf.sum()
    succ = np.stack([
        rng.choice(vocab_words, size=successors, replace=False, p=zipf)
        for _ in range(vocab_words)
    ])
    probs = np.array([0.6, 0.25, 0.1, 0.05][:successors])
    probs = probs / probs.sum()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        written = 0
        while written < num_sentences:
            doc_len = int(rng.integers(sentences_per_doc[0], sentences_per_doc[1] + 1))
            for _ in range(min(doc_len, num_sentences - written)):
                n = int(rng.integers(sentence_len[0], sentence_len[1] + 1))
                w = int(rng.choice(vocab_words, p=zipf))
                sent = [words[w]]
                for _ in range(n - 1):
                    w = int(succ[w][rng.choice(successors, p=probs)])
                    sent.append(words[w])
                f.write(" ".join(sent) + "\n")
                written += 1
            f.write("\n")
    return path
