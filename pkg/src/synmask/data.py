"""Corpus ingestion: BPE-labelled token sequences, vocabularies, batching, MLM masking.

Corpus files are UTF-8, one sentence per line, tokens space-separated, with
the "@@" suffix marking non-final pieces of a segmented word.
"""

from __future__ import annotations

import copy
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CONT_MARKER = "@@"

PAD_ID, BOS_ID, EOS_ID, UNK_ID, MASK_ID = 0, 1, 2, 3, 4
RESERVED_TOKENS = ["<pad>", "<bos>", "<eos>", "<unk>", "<mask>"]

LABEL_INTACT = 0
LABEL_PAD = 1
LABEL_SUBWORD = 2


class CorpusError(ValueError):
    pass


@dataclass
class LabelDiagnostics:
    """Counters for anomalies seen while assigning BPE labels."""

    leading_continuation: int = 0


@dataclass
class TokenSequence:
    """One sentence: vocabulary ids, BPE labels, and the surface tokens."""

    ids: list[int]
    bpe_labels: list[int]
    surface: list[str]

    def __post_init__(self):
        if len(self.bpe_labels) != len(self.ids):
            raise CorpusError("bpe_labels and ids must have equal length")

    def __len__(self) -> int:
        return len(self.ids)


def assign_bpe_labels(tokens, diagnostics: LabelDiagnostics | None = None):
    """Label each surface token: 0 = intact word, 2 = piece of a segmented word.

    Every token carrying the "@@" suffix and the token immediately following
    it are pieces of one word and get label 2. A token *starting* with the
    marker at sequence start has no preceding piece; it is labelled 2 and
    counted in ``diagnostics.leading_continuation``.
    """
    labels = []
    prev_marked = False
    for i, tok in enumerate(tokens):
        marked = tok.endswith(CONT_MARKER)
        if i == 0 and tok.startswith(CONT_MARKER):
            if diagnostics is not None:
                diagnostics.leading_continuation += 1
            labels.append(LABEL_SUBWORD)
        elif marked or prev_marked:
            labels.append(LABEL_SUBWORD)
        else:
            labels.append(LABEL_INTACT)
        prev_marked = marked
    return labels


def merge_subwords(tokens):
    """Join continuation-marked pieces into whole words."""
    words = []
    buf = ""
    for tok in tokens:
        if tok.endswith(CONT_MARKER):
            buf += tok[: -len(CONT_MARKER)]
        else:
            words.append(buf + tok)
            buf = ""
    if buf:
        words.append(buf)  # dangling continuation at sequence end
    return words


@dataclass
class Vocabulary:
    """Token-to-id map with fixed reserved ids for PAD/BOS/EOS/UNK/MASK."""

    token_to_id: dict[str, int]
    id_to_token: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.id_to_token:
            self.id_to_token = [""] * len(self.token_to_id)
            for tok, i in self.token_to_id.items():
                self.id_to_token[i] = tok

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens):
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids):
        return [self.id_to_token[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token[len(RESERVED_TOKENS):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        token_to_id = {t: i for i, t in enumerate(RESERVED_TOKENS)}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                tok = line.rstrip("\n")
                if tok:
                    token_to_id[tok] = len(token_to_id)
        return cls(token_to_id)


def build_vocab(paths) -> Vocabulary:
    """Deterministic vocabulary: reserved ids, then tokens by descending
    frequency with lexicographic tie-break."""
    counts = Counter()
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                counts.update(line.split())
    if not counts:
        raise CorpusError(f"empty corpus: {list(paths)}")
    token_to_id = {t: i for i, t in enumerate(RESERVED_TOKENS)}
    for tok, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        token_to_id[tok] = len(token_to_id)
    return Vocabulary(token_to_id)


def encode_sequence(tokens, vocab: Vocabulary, add_bos_eos: bool = True,
                    diagnostics: LabelDiagnostics | None = None) -> TokenSequence:
    """Build a TokenSequence from surface tokens. BOS/EOS get BPE label 0."""
    labels = assign_bpe_labels(tokens, diagnostics)
    ids = vocab.encode(tokens)
    surface = list(tokens)
    if add_bos_eos:
        ids = [BOS_ID] + ids + [EOS_ID]
        labels = [LABEL_INTACT] + labels + [LABEL_INTACT]
        surface = [RESERVED_TOKENS[BOS_ID]] + surface + [RESERVED_TOKENS[EOS_ID]]
    return TokenSequence(ids=ids, bpe_labels=labels, surface=surface)


def read_corpus(path, vocab: Vocabulary, add_bos_eos: bool = True,
                max_lines: int | None = None):
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tokens = line.split()
            if not tokens:
                continue
            seqs.append(encode_sequence(tokens, vocab, add_bos_eos))
            if max_lines is not None and len(seqs) >= max_lines:
                break
    return seqs


@dataclass
class Batch:
    """Right-padded index matrix with BPE labels and a pad mask.

    ``pad_mask`` is True exactly at real (non-pad) positions.
    """

    ids: np.ndarray        # B x L, int64
    bpe_labels: np.ndarray  # B x L, int64
    pad_mask: np.ndarray   # B x L, bool
    lengths: np.ndarray    # B, int64

    @property
    def size(self):
        return self.ids.shape


def make_batch(sequences, max_len: int) -> Batch:
    """Pad sequences on the right to a common length.

    Pad positions carry PAD_ID and BPE label 1.
    """
    for idx, seq in enumerate(sequences):
        if len(seq) > max_len:
            raise CorpusError(
                f"sequence {idx} has length {len(seq)} > max_len {max_len}: "
                f"{' '.join(seq.surface)}")
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    width = int(lengths.max())
    b = len(sequences)
    ids = np.full((b, width), PAD_ID, dtype=np.int64)
    labels = np.full((b, width), LABEL_PAD, dtype=np.int64)
    pad_mask = np.zeros((b, width), dtype=bool)
    for i, seq in enumerate(sequences):
        n = len(seq)
        ids[i, :n] = seq.ids
        labels[i, :n] = seq.bpe_labels
        pad_mask[i, :n] = True
    return Batch(ids=ids, bpe_labels=labels, pad_mask=pad_mask, lengths=lengths)


def apply_mlm_mask(batch: Batch, rate: float, rng: np.random.Generator):
    """Replace eligible tokens with MASK independently with probability ``rate``.

    BOS/EOS and pad positions are never masked. Returns a new batch and the
    target positions (rows, cols, original ids) of the replaced tokens only.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mask rate must be in [0, 1], got {rate}")
    eligible = batch.pad_mask & (batch.ids != BOS_ID) & (batch.ids != EOS_ID)
    draw = rng.random(batch.ids.shape) < rate
    chosen = eligible & draw
    masked = copy.deepcopy(batch)
    rows, cols = np.nonzero(chosen)
    targets = batch.ids[rows, cols].copy()
    masked.ids[rows, cols] = MASK_ID
    return masked, (rows, cols, targets)
