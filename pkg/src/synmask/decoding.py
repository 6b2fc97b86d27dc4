"""Beam-search decoding with length-penalty-normalized scores."""

from __future__ import annotations

import torch

from . import data
from .model import SyntaxTransformer
from .trainer import batch_to_tensors


class DecodeError(ValueError):
    pass


def _length_normalized(logprob: float, length: int, penalty: float) -> float:
    return logprob / (max(length, 1) ** penalty)


@torch.no_grad()
def translate(model: SyntaxTransformer, source: data.TokenSequence,
              beam_size: int | None = None, length_penalty: float | None = None,
              max_len: int | None = None) -> list[int]:
    """Decode one source sequence; returns target ids without BOS/EOS.

    beam_size == 1 is exactly a greedy argmax rollout. Hypothesis scores are
    cumulative log-probabilities divided by length**penalty.
    """
    if len(source) == 0:
        raise DecodeError("empty source sequence")
    cfg = model.config
    beam_size = cfg.beam_size if beam_size is None else beam_size
    length_penalty = cfg.length_penalty if length_penalty is None else length_penalty
    if beam_size < 1:
        raise DecodeError(f"beam size must be >= 1, got {beam_size}")
    if max_len is None:
        max_len = 2 * len(source) + 10

    model.eval()
    batch = data.make_batch([source], cfg.max_len)
    src_ids, src_labels, src_pad, src_len = batch_to_tensors(batch)
    memory, *_ = model.encode(src_ids, src_labels, src_pad, src_len)

    beams = [([data.BOS_ID], 0.0)]     # (tokens, cumulative logprob)
    finished: list[tuple[list[int], float]] = []
    for _ in range(max_len):
        candidates = []
        for tokens, score in beams:
            tgt = torch.tensor([tokens], dtype=torch.long)
            tgt_pad = torch.ones_like(tgt, dtype=torch.bool)
            logits = model.decode(memory, src_pad, tgt, tgt_pad)
            logp = torch.log_softmax(logits[0, -1], dim=-1)
            top = torch.topk(logp, min(beam_size, logp.numel()))
            for val, idx in zip(top.values.tolist(), top.indices.tolist()):
                candidates.append((tokens + [idx], score + val))
        candidates.sort(key=lambda c: c[1], reverse=True)
        beams = []
        for tokens, score in candidates:
            if tokens[-1] == data.EOS_ID:
                finished.append((tokens, score))
            else:
                beams.append((tokens, score))
            if len(beams) >= beam_size:
                break
        if not beams:
            break
        if finished and len(finished) >= beam_size:
            best_open = _length_normalized(beams[0][1], len(beams[0][0]), length_penalty)
            best_done = max(_length_normalized(s, len(t), length_penalty)
                            for t, s in finished)
            if best_done >= best_open:
                break
    if not finished:
        finished = [(tokens + [data.EOS_ID], score) for tokens, score in beams]
    tokens, _ = max(finished, key=lambda c: _length_normalized(
        c[1], len(c[0]), length_penalty))
    out = tokens[1:]
    if out and out[-1] == data.EOS_ID:
        out = out[:-1]
    return out


def translate_corpus(model: SyntaxTransformer, sources, tgt_vocab: data.Vocabulary,
                     beam_size=None, length_penalty=None):
    """Decode a list of sources; returns surface token lists, order-preserving."""
    out = []
    for src in sources:
        ids = translate(model, src, beam_size, length_penalty)
        out.append(tgt_vocab.decode(ids))
    return out
