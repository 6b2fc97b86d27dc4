"""Syntax-guided self-attention and the transformer layers built on it.

Two regimes for consuming the dependency matrix: from-scratch training gates
sigmoid-activated scores directly by the matrix; the pretrained-style regime
keeps softmax and reweights it by (matrix + 1) so the mask plays an auxiliary
role. Unguided layers are plain softmax attention.
"""

from __future__ import annotations

import math
from enum import Enum

import torch
import torch.nn.functional as F
from torch import nn


class AttentionMode(Enum):
    FROM_SCRATCH = "from_scratch"
    PRETRAINED_STYLE = "pretrained_style"


def guided_attention(dep_mask: torch.Tensor, q: torch.Tensor, k: torch.Tensor,
                     v: torch.Tensor, mode: AttentionMode,
                     pad_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Single attention map gated by the dependency matrix.

    Computes W * S(QK^T/sqrt(d)) @ V where S is sigmoid and W = dep_mask in
    FROM_SCRATCH mode, or S is softmax and W = dep_mask + 1 in
    PRETRAINED_STYLE mode. ``pad_mask`` is True at real key positions; pad
    columns get -inf before softmax / are zeroed after sigmoid.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"shape mismatch: q {tuple(q.shape)} k {tuple(k.shape)} "
                         f"v {tuple(v.shape)}")
    if dep_mask is not None and dep_mask.shape[-1] != k.shape[-2]:
        raise ValueError(f"dependency mask {tuple(dep_mask.shape)} does not cover "
                         f"{k.shape[-2]} keys")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mode is AttentionMode.FROM_SCRATCH:
        gate = torch.sigmoid(scores)
        if pad_mask is not None:
            gate = gate * pad_mask.to(gate.dtype).unsqueeze(-2)
    else:
        if pad_mask is not None:
            scores = scores.masked_fill(~pad_mask.unsqueeze(-2), float("-inf"))
        gate = torch.softmax(scores, dim=-1)
    weight = dep_mask if mode is AttentionMode.FROM_SCRATCH else dep_mask + 1
    return (weight * gate) @ v


class MultiHeadAttention(nn.Module):
    """Multi-head attention with optional dependency-matrix guidance.

    The in-projection is packed (q, k, v stacked) so weights map one-to-one
    onto ``nn.MultiheadAttention`` for equivalence checks. One dependency
    matrix is shared across all heads of the layer.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.in_proj_weight = nn.Parameter(torch.empty(3 * dim, dim))
        self.in_proj_bias = nn.Parameter(torch.zeros(3 * dim))
        self.out_proj = nn.Linear(dim, dim)
        nn.init.xavier_uniform_(self.in_proj_weight)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, query, key, value, *, dep_mask=None,
                mode: AttentionMode = AttentionMode.FROM_SCRATCH,
                key_padding_mask=None, causal: bool = False):
        """key_padding_mask is True at real positions. dep_mask is (B, L, L)."""
        wq, wk, wv = self.in_proj_weight.chunk(3)
        bq, bk, bv = self.in_proj_bias.chunk(3)
        q = self._split(F.linear(query, wq, bq))
        k = self._split(F.linear(key, wk, bk))
        v = self._split(F.linear(value, wv, bv))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if causal:
            n, m = scores.shape[-2:]
            future = torch.triu(torch.ones(n, m, dtype=torch.bool,
                                           device=scores.device), diagonal=1)
            scores = scores.masked_fill(future, float("-inf"))
        if dep_mask is not None and mode is AttentionMode.FROM_SCRATCH:
            gate = torch.sigmoid(scores)
            if key_padding_mask is not None:
                gate = gate * key_padding_mask.to(gate.dtype)[:, None, None, :]
            attn = dep_mask.unsqueeze(1) * gate
        else:
            if key_padding_mask is not None:
                scores = scores.masked_fill(
                    ~key_padding_mask[:, None, None, :], float("-inf"))
            attn = torch.softmax(scores, dim=-1)
            if dep_mask is not None:
                attn = (dep_mask.unsqueeze(1) + 1) * attn
        out = attn @ v
        b, _, n, _ = out.shape
        out = out.transpose(1, 2).reshape(b, n, self.dim)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class EncoderLayer(nn.Module):
    """Post-norm transformer encoder layer; attention is guided when a
    dependency matrix is supplied, plain softmax otherwise."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.ffn = FeedForward(dim, ffn_dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x, *, dep_mask=None,
                mode: AttentionMode = AttentionMode.FROM_SCRATCH,
                key_padding_mask=None):
        attn = self.self_attn(x, x, x, dep_mask=dep_mask, mode=mode,
                              key_padding_mask=key_padding_mask)
        x = self.norm1(x + attn)
        x = self.norm2(x + self.ffn(x))
        return x


class DecoderLayer(nn.Module):
    """Post-norm decoder layer; self- and cross-attention are never guided."""

    def __init__(self, dim: int, heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads)
        self.cross_attn = MultiHeadAttention(dim, heads)
        self.ffn = FeedForward(dim, ffn_dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)

    def forward(self, x, memory, *, memory_padding_mask=None,
                tgt_padding_mask=None):
        attn = self.self_attn(x, x, x, mode=AttentionMode.PRETRAINED_STYLE,
                              key_padding_mask=tgt_padding_mask, causal=True)
        x = self.norm1(x + attn)
        cross = self.cross_attn(x, memory, memory,
                                mode=AttentionMode.PRETRAINED_STYLE,
                                key_padding_mask=memory_padding_mask)
        x = self.norm2(x + cross)
        x = self.norm3(x + self.ffn(x))
        return x
