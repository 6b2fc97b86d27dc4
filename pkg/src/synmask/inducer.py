"""Parser head: grammar features, syntactic distance and height.

Grammar features come from a stack of symmetric (non-causal) convolutions
followed by one multi-head self-attention block. Projected BPE embeddings are
added to the convolution input stream position-wise, so pieces of one
segmented word share grammatical status. Distance is read off adjacent
feature pairs (kernel width 2), height off single positions (kernel width 1).
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .attention import MultiHeadAttention, AttentionMode

NUM_BPE_LABELS = 3


class GrammarInducer(nn.Module):
    def __init__(self, dim: int, conv_layers: int = 3, half_width: int = 1,
                 bpe_dim: int = 256, heads: int = 4, use_bpe: bool = True):
        super().__init__()
        if conv_layers < 1:
            raise ValueError("need at least one convolution layer")
        self.dim = dim
        self.half_width = half_width
        self.use_bpe = use_bpe
        kernel = 2 * half_width + 1
        self.convs = nn.ModuleList(
            nn.Conv1d(dim, dim, kernel, padding=half_width)
            for _ in range(conv_layers))
        self.conv_norms = nn.ModuleList(nn.LayerNorm(dim) for _ in range(conv_layers))
        self.attn = MultiHeadAttention(dim, heads)
        if use_bpe:
            self.bpe_embed = nn.Embedding(NUM_BPE_LABELS, bpe_dim)
            self.bpe_proj = nn.Linear(bpe_dim, dim)
            self.bpe_norm = nn.LayerNorm(dim)
        # distance head: pairwise conv (no inner bias), tanh, linear to scalar
        self.dist_conv = nn.Conv1d(dim, dim, 2, bias=False)
        self.dist_out = nn.Linear(dim, 1)
        # height head: pointwise conv with inner bias, tanh, linear to scalar
        self.height_conv = nn.Conv1d(dim, dim, 1, bias=True)
        self.height_out = nn.Linear(dim, 1)
        # temperature, kept positive through softplus; softplus(raw) = 1 at init
        self.raw_mu = nn.Parameter(torch.tensor(math.log(math.e - 1.0)))

    @property
    def mu(self) -> torch.Tensor:
        return F.softplus(self.raw_mu)

    def induce_features(self, embeddings: torch.Tensor, bpe_labels: torch.Tensor,
                        pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        """(B, L, d) embeddings + (B, L) labels -> (B, L, d) grammar features.

        Pad positions are zeroed before every convolution and masked out of
        the attention so they never influence real positions.
        """
        if embeddings.shape[-1] != self.dim:
            raise ValueError(f"expected embedding dim {self.dim}, "
                             f"got {embeddings.shape[-1]}")
        if embeddings.shape[:2] != bpe_labels.shape:
            raise ValueError("bpe_labels must match embeddings batch/length")
        x = embeddings
        if self.use_bpe:
            x = x + self.bpe_norm(self.bpe_proj(self.bpe_embed(bpe_labels)))
        for conv, norm in zip(self.convs, self.conv_norms):
            if pad_mask is not None:
                x = x * pad_mask.to(x.dtype).unsqueeze(-1)
            x = conv(x.transpose(1, 2)).transpose(1, 2)
            x = norm(F.relu(x))
        if pad_mask is not None:
            x = x * pad_mask.to(x.dtype).unsqueeze(-1)
        # residual around the attention block so local conv detail survives
        # the global mixing
        s = x + self.attn(x, x, x, mode=AttentionMode.PRETRAINED_STYLE,
                          key_padding_mask=pad_mask)
        return s

    def compute_distance(self, features: torch.Tensor) -> torch.Tensor:
        """(B, L, d) -> (B, L-1) distances over adjacent-token gaps."""
        b, n, _ = features.shape
        if n < 2:
            return features.new_zeros(b, 0)
        pair = self.dist_conv(features.transpose(1, 2)).transpose(1, 2)
        return self.dist_out(torch.tanh(pair)).squeeze(-1)

    def compute_height(self, features: torch.Tensor) -> torch.Tensor:
        """(B, L, d) -> (B, L) heights."""
        h = self.height_conv(features.transpose(1, 2)).transpose(1, 2)
        return self.height_out(torch.tanh(h)).squeeze(-1)

    def forward(self, embeddings, bpe_labels, pad_mask=None):
        """Returns (features, tau, height, mu)."""
        s = self.induce_features(embeddings, bpe_labels, pad_mask)
        return s, self.compute_distance(s), self.compute_height(s), self.mu

    def conv_stack(self, embeddings, bpe_labels, pad_mask=None):
        """Convolution output before the attention block (for locality checks)."""
        x = embeddings
        if self.use_bpe:
            x = x + self.bpe_norm(self.bpe_proj(self.bpe_embed(bpe_labels)))
        for conv, norm in zip(self.convs, self.conv_norms):
            if pad_mask is not None:
                x = x * pad_mask.to(x.dtype).unsqueeze(-1)
            x = conv(x.transpose(1, 2)).transpose(1, 2)
            x = norm(F.relu(x))
        return x
