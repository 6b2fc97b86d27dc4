"""Encoder-decoder transformer with an integrated grammar parser head.

The parser head runs on source word embeddings (no positional encoding),
produces distances/heights, and the resulting dependency matrix guides
self-attention in the configured encoder layers. MLM reconstruction is read
off the encoder output; translation goes through the decoder.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from . import data
from .attention import AttentionMode, EncoderLayer, DecoderLayer
from .config import ModelConfig
from .estimator import dependency_matrix_batch
from .inducer import GrammarInducer

INIT_STD = 0.02


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32,
                         device=None) -> torch.Tensor:
    pos = torch.arange(length, dtype=dtype, device=device).unsqueeze(1)
    idx = torch.arange(0, dim, 2, dtype=dtype, device=device)
    angle = pos / torch.pow(torch.tensor(10000.0, dtype=dtype, device=device),
                            idx / dim)
    pe = torch.zeros(length, dim, dtype=dtype, device=device)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle)
    return pe


class SyntaxTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.model_dim
        self.src_embed = nn.Embedding(config.src_vocab_size, d,
                                      padding_idx=data.PAD_ID)
        if config.share_vocab:
            self.tgt_embed = self.src_embed
        else:
            self.tgt_embed = nn.Embedding(config.tgt_vocab_size, d,
                                          padding_idx=data.PAD_ID)
        self.inducer = GrammarInducer(
            d, conv_layers=config.conv_layers, half_width=config.conv_half_width,
            bpe_dim=config.bpe_dim, heads=config.heads,
            use_bpe=config.use_bpe_embeddings)
        self.encoder_layers = nn.ModuleList(
            EncoderLayer(d, config.heads, config.ffn_dim)
            for _ in range(config.encoder_layers))
        self.decoder_layers = nn.ModuleList(
            DecoderLayer(d, config.heads, config.ffn_dim)
            for _ in range(config.decoder_layers))
        self.output_proj = nn.Linear(d, config.tgt_vocab_size)
        if config.tie_mlm_head:
            self.mlm_proj = None
        else:
            self.mlm_proj = nn.Linear(d, config.src_vocab_size)
        self.reset_parameters()

    def reset_parameters(self):
        for p in self.parameters():
            if p.dim() > 1:
                nn.init.trunc_normal_(p, std=INIT_STD)
            else:
                nn.init.zeros_(p)
        # norms and the temperature keep their structural initial values
        for mod in self.modules():
            if isinstance(mod, nn.LayerNorm):
                nn.init.ones_(mod.weight)
                nn.init.zeros_(mod.bias)
        with torch.no_grad():
            self.inducer.raw_mu.fill_(math.log(math.e - 1.0))
            self.src_embed.weight[data.PAD_ID].zero_()
            self.tgt_embed.weight[data.PAD_ID].zero_()

    def _positions(self, length: int, ref: torch.Tensor) -> torch.Tensor:
        return sinusoidal_positions(length, self.config.model_dim,
                                    dtype=ref.dtype, device=ref.device)

    def parse(self, src_ids, bpe_labels, pad_mask):
        """Run the parser head only; returns (tau, height, mu)."""
        emb = self.src_embed(src_ids)
        _, tau, height, mu = self.inducer(emb, bpe_labels, pad_mask)
        return tau, height, mu

    def encode(self, src_ids, bpe_labels, pad_mask, lengths,
               need_mask: bool | None = None):
        """Returns (encoder_output, tau, height, mu, dep_matrix)."""
        cfg = self.config
        emb = self.src_embed(src_ids)
        tau = height = mu = dep = None
        if need_mask is None:
            need_mask = bool(cfg.masked_layers)
        if need_mask:
            _, tau, height, mu = self.inducer(emb, bpe_labels, pad_mask)
            dep = dependency_matrix_batch(tau, height, mu, lengths)
        x = emb * math.sqrt(cfg.model_dim) + self._positions(emb.shape[1], emb)
        for idx, layer in enumerate(self.encoder_layers, start=1):
            layer_mask = dep if (dep is not None and idx in cfg.masked_layers) else None
            x = layer(x, dep_mask=layer_mask, mode=cfg.attention_mode,
                      key_padding_mask=pad_mask)
        return x, tau, height, mu, dep

    def decode(self, memory, memory_pad_mask, tgt_in_ids, tgt_pad_mask):
        emb = self.tgt_embed(tgt_in_ids) * math.sqrt(self.config.model_dim)
        x = emb + self._positions(emb.shape[1], emb)
        for layer in self.decoder_layers:
            x = layer(x, memory, memory_padding_mask=memory_pad_mask,
                      tgt_padding_mask=tgt_pad_mask)
        return self.output_proj(x)

    def mlm_logits(self, encoder_output):
        if self.mlm_proj is not None:
            return self.mlm_proj(encoder_output)
        return F.linear(encoder_output, self.src_embed.weight)

    def forward(self, src_ids, bpe_labels, src_pad_mask, src_lengths,
                tgt_in_ids, tgt_pad_mask):
        memory, tau, height, mu, dep = self.encode(
            src_ids, bpe_labels, src_pad_mask, src_lengths)
        logits = self.decode(memory, src_pad_mask, tgt_in_ids, tgt_pad_mask)
        return logits, (tau, height, mu, dep)


def label_smoothed_nll(logits, targets, smoothing: float, ignore_id: int):
    """Mean label-smoothed cross-entropy over non-ignored positions."""
    logp = F.log_softmax(logits, dim=-1)
    keep = targets != ignore_id
    if not keep.any():
        return logits.new_zeros(())
    logp = logp[keep]
    tgt = targets[keep]
    nll = -logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
    smooth = -logp.mean(dim=-1)
    return ((1.0 - smoothing) * nll + smoothing * smooth).mean()


def mlm_head_loss(encoder_output, targets, model: SyntaxTransformer):
    """Mean cross-entropy at the masked positions; zero when nothing is masked.

    ``targets`` is the (rows, cols, original_ids) triple from MLM masking.
    """
    rows, cols, ids = targets
    if len(ids) == 0:
        return encoder_output.new_zeros(())
    logits = model.mlm_logits(encoder_output[rows, cols])
    ids = torch.as_tensor(ids, device=logits.device, dtype=torch.long)
    return F.cross_entropy(logits, ids)


def combined_loss(mlm_loss, mt_loss, lam: float):
    """lambda * L_MLM + (1 - lambda) * L_MT."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    for name, loss in (("mlm", mlm_loss), ("mt", mt_loss)):
        value = loss.detach() if torch.is_tensor(loss) else loss
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise NumericalError(f"non-finite {name} loss: {value}")
    return lam * mlm_loss + (1.0 - lam) * mt_loss
