import random

import pytest
import torch

from synmask import data
from synmask.config import ModelConfig, RunConfig


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        src_vocab_size=40, tgt_vocab_size=40,
        encoder_layers=2, decoder_layers=2, heads=2,
        model_dim=16, ffn_dim=32, conv_layers=2, bpe_dim=8,
        masked_layers=frozenset({1}), lam=0.3, warmup_steps=10,
        max_steps=20, batch_size=4, seed=0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def write_copy_corpus(tmp_path, n_lines=40, vocab_size=20, min_len=3,
                      max_len=8, seed=0, prefix="train"):
    rng = random.Random(seed)
    words = [f"w{i}" for i in range(vocab_size)]
    lines = [" ".join(rng.choice(words) for _ in range(rng.randint(min_len, max_len)))
             for _ in range(n_lines)]
    src = tmp_path / f"{prefix}.src"
    tgt = tmp_path / f"{prefix}.tgt"
    src.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tgt.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return src, tgt


def tiny_run_config(tmp_path, **model_overrides) -> RunConfig:
    src, tgt = write_copy_corpus(tmp_path)
    cfg = RunConfig(model=tiny_model_config(**model_overrides))
    cfg.train_src = str(src)
    cfg.train_tgt = str(tgt)
    cfg.output_dir = str(tmp_path / "out")
    return cfg


def encode_line(line, vocab):
    return data.encode_sequence(line.split(), vocab)
