"""Training loop: combined MLM+MT objective, inverse-sqrt schedule, metrics log.

Each step samples its batch and its MLM mask from RNGs derived from
(seed, step), so a run resumed from a checkpoint continues with exactly the
metrics an uninterrupted run would have produced.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch

from . import data
from .checkpoint import save_checkpoint, load_payload
from .config import RunConfig
from .model import (NumericalError, SyntaxTransformer, combined_loss,
                    label_smoothed_nll, mlm_head_loss)

METRICS_HEADER = "step\tmt_loss\tmlm_loss\tcombined\tgrad_norm\tlr"


def inverse_sqrt_lr(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear warmup to peak_lr, then decay proportional to 1/sqrt(step)."""
    step = max(step, 1)
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    return peak_lr * math.sqrt(warmup_steps / step)


def build_model(run_config: RunConfig, src_vocab, tgt_vocab) -> SyntaxTransformer:
    """Instantiate the model with vocabulary sizes filled in, seeded init."""
    cfg = run_config.model
    cfg.src_vocab_size = len(src_vocab)
    cfg.tgt_vocab_size = len(src_vocab) if cfg.share_vocab else len(tgt_vocab)
    torch.manual_seed(cfg.seed)
    return SyntaxTransformer(cfg)


def batch_to_tensors(batch: data.Batch, device=None):
    ids = torch.from_numpy(batch.ids)
    labels = torch.from_numpy(batch.bpe_labels)
    pad = torch.from_numpy(batch.pad_mask)
    lengths = torch.from_numpy(batch.lengths)
    if device is not None:
        ids, labels, pad, lengths = (t.to(device) for t in (ids, labels, pad, lengths))
    return ids, labels, pad, lengths


class Trainer:
    def __init__(self, model: SyntaxTransformer, run_config: RunConfig,
                 train_pairs, step: int = 0):
        self.model = model
        self.run_config = run_config
        self.cfg = run_config.model
        self.pairs = train_pairs
        self.step = step
        self.optimizer = torch.optim.Adam(
            model.parameters(), lr=self.cfg.peak_lr,
            betas=(self.cfg.adam_beta1, self.cfg.adam_beta2),
            weight_decay=self.cfg.weight_decay)

    def _step_rng(self, step: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, step])

    def sample_batch(self, step: int):
        rng = self._step_rng(step)
        n = len(self.pairs)
        replace = n < self.cfg.batch_size
        idx = rng.choice(n, size=min(self.cfg.batch_size, n) if not replace
                         else self.cfg.batch_size, replace=replace)
        src = data.make_batch([self.pairs[i][0] for i in idx], self.cfg.max_len)
        tgt = data.make_batch([self.pairs[i][1] for i in idx], self.cfg.max_len)
        masked_src, targets = data.apply_mlm_mask(src, self.cfg.mlm_rate, rng)
        return src, tgt, masked_src, targets

    def _dump_profile_stats(self, tau, height):
        def stats(t):
            if t is None or t.numel() == 0:
                return "empty"
            t = t.detach()
            return (f"min={t.min():.4g} max={t.max():.4g} "
                    f"mean={t.mean():.4g} nonfinite={(~torch.isfinite(t)).sum()}")
        return f"tau[{stats(tau)}] height[{stats(height)}]"

    def train_step(self, src, tgt, masked_src, targets) -> dict:
        """One optimizer update on the combined loss; returns step metrics."""
        cfg = self.cfg
        model = self.model
        model.train()
        lr = inverse_sqrt_lr(self.step + 1, cfg.peak_lr, cfg.warmup_steps)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        src_ids, src_labels, src_pad, src_len = batch_to_tensors(src)
        tgt_ids, _, tgt_pad, _ = batch_to_tensors(tgt)
        tau = height = None

        # MT pass on the clean source. Decoder sees BOS..y_{t-1}, predicts y_t.
        mt_grad = cfg.lam < 1.0
        with torch.set_grad_enabled(mt_grad):
            logits, (tau, height, _, _) = model(
                src_ids, src_labels, src_pad, src_len,
                tgt_ids[:, :-1], tgt_pad[:, :-1])
            mt_targets = tgt_ids[:, 1:].masked_fill(~tgt_pad[:, 1:], data.PAD_ID)
            mt_loss = label_smoothed_nll(logits, mt_targets,
                                         cfg.label_smoothing, data.PAD_ID)

        # MLM pass: masked source through the same encoder (parser head included).
        rows, cols, ids = targets
        mlm_grad = cfg.lam > 0.0 and len(ids) > 0
        if len(ids) > 0:
            m_ids, m_labels, m_pad, m_len = batch_to_tensors(masked_src)
            with torch.set_grad_enabled(mlm_grad):
                enc_out, m_tau, m_height, _, _ = model.encode(
                    m_ids, m_labels, m_pad, m_len)
                mlm_loss = mlm_head_loss(enc_out, targets, model)
            if tau is None:
                tau, height = m_tau, m_height
        else:
            mlm_loss = torch.zeros(())

        try:
            combined = combined_loss(mlm_loss.detach(), mt_loss.detach(), cfg.lam)
        except NumericalError as exc:
            raise NumericalError(
                f"{exc}; {self._dump_profile_stats(tau, height)}") from exc

        total = 0.0
        if mlm_grad:
            total = total + cfg.lam * mlm_loss
        if mt_grad:
            total = total + (1.0 - cfg.lam) * mt_loss
        self.optimizer.zero_grad(set_to_none=True)
        if torch.is_tensor(total):
            total.backward()
        sq = 0.0
        for p in model.parameters():
            if p.grad is not None:
                sq += float(p.grad.detach().pow(2).sum())
        grad_norm = math.sqrt(sq)
        if not math.isfinite(grad_norm):
            raise NumericalError(
                f"non-finite gradient norm; {self._dump_profile_stats(tau, height)}")
        self.optimizer.step()
        self.step += 1
        return {
            "step": self.step,
            "mt_loss": float(mt_loss.detach()),
            "mlm_loss": float(mlm_loss.detach()),
            "combined": float(combined),
            "grad_norm": grad_norm,
            "lr": lr,
        }

    def run(self, max_steps: int, metrics_path=None, checkpoint_dir=None,
            checkpoint_every: int = 1000, log_every: int = 1,
            progress=None):
        """Train until ``max_steps``; append metrics lines; write checkpoints."""
        metrics_fh = None
        if metrics_path is not None:
            fresh = not Path(metrics_path).exists()
            metrics_fh = open(metrics_path, "a", encoding="utf-8")
            if fresh:
                metrics_fh.write(METRICS_HEADER + "\n")
        try:
            while self.step < max_steps:
                batch = self.sample_batch(self.step)
                metrics = self.train_step(*batch)
                if metrics_fh is not None and metrics["step"] % log_every == 0:
                    metrics_fh.write(
                        "{step}\t{mt_loss:.6f}\t{mlm_loss:.6f}\t{combined:.6f}"
                        "\t{grad_norm:.6f}\t{lr:.8f}\n".format(**metrics))
                    metrics_fh.flush()
                if progress is not None:
                    progress(metrics)
                if checkpoint_dir is not None and (
                        self.step % checkpoint_every == 0 or self.step == max_steps):
                    path = Path(checkpoint_dir) / f"checkpoint_{self.step}.pt"
                    save_checkpoint(path, self.model, self.run_config,
                                    self.optimizer, self.step)
        finally:
            if metrics_fh is not None:
                metrics_fh.close()

    def load_state(self, payload: dict):
        """Resume from a checkpoint payload (parameters, optimizer, step)."""
        self.model.load_state_dict(payload["model"])
        if payload.get("optimizer") is not None:
            self.optimizer.load_state_dict(payload["optimizer"])
        self.step = payload["step"]
        torch.set_rng_state(payload["torch_rng"])


def latest_checkpoint(checkpoint_dir):
    paths = sorted(Path(checkpoint_dir).glob("checkpoint_*.pt"),
                   key=lambda p: int(p.stem.split("_")[1]))
    return paths[-1] if paths else None
