"""Command-line entry points: train, translate, parse, score-trees, bleu,
sweep-lambda.

Exit codes: 0 ok, 2 usage/config error, 3 numerical failure during training.
Every command is deterministic given the seed in its config.
"""

from __future__ import annotations

import os
import sys
from contextlib import contextmanager
from pathlib import Path

import click
import numpy as np
import torch

from . import data, trees
from .bleu import BleuError, corpus_bleu
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, config_to_text, load_config
from .data import CorpusError
from .decoding import DecodeError, translate as beam_translate
from .estimator import EstimatorError
from .model import NumericalError
from .trainer import Trainer, batch_to_tensors, build_model, latest_checkpoint
from .trees import TreeError

_USAGE_ERRORS = (ConfigError, CorpusError, CheckpointError, TreeError,
                 BleuError, DecodeError, EstimatorError)


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@contextmanager
def _guard():
    try:
        yield
    except _USAGE_ERRORS as exc:
        _fail(2, str(exc))
    except NumericalError as exc:
        _fail(3, str(exc))


@contextmanager
def _output_lock(output_dir: Path):
    """One run per output dir; concurrent runs must use distinct dirs."""
    output_dir.mkdir(parents=True, exist_ok=True)
    lock = output_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        _fail(2, f"output dir {output_dir} is locked by another run "
                 f"(remove {lock} if stale)")
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _load_vocabs(run_config: RunConfig, output_dir: Path, build_if_missing=True):
    src_path = output_dir / "vocab.src.txt"
    tgt_path = output_dir / "vocab.tgt.txt"
    if src_path.exists() and tgt_path.exists():
        return data.Vocabulary.load(src_path), data.Vocabulary.load(tgt_path)
    if not build_if_missing:
        raise ConfigError("output_dir", f"no vocabulary files under {output_dir}")
    if run_config.model.share_vocab:
        vocab = data.build_vocab([run_config.train_src, run_config.train_tgt])
        src_vocab = tgt_vocab = vocab
    else:
        src_vocab = data.build_vocab([run_config.train_src])
        tgt_vocab = data.build_vocab([run_config.train_tgt])
    src_vocab.save(src_path)
    tgt_vocab.save(tgt_path)
    return src_vocab, tgt_vocab


def _read_pairs(run_config: RunConfig, src_vocab, tgt_vocab, split="train"):
    src = data.read_corpus(getattr(run_config, f"{split}_src"), src_vocab)
    tgt = data.read_corpus(getattr(run_config, f"{split}_tgt"), tgt_vocab)
    if len(src) != len(tgt):
        raise CorpusError(f"{split} corpora differ in length: "
                          f"{len(src)} vs {len(tgt)}")
    return list(zip(src, tgt))


@click.group()
def main():
    """Grammar-induction transformer: training, decoding, parsing, scoring."""


def _run_training(run_config: RunConfig, max_steps: int | None = None,
                  quiet: bool = False):
    run_config.validate(require_train=True)
    output_dir = Path(run_config.output_dir)
    with _output_lock(output_dir):
        src_vocab, tgt_vocab = _load_vocabs(run_config, output_dir)
        model = build_model(run_config, src_vocab, tgt_vocab)
        (output_dir / "config.effective.cfg").write_text(
            config_to_text(run_config), encoding="utf-8")
        pairs = _read_pairs(run_config, src_vocab, tgt_vocab, "train")
        trainer = Trainer(model, run_config, pairs)
        resume = latest_checkpoint(output_dir)
        if resume is not None:
            from .checkpoint import load_payload
            trainer.load_state(load_payload(resume))
            if not quiet:
                click.echo(f"resuming from {resume} at step {trainer.step}")
        steps = max_steps if max_steps is not None else run_config.model.max_steps
        trainer.run(steps, metrics_path=output_dir / "metrics.tsv",
                    checkpoint_dir=output_dir,
                    checkpoint_every=run_config.checkpoint_every)
        metrics = output_dir / "metrics.tsv"
        if metrics.exists():
            from .report import plot_loss_curves
            plot_loss_curves(metrics, output_dir / "loss_curves.png")
        if not quiet:
            click.echo(f"trained to step {trainer.step}; "
                       f"outputs in {output_dir}")
        return trainer


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
@click.option("--max-steps", type=int, default=None,
              help="Override the step budget from the config.")
def train(config_path, max_steps):
    """Train a model per CONFIG_PATH; resumable from the last checkpoint."""
    with _guard():
        run_config = load_config(config_path)
        _run_training(run_config, max_steps)


def _load_model_and_vocabs(config_path, checkpoint_path):
    run_config = load_config(config_path)
    run_config.validate(require_train=False)
    model, ckpt_config, _ = load_checkpoint(checkpoint_path)
    output_dir = Path(run_config.output_dir or ckpt_config.output_dir)
    src_vocab, tgt_vocab = _load_vocabs(run_config, output_dir,
                                        build_if_missing=False)
    if len(src_vocab) != model.config.src_vocab_size or \
            len(tgt_vocab) != model.config.tgt_vocab_size:
        raise CheckpointError(
            f"vocabulary mismatch: checkpoint expects "
            f"{model.config.src_vocab_size}/{model.config.tgt_vocab_size}, "
            f"files have {len(src_vocab)}/{len(tgt_vocab)}")
    return run_config, model, src_vocab, tgt_vocab


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
@click.argument("input_file", type=click.Path(exists=True))
@click.argument("output_file", type=click.Path())
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(exists=True))
@click.option("--beam", type=int, default=None, help="Beam size (default from config).")
@click.option("--length-penalty", type=float, default=None)
def translate(config_path, input_file, output_file, checkpoint_path, beam,
              length_penalty):
    """Decode INPUT_FILE line by line into OUTPUT_FILE."""
    with _guard():
        _, model, src_vocab, tgt_vocab = _load_model_and_vocabs(
            config_path, checkpoint_path)
        with open(input_file, encoding="utf-8") as fin, \
                open(output_file, "w", encoding="utf-8") as fout:
            for line in fin:
                tokens = line.split()
                if not tokens:
                    fout.write("\n")
                    continue
                seq = data.encode_sequence(tokens, src_vocab)
                ids = beam_translate(model, seq, beam, length_penalty)
                fout.write(" ".join(tgt_vocab.decode(ids)) + "\n")


@main.command()
@click.argument("config_path", type=click.Path(exists=True))
@click.argument("input_file", type=click.Path(exists=True))
@click.argument("output_file", type=click.Path())
@click.option("--checkpoint", "checkpoint_path", required=True,
              type=click.Path(exists=True))
@click.option("--dump-profile", is_flag=True,
              help="Also write per-line tau/height vectors next to the trees.")
@click.option("--collapse", is_flag=True,
              help="Merge subword leaves into whole words in the output trees.")
def parse(config_path, input_file, output_file, checkpoint_path, dump_profile,
          collapse):
    """Run the parser head and emit one bracketed binary tree per line."""
    with _guard():
        _, model, src_vocab, _ = _load_model_and_vocabs(
            config_path, checkpoint_path)
        profile_fh = None
        if dump_profile:
            profile_fh = open(str(output_file) + ".profile", "w", encoding="utf-8")
        with open(input_file, encoding="utf-8") as fin, \
                open(output_file, "w", encoding="utf-8") as fout:
            for line in fin:
                tokens = line.split()
                if not tokens:
                    fout.write("\n")
                    continue
                tau, height = parse_sentence(model, src_vocab, tokens)
                tree = trees.distance_to_tree(tau, tokens)
                if collapse:
                    labels = data.assign_bpe_labels(tokens)
                    tree = trees.collapse_subwords(tree, labels)
                fout.write(trees.tree_to_string(tree) + "\n")
                if profile_fh is not None:
                    profile_fh.write(
                        " ".join(f"{v:.6f}" for v in tau) + "\t" +
                        " ".join(f"{v:.6f}" for v in height) + "\n")
        if profile_fh is not None:
            profile_fh.close()


@torch.no_grad()
def parse_sentence(model, src_vocab, tokens):
    """Distances and heights over the real tokens (BOS/EOS stripped)."""
    seq = data.encode_sequence(tokens, src_vocab)
    batch = data.make_batch([seq], model.config.max_len)
    ids, labels, pad, _ = batch_to_tensors(batch)
    model.eval()
    tau, height, _ = model.parse(ids, labels, pad)
    n = len(tokens)
    return tau[0, 1:n].tolist(), height[0, 1:n + 1].tolist()


@main.command(name="score-trees")
@click.argument("pred_file", type=click.Path(exists=True))
@click.argument("gold_file", type=click.Path(exists=True))
@click.option("--per-sentence", "per_sentence", type=click.Path(), default=None,
              help="Write a per-sentence P/R/F1 TSV to this path.")
@click.option("--figure", type=click.Path(), default=None,
              help="Render a per-sentence F1 histogram to this path.")
def score_trees(pred_file, gold_file, per_sentence, figure):
    """Micro-averaged unlabeled bracket P/R/F1 of PRED_FILE against GOLD_FILE."""
    with _guard():
        pred_lines = Path(pred_file).read_text(encoding="utf-8").splitlines()
        gold_lines = Path(gold_file).read_text(encoding="utf-8").splitlines()
        pred_lines = [l for l in pred_lines if l.strip()]
        gold_lines = [l for l in gold_lines if l.strip()]
        if len(pred_lines) != len(gold_lines):
            raise TreeError(f"line count mismatch: {len(pred_lines)} predicted "
                            f"vs {len(gold_lines)} gold")
        pairs = []
        sentence_rows = []
        for lineno, (pline, gline) in enumerate(zip(pred_lines, gold_lines), 1):
            ptokens, pspans = trees.pred_tree_from_line(pline, lineno)
            gtokens, gspans = trees.gold_tree_from_line(gline, lineno)
            if len(ptokens) != len(gtokens):
                raise TreeError(f"line {lineno}: token count mismatch "
                                f"({len(ptokens)} predicted vs {len(gtokens)} gold)")
            pairs.append((pspans, gspans))
            sentence_rows.append((lineno,) + trees.bracket_prf(pspans, gspans))
        precision, recall, f1 = trees.corpus_prf(pairs)
        click.echo(f"P {100 * precision:.2f} R {100 * recall:.2f} "
                   f"F1 {100 * f1:.2f}")
        if per_sentence:
            with open(per_sentence, "w", encoding="utf-8") as fh:
                fh.write("line\tprecision\trecall\tf1\n")
                for row in sentence_rows:
                    fh.write("{}\t{:.4f}\t{:.4f}\t{:.4f}\n".format(*row))
        if figure:
            from .report import plot_f1_histogram
            plot_f1_histogram([row[3] for row in sentence_rows], figure,
                              corpus_f1=f1)


@main.command()
@click.argument("hyp_file", type=click.Path(exists=True))
@click.argument("ref_file", type=click.Path(exists=True))
def bleu(hyp_file, ref_file):
    """Corpus BLEU of HYP_FILE against REF_FILE, printed to 2 decimals."""
    with _guard():
        hyps = [l.split() for l in Path(hyp_file).read_text(
            encoding="utf-8").splitlines()]
        refs = [l.split() for l in Path(ref_file).read_text(
            encoding="utf-8").splitlines()]
        score = corpus_bleu(hyps, refs)
        click.echo(f"BLEU {score:.2f}")


@main.command(name="sweep-lambda")
@click.argument("config_path", type=click.Path(exists=True))
@click.option("--start", type=float, default=0.2, show_default=True)
@click.option("--stop", type=float, default=0.6, show_default=True)
@click.option("--step", type=float, default=0.05, show_default=True)
def sweep_lambda(config_path, start, stop, step):
    """Train across a lambda grid and tabulate validation BLEU."""
    with _guard():
        base = load_config(config_path)
        base.validate(require_train=True)
        if not base.valid_src or not base.valid_tgt:
            raise ConfigError("valid_src", "sweep-lambda needs validation corpora")
        root = Path(base.output_dir)
        root.mkdir(parents=True, exist_ok=True)
        grid = []
        lam = start
        while lam <= stop + 1e-9:
            grid.append(round(lam, 4))
            lam += step
        results = []
        for lam in grid:
            run_config = load_config(config_path)
            run_config.model.lam = lam
            run_config.output_dir = str(root / f"lambda_{lam:.2f}")
            trainer = _run_training(run_config, quiet=True)
            src_vocab, tgt_vocab = _load_vocabs(
                run_config, Path(run_config.output_dir), build_if_missing=False)
            sources = data.read_corpus(run_config.valid_src, src_vocab)
            refs = [l.split() for l in Path(run_config.valid_tgt).read_text(
                encoding="utf-8").splitlines() if l.strip()]
            hyps = []
            for seq in sources:
                ids = beam_translate(trainer.model, seq)
                hyps.append(tgt_vocab.decode(ids))
            score = corpus_bleu(hyps, refs)
            results.append((lam, score))
            click.echo(f"lambda {lam:.2f}\tBLEU {score:.2f}")
        with open(root / "sweep.tsv", "w", encoding="utf-8") as fh:
            fh.write("lambda\tbleu\n")
            for lam, score in results:
                fh.write(f"{lam:.2f}\t{score:.4f}\n")
        from .report import plot_lambda_sweep
        plot_lambda_sweep([r[0] for r in results], [r[1] for r in results],
                          root / "sweep.png")


if __name__ == "__main__":
    main()
