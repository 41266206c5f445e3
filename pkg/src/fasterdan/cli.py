"""Command-line entry point: gen, train, decode, eval, bench."""

from __future__ import annotations

import functools
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from .bench import run_bench, run_ordered
from .decode import DecodeLimits, assemble_transcript, decode, oracle_chooser
from .metrics import evaluate
from .net import load_checkpoint, set_deterministic
from .synthgen import STRIDE, SynthConfig, generate_corpus, read_corpus, read_pgm, write_corpus
from .train import (
    TrainConfig,
    load_config,
    optimizer_from_meta,
    save_trained,
    train_loop,
    vocab_from_meta,
    write_metric_log,
)
from .vocab import Vocabulary, read_truth, serialize_document

DEFAULT_CHARS = "abcdefghijklmnopqrst"


def _fail_cleanly(fn):
    """Documented errors become a one-line diagnostic and exit status 1."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValueError, KeyError, OSError) as exc:
            msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
            raise click.ClickException(str(msg).splitlines()[0] if str(msg) else type(exc).__name__)
    return wrapper


def _parse_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in text.split(":"))
    except ValueError:
        raise ValueError(f"expected lo:hi, got {text!r}") from None
    return lo, hi


def _check_image(image: np.ndarray, path) -> None:
    h, w = image.shape
    if h % STRIDE[0] or w % STRIDE[1]:
        raise ValueError(f"{path}: {h}x{w} image is not a multiple of the encoder stride {STRIDE}")


def _load_model(path):
    model, meta = load_checkpoint(path)
    return model, meta, vocab_from_meta(meta)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Two-pass handwritten document recognition toolkit."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if os.environ.get("FDAN_DETERMINISTIC") == "1":
        set_deterministic(True)


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--num-docs", default=100, show_default=True, type=int)
@click.option("--min-lines", default=2, show_default=True, type=int)
@click.option("--max-lines", default=6, show_default=True, type=int)
@click.option("--chars-per-line", default="4:10", show_default=True, help="lo:hi characters per line.")
@click.option("--classes", default="P", show_default=True, help="Comma-separated layout classes; empty for none.")
@click.option("--chars", default=DEFAULT_CHARS, show_default=True, help="Character alphabet.")
@click.option("--max-entities", default=2, show_default=True, type=int)
@click.option("--noise", default=0.0, show_default=True, type=float)
@click.option("--max-top-lines", default=SynthConfig.max_top_lines, show_default=True, type=int,
              help="Random blank line pitches above the first line.")
@click.option("--gap-prob", default=SynthConfig.gap_prob, show_default=True, type=float,
              help="Chance of a blank line pitch above each line.")
@click.option("--seed", default=0, show_default=True, type=int)
@_fail_cleanly
def gen(out_dir, num_docs, min_lines, max_lines, chars_per_line, classes, chars, max_entities, noise,
        max_top_lines, gap_prob, seed):
    """Write a synthetic corpus (manifest, PGM images, truth files)."""
    if num_docs < 0:
        raise ValueError("--num-docs must be >= 0")
    lo, hi = _parse_range(chars_per_line)
    class_list = tuple(c.strip() for c in classes.split(",") if c.strip())
    vocab = Vocabulary(tuple(chars), class_list)
    config = SynthConfig(min_lines, max_lines, lo, hi, max_entities, class_list or (), noise,
                         max_top_lines=max_top_lines, gap_prob=gap_prob)
    manifest = write_corpus(out_dir, generate_corpus(num_docs, config, vocab, seed), vocab)
    click.echo(f"wrote {num_docs} documents to {manifest}")


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False))
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="key = value training config.")
@click.option("--mode", type=click.Choice(["dan", "fasterdan"]), help="Overrides the config file.")
@click.option("--variant", help="Overrides the config file.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--log", "log_path", type=click.Path(dir_okay=False), help="Metric CSV (default: <out>.csv).")
@click.option("--val-data", type=click.Path(file_okay=False), help="Held-out corpus for validation CER.")
@click.option("--seed", type=int, help="Overrides the config file.")
@click.option("--resume", type=click.Path(dir_okay=False), help="Continue from a checkpoint written by train.")
@click.option("--stop-after", type=int, help="Stop after this many epochs in total (resumable).")
@_fail_cleanly
def train(data_dir, config_path, mode, variant, out_path, log_path, val_data, seed, resume, stop_after):
    """Train a model on a corpus written by gen."""
    overrides = {k: v for k, v in (("mode", mode), ("variant", variant), ("seed", seed)) if v is not None}
    config = load_config(config_path, **overrides) if config_path else TrainConfig(**overrides)
    samples, vocab = read_corpus(data_dir)
    val_samples = read_corpus(val_data)[0] if val_data else ()
    model, optimizer, start = None, None, 0
    if resume:
        model, meta, saved_vocab = _load_model(resume)
        if saved_vocab != vocab:
            raise ValueError(f"{resume}: checkpoint vocabulary differs from the corpus")
        if (meta.get("mode"), meta.get("variant")) != (config.mode, config.variant):
            raise ValueError(f"{resume}: checkpoint was trained as {meta.get('mode')}/{meta.get('variant')}")
        optimizer = optimizer_from_meta(meta, model)
        start = int(meta.get("epochs_done", 0))
    result = train_loop(config, samples, vocab, val_samples, model=model, optimizer=optimizer,
                        start_epoch=start, stop_epoch=stop_after)
    save_trained(out_path, result.model, vocab, config, result.optimizer, result.epochs_done)
    write_metric_log(log_path or f"{out_path}.csv", result.log)
    if result.rejected_batches:
        click.echo(f"rejected {result.rejected_batches} batches with non-finite gradients", err=True)
    click.echo(f"saved {out_path} after {result.epochs_done} epochs")


@main.command("decode")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--image", "image_path", required=True, type=click.Path(dir_okay=False))
@click.option("--mode", type=click.Choice(["dan", "fasterdan"]), help="Default: the mode the model was trained in.")
@click.option("--variant", help="Default: the variant the model was trained with.")
@click.option("--oracle", "oracle_path", type=click.Path(dir_okay=False),
              help="Truth file whose tokens replace argmax choices.")
@click.option("--dump-trace", "trace_path", type=click.Path(dir_okay=False))
@click.option("--seed", default=0, show_default=True, type=int)
@_fail_cleanly
def decode_cmd(model_path, image_path, mode, variant, oracle_path, trace_path, seed):
    """Transcribe one PGM image; prints the serialized transcript."""
    torch.manual_seed(seed)
    model, meta, vocab = _load_model(model_path)
    mode = mode or meta.get("mode", "fasterdan")
    variant = variant or (meta.get("variant", "base") if mode == "fasterdan" else "base")
    image = read_pgm(image_path)
    _check_image(image, image_path)
    chooser = None
    if oracle_path:
        truth, _ = read_truth(oracle_path)
        chooser = oracle_chooser(serialize_document(truth, vocab), vocab, mode)
    trace = decode(model, image, vocab, mode, variant, chooser=chooser)
    click.echo(vocab.to_string(assemble_transcript(trace, vocab)))
    if trace_path:
        Path(trace_path).write_text(trace.report(vocab), encoding="utf-8")


@main.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False))
@click.option("--mode", type=click.Choice(["dan", "fasterdan"]))
@click.option("--variant")
@click.option("--oracle", is_flag=True, help="Decode with ground-truth choices.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), help="Per-document CSV report.")
@click.option("--jobs", default=1, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@_fail_cleanly
def eval_cmd(model_path, data_dir, mode, variant, oracle, csv_path, jobs, seed):
    """CER, WER, first-pass CER, LOER and mAP_CER over a corpus."""
    torch.manual_seed(seed)
    model, meta, vocab = _load_model(model_path)
    mode = mode or meta.get("mode", "fasterdan")
    variant = variant or (meta.get("variant", "base") if mode == "fasterdan" else "base")
    samples, corpus_vocab = read_corpus(data_dir)
    if corpus_vocab != vocab:
        raise ValueError(f"{data_dir}: corpus vocabulary differs from the model's")

    def run(sample):
        image, doc = sample
        chooser = oracle_chooser(serialize_document(doc, vocab), vocab, mode) if oracle else None
        return decode(model, image, vocab, mode, variant, chooser=chooser)

    traces = run_ordered(run, samples, jobs)
    report = evaluate([t.tokens for t in traces], [doc for _, doc in samples], vocab, traces,
                      names=[f"doc{k:05d}" for k in range(len(samples))])
    click.echo(report.table(), nl=False)
    if csv_path:
        Path(csv_path).write_text(report.to_csv(), encoding="utf-8")


@main.command()
@click.option("--model-dan", required=True, type=click.Path(dir_okay=False))
@click.option("--model-fdan", required=True, type=click.Path(dir_okay=False))
@click.option("--data", "data_dir", required=True, type=click.Path(file_okay=False))
@click.option("--oracle", is_flag=True, help="Decode with ground-truth choices.")
@click.option("--jobs", default=1, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@_fail_cleanly
def bench(model_dan, model_fdan, data_dir, oracle, jobs, seed):
    """Invocation counts and wall clock of both engines on one corpus."""
    torch.manual_seed(seed)
    dan_model, _, dan_vocab = _load_model(model_dan)
    fdan_model, _, fdan_vocab = _load_model(model_fdan)
    samples, vocab = read_corpus(data_dir)
    if not samples:
        raise ValueError(f"{data_dir}: empty manifest")
    if not dan_vocab == fdan_vocab == vocab:
        raise ValueError("models and corpus must share one vocabulary")
    limits = DecodeLimits()
    click.echo(run_bench(dan_model, fdan_model, samples, vocab, oracle, limits, jobs).table(), nl=False)


if __name__ == "__main__":
    main()
