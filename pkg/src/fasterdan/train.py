"""Teacher-forced training of both decoding modes."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch.nn import functional as F

from . import masks
from .decode import DecodeLimits, decode, image_tensor
from .net import Model, ModelConfig, build_model, save_checkpoint
from .scheme import Scheme
from .vocab import DocumentStructure, Entity, LineSegmentedTarget, Vocabulary, segment_lines, serialize_document

log = logging.getLogger(__name__)

IGNORE = -100


@dataclass
class TrainConfig:
    mode: str = "fasterdan"
    variant: str = "base"
    lr: float = 1e-4
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    # curriculum: line cap grows from curriculum_start_lines to the corpus maximum
    curriculum_start_lines: int = 3
    curriculum_warmup: float = 0.2
    curriculum_end: float = 0.6
    val_every: int = 5
    val_docs: int = 0
    d: int = 64
    layers: int = 2
    heads: int = 4
    ffn: int = 0
    dropout: float = 0.0
    shift_x: int = 0
    shift_y: int = 0
    crop_prob: float = 0.0  # chance of training on a random line window of a fitting document
    # blank 32-px rows inserted at random above the page and above lines
    jitter_top: int = 0
    jitter_gap: float = 0.0
    dtype: str = "float32"
    grad_clip: float = 0.0

    def __post_init__(self):
        Scheme(self.mode, self.variant)  # validates the pair
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if not (0.0 <= self.curriculum_warmup <= self.curriculum_end <= 1.0):
            raise ValueError("curriculum bounds must satisfy 0 <= warmup <= end <= 1")
        if not 0.0 <= self.crop_prob <= 1.0:
            raise ValueError("crop_prob must lie in [0, 1]")
        if self.jitter_top < 0 or not 0.0 <= self.jitter_gap <= 1.0:
            raise ValueError("jitter_top >= 0 and jitter_gap in [0, 1] required")
        if self.curriculum_start_lines < 1:
            raise ValueError("curriculum_start_lines must be positive")

    @property
    def scheme(self) -> Scheme:
        return Scheme(self.mode, self.variant)

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


def parse_config(text: str, **overrides) -> TrainConfig:
    """``key = value`` lines, ``#`` starts a comment."""
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values: dict = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"config line {n}: unknown key {key!r}")
        kind = kinds[key]
        values[key] = {"int": int, "float": float}.get(kind, str)(value)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def load_config(path: str | Path, **overrides) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), **overrides)


# Targets and losses


def fasterdan_inputs(seg: LineSegmentedTarget, vocab: Vocabulary):
    """Grid coords (with the <sot> row), input ids and target ids per coord.

    The output at ``(j, 0)`` predicts the first token of row ``j + 1``; the
    output at ``(j, i >= 1)`` predicts column ``i + 1`` of its own row. Column
    1 is therefore never a target.
    """
    coords = masks.grid_coords(masks.grid_lengths(seg))
    rows = [(vocab.sot_id,)] + list(seg.lines)
    ids, targets = [], []
    for j, i in coords:
        line = rows[j]
        ids.append(line[0] if i <= 1 else line[i - 1])
        if i == 0:
            targets.append(rows[j + 1][0] if j + 1 < len(rows) else IGNORE)
        else:
            targets.append(line[i] if i < len(line) else IGNORE)
    return list(coords), ids, targets


def dan_inputs(tokens: Sequence[int], vocab: Vocabulary):
    coords = [(0, t) for t in range(len(tokens))]
    return coords, [vocab.sot_id, *tokens[:-1]], list(tokens)


def fasterdan_target_grid(seg: LineSegmentedTarget, vocab: Vocabulary) -> np.ndarray:
    """[(L + 1), n_max + 1] target ids aligned with the output grid."""
    grid = np.full((seg.L + 1, seg.n_max + 1), IGNORE, dtype=np.int64)
    coords, _, targets = fasterdan_inputs(seg, vocab)
    for (j, i), t in zip(coords, targets):
        grid[j, i] = t
    return grid


def masked_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                           ignore_index=IGNORE)


def loss_fasterdan(logits: torch.Tensor, seg: LineSegmentedTarget, vocab: Vocabulary) -> torch.Tensor:
    """Mean cross-entropy over grid outputs ``[(L + 1), n_max + 1, |A|]``;
    column-1 targets and padding are excluded."""
    target = torch.from_numpy(fasterdan_target_grid(seg, vocab))
    if logits.shape[:2] != target.shape:
        raise ValueError(f"logits grid {tuple(logits.shape[:2])} != target grid {tuple(target.shape)}")
    return masked_cross_entropy(logits, target)


def loss_dan(logits: torch.Tensor, tokens: Sequence[int]) -> torch.Tensor:
    """``logits[t]`` is the output for input ``t`` (``<sot>`` at 0) and predicts ``tokens[t]``."""
    if logits.shape[0] != len(tokens):
        raise ValueError(f"{logits.shape[0]} outputs for {len(tokens)} targets")
    return masked_cross_entropy(logits, torch.tensor(list(tokens)))


# Optimizer


class NonFiniteGradient(ValueError):
    pass


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    rejected: int = 0


@torch.no_grad()
def adam_step(params: list, grads: list, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    if len(params) != len(grads):
        raise ValueError("one gradient per parameter")
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            state.rejected += 1
            raise NonFiniteGradient("non-finite gradient, batch rejected")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = betas
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


# Batching


@dataclass
class Batch:
    images: torch.Tensor
    sizes: list
    ids: torch.Tensor
    positions: torch.Tensor
    mask: torch.Tensor
    targets: torch.Tensor


def make_batch(samples, vocab: Vocabulary, scheme: Scheme, d: int,
               dtype: torch.dtype = torch.float32) -> Batch:
    """Pads documents to a common size; padded query rows only see themselves
    and padded keys are invisible to real queries."""
    items, row_lengths = [], []
    for image, doc in samples:
        tokens = serialize_document(doc, vocab)
        if scheme.mode == "dan":
            items.append(dan_inputs(tokens, vocab))
            row_lengths.append(None)
        else:
            seg = segment_lines(tokens, vocab)
            items.append(fasterdan_inputs(seg, vocab))
            row_lengths.append([1] + [len(line) for line in seg.lines])
    b = len(samples)
    q = max(len(c) for c, _, _ in items)
    ids = torch.full((b, q), vocab.pad_id, dtype=torch.long)
    targets = torch.full((b, q), IGNORE, dtype=torch.long)
    positions = torch.zeros((b, q, d), dtype=dtype)
    mask = torch.eye(q, dtype=torch.bool).repeat(b, 1, 1)
    for k, (coords, tok, tgt) in enumerate(items):
        n = len(coords)
        ids[k, :n] = torch.tensor(tok)
        targets[k, :n] = torch.tensor(tgt)
        positions[k, :n] = torch.from_numpy(scheme.positions(coords, d, row_lengths[k]))
        mask[k, :n, :n] = torch.from_numpy(scheme.visible(coords, coords))
    sizes = [img.shape for img, _ in samples]
    h = max(s[0] for s in sizes)
    w = max(s[1] for s in sizes)
    images = torch.zeros((b, h, w), dtype=dtype)
    for k, (img, _) in enumerate(samples):
        images[k, :img.shape[0], :img.shape[1]] = image_tensor(img, dtype)
    return Batch(images, sizes, ids, positions, mask, targets)


def forward_batch(model: Model, batch: Batch) -> torch.Tensor:
    features = model.encode_image(batch.images, batch.sizes)
    queries = model.embed(batch.ids, batch.positions)
    return model.project_logits(model.decoder_forward(queries, features, batch.mask))


# Curriculum and loop


def random_shift(image: np.ndarray, max_dx: int, max_dy: int, rng: np.random.Generator) -> np.ndarray:
    """Translates the page content by up to ``max_dx``/``max_dy`` pixels.
    Content that leaves the canvas wraps around, so the shift must stay
    within the blank margins."""
    dx = int(rng.integers(-max_dx, max_dx + 1)) if max_dx else 0
    dy = int(rng.integers(-max_dy, max_dy + 1)) if max_dy else 0
    return np.roll(image, (dy, dx), axis=(0, 1))


def line_bands(image: np.ndarray) -> list[tuple[int, int]]:
    """Half-open row ranges of consecutive inked rows, top to bottom."""
    inked = np.concatenate([[False], (image > 0).any(axis=1), [False]])
    edges = np.flatnonzero(inked[1:] != inked[:-1])
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def crop_lines(image: np.ndarray, doc: DocumentStructure, start: int, count: int,
               row_multiple: int = 32):
    """Cuts the sub-document made of lines ``start .. start+count-1``.

    The window starts on a multiple of ``row_multiple`` so glyphs keep their
    phase against the encoder stride, and its height is padded to a multiple
    of it. Returns None when ink bands do not map one-to-one onto lines or the
    window would take in ink from a neighbouring line.
    """
    bands = line_bands(image)
    n = len(bands)
    if n != len(doc.lines) or not 0 <= start < start + count <= n:
        return None
    top, bottom = bands[start][0], bands[start + count - 1][1]
    y0 = top - top % row_multiple
    y1 = y0 + -(-(bottom - y0) // row_multiple) * row_multiple
    if (start and y0 < bands[start - 1][1]) or (start + count < n and y1 > bands[start + count][0]):
        return None
    window = image[y0:y1]
    if window.shape[0] < y1 - y0:
        window = np.pad(window, ((0, y1 - y0 - window.shape[0]), (0, 0)))
    entities, k = [], 0
    for e in doc.entities:
        kept = tuple(line for i, line in enumerate(e.lines, start=k) if start <= i < start + count)
        k += len(e.lines)
        if kept:
            entities.append(Entity(e.cls, kept))
    return np.ascontiguousarray(window), DocumentStructure(tuple(entities))


def jitter_rows(image: np.ndarray, rng: np.random.Generator, max_top: int, gap_prob: float,
                row_multiple: int = 32) -> np.ndarray:
    """Re-lays a page out with blank row slots: up to ``max_top`` above it and
    one between two inked slots with chance ``gap_prob``. Existing blank runs
    never grow, so a one-slot gap stays distinct from a wider entity break.
    Slots are only split where no glyph crosses the boundary."""
    h, w = image.shape
    if h % row_multiple:
        return image
    slots = image.reshape(h // row_multiple, row_multiple, w)
    blank = np.zeros((row_multiple, w), dtype=image.dtype)
    out = [blank] * int(rng.integers(0, max_top + 1))
    for k, slot in enumerate(slots):
        prev = slots[k - 1] if k else None
        if (k and slot.any() and prev.any() and not (slot[0].any() and prev[-1].any())
                and rng.random() < gap_prob):
            out.append(blank)
        out.append(slot)
    return np.concatenate(out)


def line_count(doc: DocumentStructure) -> int:
    return len(doc.lines)


def curriculum_cap(fraction: float, config: TrainConfig, max_lines: int) -> int:
    """Line cap for the epoch at ``fraction`` of training: flat during warmup,
    linear growth up to the corpus maximum at ``curriculum_end``."""
    start = min(config.curriculum_start_lines, max_lines)
    if fraction <= config.curriculum_warmup:
        return start
    if fraction >= config.curriculum_end:
        return max_lines
    span = config.curriculum_end - config.curriculum_warmup
    return int(round(start + (fraction - config.curriculum_warmup) / span * (max_lines - start)))


def curriculum_samples(samples, cap: int, crop_prob: float, rng: np.random.Generator) -> list:
    """One epoch of shuffled training pairs under a line cap.

    Documents longer than the cap contribute a random window of ``cap``
    lines; shorter ones are cut to a random window with chance ``crop_prob``.
    Documents whose lines cannot be located in the image are used whole when
    they fit and skipped otherwise.
    """
    out = []
    for k in rng.permutation(len(samples)):
        image, doc = samples[k]
        n = line_count(doc)
        if n > cap:
            count = cap
        elif n > 1 and crop_prob and rng.random() < crop_prob:
            count = int(rng.integers(1, n + 1))
        else:
            out.append((image, doc))
            continue
        cut = crop_lines(image, doc, int(rng.integers(0, n - count + 1)), count)
        if cut is not None:
            out.append(cut)
        elif n <= cap:
            out.append((image, doc))
    return out


def model_meta(vocab: Vocabulary, config: TrainConfig) -> dict:
    return {
        "characters": vocab.characters,
        "layout_classes": vocab.layout_classes,
        "root": vocab.root,
        "mode": config.mode,
        "variant": config.variant,
    }


def vocab_from_meta(meta: dict) -> Vocabulary:
    return Vocabulary(tuple(meta["characters"]), tuple(meta["layout_classes"]), meta.get("root", "D"))


def init_model(config: TrainConfig, vocab: Vocabulary) -> Model:
    cfg = ModelConfig(vocab.size, d=config.d, layers=config.layers, heads=config.heads,
                      ffn=config.ffn, dropout=config.dropout)
    return build_model(cfg, seed=config.seed, dtype=config.torch_dtype)


def evaluate_cer(model: Model, samples, vocab: Vocabulary, scheme: Scheme,
                 limits: Optional[DecodeLimits] = None) -> tuple[float, float]:
    """(CER, first-pass CER) of greedy decoding over ``samples``."""
    from .metrics import corpus_cer, first_pass_cer

    limits = limits or DecodeLimits(n_max_flat=400, l_max=64, n_max_line=64)
    traces, truths = [], []
    for image, doc in samples:
        traces.append(decode(model, image, vocab, scheme.mode, scheme.variant, limits))
        truths.append(doc)
    preds = [t.tokens for t in traces]
    cer = corpus_cer(truths, preds, vocab)
    fp = first_pass_cer(traces, truths, vocab) if scheme.mode == "fasterdan" else float("nan")
    return cer, fp


@dataclass
class TrainResult:
    model: Model
    log: list
    rejected_batches: int
    steps: int
    optimizer: AdamState = field(default_factory=AdamState)
    epochs_done: int = 0


def train_loop(config: TrainConfig, samples, vocab: Vocabulary, val_samples=(),
               model: Optional[Model] = None, on_epoch=None, optimizer: Optional[AdamState] = None,
               start_epoch: int = 0, stop_epoch: Optional[int] = None) -> TrainResult:
    """Trains on a fixed corpus of (image, DocumentStructure) pairs.

    Each epoch draws a curriculum-capped, shuffled view of the corpus from a
    generator seeded by (seed, epoch), so stopping after ``stop_epoch`` and
    resuming from there with the saved model and optimizer reproduces an
    uninterrupted run. Validation CER (full greedy decoding) is logged every
    ``val_every`` epochs and after the last one.
    """
    scheme = config.scheme
    stop = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    if not 0 <= start_epoch <= stop:
        raise ValueError(f"cannot run epochs {start_epoch}..{stop}")
    model = model or init_model(config, vocab)
    params = [p for p in model.parameters()]
    state = optimizer or AdamState()
    max_lines = max((line_count(doc) for _, doc in samples), default=1)
    rows = []
    steps = 0
    for epoch in range(start_epoch, stop):
        rng = np.random.default_rng([config.seed, epoch])
        torch.manual_seed(config.seed * 1_000_003 + epoch)
        cap = curriculum_cap(epoch / config.epochs, config, max_lines)
        epoch_samples = curriculum_samples(samples, cap, config.crop_prob, rng)
        if config.jitter_top or config.jitter_gap:
            epoch_samples = [(jitter_rows(img, rng, config.jitter_top, config.jitter_gap), doc)
                             for img, doc in epoch_samples]
        losses = []
        model.train()
        for start in range(0, len(epoch_samples), config.batch_size):
            chunk = epoch_samples[start:start + config.batch_size]
            if config.shift_x or config.shift_y:
                chunk = [(random_shift(img, config.shift_x, config.shift_y, rng), doc) for img, doc in chunk]
            batch = make_batch(chunk, vocab, scheme, model.cfg.d, model.dtype)
            model.zero_grad(set_to_none=True)
            loss = masked_cross_entropy(forward_batch(model, batch), batch.targets)
            loss.backward()
            grads = [p.grad for p in params]
            if config.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
            try:
                adam_step(params, grads, state, config.lr)
            except NonFiniteGradient:
                log.warning("epoch %d: rejected batch with non-finite gradient", epoch)
                continue
            losses.append(loss.item())
            steps += 1
        row = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"),
               "val_cer": float("nan"), "val_first_pass_cer": float("nan")}
        last = epoch == config.epochs - 1
        if val_samples and config.val_every > 0 and ((epoch + 1) % config.val_every == 0 or last):
            model.eval()
            val = list(val_samples)[: config.val_docs or None]
            row["val_cer"], row["val_first_pass_cer"] = evaluate_cer(model, val, vocab, scheme)
        log.info("epoch %d cap %d loss %.4f val_cer %.4f", epoch, cap, row["loss"], row["val_cer"])
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row, model)
    model.eval()
    return TrainResult(model, rows, state.rejected, steps, state, stop)


def write_metric_log(path: str | Path, rows: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "val_cer", "val_first_pass_cer"])
        for r in rows:
            writer.writerow([r["epoch"], f"{r['loss']:.6f}", f"{r['val_cer']:.6f}",
                             f"{r['val_first_pass_cer']:.6f}"])


def save_trained(path: str | Path, model: Model, vocab: Vocabulary, config: TrainConfig,
                 optimizer: Optional[AdamState] = None, epochs_done: Optional[int] = None) -> None:
    """Checkpoint with enough optimizer state to resume training."""
    meta = model_meta(vocab, config)
    meta["epochs_done"] = config.epochs if epochs_done is None else epochs_done
    if optimizer is not None and optimizer.m:
        meta["adam_step"] = optimizer.step
        meta["adam_rejected"] = optimizer.rejected
        state = {}
        for k, (m, v) in enumerate(zip(optimizer.m, optimizer.v)):
            state[f"adam.m.{k:03d}"] = m.detach().cpu().numpy()
            state[f"adam.v.{k:03d}"] = v.detach().cpu().numpy()
        meta["state"] = state
    save_checkpoint(path, model, meta)


def optimizer_from_meta(meta: dict, model: Model) -> AdamState:
    """Adam state saved by ``save_trained``; fresh state when none was stored."""
    saved = meta.get("state", {})
    if "adam_step" not in meta:
        return AdamState()
    n = len(list(model.parameters()))
    try:
        m = [torch.from_numpy(saved[f"adam.m.{k:03d}"].copy()) for k in range(n)]
        v = [torch.from_numpy(saved[f"adam.v.{k:03d}"].copy()) for k in range(n)]
    except KeyError as exc:
        raise ValueError(f"checkpoint optimizer state incomplete: missing {exc.args[0]}") from None
    return AdamState(int(meta["adam_step"]), m, v, int(meta.get("adam_rejected", 0)))
