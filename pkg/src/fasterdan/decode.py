"""Greedy inference: sequential decoding and two-pass decoding with
multi-target queries."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .net import Model
from .scheme import Scheme
from .vocab import Vocabulary, segment_lines

Coord = tuple[int, int]
Chooser = Callable[[list, torch.Tensor], list]


@dataclass
class DecodeLimits:
    n_max_flat: int = 3000
    l_max: int = 256
    n_max_line: int = 256

    def __post_init__(self):
        if min(self.n_max_flat, self.l_max, self.n_max_line) < 1:
            raise ValueError("decode limits must be positive")


@dataclass
class DecodeTrace:
    mode: str
    tokens: list[int] = field(default_factory=list)
    lines: list[list[int]] = field(default_factory=list)
    finished: list[bool] = field(default_factory=list)
    forced: list[bool] = field(default_factory=list)
    invocations: int = 0
    first_pass_invocations: int = 0
    second_pass_invocations: int = 0
    hit_limit: bool = False
    hit_line_limit: bool = False
    hit_char_limit: bool = False
    wall_clock: float = 0.0
    logits: Optional[dict] = None

    @property
    def n_pred(self) -> int:
        return max((len(line) for line in self.lines), default=0)

    @property
    def published_invocations(self) -> int:
        """Count that also charges the first-token duplication as a step."""
        if self.mode == "dan":
            return self.invocations
        return len(self.lines) + self.n_pred

    def report(self, vocab: Vocabulary) -> str:
        out = [f"mode: {self.mode}", f"invocations: {self.invocations}"]
        if self.mode == "dan":
            out.append(f"tokens: {vocab.to_string(self.tokens)!r}")
        else:
            out += [
                f"first pass invocations: {self.first_pass_invocations}",
                f"second pass invocations: {self.second_pass_invocations}",
                f"published-convention invocations: {self.published_invocations}",
                "line  len  done  forced  tokens",
            ]
            for j, line in enumerate(self.lines):
                out.append(
                    f"{j + 1:>4}  {len(line):>3}  {'y' if self.finished[j] else 'n':>4}  "
                    f"{'y' if self.forced[j] else 'n':>6}  {vocab.to_string(line)!r}"
                )
        out.append(f"hit limit: {self.hit_limit}")
        out.append(f"wall clock: {self.wall_clock:.6f}s")
        return "\n".join(out) + "\n"


def argmax_chooser(coords: list, logits: torch.Tensor) -> list:
    return logits.argmax(dim=-1).tolist()


def oracle_chooser(truth: Sequence[int], vocab: Vocabulary, mode: str) -> Chooser:
    """Chooser that answers with the ground-truth token for each query."""
    truth = list(truth)
    if mode == "dan":
        def choose(coords, logits):
            return [truth[i] if i < len(truth) else vocab.eot_id for _, i in coords]
        return choose

    lines = segment_lines(truth, vocab).lines

    def choose(coords, logits):
        out = []
        for j, i in coords:
            if i == 0:
                out.append(lines[j][0] if j < len(lines) else vocab.eot_id)
            else:
                line = lines[j - 1]
                out.append(line[i] if i < len(line) else vocab.eol_id)
        return out
    return choose


def image_tensor(image: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.asarray(image, dtype=np.float64) / 255.0, dtype=dtype)


class _Runner:
    """Feeds token blocks through the decoder, either incrementally through a
    cache or by recomputing the whole processed set every call.

    A token's positional encoding is fixed when it is fed, so both routes see
    the same positions even when they depend on line lengths.
    """

    def __init__(self, model: Model, scheme: Scheme, features, use_cache: bool,
                 record: Optional[dict]):
        self.model, self.scheme, self.features = model, scheme, features
        self.cache = model.new_cache() if use_cache else None
        self.coords: list[Coord] = []
        self.ids: list[int] = []
        self.positions: list[np.ndarray] = []
        self.calls = 0
        self.record = record

    def run(self, coords: list[Coord], ids: list[int], row_lengths=None) -> torch.Tensor:
        self.calls += 1
        keys = self.coords + coords
        pos = self.scheme.positions(coords, self.model.cfg.d, row_lengths)
        if self.cache is not None:
            mask = torch.from_numpy(self.scheme.visible(coords, keys))
            q = self.model.embed(torch.tensor(ids), torch.from_numpy(pos))
            out = self.model.decoder_forward(q, self.features, mask, self.cache, coords)[0]
        else:
            all_ids = self.ids + ids
            mask = torch.from_numpy(self.scheme.visible(keys, keys))
            all_pos = np.concatenate(self.positions + [pos])
            q = self.model.embed(torch.tensor(all_ids), torch.from_numpy(all_pos))
            out = self.model.decoder_forward(q, self.features, mask)[0, len(self.coords):]
        self.coords += coords
        self.ids += ids
        self.positions.append(pos)
        logits = self.model.project_logits(out)
        if self.record is not None:
            for c, row in zip(coords, logits):
                self.record[c] = row.detach().clone()
        return logits


def _prepare(model: Model, image) -> tuple:
    if isinstance(image, np.ndarray):
        image = image_tensor(image, model.dtype)
    return model.encode_image(image)


@torch.no_grad()
def decode_dan(
    model: Model,
    image,
    vocab: Vocabulary,
    limits: Optional[DecodeLimits] = None,
    chooser: Optional[Chooser] = None,
    use_cache: bool = True,
    record_logits: bool = False,
) -> DecodeTrace:
    limits = limits or DecodeLimits()
    chooser = chooser or argmax_chooser
    start = time.perf_counter()
    trace = DecodeTrace("dan", logits={} if record_logits else None)
    runner = _Runner(model, Scheme("dan"), _prepare(model, image), use_cache, trace.logits)
    feed = vocab.sot_id
    t = 0
    while True:
        logits = runner.run([(0, t)], [feed])
        tok = chooser([(0, t)], logits)[0]
        trace.tokens.append(tok)
        t += 1
        if tok == vocab.eot_id:
            break
        if len(trace.tokens) >= limits.n_max_flat:
            trace.hit_limit = True
            break
        feed = tok
    trace.invocations = trace.first_pass_invocations = runner.calls
    trace.wall_clock = time.perf_counter() - start
    return trace


@torch.no_grad()
def _row_lengths(lines, pending) -> list[int]:
    """Grid row lengths as known now: ``<sot>``, then every decoded line, and
    a single token for a row whose first token is only being fed."""
    rows = [1] + [len(line) for line in lines]
    top = max(j for j, _ in pending)
    return rows + [1] * (top + 1 - len(rows))


def decode_fasterdan(
    model: Model,
    image,
    vocab: Vocabulary,
    limits: Optional[DecodeLimits] = None,
    chooser: Optional[Chooser] = None,
    use_cache: bool = True,
    record_logits: bool = False,
    variant: str = "base",
) -> DecodeTrace:
    limits = limits or DecodeLimits()
    chooser = chooser or argmax_chooser
    start = time.perf_counter()
    trace = DecodeTrace("fasterdan", logits={} if record_logits else None)
    runner = _Runner(model, Scheme("fasterdan", variant), _prepare(model, image), use_cache, trace.logits)

    # pass 1: line-initial tokens, one per call; row 0 holds <sot>
    lines = trace.lines
    pending: list[Coord] = [(0, 0)]
    pending_ids = [vocab.sot_id]
    while True:
        logits = runner.run(pending, pending_ids, _row_lengths(lines, pending))
        row = len(lines)
        tok = chooser([(row, 0)], logits[-1:])[0]
        lines.append([tok])
        pending, pending_ids = [(row + 1, 0)], [tok]
        if tok == vocab.eot_id:
            break
        if len(lines) >= limits.l_max:
            trace.hit_limit = trace.hit_line_limit = True
            break
    trace.first_pass_invocations = runner.calls

    # pass 2: every unfinished line advances by one token per call
    n = len(lines)
    active = [vocab.is_char(line[0]) for line in lines]
    trace.finished = [not a for a in active]
    trace.forced = [False] * n
    if any(active):
        # the last line-initial token has not been fed yet; it joins the
        # first block together with the duplicated first tokens
        for j in range(n):
            if active[j]:
                pending.append((j + 1, 1))
                pending_ids.append(lines[j][0])
        t = 1
        while True:
            logits = runner.run(pending, pending_ids, _row_lengths(lines, pending))
            queries = [(c, k) for k, c in enumerate(pending) if c[1] == t and active[c[0] - 1]]
            chosen = chooser([c for c, _ in queries], logits[[k for _, k in queries]])
            grew = []
            for ((row, _), _), tok in zip(queries, chosen):
                j = row - 1
                if tok == vocab.eol_id or vocab.is_char(tok):
                    lines[j].append(tok)
                    grew.append(row)
                    if tok == vocab.eol_id:
                        active[j] = False
                        trace.finished[j] = True
                    elif len(lines[j]) >= limits.n_max_line:
                        active[j] = False
                        trace.hit_limit = trace.hit_char_limit = True
                else:
                    active[j] = False
                    trace.finished[j] = True
                    trace.forced[j] = True
            if not any(active):
                break
            t += 1
            # tokens produced last call become keys; finished lines' outputs are ignored
            pending = [(row, t) for row in grew]
            pending_ids = [lines[row - 1][-1] for row in grew]
    trace.second_pass_invocations = runner.calls - trace.first_pass_invocations
    trace.invocations = runner.calls
    trace.tokens = assemble_transcript(trace, vocab)
    trace.wall_clock = time.perf_counter() - start
    return trace


def assemble_transcript(trace: DecodeTrace, vocab: Vocabulary) -> list[int]:
    """Lines concatenated in first-pass order; always ends with ``<eot>``."""
    if trace.mode == "dan":
        tokens = list(trace.tokens)
    else:
        tokens = [tok for line in trace.lines for tok in line]
    if not tokens or tokens[-1] != vocab.eot_id:
        tokens.append(vocab.eot_id)
    return tokens


def decode(model: Model, image, vocab: Vocabulary, mode: str, variant: str = "base",
           limits: Optional[DecodeLimits] = None, chooser: Optional[Chooser] = None,
           use_cache: bool = True, record_logits: bool = False) -> DecodeTrace:
    if mode == "dan":
        return decode_dan(model, image, vocab, limits, chooser, use_cache, record_logits)
    return decode_fasterdan(model, image, vocab, limits, chooser, use_cache, record_logits, variant)
