"""Timing comparison of sequential and two-pass decoding over a corpus."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .decode import DecodeLimits, DecodeTrace, decode, oracle_chooser
from .net import Model
from .vocab import DocumentStructure, Vocabulary, segment_lines, serialize_document

# published factors at GPU scale; shown for reference only
REFERENCE_SPEED_FACTORS = (4.0, 5.8)


def run_ordered(fn: Callable, items: Iterable, jobs: int = 1) -> list:
    """``[fn(x) for x in items]`` on up to ``jobs`` threads, in input order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


@dataclass
class DatasetStats:
    documents: int
    width: float
    height: float
    chars: float
    lines: float
    chars_per_line: float
    layout_tokens: float


def dataset_stats(samples, vocab: Vocabulary) -> DatasetStats:
    if not samples:
        return DatasetStats(0, *([float("nan")] * 6))
    widths, heights, chars, lines, markups = [], [], [], [], []
    for image, doc in samples:
        heights.append(image.shape[0])
        widths.append(image.shape[1])
        text_lines = doc.lines
        chars.append(sum(len(line) for line in text_lines))
        lines.append(len(text_lines))
        markups.append(sum(vocab.is_markup(t) for t in serialize_document(doc, vocab)))
    return DatasetStats(
        len(samples), float(np.mean(widths)), float(np.mean(heights)), float(np.mean(chars)),
        float(np.mean(lines)), float(np.sum(chars) / max(np.sum(lines), 1)), float(np.mean(markups)),
    )


@dataclass
class EngineStats:
    mode: str
    invocations: float
    invocations_published: float
    seconds: float
    expected_invocations: Optional[float] = None  # oracle runs: value the schedule laws predict


@dataclass
class BenchReport:
    dataset: DatasetStats
    engines: list = field(default_factory=list)

    @property
    def speed_factor(self) -> float:
        times = {e.mode: e.seconds for e in self.engines}
        return times["dan"] / times["fasterdan"]

    @property
    def invocation_ratio(self) -> float:
        inv = {e.mode: e.invocations for e in self.engines}
        return inv["dan"] / inv["fasterdan"]

    def table(self) -> str:
        d = self.dataset
        out = [
            f"documents         {d.documents}",
            f"mean width        {d.width:.1f}",
            f"mean height       {d.height:.1f}",
            f"chars / doc       {d.chars:.1f}",
            f"lines / doc       {d.lines:.1f}",
            f"chars / line      {d.chars_per_line:.1f}",
            f"layout tokens     {d.layout_tokens:.1f}",
            "",
            f"{'engine':<10} {'invocations':>12} {'published':>10} {'expected':>10} {'seconds':>10}",
        ]
        for e in self.engines:
            expected = "-" if e.expected_invocations is None else f"{e.expected_invocations:.2f}"
            out.append(f"{e.mode:<10} {e.invocations:>12.2f} {e.invocations_published:>10.2f} "
                       f"{expected:>10} {e.seconds:>10.4f}")
        out += [
            "",
            f"invocation ratio  {self.invocation_ratio:.2f}",
            f"speed factor      {self.speed_factor:.2f}",
            "reference factor  x{:.1f} to x{:.1f} (published, GPU scale)".format(*REFERENCE_SPEED_FACTORS),
        ]
        return "\n".join(out) + "\n"


def expected_invocations(doc: DocumentStructure, vocab: Vocabulary, mode: str) -> int:
    """Invocations an exact (oracle) decode of ``doc`` must take."""
    tokens = serialize_document(doc, vocab)
    if mode == "dan":
        return len(tokens)  # N tokens before <eot>, plus <eot> itself
    seg = segment_lines(tokens, vocab)
    return seg.L + seg.n_max - 1


def bench_engine(model: Model, samples, vocab: Vocabulary, mode: str, oracle: bool = False,
                 limits: Optional[DecodeLimits] = None, jobs: int = 1) -> tuple[EngineStats, list[DecodeTrace]]:
    def run(sample):
        image, doc = sample
        chooser = oracle_chooser(serialize_document(doc, vocab), vocab, mode) if oracle else None
        return decode(model, image, vocab, mode, limits=limits, chooser=chooser)

    traces = run_ordered(run, samples, jobs)
    expected = None
    if oracle:
        expected = float(np.mean([expected_invocations(doc, vocab, mode) for _, doc in samples]))
    stats = EngineStats(
        mode,
        float(np.mean([t.invocations for t in traces])),
        float(np.mean([t.published_invocations for t in traces])),
        float(np.mean([t.wall_clock for t in traces])),
        expected,
    )
    return stats, traces


def run_bench(dan_model: Model, fdan_model: Model, samples, vocab: Vocabulary, oracle: bool = False,
              limits: Optional[DecodeLimits] = None, jobs: int = 1) -> BenchReport:
    report = BenchReport(dataset_stats(samples, vocab))
    for mode, model in (("dan", dan_model), ("fasterdan", fdan_model)):
        report.engines.append(bench_engine(model, samples, vocab, mode, oracle, limits, jobs)[0])
    return report
