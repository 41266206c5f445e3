"""Text and layout evaluation: CER, WER, first-pass CER, LOER and mAP_CER."""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass, field
from typing import Sequence

import networkx as nx

from .vocab import DocumentStructure, Vocabulary, deserialize_tokens

CER_THRESHOLDS = tuple(k / 100 for k in range(5, 55, 5))


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    if len(ref) < len(hyp):
        ref, hyp = hyp, ref
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i]
        for j, h in enumerate(hyp, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def cer(reference: str, hypothesis: str) -> float:
    if not reference:
        raise ValueError("CER needs a non-empty reference")
    return edit_distance(reference, hypothesis) / len(reference)


def words(text: str) -> list[str]:
    return text.split()


def wer(reference: str, hypothesis: str) -> float:
    ref = words(reference)
    if not ref:
        raise ValueError("WER needs a non-empty reference")
    return edit_distance(ref, words(hypothesis)) / len(ref)


def _as_doc(x, vocab: Vocabulary) -> DocumentStructure:
    return x if isinstance(x, DocumentStructure) else deserialize_tokens(x, vocab)


def corpus_cer(truths, preds, vocab: Vocabulary) -> float:
    """Pooled CER: total edits over total reference characters.

    ``truths``/``preds`` hold DocumentStructures or token sequences; layout
    markups are ignored and line breaks count as characters.
    """
    dist = total = 0
    for t, p in zip(truths, preds):
        ref, hyp = _as_doc(t, vocab).text(), _as_doc(p, vocab).text()
        dist += edit_distance(ref, hyp)
        total += len(ref)
    if total == 0:
        raise ValueError("CER needs a non-empty reference")
    return dist / total


def corpus_wer(truths, preds, vocab: Vocabulary) -> float:
    dist = total = 0
    for t, p in zip(truths, preds):
        ref, hyp = words(_as_doc(t, vocab).text()), words(_as_doc(p, vocab).text())
        dist += edit_distance(ref, hyp)
        total += len(ref)
    if total == 0:
        raise ValueError("WER needs a non-empty reference")
    return dist / total


def line_initials(doc: DocumentStructure) -> str:
    return "".join(line[0] for line in doc.lines if line)


def first_pass_cer(traces, truths, vocab: Vocabulary) -> float:
    """CER of the first-pass character predictions against the first character
    of every ground-truth text line, pooled over documents."""
    dist = total = 0
    for trace, truth in zip(traces, truths):
        hyp = "".join(vocab.symbol(line[0]) for line in trace.lines if vocab.is_char(line[0]))
        ref = line_initials(_as_doc(truth, vocab))
        dist += edit_distance(ref, hyp)
        total += len(ref)
    if total == 0:
        raise ValueError("first-pass CER needs at least one reference line")
    return dist / total


# Layout graphs


def layout_graph(doc: DocumentStructure, root: str = "D") -> nx.DiGraph:
    """Root node plus one node per entity; root->entity edges and
    entity->next-entity reading-order edges."""
    g = nx.DiGraph()
    g.add_node(0, label=root)
    for k, entity in enumerate(doc.entities, start=1):
        g.add_node(k, label=entity.cls or "")
        g.add_edge(0, k)
        if k > 1:
            g.add_edge(k - 1, k)
    return g


def graph_edit_distance(g1: nx.DiGraph, g2: nx.DiGraph, timeout: float | None = 60.0) -> float:
    """Exact unit-cost GED (node/edge insertion, deletion, label substitution).

    Falls back to the best path found if ``timeout`` seconds elapse, which
    only happens far beyond desk-scale layouts.
    """
    return nx.graph_edit_distance(
        g1, g2, node_match=lambda a, b: a["label"] == b["label"], timeout=timeout
    )


def loer_counts(pred: DocumentStructure, truth: DocumentStructure) -> tuple[float, int]:
    gt = layout_graph(truth)
    return graph_edit_distance(layout_graph(pred), gt), gt.number_of_nodes() + gt.number_of_edges()


def loer(pred: DocumentStructure, truth: DocumentStructure) -> float:
    dist, size = loer_counts(pred, truth)
    return dist / size


def corpus_loer(preds, truths, vocab: Vocabulary) -> float:
    dist = size = 0.0
    for p, t in zip(preds, truths):
        dd, ss = loer_counts(_as_doc(p, vocab), _as_doc(t, vocab))
        dist += dd
        size += ss
    return dist / size if size else 0.0


# mAP over CER thresholds


def _entity_text(entity) -> str:
    return "\n".join(entity.lines)


def _pair_cer(ref: str, hyp: str) -> float:
    return edit_distance(ref, hyp) / max(len(ref), 1)


def _greedy_matches(pred_texts, truth_texts, threshold: float) -> int:
    pairs = sorted(
        (_pair_cer(t, p), ti, pi)
        for ti, t in enumerate(truth_texts)
        for pi, p in enumerate(pred_texts)
    )
    used_t, used_p = set(), set()
    for c, ti, pi in pairs:
        if c > threshold:
            break
        if ti in used_t or pi in used_p:
            continue
        used_t.add(ti)
        used_p.add(pi)
    return len(used_t)


def map_cer(preds, truths, vocab: Vocabulary, thresholds=CER_THRESHOLDS) -> float:
    """Mean average precision of layout entities, in percent.

    Per document and class, entities are matched greedily by lowest text CER;
    a pair counts when its CER is within the threshold. Counts are pooled over
    documents. Each class's AP is the area under its precision/recall curve
    traced over the ascending threshold grid (recall starts at 0); the final
    score weights classes by their number of ground-truth entities.
    """
    if not vocab.has_layout:
        raise ValueError("mAP_CER needs layout classes")
    preds = [_as_doc(p, vocab) for p in preds]
    truths = [_as_doc(t, vocab) for t in truths]
    classes = sorted({e.cls for d in truths + preds for e in d.entities if e.cls is not None})
    n_truth = {c: sum(1 for d in truths for e in d.entities if e.cls == c) for c in classes}
    n_pred = {c: sum(1 for d in preds for e in d.entities if e.cls == c) for c in classes}
    total = sum(n_truth.values())
    if total == 0:
        return 100.0 if not any(n_pred.values()) else 0.0
    score = 0.0
    for c in classes:
        if n_truth[c] == 0:
            continue
        ap = prev_recall = 0.0
        for thr in sorted(thresholds):
            tp = 0
            for p, t in zip(preds, truths):
                tp += _greedy_matches(
                    [_entity_text(e) for e in p.entities if e.cls == c],
                    [_entity_text(e) for e in t.entities if e.cls == c],
                    thr,
                )
            recall = tp / n_truth[c]
            precision = tp / n_pred[c] if n_pred[c] else 0.0
            ap += (recall - prev_recall) * precision
            prev_recall = recall
        score += ap * n_truth[c]
    return 100.0 * score / total


@dataclass
class EvalReport:
    cer: float
    wer: float
    first_pass_cer: float
    loer: float
    map_cer: float
    per_document: list = field(default_factory=list)

    def rows(self) -> list[tuple[str, float]]:
        return [("CER", self.cer), ("WER", self.wer), ("first-pass CER", self.first_pass_cer),
                ("LOER", self.loer), ("mAP_CER", self.map_cer)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["doc", "cer", "wer", "loer"])
        for row in self.per_document:
            writer.writerow([row["doc"], f"{row['cer']:.4f}", f"{row['wer']:.4f}", f"{row['loer']:.4f}"])
        writer.writerow(["ALL", f"{self.cer:.4f}", f"{self.wer:.4f}", f"{self.loer:.4f}"])
        return buf.getvalue()

    def table(self) -> str:
        width = max(len(name) for name, _ in self.rows())
        return "\n".join(f"{name:<{width}}  {value:8.2f}" for name, value in self.rows()) + "\n"


def evaluate(pred_tokens, truths, vocab: Vocabulary, traces=None, names=None) -> EvalReport:
    """All metrics in percent; ``traces`` (two-pass decoding) enable the first-pass CER."""
    preds = [_as_doc(p, vocab) for p in pred_tokens]
    truths = [_as_doc(t, vocab) for t in truths]
    names = names or [str(k) for k in range(len(truths))]
    per_doc = []
    for name, p, t in zip(names, preds, truths):
        ref = t.text()
        per_doc.append({
            "doc": name,
            "cer": 100 * edit_distance(ref, p.text()) / max(len(ref), 1),
            "wer": 100 * edit_distance(words(ref), words(p.text())) / max(len(words(ref)), 1),
            "loer": 100 * loer(p, t),
        })
    fp = 100 * first_pass_cer(traces, truths, vocab) if traces and traces[0].mode == "fasterdan" else float("nan")
    return EvalReport(
        cer=100 * corpus_cer(truths, preds, vocab),
        wer=100 * corpus_wer(truths, preds, vocab),
        first_pass_cer=fp,
        loer=100 * corpus_loer(preds, truths, vocab),
        map_cer=map_cer(preds, truths, vocab) if vocab.has_layout else float("nan"),
        per_document=per_doc,
    )
