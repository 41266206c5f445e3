"""Shared strategies and builders for the test-suite."""

import numpy as np
import torch
from hypothesis import strategies as st

from fasterdan.net import ModelConfig, build_model
from fasterdan.scheme import Scheme
from fasterdan.train import dan_inputs, fasterdan_inputs, forward_batch, make_batch
from fasterdan.vocab import DocumentStructure, Entity, segment_lines, serialize_document

CHARS = tuple("abcdefghijklmnopqrst")
SMALL_ENCODER = (4, 4, 8, 8, 8)


def documents(classes=("P", "M"), max_entities=4, max_lines=4, max_len=8):
    """Well-formed layout documents (no empty lines)."""
    line = st.text(alphabet="".join(CHARS), min_size=1, max_size=max_len)
    entity = st.builds(
        lambda c, lines: Entity(c, tuple(lines)),
        st.sampled_from(classes),
        st.lists(line, min_size=0, max_size=max_lines),
    )
    return st.builds(lambda es: DocumentStructure(tuple(es)), st.lists(entity, max_size=max_entities))


def ids_for(vocab, text):
    """Token ids of a serialized string written with markups inline."""
    out = []
    k = 0
    while k < len(text):
        if text[k] == "<":
            end = text.index(">", k)
            out.append(vocab.id(text[k:end + 1]))
            k = end + 1
        else:
            out.append(vocab.id(text[k]))
            k += 1
    return out


def tiny_model(vocab, seed=0, d=8, layers=1, heads=2, dtype=torch.float64):
    cfg = ModelConfig(vocab.size, d=d, layers=layers, heads=heads, enc_channels=SMALL_ENCODER)
    return build_model(cfg, seed=seed, dtype=dtype)


def random_image(rng, h=64, w=48):
    return (rng.random((h, w)) < 0.3).astype(np.uint8) * 255


def teacher_forced_logits(model, image, doc, vocab, mode="fasterdan", variant="base"):
    """Parallel logits of one document keyed by query coordinate."""
    scheme = Scheme(mode, variant)
    batch = make_batch([(image, doc)], vocab, scheme, model.cfg.d, model.dtype)
    with torch.no_grad():
        logits = forward_batch(model, batch)[0]
    tokens = serialize_document(doc, vocab)
    if mode == "dan":
        coords = dan_inputs(tokens, vocab)[0]
    else:
        coords = fasterdan_inputs(segment_lines(tokens, vocab), vocab)[0]
    return {c: logits[k] for k, c in enumerate(coords)}


def assert_matches_teacher_forcing(trace, model, image, doc, vocab, mode="fasterdan", variant="base", tol=1e-10):
    """Every decode-time logit row equals its parallel counterpart, and every
    trained position was visited."""
    parallel = teacher_forced_logits(model, image, doc, vocab, mode, variant)
    tokens = serialize_document(doc, vocab)
    if mode == "dan":
        targets = dan_inputs(tokens, vocab)
    else:
        targets = fasterdan_inputs(segment_lines(tokens, vocab), vocab)
    needed = {c for c, t in zip(targets[0], targets[2]) if t != -100}
    assert needed <= set(trace.logits)
    worst = max((trace.logits[c] - parallel[c]).abs().max().item() for c in parallel.keys() & trace.logits.keys())
    assert worst < tol, worst
    return worst
