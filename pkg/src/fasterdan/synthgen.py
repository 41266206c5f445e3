"""Deterministic synthetic documents built from abstract glyph bitmaps."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .vocab import DocumentStructure, Entity, Vocabulary, read_truth, write_truth

STRIDE = (32, 8)
INK = 255


class GlyphSet:
    """Pairwise distinct binary bitmaps, one per character, seeded by the
    character's code point."""

    def __init__(self, characters: Sequence[str], height: int = 12, width: int = 8,
                 seed: int = 0, min_ink: float = 0.2):
        self.height, self.width = height, width
        self.glyphs: dict[str, np.ndarray] = {}
        seen: set[bytes] = set()
        for ch in characters:
            attempt = 0
            while True:
                rng = np.random.default_rng([seed, ord(ch), attempt])
                bitmap = rng.random((height, width)) < 0.5
                key = np.packbits(bitmap).tobytes()
                if bitmap.mean() >= min_ink and key not in seen:
                    break
                attempt += 1
            seen.add(key)
            self.glyphs[ch] = bitmap

    def __getitem__(self, ch: str) -> np.ndarray:
        return self.glyphs[ch]


@dataclass(frozen=True)
class DocSpec:
    """Layout of one document. ``line_lengths[e]`` lists the characters per
    line of entity ``e``; ``text`` (same shape, strings) overrides the seeded
    random content and ``line_gaps`` (same shape) adds blank pixels above
    individual lines."""

    classes: tuple[Optional[str], ...]
    line_lengths: tuple[tuple[int, ...], ...]
    seed: int = 0
    text: Optional[tuple[tuple[str, ...], ...]] = None
    margin_x: int = 8
    margin_y: int = 0
    line_pitch: int = 32
    glyph_offset: int = 10
    entity_gap: int = 64  # wider than any jitter gap, so entity breaks stay visible
    spacing: int = 1
    noise: float = 0.0
    canvas: Optional[tuple[int, int]] = None
    line_gaps: Optional[tuple[tuple[int, ...], ...]] = None

    @property
    def n_lines(self) -> int:
        return sum(len(e) for e in self.line_lengths)


def _round_up(x: int, m: int) -> int:
    return max(m, -(-x // m) * m)


def required_size(spec: DocSpec, glyphs: GlyphSet) -> tuple[int, int]:
    pitch = glyphs.width + spec.spacing
    widest = max((n for e in spec.line_lengths for n in e), default=0)
    width = 2 * spec.margin_x + max(widest * pitch - spec.spacing, 0)
    n_ent = len(spec.line_lengths)
    height = 2 * spec.margin_y + spec.n_lines * spec.line_pitch + max(n_ent - 1, 0) * spec.entity_gap
    height += sum(g for e in spec.line_gaps or () for g in e)
    return _round_up(height, STRIDE[0]), _round_up(width, STRIDE[1])


def render_document(spec: DocSpec, vocab: Vocabulary,
                    glyphs: Optional[GlyphSet] = None) -> tuple[np.ndarray, DocumentStructure]:
    """Returns a uint8 image (background 0, ink 255) and its ground truth."""
    glyphs = glyphs or GlyphSet(vocab.characters)
    if spec.glyph_offset + glyphs.height > spec.line_pitch:
        raise ValueError("glyphs do not fit in the line pitch")
    if len(spec.classes) != len(spec.line_lengths):
        raise ValueError("one class per entity required")
    gaps = spec.line_gaps or tuple((0,) * len(e) for e in spec.line_lengths)
    if [len(e) for e in gaps] != [len(e) for e in spec.line_lengths]:
        raise ValueError("line_gaps must match line_lengths")
    rng = np.random.default_rng(spec.seed)
    if spec.text is not None:
        text = tuple(tuple(e) for e in spec.text)
    else:
        chars = np.array(vocab.characters)
        text = tuple(
            tuple("".join(rng.choice(chars, size=n)) for n in lengths)
            for lengths in spec.line_lengths
        )
    need_h, need_w = required_size(spec, glyphs)
    if spec.canvas is None:
        h, w = need_h, need_w
    else:
        h, w = spec.canvas
        if h < need_h or w < need_w:
            raise ValueError(f"content needs a {need_h}x{need_w} canvas, got {h}x{w}")
        if h % STRIDE[0] or w % STRIDE[1]:
            raise ValueError(f"canvas {h}x{w} is not a multiple of {STRIDE}")
    image = np.zeros((h, w), dtype=np.uint8)
    pitch = glyphs.width + spec.spacing
    y = spec.margin_y
    for e, lines in enumerate(text):
        if e:
            y += spec.entity_gap
        for line, gap in zip(lines, gaps[e]):
            y += gap
            top = y + spec.glyph_offset
            for k, ch in enumerate(line):
                x = spec.margin_x + k * pitch
                image[top:top + glyphs.height, x:x + glyphs.width][glyphs[ch]] = INK
            y += spec.line_pitch
    if spec.noise > 0:
        flips = rng.random(image.shape) < spec.noise
        image[flips] = INK - image[flips]
    if vocab.has_layout:
        entities = tuple(Entity(c, lines) for c, lines in zip(spec.classes, text))
    else:
        lines = tuple(line for e in text for line in e)
        entities = (Entity(None, lines),) if lines else ()
    return image, DocumentStructure(entities)


@dataclass
class SynthConfig:
    min_lines: int = 2
    max_lines: int = 6
    min_chars: int = 4
    max_chars: int = 10
    max_entities: int = 2
    classes: tuple[str, ...] = ("P",)
    noise: float = 0.0
    # vertical jitter in whole line pitches, so a line's index does not fix its row
    max_top_lines: int = 2
    gap_prob: float = 0.3
    layout: dict = field(default_factory=dict)  # extra DocSpec geometry overrides

    def __post_init__(self):
        if not (1 <= self.min_lines <= self.max_lines):
            raise ValueError(f"bad line bounds {self.min_lines}..{self.max_lines}")
        if not (1 <= self.min_chars <= self.max_chars):
            raise ValueError(f"bad character bounds {self.min_chars}..{self.max_chars}")
        if self.max_entities < 1:
            raise ValueError("max_entities must be positive")
        if self.max_top_lines < 0 or not 0.0 <= self.gap_prob <= 1.0:
            raise ValueError("bad vertical jitter settings")


def curriculum_sampler(fraction: float, config: SynthConfig, rng: np.random.Generator) -> DocSpec:
    """Line count has expectation ``min + fraction * (max - min)``."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    target = config.min_lines + fraction * (config.max_lines - config.min_lines)
    n_lines = int(np.floor(target))
    if rng.random() < target - n_lines:
        n_lines += 1
    n_lines = min(n_lines, config.max_lines)
    n_ent = int(rng.integers(1, min(config.max_entities, n_lines) + 1))
    # split lines into n_ent non-empty groups
    cuts = np.sort(rng.choice(np.arange(1, n_lines), size=n_ent - 1, replace=False)) if n_ent > 1 else []
    sizes = np.diff([0, *cuts, n_lines])
    classes = tuple(
        config.classes[int(rng.integers(len(config.classes)))] if config.classes else None
        for _ in range(n_ent)
    )
    lengths = tuple(
        tuple(int(n) for n in rng.integers(config.min_chars, config.max_chars + 1, size=s))
        for s in sizes
    )
    geometry = dict(config.layout)
    if config.max_top_lines or config.gap_prob:
        pitch = geometry.get("line_pitch", DocSpec.line_pitch)
        geometry["margin_y"] = pitch * int(rng.integers(0, config.max_top_lines + 1))
        geometry["line_gaps"] = tuple(
            tuple(int(g) for g in pitch * (rng.random(s) < config.gap_prob)) for s in sizes
        )
    return DocSpec(classes, lengths, seed=int(rng.integers(2**31)), noise=config.noise, **geometry)


def generate_corpus(n: int, config: SynthConfig, vocab: Vocabulary, seed: int,
                    fraction: float = 1.0, glyphs: Optional[GlyphSet] = None):
    """``n`` (image, truth) samples, each drawn at a curriculum position
    picked uniformly from ``[0, fraction]``."""
    glyphs = glyphs or GlyphSet(vocab.characters)
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        f = float(rng.random()) * fraction
        spec = curriculum_sampler(f, config, rng)
        samples.append(render_document(spec, vocab, glyphs))
    return samples


# File formats


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    h, w = image.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + image.astype(np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ValueError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixels, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


MANIFEST = "manifest.txt"


def write_corpus(out_dir: str | Path, samples, vocab: Vocabulary) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, (image, truth) in enumerate(samples):
        img_name, txt_name = f"doc{k:05d}.pgm", f"doc{k:05d}.txt"
        write_pgm(out / img_name, image)
        write_truth(truth, vocab, out / txt_name)
        rows.append(f"{img_name} {txt_name}")
    (out / "charset.txt").write_text(
        "".join(vocab.characters) + "\n" + ",".join(vocab.layout_classes) + "\n", encoding="utf-8"
    )
    manifest = out / MANIFEST
    manifest.write_text("".join(r + "\n" for r in rows), encoding="utf-8")
    return manifest


def read_corpus(data_dir: str | Path) -> tuple[list[tuple[np.ndarray, DocumentStructure]], Vocabulary]:
    """Loads every manifest entry; ``charset.txt`` holds the characters on its
    first line and the comma-separated layout classes on its second."""
    root = Path(data_dir)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest in {root}")
    head = (root / "charset.txt").read_text(encoding="utf-8").split("\n")
    chars = head[0]
    classes = tuple(c for c in (head[1] if len(head) > 1 else "").split(",") if c)
    samples = []
    for row in manifest.read_text(encoding="utf-8").splitlines():
        if not row.strip():
            continue
        img_name, txt_name = row.split()
        doc, _ = read_truth(root / txt_name)
        samples.append((read_pgm(root / img_name), doc))
    return samples, Vocabulary(tuple(chars), classes)
