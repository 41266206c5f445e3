"""Token vocabulary, XML-like document serialization and line segmentation.

Id layout: the output alphabet occupies ids ``0 .. size-1`` (``<eot>``, the
line terminator, characters, then opening/closing markups), so the output
projection maps straight onto token ids. ``<sot>`` sits at ``size`` (the
extra embedding row) and ``<pad>`` at ``size + 1``; neither can be predicted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

EOT = "<eot>"
EOL = "\n"
SOT = "<sot>"
PAD = "<pad>"


@dataclass(frozen=True)
class Entity:
    cls: str | None
    lines: tuple[str, ...] = ()


@dataclass(frozen=True)
class DocumentStructure:
    """Root -> layout entities -> text lines.

    An entity with ``cls=None`` holds text that sits outside any markup; this
    is the only kind of entity a layout-free vocabulary produces.
    """

    entities: tuple[Entity, ...] = ()

    @property
    def lines(self) -> list[str]:
        return [line for e in self.entities for line in e.lines]

    def text(self) -> str:
        return EOL.join(self.lines)


@dataclass(frozen=True)
class Vocabulary:
    characters: tuple[str, ...]
    layout_classes: tuple[str, ...] = ()
    root: str = "D"
    _symbols: tuple[str, ...] = field(init=False, repr=False, compare=False)
    _ids: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        chars = tuple(self.characters)
        classes = tuple(self.layout_classes)
        object.__setattr__(self, "characters", chars)
        object.__setattr__(self, "layout_classes", classes)
        for c in chars:
            if len(c) != 1 or c == EOL:
                raise ValueError(f"invalid character symbol {c!r}")
        if len(set(chars)) != len(chars):
            raise ValueError("duplicate characters in vocabulary")
        markup_names = (self.root, *classes) if classes else ()
        if len(set(markup_names)) != len(markup_names):
            raise ValueError("duplicate layout class names")
        symbols = [EOT, EOL, *chars]
        for name in markup_names:
            symbols += [f"<{name}>", f"</{name}>"]
        symbols += [SOT, PAD]
        object.__setattr__(self, "_symbols", tuple(symbols))
        object.__setattr__(self, "_ids", {s: i for i, s in enumerate(symbols)})

    # id bookkeeping

    @property
    def size(self) -> int:
        """|A|: number of predictable tokens (characters, markups, eol, eot)."""
        return len(self._symbols) - 2

    @property
    def eot_id(self) -> int:
        return 0

    @property
    def eol_id(self) -> int:
        return 1

    @property
    def sot_id(self) -> int:
        return self.size

    @property
    def pad_id(self) -> int:
        return self.size + 1

    @property
    def has_layout(self) -> bool:
        return bool(self.layout_classes)

    def symbol(self, token_id: int) -> str:
        return self._symbols[token_id]

    def id(self, symbol: str) -> int:
        try:
            return self._ids[symbol]
        except KeyError:
            raise KeyError(f"unknown symbol {symbol!r}") from None

    def open_id(self, cls: str) -> int:
        return self.id(f"<{cls}>")

    def close_id(self, cls: str) -> int:
        return self.id(f"</{cls}>")

    def is_char(self, token_id: int) -> bool:
        return 2 <= token_id < 2 + len(self.characters)

    def is_markup(self, token_id: int) -> bool:
        return 2 + len(self.characters) <= token_id < self.size

    def is_opening(self, token_id: int) -> bool:
        return self.is_markup(token_id) and (token_id - 2 - len(self.characters)) % 2 == 0

    def is_closing(self, token_id: int) -> bool:
        return self.is_markup(token_id) and not self.is_opening(token_id)

    def markup_class(self, token_id: int) -> str:
        sym = self.symbol(token_id)
        return sym[2:-1] if sym.startswith("</") else sym[1:-1]

    def is_unit(self, token_id: int) -> bool:
        """Tokens that form a complete line on their own."""
        return token_id == self.eot_id or self.is_markup(token_id)

    def to_string(self, ids: Iterable[int]) -> str:
        return "".join(self.symbol(i) for i in ids)


def serialize_document(doc: DocumentStructure, vocab: Vocabulary) -> list[int]:
    """Depth-first token emission; every text line ends with the terminator."""
    out: list[int] = []
    if vocab.has_layout:
        out.append(vocab.open_id(vocab.root))
    for entity in doc.entities:
        markup = vocab.has_layout and entity.cls is not None
        if markup:
            if entity.cls not in vocab.layout_classes:
                raise ValueError(f"unknown layout class {entity.cls!r}")
            out.append(vocab.open_id(entity.cls))
        for line in entity.lines:
            for ch in line:
                try:
                    tid = vocab.id(ch)
                except KeyError:
                    raise ValueError(f"character {ch!r} not in vocabulary") from None
                if not vocab.is_char(tid):
                    raise ValueError(f"character {ch!r} not in vocabulary")
                out.append(tid)
            out.append(vocab.eol_id)
        if markup:
            out.append(vocab.close_id(entity.cls))
    if vocab.has_layout:
        out.append(vocab.close_id(vocab.root))
    out.append(vocab.eot_id)
    return out


def deserialize_tokens(tokens: Sequence[int], vocab: Vocabulary) -> DocumentStructure:
    """Parse an arbitrary id list, repairing markup greedily left to right.

    Repairs: orphan closing markups are dropped; an opening entity markup
    while another entity is open closes the open one first; anything still
    open at ``<eot>`` (or the end of input) is closed. Empty lines vanish.
    Nothing after the first ``<eot>`` is read.
    """
    entities: list[Entity] = []
    cur_cls: str | None = None
    cur_lines: list[str] = []
    in_entity = False
    line: list[str] = []

    def flush_line():
        if line:
            cur_lines.append("".join(line))
            line.clear()

    def close_entity():
        nonlocal cur_cls, in_entity
        flush_line()
        if in_entity or cur_lines:
            entities.append(Entity(cur_cls, tuple(cur_lines)))
        cur_lines.clear()
        cur_cls = None
        in_entity = False

    n = vocab.size
    for tid in tokens:
        if not 0 <= tid < n:
            continue  # sot, pad and out-of-range ids carry no content
        if tid == vocab.eot_id:
            break
        if tid == vocab.eol_id:
            flush_line()
        elif vocab.is_char(tid):
            line.append(vocab.symbol(tid))
        else:
            cls = vocab.markup_class(tid)
            if cls == vocab.root:
                # root markups only delimit the document; a named entity ends here
                if in_entity:
                    close_entity()
                continue
            if vocab.is_opening(tid):
                if in_entity or cur_lines or line:
                    close_entity()
                cur_cls = cls
                in_entity = True
            elif in_entity and cls == cur_cls:
                close_entity()
            # otherwise: orphan closer, dropped
    if in_entity or cur_lines or line:
        close_entity()
    if not vocab.has_layout:
        lines = tuple(line for e in entities for line in e.lines)
        return DocumentStructure((Entity(None, lines),) if lines else ())
    return DocumentStructure(tuple(entities))


def document_text(tokens: Sequence[int], vocab: Vocabulary) -> str:
    """Plain text of a token sequence: markups removed, lines joined by newlines.

    An eol right before a closing markup or ``<eot>`` is not rendered.
    """
    return deserialize_tokens(tokens, vocab).text()


@dataclass(frozen=True)
class LineSegmentedTarget:
    lines: tuple[tuple[int, ...], ...]
    pad_id: int

    @property
    def L(self) -> int:
        return len(self.lines)

    @property
    def lengths(self) -> list[int]:
        return [len(line) for line in self.lines]

    @property
    def n_max(self) -> int:
        return max(self.lengths)

    @property
    def grid(self) -> list[list[int]]:
        """L x (n_max + 1) ids; multi-token lines get their first token duplicated
        into column 1, unit lines have nothing past column 0."""
        width = self.n_max + 1
        rows = []
        for line in self.lines:
            row = [line[0]] if len(line) == 1 else [line[0], line[0], *line[1:]]
            rows.append(row + [self.pad_id] * (width - len(row)))
        return rows

    def flat(self) -> list[int]:
        return [t for line in self.lines for t in line]


def segment_lines(
    tokens: Sequence[int],
    vocab: Vocabulary,
    l_max: int | None = None,
    n_max: int | None = None,
) -> LineSegmentedTarget:
    """Split a token sequence into lines: markups and ``<eot>`` alone, text
    lines up to and including their terminator."""
    if not tokens or tokens[-1] != vocab.eot_id:
        raise ValueError("token sequence must end with <eot>")
    lines: list[tuple[int, ...]] = []
    cur: list[int] = []
    for tid in tokens:
        if vocab.is_unit(tid):
            if cur:
                raise ValueError("text run not closed by a line terminator")
            lines.append((tid,))
        elif vocab.is_char(tid) or tid == vocab.eol_id:
            cur.append(tid)
            if tid == vocab.eol_id:
                lines.append(tuple(cur))
                cur = []
        else:
            raise ValueError(f"token id {tid} cannot appear in a target")
        if tid == vocab.eot_id:
            break
    if l_max is not None and len(lines) > l_max:
        raise ValueError(f"{len(lines)} lines exceed the cap of {l_max}")
    if n_max is not None:
        longest = max(len(line) for line in lines)
        if longest > n_max:
            raise ValueError(f"line of {longest} tokens exceeds the cap of {n_max}")
    return LineSegmentedTarget(tuple(lines), vocab.pad_id)


# Ground-truth files


def write_truth(doc: DocumentStructure, vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text(format_truth(doc, vocab), encoding="utf-8")


def format_truth(doc: DocumentStructure, vocab: Vocabulary) -> str:
    out = [f"classes: {','.join(vocab.layout_classes)}"]
    for e in doc.entities:
        out.append("entity" if e.cls is None else f"entity {e.cls}")
        out.extend("    " + line for line in e.lines)
    return "\n".join(out) + "\n"


def parse_truth(text: str) -> tuple[DocumentStructure, tuple[str, ...]]:
    """Returns the document and the class list from its header."""
    rows = text.split("\n")
    if rows and rows[-1] == "":
        rows.pop()
    if not rows or not rows[0].startswith("classes:"):
        raise ValueError("ground-truth file must start with 'classes:'")
    classes = tuple(c.strip() for c in rows[0][len("classes:"):].split(",") if c.strip())
    entities: list[Entity] = []
    cls: str | None = None
    lines: list[str] | None = None
    for n, row in enumerate(rows[1:], start=2):
        if row.startswith("    "):
            if lines is None:
                raise ValueError(f"line {n}: text outside an entity block")
            lines.append(row[4:])
        elif row == "entity" or row.startswith("entity "):
            if lines is not None:
                entities.append(Entity(cls, tuple(lines)))
            name = row[len("entity"):].strip()
            cls = name or None
            if cls is not None and cls not in classes:
                raise ValueError(f"line {n}: undeclared class {cls!r}")
            lines = []
        elif row.strip():
            raise ValueError(f"line {n}: unexpected content {row!r}")
    if lines is not None:
        entities.append(Entity(cls, tuple(lines)))
    return DocumentStructure(tuple(entities)), classes


def read_truth(path: str | Path) -> tuple[DocumentStructure, tuple[str, ...]]:
    return parse_truth(Path(path).read_text(encoding="utf-8"))


def dump_tokens(ids: Iterable[int]) -> str:
    return " ".join(str(i) for i in ids)


def load_tokens(text: str) -> list[int]:
    return [int(tok) for tok in text.split()]
