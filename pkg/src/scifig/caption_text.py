"""LaTeX caption source to unicode plaintext.

Conversion is driven by the macro table in ``data/macros.tsv``.  References
become ``<ref>`` and citations ``<cit.>``; known symbols map to unicode;
unknown commands are dropped while their required-argument text is kept.

The output is a fixed point of the conversion.  Comments are expected to be
stripped by the caller (``%`` is literal here), and characters that would be
re-read as markup (backslash, braces, ``$``, ``~``) are emitted as their
fullwidth forms.
"""

from __future__ import annotations

import hashlib
import json
import re
import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from .texparse import (
    DEFAULT_ARITIES,
    Command,
    Comment,
    Environment,
    Group,
    Math,
    Node,
    Text,
    Verbatim,
    parse_tex,
)

MATH_ENVIRONMENTS = frozenset(
    {"equation", "equation*", "align", "align*", "gather", "gather*", "multline",
     "multline*", "eqnarray", "eqnarray*", "displaymath", "math", "flalign", "flalign*"}
)

_FIXPOINT = str.maketrans({"\\": "＼", "{": "｛", "}": "｝", "$": "＄", "~": "～"})
_LIGATURES = (("---", "—"), ("--", "–"), ("``", "“"), ("''", "”"), ("`", "‘"), ("'", "’"))
_SPACING_ACCENTS = {
    "\u0301": "\u00b4", "\u0300": "`", "\u0302": "^", "\u0308": "\u00a8",
    "\u0303": "~", "\u0304": "\u00af", "\u0307": "\u02d9",
}
_WS = re.compile(r"\s+")


@dataclass(frozen=True)
class Macro:
    kind: str
    arity: int
    replacement: str


@dataclass(frozen=True)
class MacroTable:
    macros: dict[str, Macro]
    sha256: str
    version: str
    arities: dict[str, int] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.arities.update(DEFAULT_ARITIES)
        self.arities.update({name: m.arity for name, m in self.macros.items()})


def parse_macro_table(text: str) -> MacroTable:
    macros: dict[str, Macro] = {}
    version = "unversioned"
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.startswith("#"):
            if line.startswith("# version:"):
                version = line.split(":", 1)[1].strip()
            continue
        if not line.strip():
            continue
        try:
            name, kind, arity, replacement = line.split("\t")
            name = json.loads('"%s"' % name[1:])
            macros[name] = Macro(kind, int(arity), json.loads(replacement))
        except ValueError as exc:
            raise ValueError(f"macro table line {lineno}: {exc}") from exc
    return MacroTable(macros, hashlib.sha256(text.encode("utf-8")).hexdigest(), version)


@lru_cache(maxsize=None)
def default_table() -> MacroTable:
    data = resources.files("scifig").joinpath("data/macros.tsv").read_text(encoding="utf-8")
    return parse_macro_table(data)


@dataclass
class NormalizedCaption:
    text: str
    replacements: dict[str, int] = field(default_factory=lambda: {"ref": 0, "cit": 0})
    lossy: bool = False

    @property
    def char_length(self) -> int:
        return len(self.text)


def caption_char_length(caption: NormalizedCaption) -> int:
    """Caption length in unicode code points."""
    return len(caption.text)


def caption_word_count(caption: NormalizedCaption) -> int:
    return len(caption.text.split())


class _Renderer:
    def __init__(self, table: MacroTable):
        self.macros = table.macros
        self.lossy = False

    def nodes(self, nodes: list[Node], math: bool = False) -> str:
        return "".join(self.node(n, math) for n in nodes)

    def node(self, node: Node, math: bool) -> str:
        if isinstance(node, Text):
            return node.content.replace("~", " ")
        if isinstance(node, Group):
            return self.nodes(node.children, math)
        if isinstance(node, Math):
            return self.math(node.children)
        if isinstance(node, Environment):
            if not math and node.name in MATH_ENVIRONMENTS:
                return self.math(node.children)
            return self.nodes(node.children, math)
        if isinstance(node, Verbatim):
            return node.content
        if isinstance(node, Comment):
            return ""
        return self.command(node, math)

    def math(self, nodes: list[Node]) -> str:
        return self.nodes(nodes, True).replace("^∘", "°")

    def args_text(self, cmd: Command, math: bool) -> str:
        return "".join(self.nodes(arg.children, math) for arg in cmd.req_args)

    def command(self, cmd: Command, math: bool) -> str:
        macro = self.macros.get(cmd.name)
        if macro is None:
            self.lossy = True
            return self.args_text(cmd, math)
        kind = macro.kind
        if kind == "symbol":
            return macro.replacement
        if kind == "keep":
            # multi-argument keeps (\href, \textcolor) carry the text last
            return self.nodes(cmd.req_args[-1].children, math) if cmd.req_args else ""
        if kind in ("ref", "cite"):
            return macro.replacement
        if kind == "drop":
            return ""
        if kind == "frac":
            parts = [self.nodes(arg.children, math) for arg in cmd.req_args]
            return macro.replacement.join(parts)
        if kind == "accent":
            return self.accent(cmd, macro.replacement, math)
        self.lossy = True
        return self.args_text(cmd, math)

    def accent(self, cmd: Command, combining: str, math: bool) -> str:
        base = self.args_text(cmd, math)
        if not base:
            return _SPACING_ACCENTS.get(combining, "")
        first = {"ı": "i", "ȷ": "j"}.get(base[0], base[0])
        return unicodedata.normalize("NFC", first + combining) + base[1:]


def _finish(text: str) -> str:
    text = text.translate(_FIXPOINT)
    for src, dst in _LIGATURES:
        text = text.replace(src, dst)
    return _WS.sub(" ", text).strip()


def _counts(text: str) -> dict[str, int]:
    return {"ref": text.count("<ref>"), "cit": text.count("<cit.>")}


def normalize_caption(
    caption_source: str, *, latex: bool = True, table: MacroTable | None = None
) -> NormalizedCaption:
    """Convert caption source to plaintext.

    ``latex=False`` is for text that is already plain (JATS captions): only
    whitespace is collapsed.  Replacement counts are the number of ``<ref>``
    and ``<cit.>`` placeholders in the result.
    """
    if not latex:
        text = _WS.sub(" ", caption_source).strip()
        return NormalizedCaption(text, _counts(text))
    table = table or default_table()
    tree = parse_tex(caption_source, comments=False, arities=table.arities, parse_math=True)
    renderer = _Renderer(table)
    text = _finish(renderer.nodes(tree.root.children))
    return NormalizedCaption(text, _counts(text), renderer.lossy)
