"""Locate ``\\includegraphics``/``\\caption`` pairs in parsed LaTeX sources.

A graphic is paired with a caption when, within its neighbourhood (the sibling
nodes of its nearest enclosing environment or brace group), there is at least
one ``\\caption`` and no other ``\\includegraphics``.  The environment name is
irrelevant, so a graphic inside ``subfigure`` pairs with the subfigure's own
caption and never with the parent figure's.  Macros are not expanded:
aliases of ``\\includegraphics`` are invisible.
"""

from __future__ import annotations

import logging
import posixpath
import re
from dataclasses import dataclass, field

from .ingest import IMAGE_EXTENSIONS, MemberKind, PaperArchive, member_extension
from .texparse import (
    DEFINITION_COMMANDS,
    Command,
    Group,
    Node,
    Span,
    TexTree,
    child_lists,
    decode_tex,
    parse_tex,
)

log = logging.getLogger(__name__)

# probe order for extensionless \includegraphics arguments
PROBE_EXTENSIONS = ("pdf", "png", "jpg", "jpeg", "gif", "eps", "ps")

MISSING_FILE = "MissingFile"
NO_CAPTION = "NoCaption"
MULTIPLE_GRAPHICS = "MultipleGraphics"

_COMMENT = re.compile(r"(?<!\\)((?:\\\\)*)%[^\n]*(?:\n[ \t]*)?")


@dataclass(frozen=True)
class FigureCandidate:
    paper_id: str
    tex_path: str
    graphics_path: str
    caption_source: str
    caption_span: Span


@dataclass(frozen=True)
class Rejection:
    paper_id: str
    tex_path: str
    span: Span
    reason: str

    def as_row(self) -> dict:
        return {"paper_id": self.paper_id, "tex_path": self.tex_path,
                "span": list(self.span), "reason": self.reason}


@dataclass
class ScanResult:
    candidates: list[FigureCandidate] = field(default_factory=list)
    rejections: list[Rejection] = field(default_factory=list)
    graphics_seen: int = 0
    degraded: bool = False


def resolve_graphics_path(raw: str, archive: PaperArchive) -> str | None:
    """Resolve an ``\\includegraphics`` argument to an image member path.

    Paths are relative to the archive root.  Extensionless names are probed
    with PROBE_EXTENSIONS in order.  Exact-case matches win; otherwise a
    unique case-insensitive match is accepted.  Returns None when nothing (or
    more than one case-insensitive member) matches.
    """
    raw = raw.strip().strip('"')
    if not raw:
        return None
    path = posixpath.normpath(raw.replace("\\", "/"))
    if path.startswith("/") or path.startswith("../") or path == "..":
        return None
    if member_extension(path) in IMAGE_EXTENSIONS:
        probes = [path]
    else:
        probes = [f"{path}.{ext}" for ext in PROBE_EXTENSIONS]

    images = {p for p, m in archive.members.items() if m.kind is MemberKind.IMAGE}
    for probe in probes:
        if probe in images:
            return probe
    folded: dict[str, list[str]] = {}
    for p in images:
        folded.setdefault(p.lower(), []).append(p)
    for probe in probes:
        hits = folded.get(probe.lower(), [])
        if len(hits) == 1:
            return hits[0]
        if len(hits) > 1:
            log.info("%s: ambiguous graphics path %r -> %s", archive.paper_id, raw, sorted(hits))
            return None
    return None


def _is_graphic(node: Node) -> bool:
    # an \includegraphics without an argument (e.g. inside an alias body) includes nothing
    return isinstance(node, Command) and node.name == "includegraphics" and bool(node.req_args)


def _is_caption(node: Node) -> bool:
    return isinstance(node, Command) and node.name == "caption" and bool(node.req_args)


def _raw_argument(group: Group, source: str) -> str:
    start, end = group.inner_span
    return source[start:end].replace("{", "").replace("}", "")


def strip_comments(source: str) -> str:
    """Remove ``%`` comments (with their line end, as TeX does)."""
    return _COMMENT.sub(lambda m: m.group(1), source)


def _caption_source(cmd: Command, source: str) -> tuple[str, Span]:
    span = cmd.req_args[0].inner_span
    return strip_comments(source[span[0] : span[1]]), span


def _scopes(root: Group):
    """Yield every sibling list in the tree, skipping macro definition bodies."""
    stack: list[list[Node]] = [root.children]
    while stack:
        scope = stack.pop()
        yield scope
        for node in reversed(scope):
            if isinstance(node, Command) and node.name in DEFINITION_COMMANDS:
                continue
            stack.extend(reversed(list(child_lists(node))))


def find_figure_candidates(
    tree: TexTree, archive: PaperArchive, tex_path: str = ""
) -> ScanResult:
    """Apply the neighbourhood rules to every ``\\includegraphics`` in ``tree``.

    Rejection precedence per graphic: MultipleGraphics, MissingFile, NoCaption.
    Candidates and rejections come out in source order.
    """
    result = ScanResult(degraded=tree.degraded)
    source = tree.source
    found: list[tuple[Span, FigureCandidate]] = []
    for scope in _scopes(tree.root):
        graphics = [i for i, n in enumerate(scope) if _is_graphic(n)]
        if not graphics:
            continue
        result.graphics_seen += len(graphics)
        if len(graphics) > 1:
            for i in graphics:
                result.rejections.append(
                    Rejection(archive.paper_id, tex_path, scope[i].span, MULTIPLE_GRAPHICS)
                )
            continue
        index = graphics[0]
        graphic = scope[index]
        resolved = resolve_graphics_path(_raw_argument(graphic.req_args[0], source), archive)
        if resolved is None:
            result.rejections.append(Rejection(archive.paper_id, tex_path, graphic.span, MISSING_FILE))
            continue
        caption = _pick_caption(scope, index, source)
        if caption is None:
            result.rejections.append(Rejection(archive.paper_id, tex_path, graphic.span, NO_CAPTION))
            continue
        text, span = caption
        found.append((graphic.span, FigureCandidate(archive.paper_id, tex_path, resolved, text, span)))
    found.sort(key=lambda item: item[0])
    result.candidates = [c for _, c in found]
    result.rejections.sort(key=lambda r: r.span)
    return result


def _pick_caption(scope: list[Node], index: int, source: str) -> tuple[str, Span] | None:
    """Nearest non-empty caption after the graphic, else nearest before it."""
    after = scope[index + 1 :]
    before = reversed(scope[:index])
    for node in list(after) + list(before):
        if _is_caption(node):
            text, span = _caption_source(node, source)
            if text.strip():
                return text, span
    return None


def scan_tex_member(archive: PaperArchive, tex_path: str) -> ScanResult:
    """Decode, parse and scan one ``.tex`` member of ``archive``."""
    tree = parse_tex(decode_tex(archive.read(tex_path)))
    return find_figure_candidates(tree, archive, tex_path)
