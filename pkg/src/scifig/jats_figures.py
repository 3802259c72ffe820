"""Figure/caption extraction from PMC ``.nxml`` (JATS) documents."""

from __future__ import annotations

import posixpath
import re

from lxml import etree

from .errors import XmlError
from .ingest import PaperArchive
from .latex_figures import MISSING_FILE, NO_CAPTION, FigureCandidate, Rejection

NON_ENGLISH = "NonEnglish"
NO_GRAPHIC = "NoGraphic"
NOT_JPG = "NotJpg"

XLINK_HREF = "{http://www.w3.org/1999/xlink}href"
XML_LANG = "{http://www.w3.org/XML/1998/namespace}lang"

# elements whose text is separated from what follows by a space
_BLOCK = frozenset({"title", "p", "list-item", "label", "disp-formula", "def-item"})
_WS = re.compile(r"\s+")


def parse_jats(data: bytes) -> etree._Element:
    """Parse nxml bytes.  No DTD loading, entity expansion or network access."""
    parser = etree.XMLParser(
        resolve_entities=False, no_network=True, load_dtd=False, huge_tree=False, recover=False
    )
    try:
        root = etree.fromstring(data, parser)
    except (etree.XMLSyntaxError, ValueError) as exc:
        raise XmlError(str(exc)) from exc
    if root is None:
        raise XmlError("empty document")
    return root


def _local(tag) -> str:
    if not isinstance(tag, str):
        return ""
    return tag.rsplit("}", 1)[-1]


def _figure_lang(fig) -> str | None:
    for attr in ("lang", XML_LANG):
        value = fig.get(attr)
        if value is not None:
            return value
    return None


def is_english(lang: str | None) -> bool:
    """Figures without a language attribute pass; otherwise the tag must start with 'en'."""
    return lang is None or lang.lower().startswith("en")


def caption_text(caption) -> str:
    """Descendant text of a caption element; ``xref`` elements become ``<ref>``."""
    parts: list[str] = []

    def visit(el) -> None:
        name = _local(el.tag)
        if name == "xref":
            parts.append("<ref>")
        elif name:  # skip comments and processing instructions
            if el.text:
                parts.append(el.text)
            for child in el:
                visit(child)
                if child.tail:
                    parts.append(child.tail)
            if name in _BLOCK:
                parts.append(" ")

    visit(caption)
    return _WS.sub(" ", "".join(parts)).strip()


def _resolve_href(href: str, archive: PaperArchive) -> tuple[str | None, str | None]:
    """Return (member path, rejection reason); exactly one is None.

    PMC hrefs often omit the extension and contain dots of their own
    (``pone.0001.g001``), so the exact name is tried before ``name.jpg``.
    """
    by_name: dict[str, list[str]] = {}
    for path in archive.members:
        by_name.setdefault(posixpath.basename(path).lower(), []).append(path)
    name = posixpath.basename(href.strip()).lower()
    if not name:
        return None, NO_GRAPHIC
    exact = sorted(by_name.get(name, []))
    if exact:
        return (exact[0], None) if name.endswith(".jpg") else (None, NOT_JPG)
    with_jpg = sorted(by_name.get(name + ".jpg", []))
    if with_jpg:
        return with_jpg[0], None
    if any(key.rpartition(".")[0] == name for key in by_name):
        return None, NOT_JPG
    return None, MISSING_FILE


def extract_jats_figures(
    doc, archive: PaperArchive, nxml_path: str | None = None
) -> tuple[list[FigureCandidate], list[Rejection]]:
    """Candidates (one per graphic of each qualifying fig) in document order.

    For JATS candidates ``caption_span`` is (fig ordinal, graphic ordinal).
    """
    nxml_path = nxml_path or archive.nxml or ""
    candidates: list[FigureCandidate] = []
    rejections: list[Rejection] = []
    figs = [el for el in doc.iter() if _local(el.tag) == "fig"]
    for fig_no, fig in enumerate(figs):

        def reject(reason: str, graphic_no: int = 0) -> None:
            rejections.append(Rejection(archive.paper_id, nxml_path, (fig_no, graphic_no), reason))

        if not is_english(_figure_lang(fig)):
            reject(NON_ENGLISH)
            continue
        graphics = [el for el in fig.iter() if _local(el.tag) == "graphic"]
        if not graphics:
            reject(NO_GRAPHIC)
            continue
        captions = [el for el in fig if _local(el.tag) == "caption"]
        text = caption_text(captions[0]) if captions else ""
        for graphic_no, graphic in enumerate(graphics):
            href = graphic.get(XLINK_HREF) or graphic.get("href")
            if not href:
                reject(NO_GRAPHIC, graphic_no)
                continue
            path, reason = _resolve_href(href, archive)
            if reason is not None:
                reject(reason, graphic_no)
                continue
            if not text:
                reject(NO_CAPTION, graphic_no)
                continue
            candidates.append(
                FigureCandidate(archive.paper_id, nxml_path, path, text, (fig_no, graphic_no))
            )
    return candidates, rejections
