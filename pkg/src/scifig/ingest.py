"""Archive streaming, source-format classification and member enumeration."""

from __future__ import annotations

import enum
import gzip
import io
import logging
import posixpath
import re
import tarfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

from .errors import DecompressError, MissingNxml, MultipleNxml, PathTraversal, TarError

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = ("jpg", "jpeg", "gif", "png", "pdf", "eps", "ps")

_GZIP_MAGIC = b"\x1f\x8b"
_HTML_TAG = re.compile(rb"<\s*(!doctype\s+html|html|head|body|title|meta)\b", re.I)
_TEX_COMMAND = re.compile(rb"\\[A-Za-z]+")
_SNIFF_BYTES = 4096


class SourceKind(enum.Enum):
    LATEX_PROJECT_TAR = "LatexProjectTar"
    SINGLE_TEX = "SingleTex"
    HTML = "Html"
    GHOSTSCRIPT = "Ghostscript"
    PDF = "Pdf"
    UNKNOWN = "Unknown"


class MemberKind(enum.Enum):
    TEX = "TexSource"
    IMAGE = "Image"
    OTHER = "Other"


@dataclass(frozen=True)
class ArchiveMember:
    path: str
    size_bytes: int
    kind: MemberKind

    @property
    def extension(self) -> str:
        """Lower-cased extension without the dot ('' if none)."""
        return member_extension(self.path)


@dataclass
class PaperArchive:
    paper_id: str
    members: dict[str, ArchiveMember] = field(default_factory=dict)
    nxml: str | None = None
    # payloads of tex/image/nxml members; Other members are not retained
    contents: dict[str, bytes] = field(default_factory=dict, repr=False, compare=False)
    # (raw path, reason) for members dropped during enumeration
    dropped: list[tuple[str, str]] = field(default_factory=list, compare=False)

    def read(self, path: str) -> bytes:
        return self.contents[path]

    def images(self) -> list[ArchiveMember]:
        return [m for m in self.members.values() if m.kind is MemberKind.IMAGE]

    def tex_sources(self) -> list[ArchiveMember]:
        return sorted(
            (m for m in self.members.values() if m.kind is MemberKind.TEX),
            key=lambda m: m.path,
        )


def member_extension(path: str) -> str:
    name = posixpath.basename(path)
    _, dot, ext = name.rpartition(".")
    return ext.lower() if dot and _ else ""


def classify_member(path: str) -> MemberKind:
    ext = member_extension(path)
    if ext == "tex":
        return MemberKind.TEX
    if ext in IMAGE_EXTENSIONS:
        return MemberKind.IMAGE
    return MemberKind.OTHER


def normalize_member_path(raw: str) -> str:
    """Normalize a tar entry name to a relative '/'-separated path.

    Raises PathTraversal for absolute paths or paths escaping the root.
    """
    path = raw.replace("\\", "/")
    if path.startswith("/") or re.match(r"^[A-Za-z]:/", path):
        raise PathTraversal(f"absolute member path: {raw!r}")
    if ".." in path.split("/"):
        raise PathTraversal(f"parent segment in member path: {raw!r}")
    norm = posixpath.normpath(path)
    if norm in ("", "."):
        raise PathTraversal(f"empty member path: {raw!r}")
    return norm


def paper_id_from_name(name: str) -> str:
    """Derive a paper id from an archive file name (stem without archive suffixes)."""
    stem = Path(name).name
    while True:
        lower = stem.lower()
        for suffix in (".gz", ".tgz", ".tar", ".pdf"):
            if lower.endswith(suffix) and len(stem) > len(suffix):
                stem = stem[: -len(suffix)]
                break
        else:
            return stem


def gunzip(raw: bytes) -> bytes:
    """Decompress a gzip payload; bytes without the gzip magic are returned as-is."""
    if not raw.startswith(_GZIP_MAGIC):
        return raw
    try:
        return gzip.decompress(raw)
    except (OSError, EOFError, zlib.error) as exc:
        raise DecompressError(str(exc)) from exc


def _is_tar(data: bytes) -> bool:
    if len(data) < 512:
        return False
    header = data[:512]
    if header[257:262] == b"ustar":
        return True
    if header == bytes(512):
        # an empty archive is just end-of-archive zero blocks
        return len(data) >= 1024 and data[:1024] == bytes(1024)
    # v7 tar: validate the header checksum
    try:
        stored = int(header[148:156].split(b"\0", 1)[0].strip() or b"-1", 8)
    except ValueError:
        return False
    computed = sum(header[:148]) + 8 * 32 + sum(header[156:])
    return stored == computed


def classify_source(data: bytes) -> SourceKind:
    """Classify one arXiv submission payload.

    Gzip-compressed input is decompressed first (DecompressError if corrupt).
    Detection order: tar structure, %PDF, %!PS, HTML sniff, TeX heuristic.
    """
    data = gunzip(data)
    if _is_tar(data):
        return SourceKind.LATEX_PROJECT_TAR
    if data.startswith(b"%PDF"):
        return SourceKind.PDF
    if data.startswith(b"%!PS"):
        return SourceKind.GHOSTSCRIPT
    head = data[:_SNIFF_BYTES]
    if head.lstrip().startswith(b"<") and _HTML_TAG.search(head):
        return SourceKind.HTML
    if _TEX_COMMAND.search(head):
        return SourceKind.SINGLE_TEX
    return SourceKind.UNKNOWN


def _retain(kind: MemberKind, path: str) -> bool:
    return kind is not MemberKind.OTHER or path.lower().endswith(".nxml")


def _read_tar(fileobj, mode: str, paper_id: str) -> PaperArchive:
    archive = PaperArchive(paper_id=paper_id)
    try:
        with tarfile.open(fileobj=fileobj, mode=mode) as tf:
            for info in tf:
                if not info.isreg():
                    continue
                try:
                    path = normalize_member_path(info.name)
                except PathTraversal as exc:
                    log.warning("%s: %s", paper_id, exc)
                    archive.dropped.append((info.name, PathTraversal.reason))
                    continue
                if path in archive.members:
                    archive.dropped.append((info.name, "DuplicatePath"))
                    continue
                kind = classify_member(path)
                archive.members[path] = ArchiveMember(path, info.size, kind)
                if _retain(kind, path):
                    fh = tf.extractfile(info)
                    archive.contents[path] = fh.read() if fh is not None else b""
    except (tarfile.TarError, EOFError, OSError, zlib.error) as exc:
        raise TarError(f"{paper_id}: {exc}") from exc
    return archive


def enumerate_members(data: bytes, paper_id: str) -> PaperArchive:
    """Enumerate the regular entries of an (uncompressed) project tar."""
    return _read_tar(io.BytesIO(data), "r|", paper_id)


def enumerate_pmc_package(data: bytes, paper_id: str) -> PaperArchive:
    """Enumerate a gzipped PMC OA package and locate its unique .nxml member."""
    try:
        archive = _read_tar(io.BytesIO(data), "r|gz", paper_id)
    except TarError as exc:
        # tarfile masks gzip corruption; probe the stream to report the right reason
        try:
            gzip.decompress(data)
        except (OSError, EOFError, zlib.error) as gz_exc:
            raise DecompressError(f"{paper_id}: {gz_exc}") from exc
        raise
    nxml = [p for p in archive.members if p.lower().endswith(".nxml")]
    if not nxml:
        raise MissingNxml(f"{paper_id}: no .nxml member")
    if len(nxml) > 1:
        raise MultipleNxml(f"{paper_id}: {len(nxml)} .nxml members")
    archive.nxml = nxml[0]
    return archive


def iter_submissions(path: str | Path) -> Iterator[tuple[str, bytes]]:
    """Yield (paper_id, raw bytes) for every submission in an input file.

    ``.tar`` files are treated as arXiv bulk containers whose regular
    members are per-paper ``.gz``/``.pdf`` files; anything else is a single
    submission named after the file.
    """
    path = Path(path)
    if path.name.lower().endswith(".tar"):
        try:
            with tarfile.open(path, mode="r|") as tf:
                for info in tf:
                    if not info.isreg():
                        continue
                    fh = tf.extractfile(info)
                    if fh is None:
                        continue
                    yield paper_id_from_name(info.name), fh.read()
        except (tarfile.TarError, EOFError) as exc:
            raise TarError(f"{path}: {exc}") from exc
    else:
        yield paper_id_from_name(path.name), path.read_bytes()
