"""Manifest and shard writing, corpus statistics and mixture proportions."""

from __future__ import annotations

import io
import json
import os
import tarfile
import tempfile
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .caption_text import NormalizedCaption
from .errors import DuplicateKey, FormatError, ScifigError

KEY_WIDTH = 9

SUBSET_NAMES = {"commonpool": "CommonPool", "arxiv": "arXiv", "pmc": "PMC"}

# manifest columns, in output order
MANIFEST_FIELDS = (
    "key", "subset", "paper_id", "source_doc", "source_path", "caption_span",
    "caption", "caption_chars", "caption_words", "ref_count", "cit_count",
    "lossy", "width", "height", "image_sha256", "pipeline", "table_sha256", "codec",
)


@dataclass
class ExtractedPair:
    subset: str
    paper_id: str
    source_doc: str  # .tex or .nxml member the caption came from
    source_path: str  # graphic member path
    caption_span: tuple[int, int]
    caption: NormalizedCaption
    width: int
    height: int
    image_sha256: str
    # dropped once the image has been staged on disk
    jpeg: bytes | None = field(default=None, repr=False)
    key: str = ""

    def sort_key(self) -> tuple:
        return (self.subset, self.paper_id, self.source_path, tuple(self.caption_span), self.source_doc)

    def metadata(self, provenance: Mapping[str, str]) -> dict:
        text = self.caption.text
        return {
            "key": self.key,
            "subset": self.subset,
            "paper_id": self.paper_id,
            "source_doc": self.source_doc,
            "source_path": self.source_path,
            "caption_span": list(self.caption_span),
            "caption": text,
            "caption_chars": len(text),
            "caption_words": len(text.split()),
            "ref_count": self.caption.replacements.get("ref", 0),
            "cit_count": self.caption.replacements.get("cit", 0),
            "lossy": self.caption.lossy,
            "width": self.width,
            "height": self.height,
            "image_sha256": self.image_sha256,
            "pipeline": provenance.get("pipeline", ""),
            "table_sha256": provenance.get("table_sha256", ""),
            "codec": provenance.get("codec", ""),
        }


def format_key(n: int) -> str:
    return f"{n:0{KEY_WIDTH}d}"


def assign_keys(pairs: Iterable[ExtractedPair], start: int = 0) -> list[ExtractedPair]:
    """Sort by (subset, paper_id, source_path, caption_span) and number sequentially."""
    ordered = sorted(pairs, key=ExtractedPair.sort_key)
    for i, pair in enumerate(ordered, start):
        pair.key = format_key(i)
    return ordered


def _dumps(row: Mapping) -> str:
    return json.dumps(row, ensure_ascii=False, separators=(",", ":"))


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(rows: Iterable[Mapping], out: str | Path) -> int:
    """Write metadata rows as JSONL sorted by key.  Returns the row count."""
    rows = list(rows)
    seen: set[str] = set()
    for row in rows:
        if row["key"] in seen:
            raise DuplicateKey(f"duplicate key {row['key']}")
        seen.add(row["key"])
    rows.sort(key=lambda r: r["key"])
    body = "".join(_dumps(r) + "\n" for r in rows)
    _atomic_write(Path(out), body.encode("utf-8"))
    return len(rows)


def write_jsonl(rows: Iterable[Mapping], out: str | Path) -> int:
    rows = list(rows)
    _atomic_write(Path(out), "".join(_dumps(r) + "\n" for r in rows).encode("utf-8"))
    return len(rows)


def read_manifest(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if not isinstance(row, dict) or "key" not in row or "caption" not in row:
                raise FormatError(f"{path}:{lineno}: not a manifest row")
            rows.append(row)
    return rows


# -- shards ----------------------------------------------------------------------


@dataclass(frozen=True)
class ShardSample:
    key: str
    jpeg: bytes
    caption: str
    metadata: Mapping


def _tar_entry(tf: tarfile.TarFile, name: str, payload: bytes) -> None:
    info = tarfile.TarInfo(name)
    info.size = len(payload)
    info.mtime = 0
    info.mode = 0o644
    info.uid = info.gid = 0
    info.uname = info.gname = ""
    tf.addfile(info, io.BytesIO(payload))


def write_shards(samples: Iterable[ShardSample], shard_size: int, out_dir: str | Path) -> list[Path]:
    """Write ``{index:05d}.tar`` shards with ``{key}.jpg/.txt/.json`` entries in key order."""
    if shard_size < 1:
        raise ValueError("shard_size must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ordered = sorted(samples, key=lambda s: s.key)
    shards: list[Path] = []
    for index, start in enumerate(range(0, len(ordered), shard_size)):
        buf = io.BytesIO()
        with tarfile.open(fileobj=buf, mode="w", format=tarfile.USTAR_FORMAT) as tf:
            for sample in ordered[start : start + shard_size]:
                _tar_entry(tf, f"{sample.key}.jpg", sample.jpeg)
                _tar_entry(tf, f"{sample.key}.txt", sample.caption.encode("utf-8"))
                _tar_entry(tf, f"{sample.key}.json", _dumps(sample.metadata).encode("utf-8"))
        path = out_dir / f"{index:05d}.tar"
        _atomic_write(path, buf.getvalue())
        shards.append(path)
    return shards


# -- statistics ------------------------------------------------------------------


@dataclass
class SubsetStats:
    figure_count: int = 0
    total_chars: int = 0
    total_words: int = 0

    @property
    def avg_caption_chars(self) -> float | None:
        return self.total_chars / self.figure_count if self.figure_count else None

    @property
    def avg_caption_words(self) -> float | None:
        return self.total_words / self.figure_count if self.figure_count else None

    def merge(self, other: "SubsetStats") -> "SubsetStats":
        return SubsetStats(
            self.figure_count + other.figure_count,
            self.total_chars + other.total_chars,
            self.total_words + other.total_words,
        )

    def as_dict(self) -> dict:
        return {
            "figure_count": self.figure_count,
            "avg_caption_chars": self.avg_caption_chars,
            "avg_caption_words": self.avg_caption_words,
        }


@dataclass
class DatasetStats:
    overall: SubsetStats
    per_subset: dict[str, SubsetStats]

    @property
    def figure_count(self) -> int:
        return self.overall.figure_count

    @property
    def avg_caption_chars(self) -> float | None:
        return self.overall.avg_caption_chars

    @property
    def avg_caption_words(self) -> float | None:
        return self.overall.avg_caption_words

    def as_dict(self) -> dict:
        return {
            **self.overall.as_dict(),
            "per_subset": {k: v.as_dict() for k, v in sorted(self.per_subset.items())},
        }


def compute_stats(rows: Iterable[Mapping]) -> DatasetStats:
    """Figure counts and mean caption lengths (characters and words), one pass."""
    overall = SubsetStats()
    per_subset: dict[str, SubsetStats] = {}
    for row in rows:
        try:
            text = row["caption"]
            subset = row.get("subset", "")
        except (KeyError, TypeError, AttributeError) as exc:
            raise FormatError(f"malformed manifest row: {exc}") from exc
        if not isinstance(text, str):
            raise FormatError("caption is not a string")
        one = SubsetStats(1, len(text), len(text.split()))
        overall = overall.merge(one)
        per_subset[subset] = per_subset.get(subset, SubsetStats()).merge(one)
    return DatasetStats(overall, per_subset)


def _fmt_avg(value: float | None) -> str:
    return "-" if value is None else f"{value:.2f}"


def stats_table_rows(stats: DatasetStats) -> list[tuple[str, int, float | None, float | None]]:
    if not stats.per_subset:
        return [("all", 0, None, None)]
    return [
        (SUBSET_NAMES.get(name, name), s.figure_count, s.avg_caption_chars, s.avg_caption_words)
        for name, s in sorted(stats.per_subset.items())
    ]


def format_stats_table(rows: Sequence[tuple[str, int, float | None, float | None]]) -> str:
    """Aligned text table: Dataset, # figures, avg caption length, avg caption words."""
    header = ("Dataset", "# figures", "avg caption length", "avg caption words")
    body = [(name, f"{count:,}", _fmt_avg(chars), _fmt_avg(words)) for name, count, chars, words in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(4)]
    lines = []
    for r in [header, *body]:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


# -- mixture proportions -----------------------------------------------------------


class AllZero(ScifigError, ValueError):
    reason = "AllZero"


@dataclass
class MixtureProportions:
    fractions: dict[str, float]
    percentages: dict[str, int]


def _round_half_up(x: Fraction) -> int:
    return int((x + Fraction(1, 2)).__floor__())


def mixture_proportions(counts: Mapping[str, int]) -> MixtureProportions:
    """Sampling proportions when every observation is drawn uniformly.

    Percentages are rounded half-up; any residue from 100 is absorbed by the
    subset with the largest fraction.
    """
    if any(c < 0 for c in counts.values()):
        raise ValueError("counts must be non-negative")
    total = sum(counts.values())
    if total == 0:
        raise AllZero("all counts are zero")
    exact = {name: Fraction(c, total) for name, c in counts.items()}
    percentages = {name: _round_half_up(f * 100) for name, f in exact.items()}
    residue = 100 - sum(percentages.values())
    if residue:
        largest = max(exact, key=lambda name: (exact[name], name))
        percentages[largest] += residue
    return MixtureProportions({k: float(v) for k, v in exact.items()}, percentages)


def format_mixture_table(mix: MixtureProportions) -> str:
    names = list(mix.percentages)
    shown = [SUBSET_NAMES.get(n.lower(), n) for n in names]
    width = max(len("Subset"), *(len(s) for s in shown))
    lines = [f"{'Subset'.ljust(width)}  Proportion"]
    for name, label in zip(names, shown):
        lines.append(f"{label.ljust(width)}  {mix.percentages[name]:>9d}%")
    return "\n".join(lines) + "\n"
