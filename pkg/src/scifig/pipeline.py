"""Batch extraction drivers shared by the command line.

Each submission/package is processed by a self-contained worker function
(safe to run in a process pool).  The driver stages images on disk by content
hash, assigns keys once all papers are done, and writes the manifest, logs
and a run summary.
"""

from __future__ import annotations

import logging
import os
import re
import shutil
from collections import Counter
from concurrent.futures import FIRST_COMPLETED, Future, ProcessPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

from . import PIPELINE_VERSION
from .caption_text import default_table, normalize_caption
from .dataset import ExtractedPair, assign_keys, write_jsonl, write_manifest
from .errors import ArchiveError, ImageError
from .imageproc import DEFAULT_QUALITY, DEFAULT_TARGET, RasterizerHook, codec_settings, normalize_image
from .ingest import (
    SourceKind,
    classify_source,
    enumerate_members,
    enumerate_pmc_package,
    gunzip,
    iter_submissions,
    member_extension,
    paper_id_from_name,
)
from .jats_figures import extract_jats_figures, parse_jats
from .latex_figures import FigureCandidate, Rejection, scan_tex_member

log = logging.getLogger(__name__)

EMPTY_CAPTION = "EmptyCaption"
_KEY_FILE = re.compile(r"^\d+\.jpg$")


@dataclass(frozen=True)
class ExtractConfig:
    target: int = DEFAULT_TARGET
    quality: int = DEFAULT_QUALITY
    hook: RasterizerHook | None = None


@dataclass
class PaperResult:
    paper_id: str
    pairs: list[ExtractedPair] = field(default_factory=list)
    rejections: list[dict] = field(default_factory=list)
    skips: list[dict] = field(default_factory=list)
    # per-stage tallies: "<stage>.in", "<stage>.out", "<stage>.rejected.<reason>"
    counts: Counter = field(default_factory=Counter)

    def skip(self, stage: str, reason: str, **extra) -> None:
        self.skips.append({"paper_id": self.paper_id, "stage": stage, "reason": reason, **extra})

    def reject(self, stage: str, rejection: Rejection, **extra) -> None:
        self.rejections.append({**rejection.as_row(), "stage": stage, **extra})
        self.counts[f"{stage}.rejected.{rejection.reason}"] += 1


def _build_pairs(
    result: PaperResult,
    subset: str,
    candidates: list[FigureCandidate],
    read: Callable[[str], bytes],
    config: ExtractConfig,
    latex: bool,
) -> None:
    images: dict[str, object] = {}
    result.counts["images.in"] += len(candidates)
    for cand in candidates:
        if cand.graphics_path not in images:
            try:
                images[cand.graphics_path] = normalize_image(
                    read(cand.graphics_path),
                    member_extension(cand.graphics_path),
                    target=config.target,
                    quality=config.quality,
                    hook=config.hook,
                )
            except ImageError as exc:
                images[cand.graphics_path] = exc
        image = images[cand.graphics_path]
        if isinstance(image, ImageError):
            rejection = Rejection(cand.paper_id, cand.tex_path, cand.caption_span, image.reason)
            result.reject("images", rejection, source_path=cand.graphics_path, detail=str(image))
            continue
        result.counts["images.out"] += 1
        result.counts["captions.in"] += 1
        caption = normalize_caption(cand.caption_source, latex=latex)
        if not caption.text:
            rejection = Rejection(cand.paper_id, cand.tex_path, cand.caption_span, EMPTY_CAPTION)
            result.reject("captions", rejection, source_path=cand.graphics_path)
            continue
        result.counts["captions.out"] += 1
        result.pairs.append(
            ExtractedPair(
                subset=subset,
                paper_id=cand.paper_id,
                source_doc=cand.tex_path,
                source_path=cand.graphics_path,
                caption_span=tuple(cand.caption_span),
                caption=caption,
                width=image.width,
                height=image.height,
                image_sha256=image.sha256,
                jpeg=image.jpeg,
            )
        )


def process_arxiv_submission(paper_id: str, raw: bytes, config: ExtractConfig) -> PaperResult:
    """Run one arXiv submission through classification, figure search and normalization."""
    result = PaperResult(paper_id)
    result.counts["archives.in"] += 1
    try:
        payload = gunzip(raw)
        kind = classify_source(payload)
        if kind is not SourceKind.LATEX_PROJECT_TAR:
            result.skip("classify", kind.value)
            result.counts[f"archives.rejected.{kind.value}"] += 1
            return result
        archive = enumerate_members(payload, paper_id)
    except ArchiveError as exc:
        result.skip("ingest", exc.reason, detail=str(exc))
        result.counts[f"archives.rejected.{exc.reason}"] += 1
        return result
    result.counts["archives.out"] += 1
    for member, reason in archive.dropped:
        result.skip("enumerate", reason, member=member)

    candidates: list[FigureCandidate] = []
    for tex in archive.tex_sources():
        scan = scan_tex_member(archive, tex.path)
        if scan.degraded:
            result.counts["tex.degraded"] += 1
        result.counts["tex.files"] += 1
        result.counts["figures.in"] += scan.graphics_seen
        for rej in scan.rejections:
            result.reject("figures", rej)
        result.counts["figures.out"] += len(scan.candidates)
        candidates.extend(scan.candidates)
    _build_pairs(result, "arxiv", candidates, archive.read, config, latex=True)
    return result


def process_pmc_package(paper_id: str, raw: bytes, config: ExtractConfig) -> PaperResult:
    result = PaperResult(paper_id)
    result.counts["archives.in"] += 1
    try:
        archive = enumerate_pmc_package(raw, paper_id)
        doc = parse_jats(archive.read(archive.nxml))
    except ArchiveError as exc:
        result.skip("ingest", exc.reason, detail=str(exc))
        result.counts[f"archives.rejected.{exc.reason}"] += 1
        return result
    result.counts["archives.out"] += 1
    for member, reason in archive.dropped:
        result.skip("enumerate", reason, member=member)
    candidates, rejections = extract_jats_figures(doc, archive)
    result.counts["figures.in"] += len(candidates) + len(rejections)
    for rej in rejections:
        result.reject("figures", rej)
    result.counts["figures.out"] += len(candidates)
    _build_pairs(result, "pmc", candidates, archive.read, config, latex=False)
    return result


# -- inputs ----------------------------------------------------------------------

ARXIV_SUFFIXES = (".tar", ".gz", ".tgz", ".pdf")
PMC_SUFFIXES = (".tar.gz", ".tgz")


def collect_inputs(paths: Iterable[str | Path], suffixes: tuple[str, ...]) -> list[Path]:
    """Expand directories recursively; files are taken as given.  Sorted, unique."""
    found: set[Path] = set()
    for path in map(Path, paths):
        if path.is_dir():
            for p in path.rglob("*"):
                if p.is_file() and p.name.lower().endswith(suffixes):
                    found.add(p)
        else:
            found.add(path)
    return sorted(found)


def _arxiv_units(files: list[Path], on_error: Callable[[str, Exception], None]) -> Iterator[tuple[str, bytes]]:
    for path in files:
        try:
            yield from iter_submissions(path)
        except (ArchiveError, OSError) as exc:
            on_error(paper_id_from_name(path.name), exc)


def _pmc_units(files: list[Path], on_error) -> Iterator[tuple[str, bytes]]:
    for path in files:
        try:
            yield paper_id_from_name(path.name), path.read_bytes()
        except OSError as exc:
            on_error(paper_id_from_name(path.name), exc)


# -- driver ----------------------------------------------------------------------


@dataclass
class RunOutput:
    manifest: Path
    pairs: int
    summary: dict


def _run_units(worker, units, config: ExtractConfig, jobs: int) -> Iterator[PaperResult]:
    if jobs <= 1:
        for paper_id, raw in units:
            yield worker(paper_id, raw, config)
        return
    limit = jobs * 4
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        pending: set[Future] = set()
        for paper_id, raw in units:
            pending.add(pool.submit(worker, paper_id, raw, config))
            if len(pending) >= limit:
                done, pending = wait(pending, return_when=FIRST_COMPLETED)
                for fut in done:
                    yield fut.result()
        for fut in pending:
            yield fut.result()


STAGES = ("archives", "figures", "images", "captions")


def stage_summary(counts: Counter) -> list[dict]:
    stages = []
    for stage in STAGES:
        prefix = f"{stage}.rejected."
        rejected = {k[len(prefix):]: v for k, v in sorted(counts.items()) if k.startswith(prefix)}
        stages.append({
            "stage": stage,
            "unit": "archives" if stage == "archives" else "pairs",
            "in": counts.get(f"{stage}.in", 0),
            "rejected": rejected,
            "removed": 0,
            "out": counts.get(f"{stage}.out", 0),
        })
    return stages


def prepare_output_dir(out_dir: Path) -> Path:
    from .errors import ConfigError

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".scifig-write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out_dir} is not writable: {exc}") from exc
    return out_dir


def run_extraction(
    subset: str,
    inputs: list[str | Path],
    out_dir: str | Path,
    config: ExtractConfig,
    jobs: int = 1,
) -> RunOutput:
    out_dir = prepare_output_dir(Path(out_dir))
    images_dir = out_dir / "images"
    staging = images_dir / ".staging"
    if images_dir.exists():
        for p in images_dir.iterdir():
            if _KEY_FILE.match(p.name):
                p.unlink()
    staging.mkdir(parents=True, exist_ok=True)

    counts: Counter = Counter()
    pairs: list[ExtractedPair] = []
    rejections: list[dict] = []
    skips: list[dict] = []

    def input_error(paper_id: str, exc: Exception) -> None:
        reason = getattr(exc, "reason", type(exc).__name__)
        skips.append({"paper_id": paper_id, "stage": "input", "reason": reason, "detail": str(exc)})
        counts["inputs.unreadable"] += 1

    if subset == "arxiv":
        units = _arxiv_units(collect_inputs(inputs, ARXIV_SUFFIXES), input_error)
        worker = process_arxiv_submission
    else:
        units = _pmc_units(collect_inputs(inputs, PMC_SUFFIXES), input_error)
        worker = process_pmc_package

    for result in _run_units(worker, units, config, jobs):
        counts.update(result.counts)
        rejections.extend(result.rejections)
        skips.extend(result.skips)
        for pair in result.pairs:
            staged = staging / f"{pair.image_sha256}.jpg"
            if not staged.exists():
                tmp = staging / f".{pair.image_sha256}.{os.getpid()}.tmp"
                tmp.write_bytes(pair.jpeg)
                os.replace(tmp, staged)
            pair.jpeg = None
            pairs.append(pair)

    table = default_table()
    codec = codec_settings(config.quality, config.target)
    provenance = {
        "pipeline": PIPELINE_VERSION,
        "table_sha256": table.sha256,
        "codec": "pillow-{pillow}/libjpeg-{libjpeg}/q{quality}/{subsampling}/{resample}/{target}/hook-{hook}".format(
            hook=config.hook.identity if config.hook else "none", **codec
        ),
    }
    ordered = assign_keys(pairs)
    for pair in ordered:
        shutil.copyfile(staging / f"{pair.image_sha256}.jpg", images_dir / f"{pair.key}.jpg")
    shutil.rmtree(staging)

    manifest = out_dir / "manifest.jsonl"
    write_manifest((p.metadata(provenance) for p in ordered), manifest)
    rejections.sort(key=lambda r: (r["paper_id"], r["tex_path"], r["span"], r["reason"]))
    skips.sort(key=lambda r: (r["paper_id"], r["stage"], r["reason"], r.get("member", "")))
    write_jsonl(rejections, out_dir / "rejections.jsonl")
    write_jsonl(skips, out_dir / "skips.jsonl")

    summary = {
        "command": f"extract-{subset}",
        "pipeline": PIPELINE_VERSION,
        "config": {
            "resize_target": config.target,
            "jpeg_quality": config.quality,
            "rasterizer": config.hook.template if config.hook else None,
            "rasterizer_identity": config.hook.identity if config.hook else None,
            "jobs": jobs,
            "table_sha256": table.sha256,
            "table_version": table.version,
            "codec": codec,
        },
        "stages": stage_summary(counts),
        "pairs_out": len(ordered),
        "tex_files": counts.get("tex.files", 0),
        "tex_degraded": counts.get("tex.degraded", 0),
        "unreadable_inputs": counts.get("inputs.unreadable", 0),
    }
    write_summary(summary, out_dir / "summary.json")
    return RunOutput(manifest, len(ordered), summary)


def write_summary(summary: dict, path: Path) -> None:
    import json

    path.write_text(json.dumps(summary, indent=2, sort_keys=False) + "\n", encoding="utf-8")
