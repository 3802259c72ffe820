"""``scifig`` command line.

Exit codes: 0 success (per-item rejections are not failures), 1 usage or
configuration error, 2 I/O error, 3 malformed input data.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import PIPELINE_VERSION
from .dataset import (
    AllZero,
    ShardSample,
    compute_stats,
    format_mixture_table,
    format_stats_table,
    mixture_proportions,
    read_manifest,
    stats_table_rows,
    write_jsonl,
    write_manifest,
    write_shards,
)
from .decontam import (
    DEFAULT_THRESHOLD,
    DecontamReport,
    filter_pairs,
    load_descriptor_index,
    make_provider,
)
from .errors import ConfigError, DataFormatError, DimMismatch, ProviderError, ScifigError
from .fetch import fetch_all, read_acquisition_manifest, report_rows
from .imageproc import DEFAULT_QUALITY, DEFAULT_TARGET, RasterizerHook
from .pipeline import ExtractConfig, prepare_output_dir, run_extraction, write_summary

log = logging.getLogger("scifig")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_DATA = 3


@dataclass(frozen=True)
class PipelineConfig:
    inputs: tuple[str, ...] = ()
    out: str = "out"
    jpeg_quality: int = DEFAULT_QUALITY
    resize: int = DEFAULT_TARGET
    threshold: float = DEFAULT_THRESHOLD
    provider: str = "phash"
    rasterizer: str | None = None
    jobs: int = 1
    shard_size: int = 10000

    def validate(self) -> None:
        if self.resize < 1:
            raise ConfigError(f"--resize must be >= 1, got {self.resize}")
        if not 1 <= self.jpeg_quality <= 100:
            raise ConfigError(f"--jpeg-quality must be in 1..100, got {self.jpeg_quality}")
        if self.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {self.jobs}")
        if self.shard_size < 1:
            raise ConfigError(f"--shard-size must be >= 1, got {self.shard_size}")

    def extract_config(self) -> ExtractConfig:
        hook = RasterizerHook(self.rasterizer) if self.rasterizer else None
        return ExtractConfig(target=self.resize, quality=self.jpeg_quality, hook=hook)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _emit(args, payload: dict, text: str) -> None:
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        sys.stdout.write(text)


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig(
        inputs=tuple(getattr(args, "inputs", ()) or ()),
        out=args.out,
        jpeg_quality=getattr(args, "jpeg_quality", DEFAULT_QUALITY),
        resize=getattr(args, "resize", DEFAULT_TARGET),
        threshold=getattr(args, "threshold", DEFAULT_THRESHOLD),
        provider=getattr(args, "provider", "phash"),
        rasterizer=getattr(args, "rasterizer", None) or os.environ.get("SCIFIG_RASTERIZER") or None,
        jobs=getattr(args, "jobs", 1),
        shard_size=getattr(args, "shard_size", 10000),
    )
    cfg.validate()
    return cfg


# -- subcommands -------------------------------------------------------------------


def _extract(args, subset: str) -> int:
    cfg = _config(args)
    for path in cfg.inputs:
        if not Path(path).exists():
            raise ConfigError(f"input does not exist: {path}")
    result = run_extraction(subset, list(cfg.inputs), cfg.out, cfg.extract_config(), jobs=cfg.jobs)
    text = "".join(
        f"{s['stage']:<9} in={s['in']:<7} rejected={sum(s['rejected'].values()):<7} out={s['out']}\n"
        for s in result.summary["stages"]
    ) + f"wrote {result.pairs} pairs to {result.manifest}\n"
    _emit(args, result.summary, text)
    return EXIT_OK


def cmd_extract_arxiv(args) -> int:
    return _extract(args, "arxiv")


def cmd_extract_pmc(args) -> int:
    return _extract(args, "pmc")


def cmd_decontaminate(args) -> int:
    cfg = _config(args)
    try:
        provider = make_provider(cfg.provider)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = prepare_output_dir(Path(cfg.out))
    rows = read_manifest(args.manifest)
    index = load_descriptor_index(args.index)
    images = Path(args.images) if args.images else Path(args.manifest).parent / "images"

    decided, descriptors, undecided = [], [], []
    for row in rows:
        try:
            jpeg = (images / f"{row['key']}.jpg").read_bytes()
            vector = provider.describe(jpeg)
        except (ProviderError, OSError) as exc:
            undecided.append({**row, "undecided_reason": str(exc)})
            continue
        if vector.shape != (index.dim,):
            raise DimMismatch(f"descriptor dim {vector.shape[0]} != index dim {index.dim}")
        decided.append(row)
        descriptors.append(vector)

    kept, removed, report = filter_pairs(decided, descriptors, index, cfg.threshold)
    report = DecontamReport(
        total=len(rows),
        removed=report.removed,
        threshold=cfg.threshold,
        per_eval_dataset_hits=report.per_eval_dataset_hits,
        undecided=len(undecided),
        provider=provider.name,
        descriptor_faithful=provider.descriptor_faithful,
    )
    write_manifest(kept, out / "kept.jsonl")
    write_manifest(removed, out / "removed.jsonl")
    write_jsonl(undecided, out / "undecided.jsonl")
    (out / "report.json").write_text(json.dumps(report.as_dict(), indent=2) + "\n", encoding="utf-8")
    summary = {
        "command": "decontaminate",
        "pipeline": PIPELINE_VERSION,
        "config": {"threshold": cfg.threshold, "provider": provider.name, "index": str(args.index)},
        "stages": [{
            "stage": "decontam",
            "unit": "pairs",
            "in": len(rows),
            "rejected": {"Undecided": len(undecided)} if undecided else {},
            "removed": len(removed),
            "out": len(kept),
        }],
        "report": report.as_dict(),
    }
    write_summary(summary, out / "summary.json")
    text = (f"total={report.total} removed={report.removed} undecided={report.undecided} "
            f"kept={len(kept)} threshold={cfg.threshold} provider={provider.name}\n")
    _emit(args, report.as_dict(), text)
    return EXIT_OK


def cmd_stats(args) -> int:
    stats = compute_stats(read_manifest(args.manifest))
    _emit(args, stats.as_dict(), format_stats_table(stats_table_rows(stats)))
    return EXIT_OK


def cmd_shard(args) -> int:
    cfg = _config(args)
    rows = read_manifest(args.manifest)
    images = Path(args.images) if args.images else Path(args.manifest).parent / "images"
    samples = [
        ShardSample(row["key"], (images / f"{row['key']}.jpg").read_bytes(), row["caption"], row)
        for row in rows
    ]
    out = prepare_output_dir(Path(cfg.out))
    shards = write_shards(samples, cfg.shard_size, out)
    payload = {"shards": [str(p) for p in shards], "samples": len(samples), "shard_size": cfg.shard_size}
    _emit(args, payload, f"wrote {len(samples)} samples into {len(shards)} shards under {out}\n")
    return EXIT_OK


def cmd_fetch(args) -> int:
    entries = read_acquisition_manifest(args.manifest)
    out = prepare_output_dir(Path(args.out))
    results = fetch_all(entries, out, parallelism=args.jobs)
    rows = report_rows(results)
    write_jsonl(rows, out / "fetch_report.jsonl")
    failed = sum(1 for r in results if r.status != "OK")
    payload = {"entries": len(results), "failed": failed, "results": rows}
    _emit(args, payload, f"fetched {len(results) - failed}/{len(results)} entries; {failed} failed\n")
    return EXIT_OK


def _parse_count(text: str) -> tuple[str, int]:
    name, sep, value = text.partition("=")
    try:
        count = int(value.replace(",", "").replace("_", ""))
    except ValueError:
        count = -1
    if not sep or not name or count < 0:
        raise argparse.ArgumentTypeError(f"expected NAME=COUNT with COUNT >= 0, got {text!r}")
    return name, count


def cmd_mixture(args) -> int:
    counts = dict(args.counts)
    if len(counts) != len(args.counts):
        raise ConfigError("subset names must be unique")
    try:
        mix = mixture_proportions(counts)
    except AllZero as exc:
        raise ConfigError(str(exc)) from exc
    payload = {"counts": counts, "fractions": mix.fractions, "percentages": mix.percentages}
    _emit(args, payload, format_mixture_table(mix))
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scifig", description="Build figure/caption datasets from paper sources.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_default="out"):
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--json", action="store_true", help="print machine-readable JSON")

    def extract(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("inputs", nargs="*", help="archive files or directories")
        common(p)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--resize", type=int, default=DEFAULT_TARGET, help="max image side (px)")
        p.add_argument("--jpeg-quality", type=int, default=DEFAULT_QUALITY)
        p.add_argument("--rasterizer", help="command template for pdf/eps/ps ({input} {output} {maxdim})")
        p.set_defaults(func=func)

    extract("extract-arxiv", cmd_extract_arxiv, "extract pairs from arXiv LaTeX sources")
    extract("extract-pmc", cmd_extract_pmc, "extract pairs from PMC OA packages")

    p = sub.add_parser("decontaminate", help="remove near-duplicates of evaluation images")
    p.add_argument("manifest")
    p.add_argument("index", help="descriptor index file (SFDX1)")
    p.add_argument("--images", help="image directory (default: images/ next to the manifest)")
    common(p, "decontam")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--provider", default="phash", help="phash | sidecar:PATH | exec:COMMAND")
    p.set_defaults(func=cmd_decontaminate)

    p = sub.add_parser("stats", help="figure counts and caption lengths")
    p.add_argument("manifest")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("shard", help="pack a manifest into tar shards")
    p.add_argument("manifest")
    p.add_argument("--images")
    common(p, "shards")
    p.add_argument("--shard-size", type=int, default=10000)
    p.set_defaults(func=cmd_shard)

    p = sub.add_parser("fetch", help="download or copy source archives")
    p.add_argument("manifest", help="acquisition manifest (JSONL)")
    common(p, "sources")
    p.add_argument("--jobs", type=int, default=4)
    p.set_defaults(func=cmd_fetch)

    p = sub.add_parser("mixture", help="uniform-sampling proportions for subset counts")
    p.add_argument("counts", nargs="+", type=_parse_count, metavar="NAME=COUNT")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_mixture)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # --help exits 0, usage errors exit 1
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"scifig: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"scifig: {exc.reason}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"scifig: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ScifigError as exc:
        print(f"scifig: {exc.reason}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
