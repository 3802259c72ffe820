from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from corpus import write_arxiv_corpus, write_pmc_corpus  # noqa: E402

from scifig.pipeline import ExtractConfig, run_extraction  # noqa: E402

GOLDEN = Path(__file__).parent / "golden"

MANIFEST_PROJECTION = ("key", "paper_id", "source_doc", "source_path", "caption", "width", "height")
REJECTION_PROJECTION = ("paper_id", "tex_path", "stage", "reason")


def project_rows(rows, fields) -> str:
    return "".join(
        json.dumps({f: r.get(f, "") for f in fields}, ensure_ascii=False, separators=(",", ":")) + "\n"
        for r in rows
    )


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def rejection_projection(out_dir: Path) -> str:
    rows = read_jsonl(out_dir / "rejections.jsonl") + read_jsonl(out_dir / "skips.jsonl")
    rows = [r for r in rows if r["stage"] != "enumerate"]
    return project_rows(rows, REJECTION_PROJECTION)


@pytest.fixture(scope="session")
def arxiv_corpus(tmp_path_factory) -> Path:
    return write_arxiv_corpus(tmp_path_factory.mktemp("arxiv-src"))


@pytest.fixture(scope="session")
def pmc_corpus(tmp_path_factory) -> Path:
    return write_pmc_corpus(tmp_path_factory.mktemp("pmc-src"))


@pytest.fixture(scope="session")
def arxiv_run(arxiv_corpus, tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("arxiv-out")
    run_extraction("arxiv", [arxiv_corpus], out, ExtractConfig())
    return out


@pytest.fixture(scope="session")
def pmc_run(pmc_corpus, tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("pmc-out")
    run_extraction("pmc", [pmc_corpus], out, ExtractConfig())
    return out
