from __future__ import annotations

import hashlib
import io
import json
import sys

from PIL import Image

from conftest import (
    GOLDEN,
    MANIFEST_PROJECTION,
    project_rows,
    read_jsonl,
    rejection_projection,
)
from corpus import arxiv_projects, tar_bytes
from scifig.imageproc import RasterizerHook
from scifig.pipeline import ExtractConfig, process_arxiv_submission, run_extraction


def manifest_projection(out_dir) -> str:
    return project_rows(read_jsonl(out_dir / "manifest.jsonl"), MANIFEST_PROJECTION)


def check_accounting(summary: dict) -> None:
    for stage in summary["stages"]:
        assert stage["out"] == stage["in"] - sum(stage["rejected"].values()) - stage["removed"], stage


def test_arxiv_golden_manifest(arxiv_run):
    assert manifest_projection(arxiv_run) == (GOLDEN / "arxiv_manifest.jsonl").read_text(encoding="utf-8")


def test_arxiv_golden_rejections(arxiv_run):
    assert rejection_projection(arxiv_run) == (GOLDEN / "arxiv_rejections.jsonl").read_text(encoding="utf-8")


def test_pmc_golden_manifest(pmc_run):
    assert manifest_projection(pmc_run) == (GOLDEN / "pmc_manifest.jsonl").read_text(encoding="utf-8")


def test_pmc_golden_rejections(pmc_run):
    assert rejection_projection(pmc_run) == (GOLDEN / "pmc_rejections.jsonl").read_text(encoding="utf-8")


def test_manifest_rows_complete(arxiv_run):
    for row in read_jsonl(arxiv_run / "manifest.jsonl"):
        assert row["pipeline"].startswith("scifig/")
        assert len(row["table_sha256"]) == 64
        assert "q90" in row["codec"] and "hook-none" in row["codec"]
        assert row["caption_chars"] == len(row["caption"])
        assert row["ref_count"] == row["caption"].count("<ref>")


def test_emitted_images_are_normalized(arxiv_run, pmc_run):
    for out in (arxiv_run, pmc_run):
        rows = read_jsonl(out / "manifest.jsonl")
        files = sorted(p.name for p in (out / "images").iterdir())
        assert files == [f"{r['key']}.jpg" for r in rows]
        for row in rows:
            data = (out / "images" / f"{row['key']}.jpg").read_bytes()
            assert data[:2] == b"\xff\xd8" and data[-2:] == b"\xff\xd9"
            assert hashlib.sha256(data).hexdigest() == row["image_sha256"]
            img = Image.open(io.BytesIO(data))
            assert img.mode == "RGB" and img.format == "JPEG"
            assert img.size == (row["width"], row["height"])
            assert max(img.size) <= 512


def test_alpha_flattened_in_output(arxiv_run):
    row = next(r for r in read_jsonl(arxiv_run / "manifest.jsonl") if r["source_path"] == "alpha.png")
    img = Image.open(arxiv_run / "images" / f"{row['key']}.jpg")
    # the fixture's left column is fully transparent
    assert min(img.getpixel((0, 20))) >= 245


def test_accounting(arxiv_run, pmc_run):
    for out in (arxiv_run, pmc_run):
        summary = json.loads((out / "summary.json").read_text())
        check_accounting(summary)
        stages = {s["stage"]: s for s in summary["stages"]}
        assert stages["images"]["in"] == stages["figures"]["out"]
        assert stages["captions"]["in"] == stages["images"]["out"]
        assert summary["pairs_out"] == stages["captions"]["out"]
        assert summary["pairs_out"] == len(read_jsonl(out / "manifest.jsonl"))
        assert summary["config"]["resize_target"] == 512 and summary["config"]["jpeg_quality"] == 90


def _tree_bytes(out):
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_two_runs_byte_identical(arxiv_corpus, arxiv_run, tmp_path):
    run_extraction("arxiv", [arxiv_corpus], tmp_path, ExtractConfig())
    assert _tree_bytes(tmp_path) == _tree_bytes(arxiv_run)


def test_parallel_matches_serial(arxiv_corpus, arxiv_run, tmp_path):
    summary = run_extraction("arxiv", [arxiv_corpus], tmp_path, ExtractConfig(), jobs=3).summary
    a, b = _tree_bytes(tmp_path), _tree_bytes(arxiv_run)
    a.pop("summary.json"), b.pop("summary.json")
    assert a == b
    assert summary["config"]["jobs"] == 3


def test_bulk_tar_input(tmp_path):
    inner = {f"2301/{pid}.gz": raw for pid, raw in arxiv_projects().items() if pid in ("2301.00001", "2301.00002")}
    bulk = tmp_path / "arXiv_src_2301_001.tar"
    bulk.write_bytes(tar_bytes(inner))
    result = run_extraction("arxiv", [bulk], tmp_path / "out", ExtractConfig())
    assert result.pairs == 3


def test_rerun_removes_stale_images(arxiv_corpus, tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "images" / "999999999.jpg").write_bytes(b"stale")
    (tmp_path / "images" / "keep.txt").write_bytes(b"unrelated")
    run_extraction("arxiv", [arxiv_corpus / "2301.00001.gz"], tmp_path, ExtractConfig())
    names = sorted(p.name for p in (tmp_path / "images").iterdir())
    assert names == ["000000000.jpg", "keep.txt"]


def test_empty_input(tmp_path):
    (tmp_path / "in").mkdir()
    result = run_extraction("arxiv", [tmp_path / "in"], tmp_path / "out", ExtractConfig())
    assert result.pairs == 0
    assert (tmp_path / "out" / "manifest.jsonl").read_bytes() == b""
    check_accounting(result.summary)


def test_unreadable_input_is_logged(tmp_path):
    bad = tmp_path / "broken.tar"
    bad.write_bytes(b"not a tar at all" * 64)
    result = run_extraction("arxiv", [bad], tmp_path / "out", ExtractConfig())
    assert result.summary["unreadable_inputs"] == 1
    assert read_jsonl(tmp_path / "out" / "skips.jsonl")[0]["stage"] == "input"


def test_vector_graphic_with_hook(tmp_path):
    script = tmp_path / "r.py"
    script.write_text(
        "import sys\nfrom PIL import Image\nImage.new('RGB', (1024, 256), 'white').save(sys.argv[2])\n"
    )
    hook = RasterizerHook(f"{sys.executable} {script} {{input}} {{output}}")
    raw = arxiv_projects()["2301.00013"]
    result = process_arxiv_submission("2301.00013", raw, ExtractConfig(hook=hook))
    (pair,) = result.pairs
    assert (pair.width, pair.height) == (512, 128)
    assert pair.caption.text == "A vector graphic without a rasterizer."


def test_custom_resize_and_quality(arxiv_corpus, tmp_path):
    result = run_extraction("arxiv", [arxiv_corpus / "2301.00016.gz"], tmp_path, ExtractConfig(target=100, quality=75))
    (row,) = read_jsonl(result.manifest)
    assert (row["width"], row["height"]) == (100, 60)
    assert "q75" in row["codec"]
