from __future__ import annotations

import json
import os
import shutil
import struct
import subprocess
import sys
import tarfile

import numpy as np
import pytest

from conftest import read_jsonl
from scifig.cli import main
from scifig.decontam import MAGIC, write_descriptor_index


def run(*argv):
    return main([str(a) for a in argv])


def test_extract_arxiv_cli(arxiv_corpus, arxiv_run, tmp_path, capsys):
    assert run("extract-arxiv", arxiv_corpus, "--out", tmp_path, "--json") == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["pairs_out"] == len(read_jsonl(arxiv_run / "manifest.jsonl"))
    assert (tmp_path / "manifest.jsonl").read_bytes() == (arxiv_run / "manifest.jsonl").read_bytes()


def test_extract_pmc_cli(pmc_corpus, tmp_path, capsys):
    assert run("extract-pmc", pmc_corpus, "--out", tmp_path) == 0
    assert "wrote" in capsys.readouterr().out


def test_empty_directory_exits_zero(tmp_path):
    (tmp_path / "in").mkdir()
    assert run("extract-arxiv", tmp_path / "in", "--out", tmp_path / "out") == 0
    assert (tmp_path / "out" / "manifest.jsonl").read_bytes() == b""


def test_missing_input_is_config_error(tmp_path):
    assert run("extract-arxiv", tmp_path / "nope", "--out", tmp_path / "out") == 1


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_unwritable_out(arxiv_corpus, tmp_path):
    locked = tmp_path / "locked"
    locked.mkdir(mode=0o500)
    assert run("extract-arxiv", arxiv_corpus, "--out", locked / "sub") == 1


def test_out_is_a_file(arxiv_corpus, tmp_path):
    target = tmp_path / "file"
    target.write_text("x")
    assert run("extract-arxiv", arxiv_corpus, "--out", target) == 1


@pytest.mark.parametrize("flags", [["--resize", "0"], ["--jpeg-quality", "101"], ["--jobs", "0"]])
def test_bad_extract_config(arxiv_corpus, tmp_path, flags):
    assert run("extract-arxiv", arxiv_corpus, "--out", tmp_path, *flags) == 1


def test_usage_errors():
    assert run() == 1
    assert run("no-such-command") == 1
    assert run("mixture", "a=x") == 1


# -- decontaminate ----------------------------------------------------------------------------


def _decontam_setup(arxiv_run, tmp_path, planted=(1, 4, 9)):
    import hashlib

    rows = read_jsonl(arxiv_run / "manifest.jsonl")
    rng = np.random.default_rng(0)
    basis, _ = np.linalg.qr(rng.normal(size=(64, 64)))
    sidecar = tmp_path / "side.jsonl"
    with sidecar.open("w") as fh:
        for i, row in enumerate(rows):
            digest = hashlib.sha256((arxiv_run / "images" / f"{row['key']}.jpg").read_bytes()).hexdigest()
            fh.write(json.dumps({"sha256": digest, "vector": basis[i % 32].tolist()}) + "\n")
    # index rows come from the second half of the basis, plus copies of the planted ones
    index_rows = [basis[32 + j] for j in range(10)] + [basis[i] for i in planted]
    index = tmp_path / "eval.sfdx"
    write_descriptor_index(index, index_rows, ["coco"] * 10 + ["flickr"] * len(planted))
    return rows, sidecar, index


def test_decontaminate_planted(arxiv_run, tmp_path):
    rows, sidecar, index = _decontam_setup(arxiv_run, tmp_path)
    out = tmp_path / "dc"
    assert run("decontaminate", arxiv_run / "manifest.jsonl", index, "--provider", f"sidecar:{sidecar}",
               "--out", out) == 0
    removed = read_jsonl(out / "removed.jsonl")
    assert [r["key"] for r in removed] == [rows[i]["key"] for i in (1, 4, 9)]
    report = json.loads((out / "report.json").read_text())
    assert report["removed"] == 3 and report["total"] == len(rows)
    assert report["provider"].startswith("sidecar:")
    (stage,) = json.loads((out / "summary.json").read_text())["stages"]
    assert stage["out"] == stage["in"] - sum(stage["rejected"].values()) - stage["removed"]


def test_decontaminate_unreachable_threshold(arxiv_run, tmp_path):
    rows, sidecar, index = _decontam_setup(arxiv_run, tmp_path)
    out = tmp_path / "dc"
    assert run("decontaminate", arxiv_run / "manifest.jsonl", index, "--provider", f"sidecar:{sidecar}",
               "--threshold", "1.1", "--out", out) == 0
    assert read_jsonl(out / "removed.jsonl") == []
    assert len(read_jsonl(out / "kept.jsonl")) == len(rows)


def test_decontaminate_provider_failures_are_undecided(arxiv_run, tmp_path):
    rows, sidecar, index = _decontam_setup(arxiv_run, tmp_path)
    lines = sidecar.read_text().splitlines()
    sidecar.write_text("\n".join(lines[2:]) + "\n")
    out = tmp_path / "dc"
    assert run("decontaminate", arxiv_run / "manifest.jsonl", index, "--provider", f"sidecar:{sidecar}",
               "--out", out) == 0
    assert len(read_jsonl(out / "undecided.jsonl")) == 2
    (stage,) = json.loads((out / "summary.json").read_text())["stages"]
    assert stage["rejected"] == {"Undecided": 2}
    assert stage["out"] == stage["in"] - 2 - stage["removed"]


def test_decontaminate_phash_default(arxiv_run, tmp_path):
    index = tmp_path / "eval.sfdx"
    write_descriptor_index(index, [np.ones(64)], ["blank"])
    assert run("decontaminate", arxiv_run / "manifest.jsonl", index, "--out", tmp_path / "dc") == 0


def test_decontaminate_empty_index(arxiv_run, tmp_path):
    index = tmp_path / "empty.sfdx"
    index.write_bytes(struct.pack("<5sII", MAGIC, 64, 0))
    assert run("decontaminate", arxiv_run / "manifest.jsonl", index, "--out", tmp_path / "dc") == 3


def test_decontaminate_dim_mismatch(arxiv_run, tmp_path):
    index = tmp_path / "eval.sfdx"
    write_descriptor_index(index, [np.ones(8)], ["x"])
    assert run("decontaminate", arxiv_run / "manifest.jsonl", index, "--out", tmp_path / "dc") == 3


def test_decontaminate_missing_index(arxiv_run, tmp_path):
    assert run("decontaminate", arxiv_run / "manifest.jsonl", tmp_path / "none.sfdx", "--out", tmp_path / "dc") == 2


def test_decontaminate_bad_provider(arxiv_run, tmp_path):
    index = tmp_path / "eval.sfdx"
    write_descriptor_index(index, [np.ones(64)], ["x"])
    assert run("decontaminate", arxiv_run / "manifest.jsonl", index, "--provider", "magic",
               "--out", tmp_path / "dc") == 1


# -- stats, shard, mixture, fetch ----------------------------------------------------------------


def test_stats(arxiv_run, capsys):
    assert run("stats", arxiv_run / "manifest.jsonl", "--json") == 0
    stats = json.loads(capsys.readouterr().out)
    rows = read_jsonl(arxiv_run / "manifest.jsonl")
    assert stats["figure_count"] == len(rows)
    assert abs(stats["avg_caption_chars"] - sum(len(r["caption"]) for r in rows) / len(rows)) <= 1e-9


def test_stats_text_and_malformed(arxiv_run, tmp_path, capsys):
    assert run("stats", arxiv_run / "manifest.jsonl") == 0
    assert capsys.readouterr().out.startswith("Dataset")
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert run("stats", bad) == 3
    assert run("stats", tmp_path / "missing.jsonl") == 2


def test_shard(arxiv_run, tmp_path):
    out = tmp_path / "shards"
    assert run("shard", arxiv_run / "manifest.jsonl", "--out", out, "--shard-size", "10") == 0
    rows = read_jsonl(arxiv_run / "manifest.jsonl")
    names = []
    for path in sorted(out.glob("*.tar")):
        with tarfile.open(path) as tf:
            names += tf.getnames()
    assert len(names) == 3 * len(rows)
    assert run("shard", arxiv_run / "manifest.jsonl", "--out", out, "--shard-size", "0") == 1


def test_mixture(capsys):
    assert run("mixture", "CommonPool=11778443", "arXiv=1,117,377", "PMC=766855") == 0
    out = capsys.readouterr().out
    assert "86%" in out and "8%" in out and "6%" in out
    assert run("mixture", "a=0", "b=0") == 1
    assert run("mixture", "a=1", "a=2") == 1


def test_fetch_local(tmp_path, capsys):
    src = tmp_path / "src.bin"
    src.write_bytes(b"payload")
    acq = tmp_path / "acq.jsonl"
    acq.write_text(json.dumps({"uri": str(src), "dest": "x/src.bin"}) + "\n")
    assert run("fetch", acq, "--out", tmp_path / "dl") == 0
    assert (tmp_path / "dl" / "x" / "src.bin").read_bytes() == b"payload"
    assert read_jsonl(tmp_path / "dl" / "fetch_report.jsonl")[0]["status"] == "OK"


def test_console_script_entry_point(tmp_path):
    exe = shutil.which("scifig")
    cmd = [exe] if exe else [sys.executable, "-m", "scifig"]
    proc = subprocess.run([*cmd, "mixture", "a=1", "b=3"], capture_output=True, text=True)
    assert proc.returncode == 0 and "75%" in proc.stdout
