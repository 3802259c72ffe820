from __future__ import annotations

import hashlib
import io
import json
import struct
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from scifig.decontam import (
    DEFAULT_THRESHOLD,
    MAGIC,
    DescriptorIndex,
    PHashProvider,
    ProcessProvider,
    SidecarProvider,
    build_index,
    filter_pairs,
    is_contaminated,
    load_descriptor_index,
    make_provider,
    max_similarity,
    provide_descriptor,
    unit,
    write_descriptor_index,
)
from scifig.errors import DimMismatch, FormatError, ProviderError


def random_index(rng, rows, dim, labels=("coco", "flickr")) -> DescriptorIndex:
    vecs = rng.normal(size=(rows, dim))
    return build_index(vecs, [labels[i % len(labels)] for i in range(rows)])


def brute_force(query, index):
    best, label = -np.inf, None
    for row, lab in zip(index.matrix, index.labels):
        score = sum(float(a) * float(b) for a, b in zip(query, row))
        if score > best:
            best, label = score, lab
    return best, label


# -- index file -----------------------------------------------------------------------


def test_load_two_rows(tmp_path):
    path = tmp_path / "idx.sfdx"
    write_descriptor_index(path, [[1, 0, 0, 0], [0, 2, 0, 0]], ["a", "b"])
    index = load_descriptor_index(path)
    assert len(index) == 2 and index.dim == 4
    assert np.allclose(np.linalg.norm(index.matrix, axis=1), 1.0, atol=1e-4)
    assert index.labels == ["a", "b"]


def test_row_with_norm_two_is_normalized(tmp_path):
    path = tmp_path / "idx.sfdx"
    write_descriptor_index(path, [[2, 0, 0]], ["x"])
    assert abs(np.linalg.norm(load_descriptor_index(path).matrix[0]) - 1.0) <= 1e-4


def test_file_layout(tmp_path):
    path = tmp_path / "idx.sfdx"
    write_descriptor_index(path, [[1.0, 2.0]], ["é"])
    data = path.read_bytes()
    assert data[:5] == MAGIC
    assert struct.unpack_from("<II", data, 5) == (2, 1)
    assert struct.unpack_from("<2f", data, 13) == (1.0, 2.0)
    assert data[21:] == struct.pack("<H", 2) + "é".encode()


@pytest.mark.parametrize("cut", [3, 10, 20, 25])
def test_truncated_file(tmp_path, cut):
    path = tmp_path / "idx.sfdx"
    write_descriptor_index(path, [[1, 2, 3], [4, 5, 6]], ["a", "b"])
    path.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(FormatError):
        load_descriptor_index(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "idx.sfdx"
    path.write_bytes(b"XXXXX" + bytes(8))
    with pytest.raises(FormatError):
        load_descriptor_index(path)


def test_empty_index(tmp_path):
    path = tmp_path / "idx.sfdx"
    path.write_bytes(struct.pack("<5sII", MAGIC, 4, 0))
    with pytest.raises(FormatError):
        load_descriptor_index(path)


def test_trailing_bytes_and_zero_rows(tmp_path):
    path = tmp_path / "idx.sfdx"
    write_descriptor_index(path, [[1, 0]], ["a"])
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(FormatError):
        load_descriptor_index(path)
    write_descriptor_index(path, [[0, 0]], ["a"])
    with pytest.raises(FormatError):
        load_descriptor_index(path)


def test_ragged_rows():
    with pytest.raises(DimMismatch):
        build_index([[1, 0], [1, 0, 0]], ["a", "b"])


# -- similarity ---------------------------------------------------------------------------


def test_self_similarity():
    rng = np.random.default_rng(0)
    index = random_index(rng, 10, 16)
    score, label = max_similarity(index.matrix[3], index)
    assert abs(score - 1.0) <= 1e-6 and label == index.labels[3]


def test_orthogonal_query():
    index = build_index([[1, 0, 0], [0, 1, 0]], ["a", "b"])
    score, _ = max_similarity(unit([0, 0, 1]), index)
    assert abs(score) <= 1e-6


def test_ties_pick_lowest_row():
    index = build_index([[1, 1], [1, 1], [1, -1]], ["first", "second", "third"])
    assert max_similarity(unit([1, 1]), index)[1] == "first"


def test_dim_mismatch():
    index = build_index([[1, 0, 0]], ["a"])
    with pytest.raises(DimMismatch):
        max_similarity(unit([1, 0]), index)


def test_brute_force_oracle_100_instances():
    rng = np.random.default_rng(42)
    for _ in range(100):
        index = random_index(rng, 100, 64)
        query = unit(rng.normal(size=64))
        score, label = max_similarity(query, index)
        oracle_score, oracle_label = brute_force(query, index)
        assert abs(score - oracle_score) <= 1e-6
        assert label == oracle_label


# -- threshold semantics --------------------------------------------------------------------


def test_threshold_boundary():
    assert not is_contaminated(0.604169)
    assert is_contaminated(0.604169 + 1e-6)
    assert is_contaminated(0.604170)
    assert DEFAULT_THRESHOLD == 0.604169


def test_filter_boundary_end_to_end():
    theta = np.arccos(DEFAULT_THRESHOLD)
    index = build_index([[1.0, 0.0]], ["eval"])
    query = np.array([np.cos(theta), np.sin(theta)], dtype=np.float32)
    score = max_similarity(query, index)[0]
    kept, removed, _ = filter_pairs(["p"], [query], index, threshold=score)
    assert kept == ["p"] and removed == []
    kept, removed, _ = filter_pairs(["p"], [query], index, threshold=score - 1e-6)
    assert kept == [] and removed == ["p"]


def _orthogonal_to(rows: np.ndarray, v: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(rows.T)
    return v - q @ (q.T @ v)


def test_planted_duplicates():
    rng = np.random.default_rng(3)
    dim, n_index, n_pairs = 128, 40, 1000
    index = random_index(rng, n_index, dim)
    planted = {17: 5, 404: 11, 998: 39}
    descriptors = []
    for i in range(n_pairs):
        if i in planted:
            descriptors.append(index.matrix[planted[i]].copy())
        else:
            v = _orthogonal_to(index.matrix.astype(np.float64), rng.normal(size=dim))
            descriptors.append(unit(v))
    pairs = list(range(n_pairs))
    kept, removed, report = filter_pairs(pairs, descriptors, index)
    assert removed == sorted(planted)
    assert kept == [i for i in pairs if i not in planted]
    assert report.removed == 3 and report.total == 1000
    assert report.removal_rate == 3 / 1000
    assert sum(report.per_eval_dataset_hits.values()) >= report.removed


def test_unreachable_threshold():
    index = build_index([[1, 0]], ["a"])
    _, removed, _ = filter_pairs(["p"], [unit([1, 0])], index, threshold=1.1)
    assert removed == []


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-1, 1), st.floats(-1, 1))
def test_partition_and_monotonicity(seed, t1, t2):
    rng = np.random.default_rng(seed)
    index = random_index(rng, 8, 6)
    descs = [unit(rng.normal(size=6)) for _ in range(30)]
    pairs = list(range(30))
    lo, hi = sorted((t1, t2))
    kept_lo, removed_lo, rep = filter_pairs(pairs, descs, index, lo)
    kept_hi, _, _ = filter_pairs(pairs, descs, index, hi)
    assert sorted(kept_lo + removed_lo) == pairs
    assert not set(kept_lo) & set(removed_lo)
    assert kept_lo == sorted(kept_lo) and removed_lo == sorted(removed_lo)
    assert set(kept_lo) <= set(kept_hi)
    assert rep.removal_rate == len(removed_lo) / 30


# -- providers --------------------------------------------------------------------------------


def _jpeg(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, "JPEG", quality=90)
    return buf.getvalue()


def _scene(shift: int = 0) -> Image.Image:
    yy, xx = np.mgrid[0:128, 0:160]
    xx = xx - shift
    arr = np.stack([
        128 + 90 * np.sin(xx / 9.0) * np.cos(yy / 13.0),
        128 + 90 * np.cos(xx / 17.0 + yy / 11.0),
        (xx * 2 + yy) % 256,
    ], -1)
    return Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8), "RGB")


def test_phash_deterministic_and_unit():
    provider = PHashProvider()
    data = _jpeg(_scene())
    a, b = provide_descriptor(data, provider), provide_descriptor(data, provider)
    assert np.array_equal(a, b)
    assert a.shape == (64,)
    assert set(np.unique(a)) <= {np.float32(0.125), np.float32(-0.125)}
    assert abs(np.linalg.norm(a) - 1.0) <= 1e-6
    assert provider.descriptor_faithful is False


def test_phash_one_pixel_shift():
    provider = PHashProvider()
    a = provider.describe(_jpeg(_scene()))
    b = provider.describe(_jpeg(_scene(shift=1)))
    cosine = float(np.dot(a, b))
    print(f"phash cosine under 1px shift: {cosine:.4f}")
    assert cosine >= 0.8


def test_phash_undecodable():
    with pytest.raises(ProviderError):
        PHashProvider().describe(b"garbage")


def test_sidecar(tmp_path):
    data = _jpeg(_scene())
    digest = hashlib.sha256(data).hexdigest()
    path = tmp_path / "side.jsonl"
    path.write_text(json.dumps({"sha256": digest, "vector": [3, 4]}) + "\n")
    provider = make_provider(f"sidecar:{path}")
    assert np.allclose(provider.describe(data), [0.6, 0.8])
    with pytest.raises(ProviderError):
        provider.describe(b"other image")


def test_sidecar_malformed(tmp_path):
    path = tmp_path / "side.jsonl"
    path.write_text('{"sha256": "x"}\n')
    with pytest.raises(FormatError):
        SidecarProvider(path)


def test_process_provider(tmp_path):
    script = tmp_path / "embed.py"
    script.write_text(
        "import sys, json\nd = open(sys.argv[1], 'rb').read()\n"
        "if d.startswith(b'BAD'): sys.exit(2)\nprint(json.dumps([len(d) % 7 + 1, 1.0]))\n"
    )
    provider = make_provider(f"exec:{sys.executable} {script} {{input}}")
    assert isinstance(provider, ProcessProvider)
    v = provider.describe(b"abc")
    assert v.shape == (2,) and abs(np.linalg.norm(v) - 1) < 1e-6
    with pytest.raises(ProviderError):
        provider.describe(b"BAD")


@pytest.mark.parametrize("spec", ["nope", "sidecar:", "exec:", "phash:x"])
def test_bad_provider_spec(spec):
    with pytest.raises(ValueError):
        make_provider(spec)
