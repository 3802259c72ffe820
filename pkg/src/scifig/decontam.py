"""Near-duplicate removal against evaluation-set image descriptors.

A pair is removed when the cosine similarity between its image descriptor and
any evaluation descriptor is strictly greater than the threshold.

Descriptor index file (``SFDX1``), all integers little-endian::

    magic   5 bytes  b"SFDX1"
    dim     uint32
    count   uint32
    body    count * dim float32, row-major
    labels  count * (uint16 byte length + UTF-8 label)

Sidecar descriptors are JSONL rows ``{"sha256": <hex>, "vector": [floats]}``
keyed by the SHA-256 of the normalized JPEG bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import shlex
import struct
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

import numpy as np
from PIL import Image

from .errors import DimMismatch, FormatError, ProviderError

DEFAULT_THRESHOLD = 0.604169
MAGIC = b"SFDX1"
_HEADER = struct.Struct("<5sII")
NORM_TOLERANCE = 1e-4


def unit(vector: Sequence[float] | np.ndarray) -> np.ndarray:
    """L2-normalize to a float32 descriptor."""
    arr = np.asarray(vector, dtype=np.float64).reshape(-1)
    if arr.size == 0 or not np.all(np.isfinite(arr)):
        raise FormatError("descriptor must be a non-empty finite vector")
    norm = np.linalg.norm(arr)
    if norm == 0:
        raise FormatError("zero-norm descriptor")
    return (arr / norm).astype(np.float32)


@dataclass
class DescriptorIndex:
    matrix: np.ndarray  # (count, dim) float32, unit-norm rows
    labels: list[str]

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return int(self.matrix.shape[0])


def build_index(vectors: Sequence[Sequence[float]], labels: Sequence[str]) -> DescriptorIndex:
    if len(vectors) != len(labels):
        raise FormatError(f"{len(vectors)} vectors but {len(labels)} labels")
    if len(vectors) == 0:
        raise FormatError("descriptor index is empty")
    dims = {len(v) for v in vectors}
    if len(dims) != 1:
        raise DimMismatch(f"rows have differing dimensions {sorted(dims)}")
    matrix = np.stack([unit(v) for v in vectors])
    return DescriptorIndex(matrix, list(labels))


def write_descriptor_index(path: str | Path, vectors, labels: Sequence[str]) -> None:
    """Write vectors as stored (no normalization; loading normalizes)."""
    arr = np.asarray(vectors, dtype="<f4")
    if arr.ndim != 2:
        raise DimMismatch("vectors must form a 2-D array")
    count, dim = arr.shape
    if len(labels) != count:
        raise FormatError(f"{count} vectors but {len(labels)} labels")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, dim, count))
        fh.write(arr.tobytes())
        for label in labels:
            raw = label.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw)


def load_descriptor_index(path: str | Path) -> DescriptorIndex:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, dim, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if dim == 0 or count == 0:
        raise FormatError(f"{path}: empty index (dim={dim}, count={count})")
    body_end = _HEADER.size + 4 * dim * count
    if len(data) < body_end:
        raise FormatError(f"{path}: truncated body")
    raw = np.frombuffer(data, dtype="<f4", count=dim * count, offset=_HEADER.size)
    raw = raw.reshape(count, dim).astype(np.float64)
    labels: list[str] = []
    pos = body_end
    for _ in range(count):
        if pos + 2 > len(data):
            raise FormatError(f"{path}: truncated label table")
        (length,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + length > len(data):
            raise FormatError(f"{path}: truncated label table")
        labels.append(data[pos : pos + length].decode("utf-8", "replace"))
        pos += length
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    norms = np.linalg.norm(raw, axis=1)
    if not np.all(np.isfinite(raw)) or np.any(norms == 0):
        raise FormatError(f"{path}: non-finite or zero-norm rows")
    matrix = (raw / norms[:, None]).astype(np.float32)
    return DescriptorIndex(matrix, labels)


def similarities(query: np.ndarray, index: DescriptorIndex) -> np.ndarray:
    query = np.asarray(query)
    if query.shape != (index.dim,):
        raise DimMismatch(f"query dim {query.shape} != index dim {index.dim}")
    return index.matrix.astype(np.float64) @ query.astype(np.float64)


def max_similarity(query: np.ndarray, index: DescriptorIndex) -> tuple[float, str]:
    """Highest cosine similarity and its row label (first row wins ties)."""
    scores = similarities(query, index)
    best = int(np.argmax(scores))
    return float(scores[best]), index.labels[best]


def is_contaminated(score: float, threshold: float = DEFAULT_THRESHOLD) -> bool:
    return score > threshold


@dataclass
class DecontamReport:
    total: int
    removed: int
    threshold: float
    per_eval_dataset_hits: dict[str, int] = field(default_factory=dict)
    undecided: int = 0
    provider: str = ""
    descriptor_faithful: bool = False
    similarity_input: str = "normalized image (max side <= resize target)"

    @property
    def removal_rate(self) -> float:
        return self.removed / self.total if self.total else 0.0

    def as_dict(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "removed": self.removed,
            "removal_rate": self.removal_rate,
            "threshold": self.threshold,
            "per_eval_dataset_hits": dict(sorted(self.per_eval_dataset_hits.items())),
            "undecided": self.undecided,
            "provider": self.provider,
            "descriptor_faithful": self.descriptor_faithful,
            "similarity_input": self.similarity_input,
        }


def filter_pairs(
    pairs: Sequence[Any],
    descriptors: Sequence[np.ndarray],
    index: DescriptorIndex,
    threshold: float = DEFAULT_THRESHOLD,
) -> tuple[list, list, DecontamReport]:
    """Partition ``pairs`` (order preserved) into kept and removed."""
    if len(pairs) != len(descriptors):
        raise ValueError("pairs and descriptors differ in length")
    kept: list = []
    removed: list = []
    hits: dict[str, int] = {}
    label_rows: dict[str, np.ndarray] = {}
    for i, label in enumerate(index.labels):
        label_rows.setdefault(label, []).append(i)
    label_rows = {k: np.asarray(v) for k, v in label_rows.items()}
    for pair, descriptor in zip(pairs, descriptors):
        scores = similarities(descriptor, index)
        if is_contaminated(float(scores.max()), threshold):
            removed.append(pair)
            for label, rows in label_rows.items():
                if is_contaminated(float(scores[rows].max()), threshold):
                    hits[label] = hits.get(label, 0) + 1
        else:
            kept.append(pair)
    report = DecontamReport(len(pairs), len(removed), threshold, hits)
    return kept, removed, report


# -- descriptor providers ---------------------------------------------------------


class DescriptorProvider(Protocol):
    name: str
    descriptor_faithful: bool

    def describe(self, jpeg: bytes) -> np.ndarray: ...


class PHashProvider:
    """64-bit difference hash mapped to a unit vector (bit -> +-1/8).

    Stand-in for a learned copy-detection model so the pipeline runs without
    ML dependencies.  Its similarity scale differs from learned descriptors,
    so thresholds tuned for those do not transfer.
    """

    name = "phash"
    descriptor_faithful = False

    def describe(self, jpeg: bytes) -> np.ndarray:
        try:
            img = Image.open(io.BytesIO(jpeg)).convert("L")
        except OSError as exc:
            raise ProviderError(f"phash: cannot decode image: {exc}") from exc
        small = np.asarray(img.resize((9, 8), Image.Resampling.BOX), dtype=np.int16)
        bits = small[:, 1:] > small[:, :-1]
        return np.where(bits.reshape(-1), 0.125, -0.125).astype(np.float32)


class SidecarProvider:
    """Descriptors precomputed elsewhere, looked up by image SHA-256."""

    descriptor_faithful = True

    def __init__(self, path: str | Path):
        self.name = f"sidecar:{path}"
        self.vectors: dict[str, np.ndarray] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    self.vectors[row["sha256"]] = unit(row["vector"])
                except (ValueError, KeyError, TypeError, FormatError) as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc

    def describe(self, jpeg: bytes) -> np.ndarray:
        digest = hashlib.sha256(jpeg).hexdigest()
        try:
            return self.vectors[digest]
        except KeyError:
            raise ProviderError(f"no sidecar descriptor for {digest}") from None


class ProcessProvider:
    """Runs an external embedder: ``{input}`` is replaced by a JPEG path and the
    command prints the descriptor as a JSON array on stdout."""

    descriptor_faithful = True

    def __init__(self, template: str, timeout: float = 120.0, max_concurrency: int = 2):
        self.name = f"exec:{template}"
        self.template = template
        self.timeout = timeout
        self._slots = threading.BoundedSemaphore(max_concurrency)

    def describe(self, jpeg: bytes) -> np.ndarray:
        with tempfile.NamedTemporaryFile(suffix=".jpg", delete=False) as fh:
            fh.write(jpeg)
            path = fh.name
        try:
            argv = [part.format(input=path) for part in shlex.split(self.template)]
            with self._slots:
                proc = subprocess.run(argv, capture_output=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ProviderError(f"embedder failed: {exc}") from exc
        finally:
            os.unlink(path)
        if proc.returncode != 0:
            raise ProviderError(f"embedder exited {proc.returncode}")
        try:
            return unit(json.loads(proc.stdout))
        except (ValueError, TypeError, FormatError) as exc:
            raise ProviderError(f"embedder output is not a vector: {exc}") from exc


def make_provider(spec: str) -> DescriptorProvider:
    """``phash``, ``sidecar:PATH`` or ``exec:COMMAND``."""
    kind, _, arg = spec.partition(":")
    if kind == "phash" and not arg:
        return PHashProvider()
    if kind == "sidecar" and arg:
        return SidecarProvider(arg)
    if kind == "exec" and arg:
        return ProcessProvider(arg)
    raise ValueError(f"unknown descriptor provider {spec!r}")


def provide_descriptor(jpeg: bytes, provider: DescriptorProvider) -> np.ndarray:
    return provider.describe(jpeg)
