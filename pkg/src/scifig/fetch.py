"""Resumable, checksum-verified acquisition of source archives.

Entries are read from JSONL (``uri``, ``dest``, optional ``expected_sha256``
and ``size_bytes``).  Payloads are written to ``<dest>.part`` and renamed into
place only after verification, so a final path never holds a partial file.
Interrupted HTTP transfers resume with a Range request.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from urllib.parse import unquote, urlparse

import requests

from .errors import ConfigError, FormatError

log = logging.getLogger(__name__)

OK = "OK"
CHECKSUM_MISMATCH = "ChecksumMismatch"
TRANSPORT_ERROR = "TransportError"
EXHAUSTED = "Exhausted"

CHUNK = 1 << 20
READ_SIZE = 1 << 16


@dataclass(frozen=True)
class AcquisitionEntry:
    uri: str
    dest: str
    expected_sha256: str | None = None
    size_bytes: int | None = None


@dataclass
class FetchResult:
    dest: str
    status: str
    bytes_transferred: int = 0
    attempts: int = 0
    error: str | None = None


class _Transport(Exception):
    pass


def read_acquisition_manifest(path: str | Path) -> list[AcquisitionEntry]:
    entries: list[AcquisitionEntry] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                entry = AcquisitionEntry(
                    uri=row["uri"],
                    dest=row["dest"],
                    expected_sha256=row.get("expected_sha256"),
                    size_bytes=row.get("size_bytes"),
                )
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if entry.dest in seen:
                raise FormatError(f"{path}:{lineno}: duplicate dest {entry.dest!r}")
            seen.add(entry.dest)
            entries.append(entry)
    return entries


def _dest_path(out_dir: Path, dest: str) -> Path:
    target = (out_dir / dest).resolve()
    if out_dir.resolve() not in target.parents:
        raise ConfigError(f"dest escapes output directory: {dest!r}")
    return target


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(CHUNK), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _local_source(uri: str) -> Path | None:
    parsed = urlparse(uri)
    if parsed.scheme == "file":
        return Path(unquote(parsed.path))
    if not parsed.scheme:
        return Path(uri)
    return None


def _copy_local(src: Path, part: Path) -> int:
    """Append the remainder of ``src`` to ``part``; returns bytes copied."""
    offset = part.stat().st_size if part.exists() else 0
    try:
        size = src.stat().st_size
        if offset > size:
            part.unlink()
            offset = 0
        with open(src, "rb") as fin, open(part, "ab") as fout:
            fin.seek(offset)
            copied = 0
            for chunk in iter(lambda: fin.read(CHUNK), b""):
                fout.write(chunk)
                copied += len(chunk)
    except OSError as exc:
        raise _Transport(str(exc)) from exc
    return copied


def _read_some(raw) -> bytes:
    # read1 returns whatever has arrived instead of filling a whole buffer
    if hasattr(raw, "read1"):
        return raw.read1(READ_SIZE, decode_content=True)
    return raw.read(READ_SIZE, decode_content=True)


def _download(uri: str, part: Path, session: requests.Session, timeout: float) -> int:
    offset = part.stat().st_size if part.exists() else 0
    headers = {"Range": f"bytes={offset}-"} if offset else {}
    written = 0
    try:
        with session.get(uri, headers=headers, stream=True, timeout=timeout) as resp:
            if resp.status_code == 416 and offset:
                return 0  # already complete
            if resp.status_code not in (200, 206):
                raise _Transport(f"HTTP {resp.status_code}")
            mode = "ab" if resp.status_code == 206 else "wb"
            with open(part, mode) as fh:
                # small raw reads keep every received byte on disk if the connection drops
                while True:
                    try:
                        chunk = _read_some(resp.raw)
                    except Exception as exc:  # urllib3 protocol errors vary by version
                        raise _Transport(f"connection broken after {written} bytes: {exc}") from exc
                    if not chunk:
                        break
                    fh.write(chunk)
                    written += len(chunk)
            expected = resp.headers.get("Content-Length")
            if expected is not None and written < int(expected):
                raise _Transport(f"short read: {written} of {expected} bytes")
    except requests.RequestException as exc:
        raise _Transport(str(exc)) from exc
    return written


def _verified(path: Path, entry: AcquisitionEntry) -> bool:
    if entry.size_bytes is not None and path.stat().st_size != entry.size_bytes:
        return False
    if entry.expected_sha256:
        return sha256_file(path) == entry.expected_sha256.lower()
    return True


def fetch_one(
    entry: AcquisitionEntry,
    out_dir: Path,
    *,
    attempts: int = 3,
    backoff: float = 0.5,
    timeout: float = 60.0,
    session: requests.Session | None = None,
) -> FetchResult:
    dest = _dest_path(out_dir, entry.dest)
    result = FetchResult(entry.dest, OK)
    if dest.exists() and _verified(dest, entry):
        return result
    dest.parent.mkdir(parents=True, exist_ok=True)
    part = dest.with_name(dest.name + ".part")
    local = _local_source(entry.uri)
    session = session or requests.Session()
    last_error = None
    for attempt in range(1, attempts + 1):
        result.attempts = attempt
        try:
            if local is not None:
                result.bytes_transferred += _copy_local(local, part)
            else:
                result.bytes_transferred += _download(entry.uri, part, session, timeout)
            break
        except _Transport as exc:
            last_error = str(exc)
            log.warning("%s: attempt %d failed: %s", entry.dest, attempt, exc)
            if attempt < attempts:
                time.sleep(backoff * 2 ** (attempt - 1))
    else:
        result.status = EXHAUSTED
        result.error = last_error
        return result
    if not part.exists():
        part.touch()
    if not _verified(part, entry):
        bad = dest.with_name(dest.name + ".bad")
        os.replace(part, bad)
        result.status = CHECKSUM_MISMATCH
        result.error = f"quarantined as {bad.name}"
        return result
    os.replace(part, dest)
    return result


def fetch_all(
    entries: list[AcquisitionEntry],
    out_dir: str | Path,
    parallelism: int = 4,
    **kwargs,
) -> list[FetchResult]:
    """Fetch every entry; per-entry failures are reported, never raised."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run(entry: AcquisitionEntry) -> FetchResult:
        try:
            return fetch_one(entry, out_dir, **kwargs)
        except ConfigError as exc:
            return FetchResult(entry.dest, TRANSPORT_ERROR, error=str(exc))
        except OSError as exc:
            return FetchResult(entry.dest, TRANSPORT_ERROR, error=str(exc))

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        return list(pool.map(run, entries))


def report_rows(results: list[FetchResult]) -> list[dict]:
    return [asdict(r) for r in results]
