"""Artifact plumbing: atomic writes, content digests, run manifests.

Every derived file is written atomically (temp file + rename) and
recorded in a ``manifest.jsonl`` next to it, carrying the digests of
its inputs and the producing command, so that re-running a step with
unchanged inputs can be detected and skipped.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable

__all__ = [
    "atomic_write_text",
    "atomic_write_bytes",
    "atomic_write_jsonl",
    "sha256_bytes",
    "sha256_text",
    "sha256_file",
    "manifest_path",
    "record_artifact",
    "latest_entry",
    "is_up_to_date",
]


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_jsonl(path: str | Path, records: Iterable[dict]) -> int:
    lines = [json.dumps(record, ensure_ascii=False) for record in records]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
    return len(lines)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_text(text: str) -> str:
    return sha256_bytes(text.encode("utf-8"))


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def config_digest(config: dict) -> str:
    """Digest of a config mapping, independent of key order."""
    return sha256_text(json.dumps(config, sort_keys=True, ensure_ascii=False))


def manifest_path(artifact: str | Path) -> Path:
    return Path(artifact).parent / "manifest.jsonl"


def record_artifact(
    artifact: str | Path,
    command: str,
    inputs_digest: str,
    config_digest: str,
    version: str,
) -> None:
    """Append one provenance entry for ``artifact`` to its manifest."""
    artifact = Path(artifact)
    entry = {
        "artifact": artifact.name,
        "command": command,
        "inputs_digest": inputs_digest,
        "config_digest": config_digest,
        "version": version,
    }
    manifest = manifest_path(artifact)
    manifest.parent.mkdir(parents=True, exist_ok=True)
    with open(manifest, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(entry, ensure_ascii=False) + "\n")


def latest_entry(artifact: str | Path) -> dict | None:
    """Most recent manifest entry for ``artifact``, if any."""
    artifact = Path(artifact)
    manifest = manifest_path(artifact)
    if not manifest.exists():
        return None
    found = None
    with open(manifest, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            entry = json.loads(line)
            if entry.get("artifact") == artifact.name:
                found = entry
    return found


def is_up_to_date(artifact: str | Path, inputs_digest: str, config_digest: str) -> bool:
    """True when the artifact exists and was produced from these digests."""
    artifact = Path(artifact)
    if not artifact.exists():
        return False
    entry = latest_entry(artifact)
    return (
        entry is not None
        and entry.get("inputs_digest") == inputs_digest
        and entry.get("config_digest") == config_digest
    )
