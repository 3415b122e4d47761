"""Safe JSON, JSONL, text and checkpoint persistence with atomic rewrites."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import torch

from core.validator import InvrlError


class LedgerIOError(InvrlError):
    """Raised when ledger read/write operations fail."""


class CheckpointError(LedgerIOError):
    """Raised when a checkpoint cannot be written or restored."""


def read_json(path: str | Path, default: dict[str, Any] | None = None) -> dict[str, Any]:
    """Read JSON object; return provided default if file does not exist."""
    file_path = Path(path)
    if not file_path.exists():
        return dict(default or {})

    try:
        with file_path.open("r", encoding="utf-8") as handle:
            parsed = json.load(handle)
    except json.JSONDecodeError as exc:
        raise LedgerIOError(
            f"Failed to parse JSON in '{path}'. "
            "Original file unchanged; fix malformed JSON and retry."
        ) from exc

    if not isinstance(parsed, dict):
        raise LedgerIOError(
            f"Expected JSON object in '{path}'. "
            "Original file unchanged; fix malformed JSON and retry."
        )
    return parsed


def canonical_json(data: Any) -> str:
    """Deterministic JSON text: sorted keys, no whitespace variance."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_hash(payload: bytes | str) -> str:
    """Short content fingerprint, format "sha256:<16_hex_chars>"."""
    if isinstance(payload, str):
        payload = payload.encode("utf-8")
    return f"sha256:{hashlib.sha256(payload).hexdigest()[:16]}"


def file_hash(path: str | Path) -> str:
    """Content fingerprint of a file, streamed in 1 MiB chunks."""
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return f"sha256:{digest.hexdigest()[:16]}"


def atomic_rewrite_json(path: str | Path, data: dict[str, Any]) -> None:
    """Atomically rewrite JSON file with validation."""
    file_path = Path(path)
    tmp_path = file_path.with_suffix(file_path.suffix + ".tmp")
    if file_path.parent:
        file_path.parent.mkdir(parents=True, exist_ok=True)

    try:
        with tmp_path.open("w", encoding="utf-8") as handle:
            json.dump(data, handle, indent=2, ensure_ascii=False, sort_keys=True)
            handle.write("\n")

        with tmp_path.open("r", encoding="utf-8") as handle:
            json.load(handle)

        tmp_path.replace(file_path)
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        _safe_remove(tmp_path)
        raise LedgerIOError(
            f"Failed to atomically rewrite JSON for '{path}'. "
            "Original file unchanged; fix issue and retry."
        ) from exc


def atomic_write_text(path: str | Path, text: str) -> None:
    """Atomically replace a text file."""
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path: str | Path, payload: bytes) -> None:
    """Atomically replace a binary file."""
    file_path = Path(path)
    tmp_path = file_path.with_suffix(file_path.suffix + ".tmp")
    file_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        tmp_path.write_bytes(payload)
        tmp_path.replace(file_path)
    except OSError as exc:
        _safe_remove(tmp_path)
        raise LedgerIOError(
            f"Failed to atomically write '{path}'. Original file unchanged."
        ) from exc


def append_jsonl(path: str | Path, record: dict[str, Any]) -> None:
    """Append one record to a line-delimited JSON log."""
    file_path = Path(path)
    file_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with file_path.open("a", encoding="utf-8") as handle:
            handle.write(canonical_json(record))
            handle.write("\n")
    except (OSError, TypeError) as exc:
        raise LedgerIOError(f"Failed to append record to '{path}'.") from exc


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    """Read every record of a JSONL log; missing file yields an empty list."""
    file_path = Path(path)
    if not file_path.exists():
        return []
    records: list[dict[str, Any]] = []
    with file_path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise LedgerIOError(f"Malformed record at '{path}' line {line_no}.") from exc
    return records


def truncate_jsonl(path: str | Path, keep_until_iteration: int) -> None:
    """Drop log records at or after an iteration (used when resuming)."""
    file_path = Path(path)
    if not file_path.exists():
        return
    kept = [r for r in read_jsonl(file_path) if int(r.get("iteration", -1)) < keep_until_iteration]
    atomic_write_text(file_path, "".join(canonical_json(r) + "\n" for r in kept))


def save_checkpoint(path: str | Path, payload: dict[str, Any]) -> None:
    """Atomically write a torch checkpoint."""
    file_path = Path(path)
    tmp_path = file_path.with_suffix(file_path.suffix + ".tmp")
    file_path.parent.mkdir(parents=True, exist_ok=True)
    try:
        torch.save(payload, tmp_path)
        tmp_path.replace(file_path)
    except (OSError, RuntimeError) as exc:
        _safe_remove(tmp_path)
        raise CheckpointError(f"Failed to write checkpoint '{path}'.") from exc


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    """Load a checkpoint written by save_checkpoint."""
    file_path = Path(path)
    if not file_path.exists():
        raise CheckpointError(f"Checkpoint not found: {file_path}")
    try:
        return torch.load(file_path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError) as exc:
        raise CheckpointError(f"Failed to read checkpoint '{path}'.") from exc


def _safe_remove(path: Path) -> None:
    """Best-effort tmp file cleanup."""
    try:
        if path.exists():
            path.unlink()
    except OSError:
        return
