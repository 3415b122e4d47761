import re

import pytest
import torch

from core.ledger import (
    CheckpointError,
    LedgerIOError,
    append_jsonl,
    atomic_rewrite_json,
    content_hash,
    file_hash,
    load_checkpoint,
    read_json,
    read_jsonl,
    save_checkpoint,
    truncate_jsonl,
)


def test_read_json_default_for_missing(tmp_path):
    assert read_json(tmp_path / "none.json", {"a": 1}) == {"a": 1}


def test_atomic_rewrite_then_read(tmp_path):
    path = tmp_path / "nested" / "out.json"
    atomic_rewrite_json(path, {"b": [1, 2], "a": "x"})
    assert read_json(path) == {"a": "x", "b": [1, 2]}
    assert not path.with_suffix(".json.tmp").exists()


def test_unserialisable_payload_leaves_original(tmp_path):
    path = tmp_path / "out.json"
    atomic_rewrite_json(path, {"ok": True})
    with pytest.raises(LedgerIOError):
        atomic_rewrite_json(path, {"bad": object()})
    assert read_json(path) == {"ok": True}


def test_malformed_json_raises(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(LedgerIOError):
        read_json(path)


def test_jsonl_append_and_truncate(tmp_path):
    path = tmp_path / "losses.jsonl"
    for it in range(5):
        append_jsonl(path, {"iteration": it, "total": it * 0.5})
    assert [r["iteration"] for r in read_jsonl(path)] == [0, 1, 2, 3, 4]
    truncate_jsonl(path, 3)
    assert [r["iteration"] for r in read_jsonl(path)] == [0, 1, 2]


def test_hash_format(tmp_path):
    assert re.fullmatch(r"sha256:[0-9a-f]{16}", content_hash("abc"))
    path = tmp_path / "f.bin"
    path.write_bytes(b"abc")
    assert file_hash(path) == content_hash(b"abc")


def test_checkpoint_roundtrip(tmp_path):
    path = tmp_path / "ckpt" / "ckpt_000001.pt"
    save_checkpoint(path, {"iteration": 1, "values": {"x": torch.arange(3, dtype=torch.float64)}})
    payload = load_checkpoint(path)
    assert payload["iteration"] == 1
    assert torch.equal(payload["values"]["x"], torch.arange(3, dtype=torch.float64))


def test_missing_checkpoint_raises(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing.pt")
