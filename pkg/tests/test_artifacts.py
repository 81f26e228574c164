from __future__ import annotations

import json

import pytest

from insightpipe import artifacts


def test_atomic_write_creates_parents_and_content(tmp_path):
    target = tmp_path / "nested" / "deep" / "file.txt"
    artifacts.atomic_write_text(target, "hello\n")
    assert target.read_text("utf-8") == "hello\n"


def test_atomic_write_overwrites(tmp_path):
    target = tmp_path / "file.txt"
    artifacts.atomic_write_text(target, "one")
    artifacts.atomic_write_text(target, "two")
    assert target.read_text("utf-8") == "two"
    # No temp droppings left behind.
    assert [p.name for p in tmp_path.iterdir()] == ["file.txt"]


def test_atomic_write_cleans_up_on_failure(tmp_path):
    target = tmp_path / "file.bin"
    artifacts.atomic_write_bytes(target, b"keep me")
    with pytest.raises(TypeError):
        artifacts.atomic_write_bytes(target, None)
    assert target.read_bytes() == b"keep me"
    assert [p.name for p in tmp_path.iterdir()] == ["file.bin"]


def test_atomic_write_jsonl_shape(tmp_path):
    target = tmp_path / "rows.jsonl"
    count = artifacts.atomic_write_jsonl(target, [{"a": 1}, {"b": "é"}])
    assert count == 2
    text = target.read_text("utf-8")
    assert text == '{"a": 1}\n{"b": "é"}\n'
    assert [json.loads(line) for line in text.splitlines()] == [{"a": 1}, {"b": "é"}]


def test_sha256_helpers_agree(tmp_path):
    data = "content with unicode é\n"
    target = tmp_path / "f.txt"
    target.write_text(data, encoding="utf-8")
    assert artifacts.sha256_file(target) == artifacts.sha256_text(data)
    assert artifacts.sha256_text(data) == artifacts.sha256_bytes(data.encode("utf-8"))
    assert (
        artifacts.sha256_bytes(b"")
        == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    )


def test_config_digest_order_independent():
    a = artifacts.config_digest({"x": 1, "y": {"z": 2}})
    b = artifacts.config_digest({"y": {"z": 2}, "x": 1})
    c = artifacts.config_digest({"x": 1, "y": {"z": 3}})
    assert a == b
    assert a != c


def test_record_and_latest_entry(tmp_path):
    artifact = tmp_path / "out" / "triples.jsonl"
    assert artifacts.latest_entry(artifact) is None
    artifact.parent.mkdir()
    artifact.write_text("x\n", encoding="utf-8")
    artifacts.record_artifact(artifact, "extract", "in1", "cfg1", "0.1")
    artifacts.record_artifact(artifact, "extract", "in2", "cfg2", "0.1")
    entry = artifacts.latest_entry(artifact)
    assert entry["inputs_digest"] == "in2"
    assert entry["command"] == "extract"
    assert artifacts.manifest_path(artifact) == artifact.parent / "manifest.jsonl"


def test_latest_entry_filters_by_artifact_name(tmp_path):
    first = tmp_path / "a.jsonl"
    second = tmp_path / "b.jsonl"
    first.write_text("", encoding="utf-8")
    second.write_text("", encoding="utf-8")
    artifacts.record_artifact(first, "one", "inA", "cfgA", "0.1")
    artifacts.record_artifact(second, "two", "inB", "cfgB", "0.1")
    assert artifacts.latest_entry(first)["inputs_digest"] == "inA"
    assert artifacts.latest_entry(second)["inputs_digest"] == "inB"


def test_is_up_to_date_lifecycle(tmp_path):
    artifact = tmp_path / "bench.jsonl"
    assert not artifacts.is_up_to_date(artifact, "in", "cfg")
    artifact.write_text("data\n", encoding="utf-8")
    # Exists but never recorded.
    assert not artifacts.is_up_to_date(artifact, "in", "cfg")
    artifacts.record_artifact(artifact, "build", "in", "cfg", "0.1")
    assert artifacts.is_up_to_date(artifact, "in", "cfg")
    assert not artifacts.is_up_to_date(artifact, "in-changed", "cfg")
    assert not artifacts.is_up_to_date(artifact, "in", "cfg-changed")
    # A newer record supersedes the old digests.
    artifacts.record_artifact(artifact, "build", "in2", "cfg2", "0.1")
    assert not artifacts.is_up_to_date(artifact, "in", "cfg")
    assert artifacts.is_up_to_date(artifact, "in2", "cfg2")


def test_is_up_to_date_false_when_file_deleted(tmp_path):
    artifact = tmp_path / "x.tsv"
    artifact.write_text("t\n", encoding="utf-8")
    artifacts.record_artifact(artifact, "report", "in", "cfg", "0.1")
    artifact.unlink()
    assert not artifacts.is_up_to_date(artifact, "in", "cfg")
