import csv

import numpy as np
import pandas as pd
import pyarrow as pa
import pytest

from moe_lab import io, tracking
from moe_lab.config import get_fs
from moe_lab.model import build_model


@pytest.fixture(params=["local", "memory"])
def base_uri(request, tmp_path):
    if request.param == "local":
        return str(tmp_path / "artifacts")
    return f"memory://{tmp_path.name}/artifacts"


def test_checkpoint_round_trip(base_uri, toy_moe_config):
    params = build_model(toy_moe_config, seed=0).tensors
    stem = f"{base_uri}/checkpoint"
    io.save_checkpoint(params, stem)
    loaded = io.load_checkpoint(stem)
    assert sorted(loaded) == sorted(params)
    for name, tensor in params.items():
        assert loaded[name] == tensor


def test_checkpoint_layout(base_uri, toy_moe_config):
    params = build_model(toy_moe_config, seed=0).tensors
    stem = f"{base_uri}/checkpoint"
    io.save_checkpoint(params, stem)
    index = io.load_json(f"{stem}.json")
    assert list(index) == sorted(params)
    fs = get_fs(stem)
    with fs.open(f"{stem}.bin", "rb") as f:
        raw = f.read()
    assert len(raw) == 8 * sum(t.size for t in params.values())
    first = sorted(params)[0]
    assert index[first]["offset"] == 0
    np.testing.assert_array_equal(np.frombuffer(raw, dtype="<f8")[: params[first].size], params[first].data.ravel())


def test_checkpoint_bytes_are_reproducible(tmp_path, toy_moe_config):
    params = build_model(toy_moe_config, seed=3).tensors
    io.save_checkpoint(params, str(tmp_path / "a"))
    io.save_checkpoint(params, str(tmp_path / "b"))
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_truncated_checkpoint(tmp_path, toy_moe_config):
    stem = str(tmp_path / "ckpt")
    io.save_checkpoint(build_model(toy_moe_config, seed=0).tensors, stem)
    data = (tmp_path / "ckpt.bin").read_bytes()
    (tmp_path / "ckpt.bin").write_bytes(data[:-8])
    with pytest.raises(ValueError, match="truncated"):
        io.load_checkpoint(stem)


def test_missing_artifacts(tmp_path):
    with pytest.raises(FileNotFoundError):
        io.load_checkpoint(str(tmp_path / "nothing"))
    with pytest.raises(FileNotFoundError):
        io.load_metrics(str(tmp_path / "metrics.csv"))
    assert not io.exists(str(tmp_path / "nothing.json"))


def _row(step, **overrides):
    row = {
        "step": step, "train_loss": 2.5, "eval_loss": 2.25, "balance_loss": 1.0, "z_loss": 0.1,
        "dropped_fraction": 0.0, "tokens_seen": 32 * step, "wall_seconds_per_step": 0.01,
    }
    return {**row, **overrides}


def test_metrics_header_is_written_once(base_uri):
    uri = f"{base_uri}/metrics.csv"
    io.append_metrics_row(uri, _row(5))
    io.append_metrics_row(uri, _row(10, train_loss=0.1))
    table = io.load_metrics(uri)
    assert table.column_names == io.METRICS_COLUMNS
    assert table.num_rows == 2
    assert table.column("step").to_pylist() == [5, 10]
    assert table.column("train_loss").to_pylist() == [2.5, 0.1]


def test_metrics_append_leaves_earlier_rows_untouched(base_uri, monkeypatch):
    uri = f"{base_uri}/metrics.csv"
    io.append_metrics_row(uri, _row(5))
    before = get_fs(uri).cat_file(uri)

    def no_reads(*args, **kwargs):
        raise AssertionError("append read the file back")

    monkeypatch.setattr(io, "_read_bytes", no_reads)
    for step in (10, 15, 20):
        io.append_metrics_row(uri, _row(step))
    monkeypatch.undo()
    after = get_fs(uri).cat_file(uri)
    assert after.startswith(before)
    assert after.count(b"\n") == 5
    assert io.load_metrics(uri).column("step").to_pylist() == [5, 10, 15, 20]


def test_metrics_floats_keep_full_precision(tmp_path):
    uri = str(tmp_path / "metrics.csv")
    value = 1 / 3
    io.append_metrics_row(uri, _row(1, eval_loss=value))
    with open(uri, newline="") as f:
        rows = list(csv.DictReader(f))
    assert float(rows[0]["eval_loss"]) == value


def test_metrics_row_needs_every_column(tmp_path):
    row = _row(1)
    del row["z_loss"]
    with pytest.raises(ValueError, match="z_loss"):
        io.append_metrics_row(str(tmp_path / "metrics.csv"), row)


def test_table_csv_round_trip(base_uri):
    df = pd.DataFrame({"run": ["a", "b"], "step_seconds": [0.5, 0.25]})
    io.save_table_csv(df, f"{base_uri}/table.csv")
    pd.testing.assert_frame_equal(io.load_table_csv(f"{base_uri}/table.csv"), df)


def test_json_is_sorted(tmp_path):
    uri = str(tmp_path / "report.json")
    io.save_json({"b": 1, "a": [1, 2]}, uri)
    assert (tmp_path / "report.json").read_text().index('"a"') < (tmp_path / "report.json").read_text().index('"b"')
    assert io.load_json(uri) == {"a": [1, 2], "b": 1}


def test_writes_are_tracked_per_task(tmp_path):
    tracking.set_current_task("nodes.example.step")
    try:
        io.save_json({}, str(tmp_path / "x.json"))
        io.load_json(str(tmp_path / "x.json"))
    finally:
        tracking.set_current_task(None)
    assert tracking.writes_by_task("nodes.example.step") == [str(tmp_path / "x.json")]
    assert tracking.reads_by_task("nodes.example.step") == [str(tmp_path / "x.json")]


def test_appended_file_is_listed_once(tmp_path):
    uri = str(tmp_path / "metrics.csv")
    tracking.set_current_task("nodes.example.train")
    try:
        for step in (1, 2, 3):
            io.append_metrics_row(uri, _row(step))
    finally:
        tracking.set_current_task(None)
    assert tracking.writes_by_task("nodes.example.train") == [uri]
    assert len([r for r in tracking.records("nodes.example.train") if r["operation"] == "write"]) == 3


def test_artifacts_logged_when_enabled(monkeypatch, tmp_path):
    monkeypatch.setenv("ENABLE_LOGGING", "true")
    monkeypatch.setenv("LOG_DIR", str(tmp_path / "logs"))
    io.save_json({"ok": True}, str(tmp_path / "x.json"))
    with open(tmp_path / "logs" / "artifacts.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert rows[0]["artifact"] == str(tmp_path / "x.json")
    assert rows[0]["kind"] == "json"


def test_nothing_logged_by_default(tmp_path, monkeypatch):
    monkeypatch.setenv("LOG_DIR", str(tmp_path / "logs"))
    io.save_json({}, str(tmp_path / "x.json"))
    assert not (tmp_path / "logs" / "artifacts.csv").exists()


def test_data_hash():
    a = pa.table({"x": [1, 2]})
    assert io.data_hash(a) == io.data_hash(pa.table({"x": [3, 4]}))
    assert io.data_hash(a) != io.data_hash(pa.table({"x": [1, 2, 3]}))
    assert len(io.data_hash(a)) == 16
