import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from relmap.errors import IncompleteRecordError, InputError
from relmap.metrics import (RunRecord, average_accuracy, config_hash, emit_report, mean_std, read_summary,
                            summary_rows)


def make_record(run_id="r1", accs=((0.99,), (0.98, 0.97), (0.98, 0.97, 0.96)), seed=0, path=None):
    rec = RunRecord(run_id, {"experiment": "split-mnist", "mode": "supervised", "seed": seed}, path=path)
    rec.start()
    for t, a in enumerate(accs):
        rec.append("task_end", task=t, accuracies=list(a), sparsity=0.5 - 0.1 * t)
    rec.append("run_end", mean_accuracy=float(np.mean(accs[-1])))
    return rec


def test_average_accuracy_hand_values():
    rec = make_record()
    assert average_accuracy(rec) == pytest.approx(0.97)
    assert average_accuracy(rec, 1) == pytest.approx(0.975)
    assert average_accuracy(rec, 0) == pytest.approx(0.99)


def test_average_accuracy_missing_evaluation():
    rec = make_record(accs=((0.9,), (0.8,)))
    with pytest.raises(IncompleteRecordError):
        average_accuracy(rec, 1)
    with pytest.raises(IncompleteRecordError):
        average_accuracy(rec, 4)
    empty = RunRecord("e")
    with pytest.raises(IncompleteRecordError):
        average_accuracy(empty)


def test_mean_std():
    m, s = mean_std([99.3, 99.5, 99.7])
    assert m == pytest.approx(99.5) and s == pytest.approx(0.2)
    assert mean_std([4.0]) == (4.0, 0.0)
    with pytest.raises(InputError):
        mean_std([])


def test_events_have_increasing_seq_and_round_trip(tmp_path):
    p = tmp_path / "record.jsonl"
    rec = make_record(path=p)
    seqs = [e["seq"] for e in rec.events]
    assert seqs == list(range(len(seqs)))
    assert p.read_text() == rec.dumps()
    back = RunRecord.load(p)
    assert back.events == rec.events and back.finished
    assert back.config_hash == config_hash(rec.config)


def test_numpy_values_are_serialised_as_plain_json():
    rec = RunRecord("x")
    e = rec.append("epoch", loss=np.float64(0.5), n=np.int64(3), v=np.array([1, 2]), ok=np.bool_(True))
    assert json.loads(json.dumps(e)) == {"seq": 0, "event": "epoch", "loss": 0.5, "n": 3, "v": [1, 2], "ok": True}


def test_load_rejects_headless_record(tmp_path):
    p = tmp_path / "r.jsonl"
    p.write_text(json.dumps({"seq": 0, "event": "epoch"}) + "\n")
    with pytest.raises(IncompleteRecordError):
        RunRecord.load(p)


def test_timings_go_to_sidecar(tmp_path):
    rec = RunRecord("t", path=tmp_path / "r.jsonl", timings_path=tmp_path / "t.jsonl")
    rec.start()
    rec.timing("task0", 1.25)
    assert len(rec.events) == 1
    assert json.loads((tmp_path / "t.jsonl").read_text())["seconds"] == 1.25


def test_csv_round_trip(tmp_path):
    recs = [make_record("a", seed=0), make_record("b", seed=1)]
    paths = emit_report(recs, tmp_path)
    rows = read_summary(paths["csv"])
    assert rows == [{k: (str(v) if k == "seed" else v) for k, v in r.items()} for r in summary_rows(recs)]
    assert rows[2]["average_accuracy"] == pytest.approx(0.97)


def test_svg_is_xml_and_tagged(tmp_path):
    rec = make_record()
    paths = emit_report([rec], tmp_path)
    for key in ("accuracy_svg", "sparsity_svg"):
        root = ET.parse(paths[key]).getroot()
        assert root.tag.endswith("svg")
        assert "config_hash=" in paths[key].read_text()


def test_report_is_deterministic(tmp_path):
    a = emit_report([make_record()], tmp_path / "a")
    b = emit_report([make_record()], tmp_path / "b")
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes()


def test_empty_report_writes_nothing(tmp_path):
    rec = RunRecord("empty")
    rec.start()
    with pytest.raises(InputError):
        emit_report([rec], tmp_path / "out")
    assert not (tmp_path / "out").exists()
