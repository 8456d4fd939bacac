import json
import threading

import numpy as np
import pytest

from flsim.core import MetricRecord
from flsim.tracker import Tracker, import_records, lower_is_better, record_to_line, summarize_records


def test_single_record_summary():
    t = Tracker()
    t.log("a", 3, "server", "accuracy", 0.5)
    s = t.summarize("a").get("accuracy")
    assert (s.best, s.final, s.round_of_best, s.final_round, s.count) == (0.5, 0.5, 3, 3, 1)


def test_best_and_final():
    t = Tracker()
    for r, v in enumerate([0.3, 0.7, 0.6], start=1):
        t.log("a", r, "server", "accuracy", v)
    s = t.summarize("a").get("accuracy")
    assert s.best == 0.7 and s.round_of_best == 2 and s.final == 0.6


def test_loss_like_metrics_prefer_lower():
    assert lower_is_better("train_loss") and lower_is_better("comm_bytes_up") and lower_is_better("sim_train_seconds")
    assert lower_is_better("memory_bytes") and lower_is_better("activation_bytes")
    assert not lower_is_better("accuracy")
    t = Tracker()
    for r, v in enumerate([2.0, 0.5, 1.0], start=1):
        t.log("a", r, "server", "loss", v)
    assert t.summarize("a").get("loss").best == 0.5


def test_line_format_field_order():
    line = record_to_line(MetricRecord("t", 4, "client:2", "accuracy", 0.25, 1.5))
    assert list(json.loads(line)) == ["task_id", "round", "scope", "name", "value", "wall_time"]


def test_file_is_append_only_and_reimport_matches(tmp_path):
    path = tmp_path / "m.ndl"
    t = Tracker(path)
    rng = np.random.default_rng(0)
    prefixes = []
    for r in range(1, 21):
        t.log("a", r, "server", "accuracy", float(rng.uniform()), r * 0.1)
        t.log("a", r, "server", "comm_bytes_up", float(rng.integers(100, 200)), r * 0.1)
        t.log("a", r, f"client:{r % 3}", "selected", 1.0, r * 0.1)
        data = path.read_bytes()
        assert all(data.startswith(p) for p in prefixes)
        prefixes.append(data)
    t.close()
    back = import_records(path)
    assert back == t.records("a")
    assert summarize_records(back, "a") == t.summarize("a")
    # best equals brute-force max over the persisted file
    accs = [json.loads(x)["value"] for x in path.read_text().splitlines() if '"accuracy"' in x]
    assert t.summarize("a").get("accuracy").best == max(accs)


def test_totals_and_selection_counts():
    t = Tracker()
    t.log("a", 1, "server", "comm_bytes_up", 10, 0.5)
    t.log("a", 1, "server", "comm_bytes_down", 5, 0.7)
    t.log("a", 1, "client:0", "selected", 1.0, 0.1)
    t.log("a", 2, "client:0", "selected", 1.0, 0.9)
    t.log("b", 1, "server", "comm_bytes_up", 1000)
    s = t.summarize("a")
    assert s.total_bytes == 15
    assert s.total_wall_time == 0.9
    assert s.selection_counts == {"client:0": 2}


def test_export_filters_task(tmp_path):
    t = Tracker()
    t.log("a", 1, "server", "accuracy", 0.1)
    t.log("b", 1, "server", "accuracy", 0.2)
    t.export("b", tmp_path / "b.ndl")
    assert [r.task_id for r in import_records(tmp_path / "b.ndl")] == ["b"]


def test_concurrent_records_all_persisted(tmp_path):
    t = Tracker(tmp_path / "m.ndl")

    def work(k):
        for r in range(200):
            t.log("a", r, f"client:{k}", "x", float(r))

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    t.close()
    assert len(import_records(tmp_path / "m.ndl")) == 800


def test_non_finite_value_rejected():
    with pytest.raises(ValueError):
        Tracker().log("a", 1, "server", "accuracy", float("inf"))
