"""Tests for the audit log, the losses table and timing spans."""
import json

import pytest

from src.audit import configure, get_events, log_event, log_step, read_losses, rewind
from src.tracing import span


def test_events_in_memory_and_on_disk(tmp_path):
    configure(tmp_path)
    log_event("translate", {"mode": "latent"})
    events = get_events()
    assert events[-1]["event"] == "translate" and events[-1]["mode"] == "latent"
    lines = (tmp_path / "events.jsonl").read_text().splitlines()
    assert json.loads(lines[-1])["event"] == "translate"


def test_losses_csv_keeps_first_header(tmp_path):
    configure(tmp_path)
    log_step(0, {"d_real": 0.5, "g_adv": 1.0}, kind="random")
    log_step(1, {"d_real": 0.25, "g_adv": 2.0, "feat": 3.0}, kind="reference")
    table = read_losses(tmp_path)
    assert table.columns.tolist() == ["step", "kind", "d_real", "g_adv"]
    assert table["kind"].tolist() == ["random", "reference"]
    assert table["g_adv"].tolist() == [1.0, 2.0]


def test_rewind_drops_rows_and_step_events_from_the_restart_step(tmp_path):
    configure(tmp_path)
    log_event("train_start", {"from_step": 0})
    for step in range(4):
        log_step(step, {"g_total": float(step)})
    log_event("checkpoint_saved", {"step": 2})
    log_event("checkpoint_saved", {"step": 4})
    rewind(2)
    assert read_losses(tmp_path)["step"].tolist() == [0, 1]
    kept = [json.loads(line) for line in (tmp_path / "events.jsonl").read_text().splitlines()]
    assert [e["step"] for e in kept if e["event"] == "train_step"] == [0, 1]
    assert [e["step"] for e in kept if e["event"] == "checkpoint_saved"] == [2]
    assert kept[0]["event"] == "train_start"
    assert len(get_events()) == 7


def test_rewind_to_zero_removes_the_losses_table(tmp_path):
    configure(tmp_path)
    log_step(0, {"g_total": 1.0})
    rewind(0)
    assert not (tmp_path / "losses.csv").exists()
    log_step(0, {"g_total": 2.0})
    assert read_losses(tmp_path)["g_total"].tolist() == [2.0]


def test_rewind_without_run_dir_is_a_no_op():
    log_step(0, {"g_total": 1.0})
    rewind(0)
    assert get_events()[-1]["step"] == 0


def test_log_step_without_run_dir_stays_in_memory(tmp_path):
    log_step(3, {"g_total": 1.0})
    assert get_events()[-1]["step"] == 3
    assert not (tmp_path / "losses.csv").exists()


def test_span_records_status_and_reraises():
    with span("work", {"stage": "toy"}):
        pass
    ok = get_events()[-1]
    assert ok["event"] == "span" and ok["status"] == "ok" and ok["stage"] == "toy"
    assert ok["seconds"] >= 0.0
    with pytest.raises(RuntimeError):
        with span("broken"):
            raise RuntimeError("boom")
    failed = get_events()[-1]
    assert failed["status"] == "error" and "boom" in failed["error"]
