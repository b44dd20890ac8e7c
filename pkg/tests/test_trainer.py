"""Tests for the training loop: checkpoints, logging and bit-exact resume."""
import pytest
import torch

from src import audit
from src.audit import get_events, read_losses
from src.checkpoint_store import latest_checkpoint
from src.guardrails import NonFiniteLossError
from src.ingest import batch_at
from src.trainer import STEP_FUNCTIONS, Trainer, build_state, load_datasets, load_state


def _train(cfg, run_dir, until):
    train, _ = load_datasets(cfg)
    return Trainer(build_state(cfg), train, run_dir).run(until)


def _assert_same_state(a, b):
    sa, sb = a.nets.state_dict(), b.nets.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert torch.equal(a.rng.get_state(), b.rng.get_state())
    assert a.step == b.step and a.counters == b.counters


def test_run_writes_losses_and_checkpoints(tmp_path, tiny_config):
    cfg = tiny_config(optim={"steps": 3, "checkpoint_every": 2})
    audit.configure(tmp_path)
    state = _train(cfg, tmp_path, None)
    assert state.step == 3
    assert len(read_losses(tmp_path)) == 3
    assert latest_checkpoint(tmp_path).name == "step_00000003"
    assert (tmp_path / "checkpoints" / "step_00000002").exists()
    names = [e["event"] for e in get_events()]
    assert names[0] == "train_start" and names.count("checkpoint_saved") == 2


def test_rerun_into_the_same_directory_keeps_one_row_per_step(tmp_path, tiny_config):
    cfg = tiny_config(optim={"steps": 3})
    audit.configure(tmp_path)
    first = _train(cfg, tmp_path, None)
    table = read_losses(tmp_path)
    second = _train(cfg, tmp_path, None)
    again = read_losses(tmp_path)
    assert again["step"].tolist() == [0, 1, 2]
    assert again.equals(table)
    _assert_same_state(first, second)


@pytest.mark.parametrize("stage", ["manipulation", "synthesis"])
def test_resume_replays_uninterrupted_run(tmp_path, tiny_config, stage):
    cfg = tiny_config(stage)
    straight = _train(cfg, tmp_path / "a", 4)
    _train(cfg, tmp_path / "b", 2)
    resumed_state = load_state(tmp_path / "b")
    assert resumed_state.step == 2
    train, _ = load_datasets(cfg)
    resumed = Trainer(resumed_state, train, tmp_path / "b").run(4)
    _assert_same_state(straight, resumed)


def test_synthesis_losses_carry_step_kind(tmp_path, tiny_config):
    audit.configure(tmp_path)
    _train(tiny_config("synthesis"), tmp_path, 2)
    assert read_losses(tmp_path)["kind"].tolist() == ["random", "reference"]


def test_non_finite_loss_is_logged_and_raised(tmp_path, tiny_config, monkeypatch):
    def exploding(state, batch, rng):
        raise NonFiniteLossError(state.step, {"g_total": float("nan")})

    monkeypatch.setitem(STEP_FUNCTIONS, "manipulation", exploding)
    with pytest.raises(NonFiniteLossError):
        _train(tiny_config(), tmp_path, 2)
    event = [e for e in get_events() if e["event"] == "non_finite_loss"][0]
    assert event["step"] == 0 and event["last_good"] == "None"


def test_gradient_accumulation_reads_consecutive_batches(tmp_path, tiny_config):
    cfg = tiny_config(optim={"grad_accumulation": 2})
    train, _ = load_datasets(cfg)
    trainer = Trainer(build_state(cfg), train, tmp_path)
    first, second = trainer.batch_for(1)
    assert first.ids == batch_at(train, 2, cfg.seed, 2).ids
    assert second.ids == batch_at(train, 2, cfg.seed, 3).ids
