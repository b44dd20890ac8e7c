"""Training state and loop shared by both stages.

`TrainState` holds everything a step mutates: networks, optimizers, the
training rng, the step counter and the synthesis alternation counters. The
loop fetches batch `step` of the seeded stream by random access, so a run
resumed from a checkpoint replays exactly the batches and random draws of an
uninterrupted one.
"""
from __future__ import annotations
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
from torch import nn

from .audit import log_event, log_step, rewind
from .checkpoint_store import load_checkpoint, save_checkpoint
from .config import SETTINGS, Config
from .guardrails import NonFiniteLossError
from .ingest import Batch, Sample, batch_at, load_directory, split_dataset
from .manipulation import build_manip_networks, build_manip_optimizers, train_step_manipulation
from .synthesis import build_synth_networks, build_synth_optimizers, step_kind, train_step_synthesis
from .toy_data import toy_splits
from .tracing import span

STEP_FUNCTIONS: Dict[str, Callable] = {
    "manipulation": train_step_manipulation,
    "synthesis": train_step_synthesis,
}


@dataclass
class TrainState:
    config: Config
    nets: nn.Module
    optims: Dict[str, torch.optim.Optimizer]
    rng: torch.Generator
    step: int = 0
    counters: Dict[str, int] = field(default_factory=dict)

    @property
    def stage(self) -> str:
        return self.config.stage


def build_state(config: Config) -> TrainState:
    if SETTINGS.num_threads > 0:
        torch.set_num_threads(SETTINGS.num_threads)
    torch.manual_seed(config.seed)
    if config.stage == "manipulation":
        nets = build_manip_networks(config.model)
        optims = build_manip_optimizers(nets, config.optim)
        counters: Dict[str, int] = {}
    else:
        nets = build_synth_networks(config.model)
        optims = build_synth_optimizers(nets, config.optim, config.loss.r1_every)
        counters = {"random_steps": 0, "reference_steps": 0, "d_steps": 0}
    rng = torch.Generator().manual_seed(config.seed)
    return TrainState(config=config, nets=nets, optims=optims, rng=rng, counters=counters)


def state_objects(state: TrainState) -> Dict[str, object]:
    return {
        "nets": state.nets.state_dict(),
        "optims": {name: opt.state_dict() for name, opt in state.optims.items()},
        "rng": state.rng.get_state(),
    }


def save_state(state: TrainState, run_dir: str | Path) -> Path:
    return save_checkpoint(run_dir, state.config, state.step, state.counters, state_objects(state))


def load_state(path: str | Path) -> TrainState:
    config, manifest, objects = load_checkpoint(path)
    state = build_state(config)
    state.nets.load_state_dict(objects["nets"])
    for name, opt in state.optims.items():
        opt.load_state_dict(objects["optims"][name])
    state.rng.set_state(objects["rng"])
    state.step = int(manifest["step"])
    state.counters = {k: int(v) for k, v in manifest["counters"].items()}
    return state


def load_datasets(config: Config) -> Tuple[List[Sample], List[Sample]]:
    data = config.dataset
    if data.kind == "toy":
        return toy_splits(data.toy)
    samples = load_directory(data.path, config.model.num_classes, config.model.domain_names,
                             data.attribute_columns, with_images=config.stage == "synthesis")
    return split_dataset(samples, data.test_fraction, config.seed)


class Trainer:
    def __init__(self, state: TrainState, train_set: Sequence[Sample], run_dir: str | Path):
        self.state = state
        self.train_set = train_set
        self.run_dir = Path(run_dir)
        self.last_checkpoint: Optional[Path] = None

    def batch_for(self, step: int) -> List[Batch]:
        cfg = self.state.config
        k = cfg.optim.grad_accumulation
        return [batch_at(self.train_set, cfg.optim.batch_size, cfg.seed, step * k + j, flip=cfg.dataset.flip)
                for j in range(k)]

    def _kind(self, step: int) -> str:
        if self.state.stage != "synthesis":
            return "manipulation"
        return step_kind(step, self.state.config.model.synthesis_variant)

    def checkpoint(self) -> Path:
        self.last_checkpoint = save_state(self.state, self.run_dir)
        log_event("checkpoint_saved", {"step": self.state.step, "path": str(self.last_checkpoint)})
        return self.last_checkpoint

    def run(self, until_step: Optional[int] = None) -> TrainState:
        """Train until `until_step` (default: optim.steps); checkpoint periodically and at the end."""
        state = self.state
        cfg = state.config
        until = cfg.optim.steps if until_step is None else until_step
        step_fn = STEP_FUNCTIONS[state.stage]
        rewind(state.step)
        log_event("train_start", {"stage": state.stage, "from_step": state.step, "until_step": until,
                                  "seed": cfg.seed, "run_dir": str(self.run_dir)})
        with span("train.run", {"stage": state.stage, "until_step": until}):
            while state.step < until:
                step = state.step
                try:
                    report = step_fn(state, self.batch_for(step), state.rng)
                except NonFiniteLossError as e:
                    log_event("non_finite_loss", {"step": e.step, "report": e.report,
                                                  "last_good": str(self.last_checkpoint)})
                    raise
                if step % cfg.optim.log_every == 0:
                    log_step(step, report, self._kind(step))
                if state.step % cfg.optim.checkpoint_every == 0:
                    self.checkpoint()
            if self.last_checkpoint is None or not self.last_checkpoint.name.endswith(f"{state.step:08d}"):
                self.checkpoint()
        return state
