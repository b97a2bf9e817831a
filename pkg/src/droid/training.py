"""Two-stage training with intervention-based augmentation of Go samples."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from droid.diffcore import AdamState, adam_step, backward
from droid.errors import DroidError
from droid.features import PreparedScene, prepare_scene
from droid.model import Model, ModelConfig, compute_loss, forward, make_batch, save_checkpoint
from droid.scene import Intention, Response, mask_generate
from droid.simulator import Scenario


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    stage1_steps: int = 2000
    stage2_steps: int = 2000
    lr_stage1: float = 1e-3
    lr_stage2: float = 2e-4
    aug_prob: float = 0.5
    augment: bool = True
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr_stage1 <= 0 or self.lr_stage2 <= 0:
            raise DroidError("invalid_config", "learning rates must be positive")
        if self.batch_size < 1:
            raise DroidError("invalid_config", "batch size must be positive")
        if not 0.0 <= self.aug_prob <= 1.0:
            raise DroidError("invalid_config", "augmentation probability must lie in [0, 1]")

    def steps(self, stage: int) -> int:
        return self.stage1_steps if stage == 1 else self.stage2_steps

    def lr(self, stage: int) -> float:
        return self.lr_stage1 if stage == 1 else self.lr_stage2


@dataclass
class Sample:
    index: int
    scenario: Scenario
    intention: Intention
    response: Response
    removed: int | None = None
    masks: list[np.ndarray | None] | None = field(default=None, repr=False)

    @classmethod
    def from_scenario(cls, index: int, scenario: Scenario) -> Sample:
        intention, response = scenario.labels
        return cls(index, scenario, intention, response)


def augment_sample(sample: Sample, rng: np.random.Generator) -> Sample:
    """Remove one random tracklet from a Go sample with more than one tracklet.

    The label is untouched; the returned sample carries the per-frame masks
    that zero the removed tracklet's boxes.
    """
    tracklets = sample.scenario.clip.tracklets
    if sample.response != Response.GO or len(tracklets) <= 1:
        return sample
    k = tracklets[int(rng.integers(len(tracklets)))]
    clip = sample.scenario.clip
    masks = [None if b is None else mask_generate(clip.height, clip.width, b) for b in k.boxes]
    return Sample(sample.index, sample.scenario, sample.intention, sample.response, k.id, masks)


@dataclass
class LogRow:
    step: int
    stage: int
    loss: float
    response_accuracy: float


class Trainer:
    """Runs one training stage over a list of scenarios.

    Un-intervened scenes are prepared once and cached; augmented ones are
    prepared on demand.
    """

    def __init__(self, scenarios: list[Scenario], config: TrainConfig, model: Model):
        if not scenarios:
            raise DroidError("empty_dataset", "training needs at least one scenario")
        self.samples = [Sample.from_scenario(i, s) for i, s in enumerate(scenarios)]
        self.config = config
        self.model = model
        self._cache: dict[int, PreparedScene] = {}

    def prepared(self, sample: Sample) -> PreparedScene:
        if sample.removed is not None:
            return prepare_scene(sample.scenario.clip, sample.removed, self.model.config.grid)
        if sample.index not in self._cache:
            self._cache[sample.index] = prepare_scene(sample.scenario.clip, None, self.model.config.grid)
        return self._cache[sample.index]

    def batches(self, stage: int, rng: np.random.Generator):
        n, bs = len(self.samples), self.config.batch_size
        order = rng.permutation(n)
        pos = 0
        while True:
            if pos + bs > n:
                order = rng.permutation(n)
                pos = 0
            idx = order[pos:pos + min(bs, n)]
            pos += len(idx)
            batch = []
            for i in sorted(idx.tolist()):
                s = self.samples[i]
                if stage == 2 and self.config.augment and rng.random() < self.config.aug_prob:
                    s = augment_sample(s, rng)
                batch.append(s)
            yield batch

    def run(self, stage: int, log_path=None, checkpoint_dir=None) -> list[LogRow]:
        cfg, model = self.config, self.model
        rng = np.random.default_rng([cfg.seed, stage])
        state = AdamState(lr=cfg.lr(stage))
        names = sorted(model.params)
        log: list[LogRow] = []
        batches = self.batches(stage, rng)
        for step in range(1, cfg.steps(stage) + 1):
            batch = next(batches)
            prepared = [self.prepared(s) for s in batch]
            out = forward(model.params, make_batch(prepared, model.config), model.config)
            intentions = [int(s.intention) for s in batch]
            responses = [int(s.response) for s in batch]
            loss = compute_loss(out, intentions, responses, stage, model.config)
            grads = backward(loss)
            adam_step(model.params, {k: grads[model.params[k]] for k in names if model.params[k] in grads}, state)
            acc = float(np.mean(out.response_probs.argmax(axis=1) == np.array(responses)))
            log.append(LogRow(step, stage, float(loss.value), acc))
            if checkpoint_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(checkpoint_dir, f"stage{stage}_step{step:06d}.bin"), model.params, model.config)
        if log_path:
            write_log(log_path, log)
        return log


def write_log(path, rows: list[LogRow], append: bool = False) -> None:
    new = not (append and os.path.exists(path))
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(["step", "stage", "loss", "response_accuracy"])
        for r in rows:
            w.writerow([r.step, r.stage, repr(r.loss), repr(r.response_accuracy)])


def train(scenarios: list[Scenario], config: TrainConfig, stage: int, model: Model | None = None,
          model_config: ModelConfig | None = None, log_path=None, checkpoint_dir=None) -> tuple[Model, list[LogRow]]:
    """Train one stage. Stage 2 must start from a stage-1 model."""
    if stage not in (1, 2):
        raise DroidError("invalid_stage", f"stage must be 1 or 2, got {stage}")
    if stage == 2 and model is None:
        raise DroidError("missing_checkpoint", "stage 2 needs the stage-1 checkpoint")
    if model is None:
        model = Model.create(model_config)
    log = Trainer(scenarios, config, model).run(stage, log_path, checkpoint_dir)
    return model, log
