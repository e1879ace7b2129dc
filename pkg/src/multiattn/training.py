"""Adam optimization and the deterministic training loop.

Training shuffles the example order once per epoch with the seeded RNG,
accumulates gradient steps, and at every validation interval records one
curve row (step, mean train loss since the last row, validation loss,
validation token accuracy from greedy decoding). Early stopping tracks the
validation loss with a patience budget; a target validation accuracy, when
set, ends the run as soon as it is reached. Everything downstream of the
seed is deterministic, so re-running a configuration reproduces the curve
file and checkpoint byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfigError, NonFiniteError, Parameter, SeededRng, ShapeMismatchError
from .graph import Graph
from .metrics import token_accuracy
from .model import (MultiSourceModel, evaluate_loss, forward_loss, greedy_decode,
                    save_checkpoint)
from .tasks import ParallelExample


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    max_steps: int = 1000
    validation_interval: int = 100
    patience: int = 5
    seed: int = 0
    target_valid_accuracy: float | None = None

    def __post_init__(self):
        for name, v in (("learning_rate", self.learning_rate), ("beta1", self.beta1),
                        ("beta2", self.beta2), ("eps", self.eps)):
            if not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        for name, v in (("batch_size", self.batch_size), ("max_steps", self.max_steps),
                        ("validation_interval", self.validation_interval)):
            if v < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps, "batch_size": self.batch_size,
                "max_steps": self.max_steps,
                "validation_interval": self.validation_interval,
                "patience": self.patience, "seed": self.seed,
                "target_valid_accuracy": self.target_valid_accuracy}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class AdamState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self, params: list[Parameter]):
        self.step = 0
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}


def adam_step(params: list[Parameter], grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place. Parameters without a
    gradient entry are treated as having a zero gradient."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for p in params:
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.value)
        elif g.shape != p.value.shape:
            raise ShapeMismatchError(f"adam_step({p.name})", p.value.shape, g.shape)
        m = state.m[p.name]
        v = state.v[p.name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        p.value -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.eps)


@dataclass
class CurveRow:
    step: int
    train_loss: float
    valid_loss: float
    valid_accuracy: float


CURVES_HEADER = "step\ttrain_loss\tvalid_loss\tvalid_accuracy"


def curves_to_tsv(rows: list[CurveRow]) -> str:
    lines = [CURVES_HEADER]
    for r in rows:
        lines.append(f"{r.step}\t{r.train_loss!r}\t{r.valid_loss!r}\t{r.valid_accuracy!r}")
    return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    curves: list[CurveRow]
    steps_run: int
    stop_reason: str                 # "max_steps" | "early_stop" | "target_reached"
    best_step: int
    best_valid_loss: float
    checkpoint: bytes
    final_train_loss: float

    def steps_to_accuracy(self, threshold: float) -> int | None:
        for row in self.curves:
            if row.valid_accuracy >= threshold:
                return row.step
        return None


class _BatchIterator:
    """Deterministic epoch-reshuffled batch stream."""

    def __init__(self, examples: list[ParallelExample], batch_size: int, rng: SeededRng):
        if not examples:
            raise ConfigError("cannot train on an empty dataset")
        self.examples = examples
        self.batch_size = batch_size
        self.rng = rng
        self.order: list[int] = []
        self.pos = 0

    def next_batch(self) -> list[ParallelExample]:
        batch = []
        while len(batch) < self.batch_size:
            if self.pos >= len(self.order):
                self.order = list(range(len(self.examples)))
                self.rng.shuffle(self.order)
                self.pos = 0
            batch.append(self.examples[self.order[self.pos]])
            self.pos += 1
        return batch


def _valid_accuracy(model: MultiSourceModel, examples: list[ParallelExample],
                    max_len: int) -> float:
    hyps = [greedy_decode(model, ex.sources, max_len)[0] for ex in examples]
    return token_accuracy(hyps, [ex.target for ex in examples])


def decode_max_len(examples: list[ParallelExample], margin: int = 3) -> int:
    return max(len(ex.target) for ex in examples) + margin


def train(model: MultiSourceModel, train_examples: list[ParallelExample],
          valid_examples: list[ParallelExample], config: TrainConfig,
          out_dir: str | Path | None = None) -> TrainResult:
    """Run the loop; optionally write curves.tsv and model.ckpt to out_dir.

    The checkpoint in the result (and on disk) is the best-validation-loss
    snapshot, except that reaching the target accuracy snapshots the model
    that reached it.
    """
    if not valid_examples:
        raise ConfigError("cannot train without validation examples")
    params = model.parameters()
    state = AdamState(params)
    rng = SeededRng(config.seed)
    batches = _BatchIterator(train_examples, config.batch_size, rng)
    max_len = decode_max_len(valid_examples)

    curves: list[CurveRow] = []
    best_loss = math.inf
    best_step = 0
    best_checkpoint = save_checkpoint(model)
    bad_validations = 0
    stop_reason = "max_steps"
    running_sum = 0.0
    running_count = 0
    train_loss = math.nan
    steps_run = 0

    for step in range(1, config.max_steps + 1):
        batch = batches.next_batch()
        g = Graph()
        loss, _ = forward_loss(g, model, batch)
        loss_value = float(loss.value)
        if not math.isfinite(loss_value):
            raise NonFiniteError(f"training loss diverged at step {step}")
        grads = g.backward(loss, params=params)
        adam_step(params, grads, state, config)
        running_sum += loss_value
        running_count += 1
        steps_run = step

        if step % config.validation_interval == 0:
            train_loss = running_sum / running_count
            running_sum = 0.0
            running_count = 0
            valid_loss = evaluate_loss(model, valid_examples)
            valid_acc = _valid_accuracy(model, valid_examples, max_len)
            curves.append(CurveRow(step, train_loss, valid_loss, valid_acc))

            if valid_loss < best_loss:
                best_loss = valid_loss
                best_step = step
                best_checkpoint = save_checkpoint(model)
                bad_validations = 0
            else:
                bad_validations += 1

            if (config.target_valid_accuracy is not None
                    and valid_acc >= config.target_valid_accuracy):
                stop_reason = "target_reached"
                best_step = step
                best_loss = valid_loss
                best_checkpoint = save_checkpoint(model)
                break
            if bad_validations >= config.patience:
                stop_reason = "early_stop"
                break

    result = TrainResult(curves=curves, steps_run=steps_run, stop_reason=stop_reason,
                         best_step=best_step, best_valid_loss=best_loss,
                         checkpoint=best_checkpoint,
                         final_train_loss=train_loss)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "curves.tsv").write_text(curves_to_tsv(curves), encoding="utf-8")
        (out / "model.ckpt").write_bytes(result.checkpoint)
    return result
