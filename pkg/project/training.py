"""
Optimizer, the two loss regimes, and the two-stage HEFT pipeline.

Stage 1 trains LoRA adapters on the full next-token objective and merges them into the
base. Stage 2 freezes the merged model and trains a LoReFT intervention on the answer
token at the last prompt position.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Literal, Mapping, Optional, Protocol, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from project.errors import SequenceLengthError, TrainingError
from project.lora import LoraConfig, LoraModel, attach_lora, merge_and_unload
from project.reft import ReftConfig, ReftModel, attach_intervention, init_loreft
from project.tasks import SupervisedRecord
from project.tensor import IGNORE_INDEX, Tape, Tensor, cross_entropy
from project.transformer import ModelConfig, ModelWeights

logger = logging.getLogger(__name__)

Objective = Literal["full_sequence", "last_position"]


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(2e-4, gt=0)
    epochs: int = Field(0, ge=0)
    batch_size: int = Field(1, ge=1)
    grad_accum: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.0, ge=0)

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accum


# Stage 1 runs at batch 1 x accum 32, Stage 2 at batch 8 x accum 4.
LORA_TRAIN_DEFAULTS = TrainConfig(batch_size=1, grad_accum=32)
REFT_TRAIN_DEFAULTS = TrainConfig(batch_size=8, grad_accum=4)
# From-scratch pre-training of the desk-scale base; not part of the two-stage method.
PRETRAIN_TRAIN_DEFAULTS = TrainConfig(learning_rate=1e-3, epochs=20, batch_size=1, grad_accum=32)


class HeftPlan(BaseModel):
    """
    Epoch budget and configuration of both stages. A zero-epoch stage is a no-op, which
    gives the LoRA-only and ReFT-only baselines.
    """

    model_config = ConfigDict(frozen=True)

    lora_epochs: int = Field(ge=0)
    reft_epochs: int = Field(ge=0)
    lora_config: LoraConfig = LoraConfig()
    reft_config: ReftConfig = ReftConfig()
    lora_train: TrainConfig = LORA_TRAIN_DEFAULTS
    reft_train: TrainConfig = REFT_TRAIN_DEFAULTS


class StageReport(BaseModel):
    stage: Literal["pretrain", "lora", "reft"]
    epochs_run: int = Field(ge=0)
    optimizer_steps: int = Field(0, ge=0)
    final_mean_loss: Optional[float] = Field(None, allow_inf_nan=False)
    wall_seconds: float = Field(ge=0)
    trainable_param_count: int = Field(ge=0)


class TrainableModel(Protocol):
    @property
    def architecture(self) -> ModelConfig: ...

    def trainable_parameters(self) -> dict[str, np.ndarray]: ...

    def update_parameters(self, values: Mapping[str, np.ndarray]) -> None: ...

    def logits(
        self,
        tokens: Sequence[int],
        *,
        params: Optional[Mapping[str, Tensor]] = None,
        anchor: Optional[int] = None,
        train_mode: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor: ...


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected adaptive-moment update with decoupled weight decay. Parameters
    without a gradient are treated as having a zero gradient. Returns new arrays; the
    state is advanced in place and returned.
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient for {name}", parameter=name)
    beta1, beta2 = config.betas
    state.step += 1
    t = state.step
    lr = config.learning_rate
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        updated[name] = p - lr * config.weight_decay * p - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return updated, state


def loss_full_sequence(
    model: TrainableModel,
    tokens: Sequence[int],
    *,
    params: Optional[Mapping[str, Tensor]] = None,
    reduction: str = "mean",
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Next-token cross-entropy over every position of the sequence."""
    tokens = list(tokens)
    if len(tokens) < 2:
        raise SequenceLengthError("full-sequence loss needs at least two tokens", len(tokens))
    logits = model.logits(tokens[:-1], params=params, train_mode=train_mode, rng=rng)
    return cross_entropy(logits, tokens[1:], reduction=reduction)


def loss_last_position(
    model: TrainableModel,
    record: SupervisedRecord,
    *,
    params: Optional[Mapping[str, Tensor]] = None,
    reduction: str = "mean",
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Cross-entropy of the answer token at the last prompt position, where the intervention sits."""
    logits = model.logits(
        record.prompt_tokens,
        params=params,
        anchor=record.last_position,
        train_mode=train_mode,
        rng=rng,
    )
    targets = [IGNORE_INDEX] * len(record.prompt_tokens)
    targets[record.last_position] = record.answer_token
    return cross_entropy(logits, targets, reduction=reduction)


def _record_loss(
    model: TrainableModel,
    record: SupervisedRecord,
    objective: Objective,
    leaves: Mapping[str, Tensor],
    rng: np.random.Generator,
) -> tuple[Tensor, int]:
    if objective == "full_sequence":
        tokens = record.full_sequence()
        loss = loss_full_sequence(model, tokens, params=leaves, reduction="sum", train_mode=True, rng=rng)
        return loss, len(tokens) - 1
    loss = loss_last_position(model, record, params=leaves, reduction="sum", train_mode=True, rng=rng)
    return loss, 1


def _accumulate(
    model: TrainableModel,
    params: Mapping[str, np.ndarray],
    records: Sequence[SupervisedRecord],
    objective: Objective,
    seed: int,
    step: int,
) -> tuple[dict[str, np.ndarray], float, int]:
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    loss_sum, supervised = 0.0, 0
    for position, record in enumerate(records):
        tape = Tape()
        leaves = {name: tape.watch(value) for name, value in params.items()}
        rng = np.random.default_rng([seed, step, position])
        loss, count = _record_loss(model, record, objective, leaves, rng)
        record_grads = tape.backward(loss)
        for name, leaf in leaves.items():
            grads[name] += record_grads.get(leaf, zeros=True)
        loss_sum += loss.item()
        supervised += count
    return grads, loss_sum, supervised


def train_stage(
    model: TrainableModel,
    records: Sequence[SupervisedRecord],
    config: TrainConfig,
    objective: Objective,
    stage: Literal["pretrain", "lora", "reft"],
) -> StageReport:
    """
    Trains the model's trainable parameters in place.

    Each epoch visits the records in an order fixed by (seed, epoch) and takes
    ceil(N / (batch_size * grad_accum)) optimizer steps. A step sums the per-record
    gradients of its group in order and divides by the group's supervised-token count,
    so only the effective batch matters.
    """
    params = dict(model.trainable_parameters())
    param_count = sum(p.size for p in params.values())
    if config.epochs > 0 and not records:
        raise TrainingError(f"{stage} stage has no training data")

    group = config.effective_batch
    steps_per_epoch = math.ceil(len(records) / group) if records else 0
    state = AdamState()
    final_mean_loss: Optional[float] = None
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(records))
        epoch_loss, epoch_count = 0.0, 0
        for index in range(steps_per_epoch):
            chunk = [records[i] for i in order[index * group : (index + 1) * group]]
            grads, loss_sum, supervised = _accumulate(
                model, params, chunk, objective, config.seed, state.step
            )
            if not math.isfinite(loss_sum):
                raise TrainingError(f"non-finite loss at step {state.step}", step=state.step)
            grads = {name: g / supervised for name, g in grads.items()}
            params, state = adamw_step(params, grads, state, config)
            model.update_parameters(params)
            epoch_loss += loss_sum
            epoch_count += supervised
            logger.debug("%s step %d loss %.6f", stage, state.step, loss_sum / supervised)
        final_mean_loss = epoch_loss / epoch_count
        logger.info("%s epoch %d/%d mean loss %.6f", stage, epoch + 1, config.epochs, final_mean_loss)

    return StageReport(
        stage=stage,
        epochs_run=config.epochs,
        optimizer_steps=state.step,
        final_mean_loss=final_mean_loss,
        wall_seconds=time.perf_counter() - start,
        trainable_param_count=param_count,
    )


def pretrain_base(
    weights: ModelWeights, records: Sequence[SupervisedRecord], config: TrainConfig
) -> tuple[ModelWeights, StageReport]:
    """Full-parameter training on the full-sequence objective; the input weights are left untouched."""
    model = weights.copy()
    report = train_stage(model, records, config, "full_sequence", stage="pretrain")
    return model, report


@dataclass
class HeftResult:
    merged: ModelWeights
    intervention: ReftModel
    reports: list[StageReport]
    lora_model: LoraModel


def run_heft(
    base: ModelWeights, plan: HeftPlan, train_data: Sequence[SupervisedRecord]
) -> HeftResult:
    """
    Attach LoRA, train it for lora_epochs on the full-sequence loss, merge it, then hook
    LoReFT onto the frozen merged model and train it for reft_epochs on the
    last-position loss.
    """
    lora_model = attach_lora(base, plan.lora_config, seed=plan.lora_train.seed)
    lora_report = train_stage(
        lora_model,
        train_data,
        plan.lora_train.model_copy(update={"epochs": plan.lora_epochs}),
        "full_sequence",
        stage="lora",
    )
    merged = merge_and_unload(lora_model)

    reft_config = plan.reft_config.resolve(merged.config)
    params = init_loreft(merged.config.d_model, reft_config.low_rank_dimension, seed=plan.reft_train.seed)
    intervention = attach_intervention(merged, reft_config, params)
    reft_report = train_stage(
        intervention,
        train_data,
        plan.reft_train.model_copy(update={"epochs": plan.reft_epochs}),
        "last_position",
        stage="reft",
    )
    return HeftResult(
        merged=merged,
        intervention=intervention,
        reports=[lora_report, reft_report],
        lora_model=lora_model,
    )
