"""
The LoReFT intervention Phi(h) = h + R^T((W(Rh) + b) - Rh), applied to one layer's block
output at the last prompt position of a frozen model.

W is r x r and acts on Rh, as the equation is written.
"""

import logging
from dataclasses import dataclass
from typing import Literal, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from project.errors import InterventionError, ShapeError
from project.tensor import Tensor, add, matmul, reshape, sub, transpose
from project.transformer import Hook, HookPoint, ModelConfig, ModelWeights, forward, generate_greedy

logger = logging.getLogger(__name__)


class ReftConfig(BaseModel):
    """Where and how wide the intervention is. A missing layer means select_reft_layer."""

    model_config = ConfigDict(frozen=True)

    layer: Optional[int] = Field(None, ge=0)
    component: Literal["block_output"] = "block_output"
    low_rank_dimension: int = Field(4, ge=1)
    position_rule: Literal["last_prompt"] = "last_prompt"

    def resolve(self, model: ModelConfig) -> "ReftConfig":
        layer = select_reft_layer(model.n_layers) if self.layer is None else self.layer
        if layer >= model.n_layers:
            raise InterventionError(f"intervention layer {layer} out of range [0, {model.n_layers})")
        if self.low_rank_dimension > model.d_model:
            raise InterventionError(
                f"low_rank_dimension {self.low_rank_dimension} exceeds d_model {model.d_model}"
            )
        return self.model_copy(update={"layer": layer})


class LoreftTensors(NamedTuple):
    R: Tensor
    W: Tensor
    b: Tensor


@dataclass
class LoreftParams:
    R: np.ndarray
    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        r, d = self.R.shape
        if self.W.shape != (r, r) or self.b.shape != (r,):
            raise ShapeError(
                f"inconsistent LoReFT shapes R={self.R.shape} W={self.W.shape} b={self.b.shape}"
            )

    @property
    def rank(self) -> int:
        return self.R.shape[0]

    @property
    def width(self) -> int:
        return self.R.shape[1]

    def tensors(self) -> LoreftTensors:
        return LoreftTensors(Tensor(self.R), Tensor(self.W), Tensor(self.b))


def init_loreft(d_model: int, r: int, seed: int) -> LoreftParams:
    """
    R gets orthonormal rows (Gaussian rows orthonormalized in order), W = I and b = 0, so
    the fresh intervention returns its input unchanged.
    """
    if not 1 <= r <= d_model:
        raise InterventionError(f"low-rank dimension must lie in [1, {d_model}], got {r}")
    rng = np.random.default_rng(seed)
    q, upper = np.linalg.qr(rng.normal(size=(d_model, r)))
    # Sign fix makes the factorization match Gram-Schmidt on the same rows.
    q = q * np.sign(np.diag(upper))
    return LoreftParams(R=np.ascontiguousarray(q.T), W=np.eye(r), b=np.zeros(r))


def apply_loreft(params: Union[LoreftParams, LoreftTensors], h: Tensor) -> Tensor:
    """
    Applies Phi to a vector of width d or to every row of a k x d matrix.

    Example:
        params = LoreftParams(R=np.array([[1.0, 0.0]]), W=np.array([[2.0]]), b=np.array([0.5]))
        apply_loreft(params, Tensor([3.0, 4.0]))
        > Tensor holding [6.5, 4.]
    """
    p = params.tensors() if isinstance(params, LoreftParams) else params
    h = h if isinstance(h, Tensor) else Tensor(h)
    single = h.ndim == 1
    rows = reshape(h, (1, h.shape[0])) if single else h
    if rows.shape[1] != p.R.shape[1]:
        raise ShapeError(f"hidden width {rows.shape[1]} does not match R of shape {p.R.shape}")
    projected = matmul(rows, transpose(p.R))
    edited = add(matmul(projected, transpose(p.W)), p.b)
    out = add(rows, matmul(sub(edited, projected), p.R))
    return reshape(out, (h.shape[0],)) if single else out


def select_reft_layer(n_layers: int) -> int:
    """The layer at relative depth 15/32, clamped to the model."""
    if n_layers < 1:
        raise InterventionError(f"n_layers must be at least 1, got {n_layers}")
    return min(max(n_layers * 15 // 32, 0), n_layers - 1)


@dataclass
class ReftModel:
    """A frozen base with one LoReFT intervention hooked onto it; only R, W and b train."""

    base: ModelWeights
    config: ReftConfig
    params: LoreftParams

    @property
    def architecture(self) -> ModelConfig:
        return self.base.config

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        return {"reft.R": self.params.R, "reft.W": self.params.W, "reft.b": self.params.b}

    def update_parameters(self, values: Mapping[str, np.ndarray]) -> None:
        merged = {**self.trainable_parameters(), **values}
        self.params = LoreftParams(R=merged["reft.R"], W=merged["reft.W"], b=merged["reft.b"])

    def hooks(self, anchor: int, params: Optional[Mapping[str, Tensor]] = None) -> list[Hook]:
        if params:
            tensors = LoreftTensors(params["reft.R"], params["reft.W"], params["reft.b"])
        else:
            tensors = self.params.tensors()
        point = HookPoint(layer=self.config.layer, component=self.config.component, positions=(anchor,))
        return [(point, lambda rows: apply_loreft(tensors, rows))]

    def logits(
        self,
        tokens: Sequence[int],
        *,
        params: Optional[Mapping[str, Tensor]] = None,
        anchor: Optional[int] = None,
        train_mode: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        anchor = len(tokens) - 1 if anchor is None else anchor
        return forward(self.base, tokens, self.hooks(anchor, params)).logits

    def generate(self, prompt: Sequence[int], max_new: int, eos_id: Optional[int] = None) -> list[int]:
        # Anchored to the last prompt position on every decoding step.
        return generate_greedy(self.base, prompt, max_new, self.hooks(len(prompt) - 1), eos_id=eos_id)

    def trainable_count(self) -> int:
        return sum(p.size for p in self.trainable_parameters().values())


def attach_intervention(base: ModelWeights, config: ReftConfig, params: LoreftParams) -> ReftModel:
    config = config.resolve(base.config)
    if params.width != base.config.d_model or params.rank != config.low_rank_dimension:
        raise InterventionError(
            f"parameters of rank {params.rank} and width {params.width} do not fit "
            f"low_rank_dimension {config.low_rank_dimension} on d_model {base.config.d_model}"
        )
    logger.info("Attached LoReFT dim=%d at layer %d", config.low_rank_dimension, config.layer)
    return ReftModel(base=base, config=config, params=params)
