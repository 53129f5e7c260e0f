"""
Low-rank adapters on the model's linear weights: attach with the base frozen, train the
A/B pairs, then fold them into the base weights.
"""

import fnmatch
import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from project.errors import AdapterError, ShapeError
from project.tensor import Tensor, dropout, matmul, reshape, scale, transpose
from project.transformer import Adapter, ModelConfig, ModelWeights, forward, generate_greedy

logger = logging.getLogger(__name__)

DEFAULT_TARGETS = (
    "layers.*.attn.wq",
    "layers.*.attn.wk",
    "layers.*.attn.wv",
    "layers.*.attn.wo",
    "layers.*.mlp.w_gate",
    "layers.*.mlp.w_up",
    "layers.*.mlp.w_down",
)


class LoraConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    r: int = Field(8, ge=1)
    alpha: float = Field(32.0, gt=0)
    dropout_p: float = Field(0.05, ge=0.0, lt=1.0)
    targets: tuple[str, ...] = DEFAULT_TARGETS

    @property
    def scaling(self) -> float:
        return self.alpha / self.r


@dataclass
class LoraLayer:
    """Adapter for one weight W0 of shape d x k: A is r x k, B is d x r."""

    target_name: str
    A: np.ndarray
    B: np.ndarray

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def delta(
        self,
        x: Tensor,
        config: LoraConfig,
        *,
        A: Optional[Tensor] = None,
        B: Optional[Tensor] = None,
        train_mode: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        """
        This adapter's contribution for x. A and B replace the stored arrays when given,
        which is how training passes its tracked leaves.
        """
        return lora_forward_delta(
            self.A if A is None else A,
            self.B if B is None else B,
            x,
            config.alpha,
            config.r,
            config.dropout_p,
            train_mode,
            rng,
        )


def lora_forward_delta(
    A: Tensor,
    B: Tensor,
    x: Tensor,
    alpha: float,
    r: int,
    dropout_p: float = 0.0,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """
    The adapter's contribution (alpha / r) * B A x for a vector x or for every row of x.
    In train mode x first passes through inverted dropout.

    Example:
        lora_forward_delta(Tensor([[1.0, 1.0]]), Tensor([[1.0], [0.0]]), Tensor([1.0, 2.0]), 2.0, 1)
        > Tensor holding [6., 0.]
    """
    A, B, x = (t if isinstance(t, Tensor) else Tensor(t) for t in (A, B, x))
    single = x.ndim == 1
    rows = reshape(x, (1, x.shape[0])) if single else x
    if rows.shape[1] != A.shape[1]:
        raise ShapeError(f"input width {rows.shape[1]} does not match A of shape {A.shape}")
    if train_mode and dropout_p > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout needs a random generator")
        rows = dropout(rows, dropout_p, rng)
    delta = scale(matmul(matmul(rows, transpose(A)), transpose(B)), alpha / r)
    return reshape(delta, (B.shape[0],)) if single else delta


def resolve_targets(base: ModelWeights, patterns: Sequence[str]) -> list[str]:
    """Weight names matched by the patterns, in schema order; every pattern must match."""
    linear = [name for name in base.names() if base[name].ndim == 2 and name.startswith("layers.")]
    for pattern in patterns:
        if not any(fnmatch.fnmatchcase(name, pattern) for name in linear):
            raise AdapterError(f"target pattern {pattern!r} matched no linear weight")
    return [name for name in linear if any(fnmatch.fnmatchcase(name, p) for p in patterns)]


@dataclass
class LoraModel:
    """The frozen base plus one adapter per targeted weight."""

    base: ModelWeights
    layers: dict[str, LoraLayer]
    config: LoraConfig

    @property
    def architecture(self) -> ModelConfig:
        return self.base.config

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for target, layer in self.layers.items():
            params[f"lora.{target}.A"] = layer.A
            params[f"lora.{target}.B"] = layer.B
        return params

    def update_parameters(self, values: Mapping[str, np.ndarray]) -> None:
        for name, value in values.items():
            target, which = name[len("lora.") :].rsplit(".", 1)
            setattr(self.layers[target], which, value)

    def adapter(
        self,
        params: Optional[Mapping[str, Tensor]] = None,
        train_mode: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Adapter:
        cfg = self.config

        def delta(name: str, x: Tensor) -> Optional[Tensor]:
            layer = self.layers.get(name)
            if layer is None:
                return None
            if params:
                A, B = params[f"lora.{name}.A"], params[f"lora.{name}.B"]
            else:
                A = B = None
            return layer.delta(x, cfg, A=A, B=B, train_mode=train_mode, rng=rng)

        return delta

    def logits(
        self,
        tokens: Sequence[int],
        *,
        params: Optional[Mapping[str, Tensor]] = None,
        anchor: Optional[int] = None,
        train_mode: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        return forward(self.base, tokens, adapter=self.adapter(params, train_mode, rng)).logits

    def generate(self, prompt: Sequence[int], max_new: int, eos_id: Optional[int] = None) -> list[int]:
        return generate_greedy(self.base, prompt, max_new, eos_id=eos_id, adapter=self.adapter())


def attach_lora(base: ModelWeights, config: LoraConfig, seed: int) -> LoraModel:
    """
    A starts as seeded Gaussian noise (std 0.02) and B as zeros, so the attached model
    computes exactly what the base computes.
    """
    rng = np.random.default_rng(seed)
    layers = {}
    for name in resolve_targets(base, config.targets):
        d_out, d_in = base[name].shape
        if config.r > min(d_in, d_out):
            raise AdapterError(f"rank {config.r} exceeds min(d_in, d_out) = {min(d_in, d_out)} for {name}")
        layers[name] = LoraLayer(
            target_name=name,
            A=rng.normal(0.0, 0.02, size=(config.r, d_in)),
            B=np.zeros((d_out, config.r)),
        )
    logger.info("Attached LoRA r=%d alpha=%g to %d weights", config.r, config.alpha, len(layers))
    return LoraModel(base=base, layers=layers, config=config)


def merge_and_unload(model: LoraModel) -> ModelWeights:
    """New weights with every targeted W0 replaced by W0 + (alpha / r) B A."""
    tensors = {name: t.copy() for name, t in model.base.tensors.items()}
    for name, layer in model.layers.items():
        tensors[name] = tensors[name] + model.config.scaling * (layer.B @ layer.A)
    return ModelWeights(model.base.config, tensors)


def lora_trainable_parameters(model: LoraModel) -> tuple[dict[str, np.ndarray], int]:
    params = model.trainable_parameters()
    return params, sum(p.size for p in params.values())
