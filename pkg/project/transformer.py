"""
A deterministic mini decoder-only transformer whose block outputs can be hooked per
layer and per token position.

Blocks follow the Llama layout: RMS normalization, causal multi-head attention, a gated
SiLU feed-forward, and two residual additions per layer. A layer's "block output" is the
residual stream right after the second addition, which is where hooks are applied.
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Literal, Mapping, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from project.errors import (
    GenerationError,
    InterventionError,
    SequenceLengthError,
    ShapeError,
    VocabularyError,
)
from project.tensor import (
    Tensor,
    add,
    columns,
    concat_columns,
    embedding_lookup,
    matmul,
    mul_elem,
    rms_norm,
    scale,
    set_rows,
    silu,
    softmax_rows,
    take_rows,
    transpose,
)

logger = logging.getLogger(__name__)

ALL_POSITIONS = "all"


class ModelConfig(BaseModel):
    """
    Hyperparameters of the mini transformer. The defaults are the desk-scale model: four
    layers over the 261-token byte vocabulary.
    """

    model_config = ConfigDict(frozen=True)

    n_layers: int = Field(4, ge=1)
    d_model: int = Field(128, ge=1)
    n_heads: int = Field(4, ge=1)
    d_ff: int = Field(256, ge=1)
    vocab_size: int = Field(261, ge=1)
    max_seq: int = Field(256, ge=2)
    seed: int = Field(0, ge=0, lt=2**64)
    norm_eps: float = Field(1e-6, gt=0)
    init_std: float = Field(0.02, gt=0)

    @model_validator(mode="after")
    def check_heads(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every named weight of the model and its shape, in a stable order."""
    d, f, v = config.d_model, config.d_ff, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {
        "tok_embedding": (v, d),
        "pos_embedding": (config.max_seq, d),
    }
    for i in range(config.n_layers):
        prefix = f"layers.{i}"
        shapes[f"{prefix}.attn_norm"] = (d,)
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.attn.{proj}"] = (d, d)
        shapes[f"{prefix}.mlp_norm"] = (d,)
        shapes[f"{prefix}.mlp.w_gate"] = (f, d)
        shapes[f"{prefix}.mlp.w_up"] = (f, d)
        shapes[f"{prefix}.mlp.w_down"] = (d, f)
    shapes["final_norm"] = (d,)
    shapes["unembedding"] = (d, v)
    return shapes


def _is_norm(name: str) -> bool:
    return name.endswith("_norm")


class HookPoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    layer: int = Field(ge=0)
    component: Literal["block_output"] = "block_output"
    positions: Union[tuple[int, ...], Literal["all"]] = ALL_POSITIONS

    def resolve(self, seq_len: int) -> list[int]:
        if self.positions == ALL_POSITIONS:
            return list(range(seq_len))
        return list(self.positions)


Hook = tuple[HookPoint, Callable[[Tensor], Tensor]]
Adapter = Callable[[str, Tensor], Optional[Tensor]]


@dataclass
class ForwardTrace:
    logits: Tensor
    block_outputs: list[Tensor] = field(default_factory=list)


@dataclass
class ModelWeights:
    """
    The model's parameterization: one float64 array per stable weight name. Used directly
    as a language model it is the frozen base; its trainable parameters are every weight,
    which is what full-parameter pre-training updates.
    """

    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = weight_shapes(self.config)
        if set(self.tensors) != set(expected):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ShapeError(f"weight names do not match the schema: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def architecture(self) -> ModelConfig:
        return self.config

    def names(self) -> list[str]:
        return list(weight_shapes(self.config))

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {n: t.copy() for n, t in self.tensors.items()})

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def digest(self) -> str:
        """SHA-256 over every name and the little-endian bytes of its tensor."""
        h = hashlib.sha256()
        for name in self.names():
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name], dtype="<f8").tobytes())
        return h.hexdigest()

    def trainable_parameters(self) -> dict[str, np.ndarray]:
        return dict(self.tensors)

    def update_parameters(self, values: Mapping[str, np.ndarray]) -> None:
        for name, value in values.items():
            self.tensors[name] = value

    def logits(
        self,
        tokens: Sequence[int],
        *,
        params: Optional[Mapping[str, Tensor]] = None,
        anchor: Optional[int] = None,
        train_mode: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> Tensor:
        return forward(self, tokens, params=params).logits

    def generate(self, prompt: Sequence[int], max_new: int, eos_id: Optional[int] = None) -> list[int]:
        return generate_greedy(self, prompt, max_new, eos_id=eos_id)


def init_model(config: ModelConfig) -> ModelWeights:
    """Seeded Gaussian weights (mean 0, std init_std); normalization gains start at 1."""
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in weight_shapes(config).items():
        if _is_norm(name):
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = rng.normal(0.0, config.init_std, size=shape)
    return ModelWeights(config, tensors)


def _check_tokens(config: ModelConfig, tokens: Sequence[int]) -> list[int]:
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise SequenceLengthError("empty token sequence", 0)
    if len(tokens) > config.max_seq:
        raise SequenceLengthError(
            f"sequence of {len(tokens)} tokens exceeds max_seq {config.max_seq}", len(tokens)
        )
    bad = [t for t in tokens if not 0 <= t < config.vocab_size]
    if bad:
        raise VocabularyError(f"token id {bad[0]} outside vocabulary of {config.vocab_size}")
    return tokens


def _group_hooks(config: ModelConfig, hooks: Sequence[Hook], seq_len: int) -> dict[int, list[Hook]]:
    by_layer: dict[int, list[Hook]] = {}
    for point, transform in hooks:
        if point.layer >= config.n_layers:
            raise InterventionError(f"hook layer {point.layer} out of range [0, {config.n_layers})")
        outside = [p for p in point.resolve(seq_len) if not 0 <= p < seq_len]
        if outside:
            raise InterventionError(f"hook position {outside[0]} outside sequence of length {seq_len}")
        by_layer.setdefault(point.layer, []).append((point, transform))
    return by_layer


def _causal_mask(seq_len: int) -> Tensor:
    mask = np.zeros((seq_len, seq_len))
    mask[np.triu_indices(seq_len, k=1)] = -np.inf
    return Tensor(mask)


def forward(
    weights: ModelWeights,
    tokens: Sequence[int],
    hooks: Sequence[Hook] = (),
    *,
    params: Optional[Mapping[str, Tensor]] = None,
    adapter: Optional[Adapter] = None,
    trace: bool = False,
) -> ForwardTrace:
    """
    Runs the model over one token sequence and returns logits for every position.

    Args:
        weights: The model weights, used as constants.
        tokens: Token ids, at most max_seq of them.
        hooks: (HookPoint, transform) pairs; each transform receives the addressed rows of
            the layer's block output and returns their replacement, before the next layer
            reads them.
        params: Tracked tensors that replace the named weights (full-parameter training).
        adapter: Called as adapter(weight_name, x) for every linear map; a returned tensor
            is added to that map's output.
        trace: Keep every layer's block output in the returned trace.
    """
    config = weights.config
    tokens = _check_tokens(config, tokens)
    seq_len = len(tokens)
    by_layer = _group_hooks(config, hooks, seq_len)

    def w(name: str) -> Tensor:
        if params is not None and name in params:
            return params[name]
        return Tensor(weights.tensors[name])

    def linear(x: Tensor, name: str) -> Tensor:
        y = matmul(x, transpose(w(name)))
        if adapter is not None:
            delta = adapter(name, x)
            if delta is not None:
                y = add(y, delta)
        return y

    eps = config.norm_eps
    head_dim = config.head_dim
    mask = _causal_mask(seq_len)
    block_outputs: list[Tensor] = []

    x = add(embedding_lookup(w("tok_embedding"), tokens), take_rows(w("pos_embedding"), range(seq_len)))
    for i in range(config.n_layers):
        prefix = f"layers.{i}"
        h = rms_norm(x, w(f"{prefix}.attn_norm"), eps)
        q = linear(h, f"{prefix}.attn.wq")
        k = linear(h, f"{prefix}.attn.wk")
        v = linear(h, f"{prefix}.attn.wv")
        heads = []
        for head in range(config.n_heads):
            lo, hi = head * head_dim, (head + 1) * head_dim
            scores = scale(matmul(columns(q, lo, hi), transpose(columns(k, lo, hi))), 1.0 / math.sqrt(head_dim))
            heads.append(matmul(softmax_rows(add(scores, mask)), columns(v, lo, hi)))
        x = add(x, linear(concat_columns(heads), f"{prefix}.attn.wo"))

        h = rms_norm(x, w(f"{prefix}.mlp_norm"), eps)
        gated = mul_elem(silu(linear(h, f"{prefix}.mlp.w_gate")), linear(h, f"{prefix}.mlp.w_up"))
        x = add(x, linear(gated, f"{prefix}.mlp.w_down"))

        for point, transform in by_layer.get(i, ()):
            positions = point.resolve(seq_len)
            x = set_rows(x, positions, transform(take_rows(x, positions)))
        if trace:
            block_outputs.append(x)

    x = rms_norm(x, w("final_norm"), eps)
    return ForwardTrace(logits=matmul(x, w("unembedding")), block_outputs=block_outputs)


def _present(point: HookPoint, seq_len: int) -> Optional[HookPoint]:
    if point.positions == ALL_POSITIONS:
        return point
    kept = tuple(p for p in point.positions if p < seq_len)
    if not kept:
        return None
    return point if len(kept) == len(point.positions) else point.model_copy(update={"positions": kept})


def generate_greedy(
    weights: ModelWeights,
    prompt: Sequence[int],
    max_new: int,
    hooks: Sequence[Hook] = (),
    *,
    eos_id: Optional[int] = None,
    adapter: Optional[Adapter] = None,
) -> list[int]:
    """
    Appends argmax tokens one at a time and returns the new tokens.

    Hook positions are absolute; a hook applies on a step only to the addressed positions
    already present, so prompt-anchored hooks apply on every step. Stops after max_new
    tokens, at eos_id, or when the sequence reaches max_seq.
    """
    if not prompt:
        raise GenerationError("prompt must not be empty")
    if max_new < 1:
        raise GenerationError(f"max_new must be at least 1, got {max_new}")
    tokens = _check_tokens(weights.config, prompt)
    new_tokens: list[int] = []
    for _ in range(max_new):
        if len(tokens) >= weights.config.max_seq:
            logger.debug("Generation stopped at max_seq %d", weights.config.max_seq)
            break
        active = []
        for point, transform in hooks:
            present = _present(point, len(tokens))
            if present is not None:
                active.append((present, transform))
        logits = forward(weights, tokens, active, adapter=adapter).logits
        next_token = int(np.argmax(logits.data[-1]))
        tokens.append(next_token)
        new_tokens.append(next_token)
        if eos_id is not None and next_token == eos_id:
            break
    return new_tokens
