"""
Dense float64 tensors with an append-only reverse-mode differentiation tape.

Only the operators the transformer, the LoRA adapters and the LoReFT intervention need
are provided. Every operator works on plain arrays as constants; as soon as one input
carries a tape handle, the result is recorded on that tape together with its local
gradient rule (a vector-Jacobian product).

Example:
    tape = Tape()
    x = tape.watch([[1.0, 2.0]])
    loss = sum_all(matmul(x, Tensor([[3.0], [4.0]])))
    tape.backward(loss)[x]
    > array([[3., 4.]])
"""

import logging
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from project.errors import ShapeError, VocabularyError

logger = logging.getLogger(__name__)

IGNORE_INDEX = -1

Grads = tuple[Optional[np.ndarray], ...]
VectorJacobian = Callable[[np.ndarray, tuple[bool, ...]], Grads]


class Tensor:
    """
    A row-major float64 array, optionally linked to one node of one tape.

    Tensors without a tape are plain values and may be shared read-only across threads.
    """

    __slots__ = ("data", "tape", "tape_id")

    def __init__(
        self,
        data: Union["Tensor", np.ndarray, Sequence, float],
        tape: Optional["Tape"] = None,
        tape_id: Optional[int] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        if (tape is None) != (tape_id is None):
            raise ValueError("tape and tape_id must be given together")
        self.tape = tape
        self.tape_id = tape_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul_elem(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        where = f", tape_id={self.tape_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{where})"


@dataclass
class _Node:
    inputs: tuple[Optional[int], ...]
    vjp: Optional[VectorJacobian]
    shape: tuple[int, ...]


class Tape:
    """
    Append-only sequence of primitive-operation records.

    Append order is forward order, so one reverse sweep over the node list visits every
    node after all of its consumers.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value: Union[Tensor, np.ndarray, Sequence, float]) -> Tensor:
        """Registers a leaf (a trainable value) and returns its tracked tensor."""
        data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        return self._append(data, (), None)

    def _append(
        self,
        data: np.ndarray,
        inputs: tuple[Optional[int], ...],
        vjp: Optional[VectorJacobian],
    ) -> Tensor:
        self.nodes.append(_Node(inputs=inputs, vjp=vjp, shape=data.shape))
        return Tensor(data, tape=self, tape_id=len(self.nodes) - 1)

    def backward(self, loss: Tensor) -> "Gradients":
        if loss.tape is not self:
            raise ValueError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.tape_id: np.ones(loss.shape)}
        for index in range(loss.tape_id, -1, -1):
            grad = grads.get(index)
            node = self.nodes[index]
            if grad is None or node.vjp is None:
                continue
            needs = tuple(i is not None for i in node.inputs)
            for input_id, input_grad in zip(node.inputs, node.vjp(grad, needs)):
                if input_id is None or input_grad is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + input_grad
                else:
                    grads[input_id] = input_grad
        return Gradients(self, grads)


class Gradients:
    """Gradient map produced by Tape.backward, keyed by tracked tensor."""

    def __init__(self, tape: Tape, grads: dict[int, np.ndarray]):
        self._tape = tape
        self._grads = grads

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.tape is self._tape and tensor.tape_id in self._grads

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        if tensor not in self:
            raise KeyError(f"no gradient reached {tensor!r}")
        return self._grads[tensor.tape_id]

    def __len__(self) -> int:
        return len(self._grads)

    def __iter__(self) -> Iterator[int]:
        return iter(self._grads)

    def get(self, tensor: Tensor, zeros: bool = False) -> Optional[np.ndarray]:
        """Returns the gradient, or zeros of matching shape for an untouched leaf when asked."""
        if tensor in self:
            return self._grads[tensor.tape_id]
        return np.zeros(tensor.shape) if zeros else None


def _lift(value: Union[Tensor, np.ndarray, Sequence, float]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _record(out: np.ndarray, inputs: Sequence[Tensor], vjp: VectorJacobian) -> Tensor:
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return Tensor(out)
    if len(tapes) > 1:
        raise ValueError("operands are recorded on different tapes")
    tape = next(iter(tapes.values()))
    return tape._append(out, tuple(t.tape_id for t in inputs), vjp)


def _require_2d(name: str, t: Tensor) -> None:
    if t.ndim != 2:
        raise ShapeError(f"{name} needs a 2-D tensor, got shape {t.shape}")


def _is_row_broadcast(a: Tensor, b: Tensor) -> bool:
    return a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _require_2d("matmul", a)
    _require_2d("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        return (
            g @ b_data.T if needs[0] else None,
            a_data.T @ g if needs[1] else None,
        )

    return _record(a_data @ b_data, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    a = _lift(a)
    _require_2d("transpose", a)
    return _record(a.data.T, (a,), lambda g, needs: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _lift(a)
    original = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as error:
        raise ShapeError(f"cannot reshape {original} to {tuple(shape)}") from error
    return _record(out, (a,), lambda g, needs: (g.reshape(original),))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may also be a trailing vector added to every row of a."""
    a, b = _lift(a), _lift(b)
    broadcast = _is_row_broadcast(a, b)
    if a.shape != b.shape and not broadcast:
        raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        gb = (g.sum(axis=0) if broadcast else g) if needs[1] else None
        return g, gb

    return _record(a.data + b.data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    broadcast = _is_row_broadcast(a, b)
    if a.shape != b.shape and not broadcast:
        raise ShapeError(f"sub shape mismatch: {a.shape} - {b.shape}")

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        gb = -(g.sum(axis=0) if broadcast else g) if needs[1] else None
        return g, gb

    return _record(a.data - b.data, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g, needs: (g * c,))


def mul_elem(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul_elem shape mismatch: {a.shape} * {b.shape}")
    a_data, b_data = a.data, b.data

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        return (
            g * b_data if needs[0] else None,
            g * a_data if needs[1] else None,
        )

    return _record(a_data * b_data, (a, b), vjp)


def sum_all(a: Tensor) -> Tensor:
    a = _lift(a)
    shape = a.shape
    return _record(np.asarray(a.data.sum()), (a,), lambda g, needs: (np.full(shape, float(g)),))


def take_rows(x: Tensor, positions: Sequence[int]) -> Tensor:
    x = _lift(x)
    _require_2d("take_rows", x)
    index = np.asarray(positions, dtype=np.int64)
    shape = x.shape

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        gx = np.zeros(shape)
        np.add.at(gx, index, g)
        return (gx,)

    return _record(x.data[index], (x,), vjp)


def set_rows(x: Tensor, positions: Sequence[int], rows: Tensor) -> Tensor:
    """Returns x with the given rows replaced; positions must be distinct."""
    x, rows = _lift(x), _lift(rows)
    _require_2d("set_rows", x)
    index = np.asarray(positions, dtype=np.int64)
    if len(set(index.tolist())) != len(index):
        raise ShapeError(f"set_rows positions must be distinct, got {index.tolist()}")
    if rows.shape != (len(index), x.shape[1]):
        raise ShapeError(f"set_rows expects rows of shape {(len(index), x.shape[1])}, got {rows.shape}")
    out = x.data.copy()
    out[index] = rows.data

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        gx = None
        if needs[0]:
            gx = g.copy()
            gx[index] = 0.0
        return gx, (g[index] if needs[1] else None)

    return _record(out, (x, rows), vjp)


def columns(x: Tensor, start: int, stop: int) -> Tensor:
    x = _lift(x)
    _require_2d("columns", x)
    shape = x.shape

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        gx = np.zeros(shape)
        gx[:, start:stop] = g
        return (gx,)

    return _record(x.data[:, start:stop], (x,), vjp)


def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    parts = [_lift(p) for p in parts]
    for part in parts:
        _require_2d("concat_columns", part)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        return tuple(
            g[:, bounds[i] : bounds[i + 1]] if needs[i] else None for i in range(len(parts))
        )

    return _record(np.concatenate([p.data for p in parts], axis=1), parts, vjp)


def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """Each row divided by sqrt(mean(x^2) + eps), then multiplied by gain."""
    x, gain = _lift(x), _lift(gain)
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    if x.ndim not in (1, 2) or gain.shape != (x.shape[-1],):
        raise ShapeError(f"rms_norm expects rows of width {gain.shape}, got {x.shape}")
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    normed = x.data * inv
    gain_data = gain.data

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        gx = ggain = None
        if needs[0]:
            gn = g * gain_data
            gx = inv * (gn - normed * np.mean(gn * normed, axis=-1, keepdims=True))
        if needs[1]:
            ggain = (g * normed).reshape(-1, normed.shape[-1]).sum(axis=0)
        return gx, ggain

    return _record(normed * gain_data, (x, gain), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    x = _lift(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _record(s, (x,), vjp)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def silu(x: Tensor) -> Tensor:
    x = _lift(x)
    s = _sigmoid(x.data)
    x_data = x.data

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        return (g * (s + x_data * s * (1.0 - s)),)

    return _record(x_data * s, (x,), vjp)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    table = _lift(table)
    _require_2d("embedding_lookup", table)
    index = np.asarray(ids, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise VocabularyError(
            f"token id out of range [0, {table.shape[0]}): {index[(index < 0) | (index >= table.shape[0])][0]}"
        )
    shape = table.shape

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        gt = np.zeros(shape)
        np.add.at(gt, index, g)
        return (gt,)

    return _record(table.data[index], (table,), vjp)


def cross_entropy(logits: Tensor, targets: Sequence[int], reduction: str = "mean") -> Tensor:
    """
    Negative log-likelihood of the target ids. Rows whose target is IGNORE_INDEX are not
    supervised; reduction "mean" divides by the number of supervised rows, "sum" does not.
    """
    logits = _lift(logits)
    _require_2d("cross_entropy", logits)
    rows, vocab = logits.shape
    target = np.asarray(targets, dtype=np.int64)
    if target.shape != (rows,):
        raise ShapeError(f"cross_entropy expects {rows} targets, got {target.shape}")
    if target.size and (target.max() >= vocab or target.min() < IGNORE_INDEX):
        raise VocabularyError(f"target id out of range [0, {vocab})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    supervised = np.flatnonzero(target != IGNORE_INDEX)
    if supervised.size == 0:
        raise ShapeError("cross_entropy needs at least one supervised row")

    z = logits.data[supervised]
    m = np.max(z, axis=-1, keepdims=True)
    log_norm = m[:, 0] + np.log(np.sum(np.exp(z - m), axis=-1))
    picked = target[supervised]
    nll = log_norm - z[np.arange(len(supervised)), picked]
    divisor = float(len(supervised)) if reduction == "mean" else 1.0
    total = nll.sum() / divisor

    def vjp(g: np.ndarray, needs: tuple[bool, ...]) -> Grads:
        p = np.exp(z - log_norm[:, None])
        p[np.arange(len(supervised)), picked] -= 1.0
        gl = np.zeros((rows, vocab))
        gl[supervised] = p * (float(g) / divisor)
        return (gl,)

    return _record(np.asarray(total), (logits,), vjp)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept entries are scaled by 1/(1-p) so the expectation is unchanged."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if p == 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul_elem(x, Tensor(mask))


def fd_gradient(
    f: Callable[[np.ndarray], float],
    x: Union[Tensor, np.ndarray],
    step: float = 1e-5,
) -> np.ndarray:
    """
    Central-difference estimate (f(x+he) - f(x-he)) / 2h of the gradient of a scalar
    function, one coordinate at a time. Nothing is recorded on any tape.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    shifted = base.copy()
    for index in np.ndindex(base.shape):
        shifted[index] = base[index] + step
        f_plus = float(f(shifted))
        shifted[index] = base[index] - step
        f_minus = float(f(shifted))
        shifted[index] = base[index]
        grad[index] = (f_plus - f_minus) / (2.0 * step)
    return grad
