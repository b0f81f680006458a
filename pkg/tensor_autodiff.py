"""
Dense float64 tensors with tape-based reverse-mode differentiation.

A Tape records primitive applications in execution order; backward walks the
records once in reverse. Tensors created without a tape (constants) only
carry values, so the same network code runs in inference mode.

Primitives: matmul, add, sub, mul, scale, masked softmax, layer norm, relu,
exp, log, concat, gather (rows of the first axis), reduce sum/mean,
reshape, transpose/permute.
"""
import itertools
import logging
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import FullyMaskedRow, NonFiniteValue, OutputNotScalar, ShapeMismatch

logger = logging.getLogger(__name__)

_node_ids = itertools.count()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class Tensor:
    __slots__ = ("values", "node_id", "tape", "name")
    # ndarray <op> Tensor dispatches to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, values, tape: Optional["Tape"] = None, name: Optional[str] = None):
        arr = np.asarray(values, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteValue(f"non-finite entry in tensor {name or ''} of shape {arr.shape}")
        self.values = arr
        self.node_id = next(_node_ids)
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        if self.values.size != 1:
            raise OutputNotScalar(f"tensor of shape {self.shape} is not scalar")
        return float(self.values.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node_id}, taped={self.tape is not None})"


class Tape:
    """Ordered record of primitive applications; single owner."""

    def __init__(self):
        self._records: List[Tuple[int, Tuple[Optional[int], ...], Callable]] = []
        self._watched: Dict[str, Tensor] = {}

    def watch(self, values, name: Optional[str] = None) -> Tensor:
        """Create a leaf tensor whose gradient backward() will report."""
        t = Tensor(values, tape=self, name=name)
        self._watched[name if name is not None else f"_leaf{t.node_id}"] = t
        return t

    def _record(self, output: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        self._records.append((output.node_id, ids, vjp))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, output: Tensor) -> Dict[int, np.ndarray]:
        """Gradients of a scalar output with respect to every watched leaf, keyed by node id."""
        if output.values.size != 1:
            raise OutputNotScalar(f"backward needs a scalar output, got shape {output.shape}")
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        grads: Dict[int, np.ndarray] = {output.node_id: np.ones_like(output.values)}
        for out_id, in_ids, vjp in reversed(self._records):
            g = grads.get(out_id)
            if g is None:
                continue
            for in_id, g_in in zip(in_ids, vjp(g)):
                if in_id is None or g_in is None:
                    continue
                if in_id in grads:
                    grads[in_id] = grads[in_id] + g_in
                else:
                    grads[in_id] = g_in
        return {t.node_id: grads.get(t.node_id, np.zeros_like(t.values)) for t in self._watched.values()}

    def gradients(self, output: Tensor) -> Dict[str, np.ndarray]:
        """Like backward, keyed by the names given to watch()."""
        by_id = self.backward(output)
        return {name: by_id[t.node_id] for name, t in self._watched.items()}


def backward(tape: Tape, output: Tensor) -> Dict[int, np.ndarray]:
    return tape.backward(output)


def constant(values) -> Tensor:
    return values if isinstance(values, Tensor) else Tensor(values)


def _common_tape(inputs: Iterable[Tensor]) -> Optional[Tape]:
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if len(tapes) > 1:
        raise ValueError("tensors from different tapes cannot be combined")
    return next(iter(tapes.values()), None)


def _apply(values: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _common_tape(inputs)
    out = Tensor(values, tape=tape)
    if tape is not None:
        tape._record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# elementwise

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        values = a.values + b.values
    except ValueError as e:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from e
    return _apply(values, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        values = a.values - b.values
    except ValueError as e:
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}") from e
    return _apply(values, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = constant(a), constant(b)
    try:
        values = a.values * b.values
    except ValueError as e:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from e
    return _apply(values, (a, b),
                  lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)))


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = constant(a)
    return _apply(a.values * factor, (a,), lambda g: (g * factor,))


def relu(a: ArrayLike) -> Tensor:
    a = constant(a)
    gate = a.values > 0
    return _apply(np.where(gate, a.values, 0.0), (a,), lambda g: (g * gate,))


def exp(a: ArrayLike) -> Tensor:
    a = constant(a)
    out = np.exp(a.values)
    return _apply(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = constant(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.values)
    return _apply(out, (a,), lambda g: (g / a.values,))


# linear algebra and shape

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    try:
        values = np.matmul(a.values, b.values)
    except ValueError as e:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}") from e

    def vjp(g):
        return (_unbroadcast(np.matmul(g, _swap_last(b.values)), a.shape),
                _unbroadcast(np.matmul(_swap_last(a.values), g), b.shape))
    return _apply(values, (a, b), vjp)


def transpose(a: ArrayLike) -> Tensor:
    """Swap the last two axes."""
    a = constant(a)
    return _apply(_swap_last(a.values), (a,), lambda g: (_swap_last(g),))


def permute(a: ArrayLike, axes: Sequence[int]) -> Tensor:
    a = constant(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _apply(np.transpose(a.values, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = constant(a)
    try:
        values = a.values.reshape(shape)
    except ValueError as e:
        raise ShapeMismatch(f"reshape: {a.shape} -> {tuple(shape)}") from e
    return _apply(values, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [constant(t) for t in tensors]
    try:
        values = np.concatenate([p.values for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeMismatch(f"concat: {[p.shape for p in parts]} on axis {axis}") from e
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return _apply(values, parts, lambda g: tuple(np.split(g, splits, axis=axis)))


def gather(a: ArrayLike, index) -> Tensor:
    """Rows of the first axis: a[index]."""
    a = constant(a)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0]):
        raise ShapeMismatch(f"gather: index out of range for first axis of size {a.shape[0]}")

    def vjp(g):
        out = np.zeros_like(a.values)
        np.add.at(out, index, g)
        return (out,)
    return _apply(a.values[index], (a,), vjp)


def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    values = a.values.sum(axis=axis, keepdims=keepdims)
    return _apply(values, (a,), lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)),))


def reduce_mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    values = a.values.mean(axis=axis, keepdims=keepdims)
    count = a.values.size / max(values.size, 1)
    return _apply(values, (a,), lambda g: (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,))


# normalization and attention

def masked_softmax(a: ArrayLike, mask) -> Tensor:
    """Softmax over the last axis restricted to mask; masked weights are exactly 0."""
    a = constant(a)
    try:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    except ValueError as e:
        raise ShapeMismatch(f"mask shape {np.shape(mask)} does not fit scores {a.shape}") from e
    if a.values.size and not m.any(axis=-1).all():
        raise FullyMaskedRow("every softmax row needs at least one unmasked entry")
    z = np.where(m, a.values, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(z), 0.0)
    w = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (w * (g - (g * w).sum(axis=-1, keepdims=True)),)
    return _apply(w, (a,), vjp)


def softmax(a: ArrayLike) -> Tensor:
    a = constant(a)
    return masked_softmax(a, np.ones(a.shape, dtype=bool))


def layer_norm(a: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then apply gain and bias."""
    a, gain, bias = constant(a), constant(gain), constant(bias)
    if gain.shape[-1:] != a.shape[-1:] or bias.shape[-1:] != a.shape[-1:]:
        raise ShapeMismatch(f"layer_norm: input {a.shape}, gain {gain.shape}, bias {bias.shape}")
    centered = a.values - a.values.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std
    values = x_hat * gain.values + bias.values

    def vjp(g):
        g_hat = g * gain.values
        g_x = inv_std * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                         - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True))
        return g_x, _unbroadcast(g * x_hat, gain.shape), _unbroadcast(g, bias.shape)
    return _apply(values, (a, gain, bias), vjp)


def masked_attention(q: ArrayLike, k: ArrayLike, v: ArrayLike, mask, return_weights: bool = False):
    """
    Scaled dot-product attention with w_ij = A_ij exp(u_ij) / sum_t A_it exp(u_it),
    u_ij = q_i . k_j / sqrt(d). Leading batch axes broadcast.
    """
    q, k, v = constant(q), constant(k), constant(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch(f"attention: Q {q.shape}, K {k.shape}, V {v.shape}")
    scores = scale(matmul(q, transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    weights = masked_softmax(scores, mask)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


# finite-difference checks

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central FD| / max(1, |analytic|, |FD|)."""
    x = np.array(x, dtype=np.float64)
    tape = Tape()
    out = f(tape.watch(x, "x"))
    analytic = tape.gradients(out)["x"]
    numeric = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        plus, minus = x.copy(), x.copy()
        plus[idx] += eps
        minus[idx] -= eps
        numeric[idx] = (f(constant(plus)).item() - f(constant(minus)).item()) / (2 * eps)
    return _relative_error(analytic, numeric)


def grad_check_parameters(loss_fn: Callable[[Dict[str, Tensor]], Tensor],
                          params: Mapping[str, np.ndarray],
                          eps: float = 1e-5,
                          coords_per_array: Optional[int] = None,
                          rng: Optional[np.random.Generator] = None,
                          kink_tol: Optional[float] = None) -> Dict[str, float]:
    """
    grad_check over named arrays; optionally a random subset of coordinates per array.

    With kink_tol set, a coordinate whose forward and backward differences disagree
    by more than kink_tol * max(1, |central|) straddles a ReLU kink and is left out.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    base = {name: np.array(arr, dtype=np.float64) for name, arr in params.items()}
    tape = Tape()
    out = loss_fn({name: tape.watch(arr, name) for name, arr in base.items()})
    analytic = tape.gradients(out)
    at_base = out.item()

    def evaluate(name, idx, delta):
        arrays = dict(base)
        shifted = base[name].copy()
        shifted[idx] += delta
        arrays[name] = shifted
        return loss_fn({n: constant(a) for n, a in arrays.items()}).item()

    errors = {}
    for name, arr in base.items():
        coords = list(np.ndindex(arr.shape))
        if coords_per_array is not None and len(coords) > coords_per_array:
            picks = rng.choice(len(coords), size=coords_per_array, replace=False)
            coords = [coords[i] for i in sorted(picks)]
        a, n = [], []
        for idx in coords:
            plus, minus = evaluate(name, idx, eps), evaluate(name, idx, -eps)
            central = (plus - minus) / (2 * eps)
            if kink_tol is not None and abs(plus - 2 * at_base + minus) / eps > kink_tol * max(1.0, abs(central)):
                logger.debug(f"grad check skips {name}{idx}: nondifferentiable within eps")
                continue
            a.append(analytic[name][idx])
            n.append(central)
        errors[name] = _relative_error(np.array(a), np.array(n)) if a else 0.0
    return errors


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())
