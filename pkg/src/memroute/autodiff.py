"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records every operation whose operands need gradients.
Parameters are plain leaf tensors that get (re)registered on whichever tape
is active when they are first used, so a fresh tape per training step is
all the bookkeeping a training loop needs::

    with Tape() as tape:
        loss = ((x @ w) - y).square().mean()
        grads = backward(loss)

Only the operations the model needs are provided. Binary elementwise ops
follow numpy broadcasting; gradients are summed back to operand shapes.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse, special

GUMBEL_EPS = 1e-12


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """An API precondition was violated (non-scalar loss, reused tape...)."""


class ParameterError(ValueError):
    """A scalar hyperparameter is outside its valid range."""


class _Node:
    __slots__ = ("parents", "backward")

    def __init__(self, parents, backward):
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of operations; node ids are indices into ``nodes``."""

    _generations = itertools.count()

    def __init__(self):
        self.nodes: list[_Node | None] = []
        self.leaves: dict[int, Tensor] = {}
        self.generation = next(Tape._generations)
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.remove(self)
        return False

    def reset(self) -> None:
        """Drop every recorded node; outstanding node ids become invalid."""
        self.nodes = []
        self.leaves = {}
        self.generation = next(Tape._generations)
        self.consumed = False

    def owns(self, t: "Tensor") -> bool:
        return t.node is not None and t.tape_generation == self.generation

    def register_leaf(self, t: "Tensor") -> int:
        node_id = len(self.nodes)
        self.nodes.append(None)
        self.leaves[node_id] = t
        t.node = node_id
        t.tape_generation = self.generation
        return node_id

    def record(self, parents: Sequence[int | None], backward: Callable) -> int:
        self.nodes.append(_Node(tuple(parents), backward))
        return len(self.nodes) - 1


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def no_tape():
    """Temporarily run operations without recording (pure numpy forward)."""
    saved = list(_TAPE_STACK)
    _TAPE_STACK.clear()
    try:
        yield
    finally:
        _TAPE_STACK.extend(saved)


class Tensor:
    """Dense float64 array that can take part in a gradient tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.node: int | None = None
        self.tape_generation = -1
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(other, self)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def square(self):
        return mul(self, self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype == np.float64:
        return _wrap(x)  # constants are never mutated by ops, no copy needed
    return Tensor(x)


def _wrap(arr: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = False
    out.node = None
    out.tape_generation = -1
    out.grad = None
    return out


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _track(*tensors: Tensor):
    """Node ids for operands on the active tape, or None if nothing needs grad."""
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in tensors):
        return None, None
    ids = []
    for t in tensors:
        if not t.requires_grad:
            ids.append(None)
        elif tape.owns(t):
            ids.append(t.node)
        else:
            ids.append(tape.register_leaf(t))
    return tape, ids


def _result(data: np.ndarray, operands: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.tape_generation = -1
    out.requires_grad = False
    tape, ids = _track(*operands)
    if tape is not None:
        out.requires_grad = True
        out.node = tape.record(ids, backward)
        out.tape_generation = tape.generation
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product of a 2-D (or 1-D) left operand with a 2-D right operand."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = g @ bd.T if need_a else None
        if not need_b:
            return ga, None
        return ga, (np.outer(ad, g) if ad.ndim == 1 else ad.T @ g)

    return _result(ad @ bd, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a 2-D tensor, got shape {a.shape}")
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape) if need_a else None,
                              _unbroadcast(g * ad, bd.shape) if need_b else None))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.data)  # overflow-safe logistic
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _result(out, (a,), lambda g: (g * (out > 0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log1p(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _result(np.log1p(x), (a,), lambda g: (g / (1.0 + x),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "exp": exp, "log1p": log1p,
          "sqrt": sqrt}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name; ``scale`` takes a float as ``b``."""
    if kind == "scale":
        return scale(a, float(b))
    if kind in _UNARY:
        if b is not None:
            raise ContractError(f"{kind} is unary")
        return _UNARY[kind](a)
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    raise ContractError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------- reductions and shape


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, index) -> Tensor:
    """Numpy-style indexing; repeated fancy indices accumulate in backward."""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), backward)


def take_rows(a, rows: np.ndarray) -> Tensor:
    """``a[rows]`` for a 2-D tensor; faster than :func:`getitem` for gathers."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    n_rows = a.shape[0]

    def backward(g):
        full = np.zeros((n_rows,) + g.shape[1:])
        if len(np.unique(rows)) == len(rows):
            full[rows] = g
        else:
            # repeated rows: accumulate with a sparse one-hot product (faster than add.at)
            pick = sparse.csr_matrix((np.ones(len(rows)), (rows, np.arange(len(rows)))),
                                     shape=(n_rows, len(rows)))
            full[...] = (pick @ g.reshape(len(rows), -1)).reshape(full.shape)
        return (full,)

    return _result(a.data[rows], (a,), backward)


def scatter_rows(a, rows: np.ndarray, n_rows: int) -> Tensor:
    """Place the rows of ``a`` at ``rows`` of a zero tensor with ``n_rows`` rows."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((n_rows,) + a.shape[1:])
    out[rows] = a.data
    return _result(out, (a,), lambda g: (g[rows],))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


# ---------------------------------------------------------------- gradient control


def stop_gradient(a) -> Tensor:
    """Forward identity, constant for the backward pass."""
    return Tensor(as_tensor(a).data.copy())


def grad_scale(a, factor: float) -> Tensor:
    """Forward identity; multiplies the incoming gradient by ``factor``."""
    a = as_tensor(a)
    return _result(a.data.copy(), (a,), lambda g: (g * factor,))


# ---------------------------------------------------------------- normalisation family


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward)


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    rows = np.arange(len(targets))
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    loss = float(np.mean(np.log(s[:, 0]) - z[rows, targets]))

    def backward(g):
        grad = probs.copy()
        grad[rows, targets] -= 1.0
        return (grad * (g / len(targets)),)

    return _result(np.asarray(loss), (logits,), backward)


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    diff = sub(pred, target)
    return reduce_mean(mul(diff, diff))


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = as_tensor(a), as_tensor(gain), as_tensor(bias)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    width = x.shape[-1]

    def backward(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        dgain = (g * xhat).reshape(-1, width).sum(axis=0)
        dbias = g.reshape(-1, width).sum(axis=0)
        return dx, dgain, dbias

    return _result(xhat * gd + bias.data, (a, gain, bias), backward)


# ---------------------------------------------------------------- gumbel-softmax


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(GUMBEL_EPS, 1.0 - GUMBEL_EPS, size=shape)
    return -np.log(-np.log(u))


def straight_through(soft: Tensor, hard_index) -> Tensor:
    """One-hot of ``hard_index`` in the forward pass, gradients of ``soft`` backward."""
    hard_index = np.asarray(hard_index)
    onehot = np.zeros(soft.shape)
    np.put_along_axis(onehot, hard_index[..., None], 1.0, axis=-1)
    return add(sub(soft, stop_gradient(soft)), onehot)


def gumbel_softmax_sample(logits, temperature: float, rng: np.random.Generator,
                          noise: np.ndarray | None = None):
    """Draw a relaxed categorical sample.

    Returns ``(soft, hard_index)`` where ``soft = softmax((logits + g) / T)`` and
    ``hard_index = argmax(soft)``; feed both to :func:`straight_through` to get a
    hard selection that back-propagates as the soft one.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    logits = as_tensor(logits)
    g = gumbel_noise(rng, logits.shape) if noise is None else noise
    soft = softmax(scale(add(logits, g), 1.0 / temperature), axis=-1)
    hard = np.argmax(soft.data, axis=-1)
    return soft, (int(hard) if hard.ndim == 0 else hard)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep from a scalar ``loss``.

    Fills ``.grad`` on every leaf registered on the tape (zeros when the leaf
    is unreachable) and returns the gradient of every visited node keyed by
    node id. A tape can be swept once; call :meth:`Tape.reset` to reuse it.
    """
    tape = active_tape()
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None or not tape.owns(loss):
        raise ContractError("loss is not recorded on the active tape")
    if tape.consumed:
        raise ContractError("tape already swept; reset it before calling backward again")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    nodes = tape.nodes
    for node_id in range(loss.node, -1, -1):
        g = grads.get(node_id)
        if g is None:
            continue
        node = nodes[node_id]
        if node is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if parent is None or pg is None:
                continue
            prev = grads.get(parent)
            grads[parent] = pg if prev is None else prev + pg
    for node_id, leaf in tape.leaves.items():
        g = grads.get(node_id)
        leaf.grad = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)
    return {k: _wrap(v) for k, v in grads.items()}


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Iterable[Tensor]) -> "AdamState":
        params = list(params)
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params])


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
               lr: float, beta1: float = 0.9, beta2: float = 0.98,
               weight_decay: float = 0.01, eps: float = 1e-8,
               lr_scales: Sequence[float] | None = None) -> AdamState:
    """One in-place AdamW update with decoupled weight decay and bias correction."""
    if not lr > 0:
        raise ParameterError(f"learning rate must be positive, got {lr}")
    if len(state.m) != len(params):
        raise ContractError("optimizer state does not match parameter list")
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if state.m[i].shape != p.data.shape:
            raise DimensionError(f"moment shape {state.m[i].shape} != param {p.data.shape}")
        step_lr = lr * (lr_scales[i] if lr_scales is not None else 1.0)
        m, v = state.m[i], state.v[i]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p.data *= 1.0 - step_lr * weight_decay
        p.data -= step_lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


@dataclass
class AdamW:
    params: list[Tensor]
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.01
    lr_scales: list[float] | None = None
    state: AdamState = field(init=False)

    def __post_init__(self):
        self.state = AdamState.zeros_like(self.params)

    def step(self, lr: float | None = None) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step(self.params, grads, self.state, self.lr if lr is None else lr,
                   self.beta1, self.beta2, self.weight_decay, lr_scales=self.lr_scales)
