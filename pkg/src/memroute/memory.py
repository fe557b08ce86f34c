"""The three memory tiers and the consolidation signal.

* working memory: a gap-gated continuous-time expert integrated with K Euler steps
* episodic memory: a bounded key/value buffer read by softmax attention
* semantic memory: a low-rank ReLU adapter trained to imitate episodic reads

Vectors are rows: a batch of tokens is an ``(N, d)`` tensor and weights are
applied on the right (``x @ W``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from ._kernels import attention_weights, choose_slot, novelty_weight
from .autodiff import ParameterError, Tensor


class NumericError(ArithmeticError):
    pass


def _init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    return ad.parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape))


# ---------------------------------------------------------------- working memory


@dataclass
class CtExpertParams:
    W1: Tensor
    W2: Tensor
    Wo: Tensor
    Wtau: Tensor
    steps: int = 3

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError(f"CT step count must be >= 1, got {self.steps}")

    @property
    def dt(self) -> float:
        return 1.0 / self.steps

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, steps: int = 3) -> "CtExpertParams":
        return cls(_init(rng, d, (d, d)), _init(rng, d, (d, d)), _init(rng, d, (d, d)),
                   _init(rng, 1, (1, d)), steps)

    def parameters(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "W2": self.W2, "Wo": self.Wo, "Wtau": self.Wtau}


def ct_forward(params: CtExpertParams, x, dtau):
    """Run the gated ODE update from h = 0.

    ``x`` is ``(d,)`` or ``(N, d)``; ``dtau`` a float or ``(N,)`` array of
    positive gaps. Returns ``(output, h_K, dyn_magnitude)`` where the output
    carries the ``+ x`` residual and ``dyn_magnitude = ||h_K - h_0||``.
    """
    x = ad.as_tensor(x)
    dtau = np.asarray(dtau, dtype=np.float64)
    if not np.all(np.isfinite(x.data)) or not np.all(np.isfinite(dtau)):
        raise NumericError("non-finite input to the CT expert")
    if np.any(dtau <= 0):
        raise ParameterError("time gaps must be positive")
    single = x.ndim == 1
    if single:
        x = ad.reshape(x, (1, -1))
    gap = np.log1p(dtau).reshape(-1, 1)
    gate = ad.sigmoid(ad.matmul(gap, params.Wtau))
    drive = ad.matmul(x, params.W2)
    h = None
    for _ in range(params.steps):
        pre = drive if h is None else ad.add(ad.matmul(h, params.W1), drive)
        step = ad.scale(ad.mul(gate, ad.tanh(pre)), params.dt)
        h = step if h is None else ad.add(h, step)
    out = ad.add(ad.matmul(h, params.Wo), x)
    dyn = np.sqrt((h.data ** 2).sum(axis=1))
    if single:
        return ad.reshape(out, (-1,)), ad.reshape(h, (-1,)), float(dyn[0])
    return out, h, dyn


# ---------------------------------------------------------------- semantic memory


@dataclass
class SemanticAdapter:
    W_down: Tensor
    W_up: Tensor

    @property
    def rank(self) -> int:
        return self.W_down.shape[1]

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, rank: int | None = None) -> "SemanticAdapter":
        rank = max(1, d // 16) if rank is None else rank
        if rank < 1:
            raise ParameterError("adapter rank must be >= 1")
        return cls(_init(rng, d, (d, rank)), _init(rng, rank, (rank, d)))

    def parameters(self) -> dict[str, Tensor]:
        return {"W_down": self.W_down, "W_up": self.W_up}


def semantic_forward(adapter: SemanticAdapter, x) -> Tensor:
    return ad.matmul(ad.relu(ad.matmul(x, adapter.W_down)), adapter.W_up)


# ---------------------------------------------------------------- consolidation signal


def consolidation_quality(r_s, r_e, sigma2: float = 1.0) -> Tensor:
    """``exp(-mse / sigma2)`` with the squared error averaged over the last axis."""
    if not sigma2 > 0:
        raise ParameterError(f"sigma2 must be positive, got {sigma2}")
    diff = ad.sub(r_s, r_e)
    return ad.exp(ad.scale(ad.reduce_mean(ad.mul(diff, diff), axis=-1), -1.0 / sigma2))


def consolidation_loss(r_s, r_e) -> Tensor:
    """Mean squared error against an episodic target that carries no gradient."""
    target = ad.stop_gradient(r_e)
    diff = ad.sub(r_s, target)
    return ad.reduce_mean(ad.mul(diff, diff))


# ---------------------------------------------------------------- episodic memory


@dataclass
class EpisodicEntry:
    k: np.ndarray
    v: np.ndarray
    tau: float
    c: int


@dataclass
class RetrievalResult:
    r_e: Tensor
    alpha: np.ndarray
    max_alpha: float
    argmax: int
    cold: bool


@dataclass
class EpisodicBuffer:
    """Bounded store of ``(key, value, timestamp, access count)`` entries.

    Storage is preallocated; ``valid`` marks occupied slots. ``cache`` holds,
    per entry, the last retrieval output it won (initially its own value); the
    router uses it as a cheap reference for the quality feature.

    The write gate adds a reference entry to the softmax: the token's own key,
    scored ``novelty_margin`` below its self-match. With a plain softmax a
    buffer holding one entry always gives that entry weight 1, so nothing
    after the first write would ever look novel; a fixed reference score
    instead stops tracking the learned score scale.
    """

    d: int
    capacity: int = 512
    novelty_threshold: float = 0.5
    novelty_margin: float = 1.0
    W_q: Tensor | None = None
    W_k: Tensor | None = None
    W_v: Tensor | None = None
    keys: np.ndarray = field(init=False)
    values: np.ndarray = field(init=False)
    cache: np.ndarray = field(init=False)
    taus: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)
    valid: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.capacity < 1:
            raise ParameterError("buffer capacity must be >= 1")
        self.clear()

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, capacity: int = 512,
             novelty_threshold: float = 0.5, novelty_margin: float = 1.0) -> "EpisodicBuffer":
        return cls(d, capacity, novelty_threshold, novelty_margin, _init(rng, d, (d, d)),
                   _init(rng, d, (d, d)), _init(rng, d, (d, d)))

    def clear(self) -> None:
        m, d = self.capacity, self.d
        self.keys = np.zeros((m, d))
        self.values = np.zeros((m, d))
        self.cache = np.zeros((m, d))
        self.taus = np.zeros(m)
        self.counts = np.zeros(m, dtype=np.int64)
        self.valid = np.zeros(m, dtype=bool)

    def __len__(self) -> int:
        return int(self.valid.sum())

    @property
    def entries(self) -> list[EpisodicEntry]:
        return [EpisodicEntry(self.keys[i].copy(), self.values[i].copy(), float(self.taus[i]),
                              int(self.counts[i])) for i in np.flatnonzero(self.valid)]

    def insert(self, k: np.ndarray, v: np.ndarray, tau: float) -> int:
        """Store an entry with count 0, evicting if full; returns the slot used."""
        slot = choose_slot(self.valid, self.counts, self.taus)
        self.keys[slot] = k
        self.values[slot] = v
        self.cache[slot] = v
        self.taus[slot] = tau
        self.counts[slot] = 0
        self.valid[slot] = True
        return slot


def episodic_retrieve(buffer: EpisodicBuffer, x_t) -> RetrievalResult:
    """Attention read ``sum_i alpha_i v_i`` with ``alpha = softmax(q.k_i / sqrt(d))``.

    The query goes through the tape (so ``W_q`` and ``x_t`` receive
    gradients); stored keys and values are constants. Bumps the access count
    of the most-attended entry. An empty buffer returns a zero read flagged
    ``cold``.
    """
    x_t = ad.as_tensor(x_t)
    if len(buffer) == 0:
        return RetrievalResult(Tensor(np.zeros(buffer.d)), np.zeros(0), 0.0, -1, True)
    q = ad.matmul(x_t, buffer.W_q)
    slots = np.flatnonzero(buffer.valid)
    keys, values = buffer.keys[slots], buffer.values[slots]
    scores = ad.scale(ad.matmul(q, keys.T), 1.0 / math.sqrt(buffer.d))
    alpha = ad.softmax(scores)
    r_e = ad.matmul(alpha, values)
    best = int(np.argmax(alpha.data))
    buffer.counts[slots[best]] += 1
    buffer.cache[slots[best]] = r_e.data
    return RetrievalResult(r_e, alpha.data.copy(), float(alpha.data[best]), int(slots[best]),
                           False)


def probe(buffer: EpisodicBuffer, query: np.ndarray) -> tuple[np.ndarray, float, int]:
    """Attention weights for a raw query vector without touching counts or the tape."""
    weights = np.zeros(buffer.capacity)
    top, arg, _ = attention_weights(buffer.keys, buffer.valid,
                                    np.asarray(query, dtype=np.float64),
                                    1.0 / math.sqrt(buffer.d), weights)
    return weights, top, arg


def novelty_alpha(buffer: EpisodicBuffer, x_t) -> float:
    """Largest stored-entry weight with the self reference included (0 when empty)."""
    x = ad.as_tensor(x_t).data
    q, k = x @ buffer.W_q.data, x @ buffer.W_k.data
    scale = 1.0 / math.sqrt(buffer.d)
    weights = np.zeros(buffer.capacity)
    top, _, lse = attention_weights(buffer.keys, buffer.valid, q, scale, weights)
    return float(novelty_weight(top, lse, q @ k * scale - buffer.novelty_margin))


def episodic_write(buffer: EpisodicBuffer, x_t, tau: float, max_alpha: float) -> bool:
    """Store ``(W_k x, W_v x, tau, 0)`` when ``1 - max_alpha`` exceeds the threshold.

    ``max_alpha`` should come from :func:`novelty_alpha`.
    """
    if 1.0 - max_alpha <= buffer.novelty_threshold:
        return False
    x = ad.as_tensor(x_t).data
    buffer.insert(x @ buffer.W_k.data, x @ buffer.W_v.data, tau)
    return True
