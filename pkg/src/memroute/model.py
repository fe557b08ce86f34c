"""Router, layer assembly and the full stacked model.

A forward pass over a batch runs in two phases per layer. The compiled
:func:`memory_pass` walks the tokens in order, probing and mutating the
episodic buffers and taking the routing decisions. The differentiable part
(CT expert, adapter, router probabilities and the retrievals that were actually
executed) is then recomputed on the tape in vectorised form, with visibility
masks reproducing what each token could see in the buffer at its time step.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from ._kernels import CT_ONLY, EPISODIC, EXECUTED, SEMANTIC, SHADOW, memory_pass
from .autodiff import ParameterError, Tensor
from .memory import (CtExpertParams, EpisodicBuffer, NumericError, SemanticAdapter,
                     consolidation_loss, ct_forward, semantic_forward)
from .tasks import KEY, QUERY, SrcdSequence, stable_hash

ABLATIONS = ("no-consolidation-loss", "no-q-feature", "no-semantic-path", "ct-only",
             "full-attention", "fast-consolidation")
GROUPS = ("embed", "ct", "episodic", "semantic", "router", "ffn", "norm", "head")
MODES = ("train", "eval", "relaxed")
ACTION_NAMES = ("ct", "episodic", "semantic")
MASKED = -1e9


@dataclass(frozen=True)
class LossWeights:
    lambda_e: float = 0.1
    lambda_s: float = 0.05
    gamma: float = 0.5

    def __post_init__(self):
        for name in ("lambda_e", "lambda_s", "gamma"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture, optimisation and ablation settings (desk-scale defaults)."""

    d: int = 64
    layers: int = 2
    ct_steps: int = 3
    capacity: int = 128
    rank: int = 0  # 0 means d // 16
    ffn_mult: int = 2
    router_hidden: int = 16
    # initial logit offset for episodic retrieval; the value readout has to be
    # learned through the episodic path before the router can judge it
    router_episodic_bias: float = 2.0
    lr: float = 3e-3
    lr_floor: float = 0.1
    consolidation_lr_scale: float = 0.1
    batch: int = 8
    steps: int = 4000
    lambda_e: float = 0.1
    lambda_s: float = 0.05
    gamma: float = 0.5
    temp_start: float = 1.0
    temp_end: float = 0.1
    anneal_steps: int = 3000
    novelty_threshold: float = 0.5
    novelty_margin: float = 1.0
    sigma2: float = 1.0
    shadow_rate: float = 0.1
    buffer_reset_steps: int = 1
    log_every: int = 10
    weight_decay: float = 0.01
    ablations: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        flags = tuple(sorted(set(self.ablations)))
        unknown = [f for f in flags if f not in ABLATIONS]
        if unknown:
            raise ParameterError(f"unknown ablation flag(s): {', '.join(unknown)}")
        if "no-semantic-path" in flags and "no-consolidation-loss" not in flags:
            flags = tuple(sorted(flags + ("no-consolidation-loss",)))
        if "ct-only" in flags and "full-attention" in flags:
            raise ParameterError("ct-only and full-attention are mutually exclusive")
        object.__setattr__(self, "ablations", flags)
        if self.d < 1 or self.layers < 1 or self.batch < 1 or self.steps < 0:
            raise ParameterError("d, layers and batch must be positive and steps >= 0")
        if self.effective_rank < 1:
            raise ParameterError("adapter rank must be >= 1")
        if not 0 < self.temp_end <= self.temp_start:
            raise ParameterError("temperatures must satisfy 0 < end <= start")
        if self.anneal_steps < 1 or self.log_every < 1 or self.buffer_reset_steps < 1:
            raise ParameterError("anneal_steps, log_every and buffer_reset_steps must be >= 1")
        if not self.lr > 0 or not self.sigma2 > 0:
            raise ParameterError("lr and sigma2 must be positive")
        LossWeights(self.lambda_e, self.lambda_s, self.gamma)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        base = dict(d=512, layers=8, capacity=512, batch=32, steps=10000)
        base.update(overrides)
        return cls(**base)

    @property
    def effective_rank(self) -> int:
        return self.rank if self.rank > 0 else self.d // 16

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_e, self.lambda_s, self.gamma)

    def has(self, flag: str) -> bool:
        return flag in self.ablations

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["ablations"] = list(self.ablations)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ParameterError(f"unknown model config key(s): {', '.join(sorted(extra))}")
        d = dict(d)
        if "ablations" in d:
            d["ablations"] = tuple(d["ablations"])
        return cls(**d)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


# ---------------------------------------------------------------- router


@dataclass
class RouterParams:
    R1: Tensor
    b1: Tensor
    R2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int = 16,
             episodic_bias: float = 0.0) -> "RouterParams":
        return cls(ad.parameter(rng.normal(0, 0.5, (4, hidden))), ad.parameter(np.zeros(hidden)),
                   ad.parameter(rng.normal(0, 1 / math.sqrt(hidden), (hidden, 3))),
                   ad.parameter(np.array([0.0, episodic_bias, 0.0])))

    def parameters(self) -> dict[str, Tensor]:
        return {"R1": self.R1, "b1": self.b1, "R2": self.R2, "b2": self.b2}


@dataclass
class RouterDecision:
    pi: np.ndarray
    action: np.ndarray
    q: np.ndarray | None = None


def temperature_at(step: int, start: float = 1.0, end: float = 0.1, anneal: int = 3000) -> float:
    return start + (end - start) * min(step / anneal, 1.0)


def cosine_lr(step: int, total: int, base: float, floor: float = 0.1) -> float:
    if total <= 1:
        return base
    frac = min(step / (total - 1), 1.0)
    return base * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def router_logits(router: RouterParams, z, allow_semantic: bool = True) -> Tensor:
    hidden = ad.relu(ad.add(ad.matmul(z, router.R1), router.b1))
    logits = ad.add(ad.matmul(hidden, router.R2), router.b2)
    if not allow_semantic:
        logits = ad.add(logits, np.array([0.0, 0.0, MASKED]))
    return logits


def route(router: RouterParams, z, temperature: float, rng: np.random.Generator | None,
          mode: str = "eval", allow_semantic: bool = True, q=None) -> RouterDecision:
    """Routing for features ``z`` (``(4,)`` or ``(N, 4)``).

    Train mode samples a hard action with Gumbel noise at ``temperature``;
    eval mode takes the argmax with no noise. Action indices are 0-based
    (0 = CT only, 1 = episodic, 2 = semantic).
    """
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    with ad.no_tape():
        logits = router_logits(router, np.asarray(z, dtype=np.float64), allow_semantic)
        pi = ad.softmax(logits).data
        if mode == "train":
            _, action = ad.gumbel_softmax_sample(logits, temperature, rng)
        else:
            action = np.argmax(logits.data, axis=-1)
    return RouterDecision(pi, np.asarray(action), None if q is None else np.asarray(q))


def total_loss(task, pi, q, l_cons, weights: LossWeights, normalize: bool = True) -> Tensor:
    """``task + lambda_E sum(pi_2) - lambda_S sum(pi_3 q) + gamma L_cons``.

    ``pi`` is ``(T, 3)`` soft routing probabilities; ``q`` is ``(T,)`` and is
    treated as a constant. With ``normalize`` the two sums become per-token
    means, which keeps the weights independent of batch size and length.
    """
    pi = ad.as_tensor(pi)
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=np.float64)
    if pi.ndim != 2 or pi.shape[1] != 3 or q.shape != (pi.shape[0],):
        raise ad.DimensionError(f"pi must be (T, 3) and q (T,), got {pi.shape}, {q.shape}")
    norm = 1.0 / pi.shape[0] if normalize and pi.shape[0] else 1.0
    out = ad.as_tensor(task)
    if weights.lambda_e:
        out = ad.add(out, ad.scale(ad.reduce_sum(ad.getitem(pi, (slice(None), 1))),
                                   weights.lambda_e * norm))
    if weights.lambda_s:
        semq = ad.reduce_sum(ad.mul(ad.getitem(pi, (slice(None), 2)), q))
        out = ad.sub(out, ad.scale(semq, weights.lambda_s * norm))
    if weights.gamma and l_cons is not None:
        out = ad.add(out, ad.scale(l_cons, weights.gamma))
    return out


# ---------------------------------------------------------------- buffers


@dataclass
class BufferBank:
    """Episodic buffers of one layer, one independent lane per batch row."""

    keys: np.ndarray
    values: np.ndarray
    cache: np.ndarray
    counts: np.ndarray
    taus: np.ndarray
    valid: np.ndarray
    clock: np.ndarray
    src: np.ndarray = field(repr=False)

    @classmethod
    def empty(cls, lanes: int, capacity: int, d: int) -> "BufferBank":
        return cls(np.zeros((lanes, capacity, d)), np.zeros((lanes, capacity, d)),
                   np.zeros((lanes, capacity, d)), np.zeros((lanes, capacity), dtype=np.int64),
                   np.zeros((lanes, capacity)), np.zeros((lanes, capacity), dtype=bool),
                   np.zeros(lanes), np.full((lanes, capacity), -1, dtype=np.int64))

    @property
    def lanes(self) -> int:
        return self.keys.shape[0]

    def reset(self) -> None:
        for a in (self.keys, self.values, self.cache, self.counts, self.taus, self.valid,
                  self.clock):
            a.fill(0)
        self.src.fill(-1)

    def copy(self) -> "BufferBank":
        return BufferBank(*(a.copy() for a in dataclasses.astuple(self)))

    def sizes(self) -> np.ndarray:
        return self.valid.sum(axis=1)

    def lane_buffer(self, lane: int, projections=(None, None, None),
                    novelty_threshold: float = 0.5, novelty_margin: float = 1.0) -> EpisodicBuffer:
        """Copy of one lane as a standalone :class:`EpisodicBuffer`."""
        buf = EpisodicBuffer(self.keys.shape[2], self.keys.shape[1], novelty_threshold,
                             novelty_margin, *projections)
        buf.keys[:] = self.keys[lane]
        buf.values[:] = self.values[lane]
        buf.cache[:] = self.cache[lane]
        buf.counts[:] = self.counts[lane]
        buf.taus[:] = self.taus[lane]
        buf.valid[:] = self.valid[lane]
        return buf

    def arrays(self) -> dict[str, np.ndarray]:
        return {"keys": self.keys, "values": self.values, "cache": self.cache,
                "counts": self.counts, "taus": self.taus, "valid": self.valid,
                "clock": self.clock}


# ---------------------------------------------------------------- batches


@dataclass
class Batch:
    v: np.ndarray
    dtau: np.ndarray
    symbol: np.ndarray
    bound: np.ndarray
    role: np.ndarray
    target: np.ndarray
    pattern: np.ndarray
    repetition: np.ndarray

    @classmethod
    def from_sequences(cls, seqs: list[SrcdSequence]) -> "Batch":
        if not seqs:
            raise ValueError("empty batch")
        if len({len(s) for s in seqs}) != 1:
            raise ad.DimensionError("sequences in a batch must share a length")
        st = lambda name: np.stack([getattr(s, name) for s in seqs])
        return cls(st("v").astype(np.float64), st("dtau").astype(np.float64), st("symbol"),
                   st("bound_value"), st("role"), st("target"), st("pattern_id"),
                   st("repetition"))

    @property
    def shape(self) -> tuple[int, int]:
        return self.v.shape


# ---------------------------------------------------------------- layer


@dataclass
class Layer:
    ct: CtExpertParams
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    semantic: SemanticAdapter
    router: RouterParams
    F1: Tensor
    c1: Tensor
    F2: Tensor
    c2: Tensor
    g1: Tensor
    n1: Tensor
    g2: Tensor
    n2: Tensor

    @classmethod
    def init(cls, d: int, rank: int, rng: np.random.Generator, ct_steps: int = 3,
             ffn_mult: int = 2, router_hidden: int = 16,
             episodic_bias: float = 0.0) -> "Layer":
        p = lambda fan_in, shape: ad.parameter(rng.normal(0, 1 / math.sqrt(fan_in), shape))
        h = ffn_mult * d
        W_q = p(d, (d, d))
        # keys start as a copy of the query map so a token matches its own symbol from step 0
        W_k = ad.parameter(W_q.data.copy())
        return cls(CtExpertParams.init(d, rng, ct_steps), W_q, W_k,
                   p(d, (d, d)), SemanticAdapter.init(d, rng, rank),
                   RouterParams.init(rng, router_hidden, episodic_bias), p(d, (d, h)),
                   ad.parameter(np.zeros(h)), p(h, (h, d)), ad.parameter(np.zeros(d)),
                   ad.parameter(np.ones(d)), ad.parameter(np.zeros(d)),
                   ad.parameter(np.ones(d)), ad.parameter(np.zeros(d)))

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"ct.{k}": v for k, v in self.ct.parameters().items()}
        out.update({"episodic.W_q": self.W_q, "episodic.W_k": self.W_k, "episodic.W_v": self.W_v})
        out.update({f"semantic.{k}": v for k, v in self.semantic.parameters().items()})
        out.update({f"router.{k}": v for k, v in self.router.parameters().items()})
        out.update({"ffn.F1": self.F1, "ffn.c1": self.c1, "ffn.F2": self.F2, "ffn.c2": self.c2,
                    "norm.g1": self.g1, "norm.n1": self.n1, "norm.g2": self.g2,
                    "norm.n2": self.n2})
        return out


@dataclass
class LayerStats:
    actions: np.ndarray
    pi: np.ndarray
    q: np.ndarray
    executed: np.ndarray
    written: np.ndarray
    cold: np.ndarray
    z: np.ndarray


@dataclass
class LayerOutput:
    y: Tensor
    pi: Tensor
    q: np.ndarray
    r_e: Tensor | None
    r_s: Tensor
    l_cons: Tensor | None
    stats: LayerStats
    x: Tensor | None = None  # layer input
    r_e_rows: np.ndarray | None = None  # flat token indices of the rows of ``r_e``


def _lane_retrieval(q_rows: Tensor, t_rows: np.ndarray, keys0: np.ndarray, values0: np.ndarray,
                    valid0: np.ndarray, evict_old: np.ndarray, k_new: Tensor | None,
                    v_new: Tensor | None, s_new: np.ndarray, evict_new: np.ndarray,
                    scale: float) -> Tensor:
    """Masked attention of queries at times ``t_rows`` over one lane's buffer history."""
    vis_old = valid0[None, :] & (t_rows[:, None] <= evict_old[None, :])
    if k_new is None:
        keys, values, visible = keys0, values0, vis_old
    else:
        vis_new = (s_new[None, :] < t_rows[:, None]) & (t_rows[:, None] <= evict_new[None, :])
        keys = ad.concat([Tensor(keys0), k_new], axis=0)
        values = ad.concat([Tensor(values0), v_new], axis=0)
        visible = np.concatenate([vis_old, vis_new], axis=1)
    mask = np.where(visible, 0.0, MASKED)
    scores = ad.add(ad.scale(ad.matmul(q_rows, ad.transpose(keys)), scale), mask)
    return ad.matmul(ad.softmax(scores), values)


def layer_forward(layer: Layer, bank: BufferBank, x: Tensor, dtau: np.ndarray, tau: np.ndarray,
                  mode: str, config: ModelConfig, temperature: float = 1.0,
                  rng: np.random.Generator | None = None) -> LayerOutput:
    """One layer over a ``(B, n)`` block of tokens flattened into ``x`` of shape ``(B*n, d)``.

    ``mode`` is ``train`` (Gumbel straight-through, shadow retrievals),
    ``eval`` (argmax routing, deterministic) or ``relaxed`` (every token
    retrieves and the output mixes the three paths with the soft router
    probabilities; used for gradient checking the router).
    """
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}")
    if not np.all(np.isfinite(x.data)):
        raise NumericError("non-finite layer input")
    B, n = dtau.shape
    d = x.shape[1]
    if bank.lanes < B:
        raise ad.DimensionError(f"buffer bank has {bank.lanes} lanes, batch needs {B}")
    N = B * n
    flags = config.ablations
    ct_only = "ct-only" in flags
    full_attention = "full-attention" in flags
    allow_semantic = "no-semantic-path" not in flags and not ct_only
    forced = CT_ONLY if ct_only else (EPISODIC if full_attention else -1)
    train = mode == "train"

    ct_out, _, dyn = ct_forward(layer.ct, x, dtau.reshape(-1))
    r_s = semantic_forward(layer.semantic, x)
    xd = x.data
    Q = (xd @ layer.W_q.data).reshape(B, n, d)
    K = (xd @ layer.W_k.data).reshape(B, n, d)
    V = (xd @ layer.W_v.data).reshape(B, n, d)
    RS = r_s.data.reshape(B, n, d)
    z1 = np.log1p(dtau)
    z2 = dyn.reshape(B, n)
    if rng is None:
        rng = np.random.default_rng(0)
    gumbel = ad.gumbel_noise(rng, (B, n, 3)) if train and forced < 0 else np.zeros((B, n, 3))
    shadow_u = rng.random((B, n)) if train else np.ones((B, n))

    keys0 = bank.keys[:B].copy()
    values0 = bank.values[:B].copy()
    actions = np.zeros((B, n), dtype=np.int64)
    z3 = np.zeros((B, n))
    z4 = np.zeros((B, n))
    probs = np.zeros((B, n, 3))
    q = np.zeros((B, n))
    qref = np.zeros((B, n, d))
    rE = np.zeros((B, n, d))
    executed = np.zeros((B, n), dtype=np.int64)
    cold = np.zeros((B, n), dtype=bool)
    written = np.zeros((B, n), dtype=bool)
    evict_new = np.zeros((B, n), dtype=np.int64)
    evict_old = np.zeros((B, bank.keys.shape[1]), dtype=np.int64)
    valid0 = np.zeros((B, bank.keys.shape[1]), dtype=bool)
    r = layer.router
    memory_pass(Q, K, V, RS, z1, z2, tau, gumbel, shadow_u,
                r.R1.data, r.b1.data, r.R2.data, r.b2.data,
                bank.keys[:B], bank.values[:B], bank.cache[:B], bank.counts[:B], bank.taus[:B],
                bank.valid[:B], bank.src[:B],
                forced, train, allow_semantic, "no-q-feature" not in flags,
                train and config.shadow_rate > 0 and not full_attention, not ct_only,
                mode == "relaxed", config.shadow_rate, config.sigma2, config.novelty_threshold,
                config.novelty_margin,
                actions, z3, z4, probs, q, qref, rE, executed, cold, written,
                evict_new, evict_old, valid0)

    # routing weights on the tape
    z = np.stack([z1, z2, z3, z4], axis=-1).reshape(N, 4)
    flat_actions = actions.reshape(N)
    onehot = np.zeros((N, 3))
    onehot[np.arange(N), flat_actions] = 1.0
    if forced >= 0:
        pi = Tensor(onehot)
        w = Tensor(onehot)
    else:
        logits = router_logits(r, z, allow_semantic)
        pi = ad.softmax(logits)
        if train:
            soft = ad.softmax(ad.scale(ad.add(logits, gumbel.reshape(N, 3)), 1.0 / temperature))
            w = ad.straight_through(soft, flat_actions)
        elif mode == "relaxed":
            w = pi
        else:
            w = Tensor(onehot)

    # executed retrievals recomputed on the tape
    exec_flat = executed.reshape(N)
    live = (exec_flat == EXECUTED) & ~cold.reshape(N)
    r_e = None
    mem_e = None
    live_rows = np.zeros(0, dtype=np.int64)
    if live.any():
        scale = 1.0 / math.sqrt(d)
        w_rows = np.flatnonzero(written.reshape(N))
        k_new_all = v_new_all = None
        if len(w_rows):
            xw = ad.take_rows(x, w_rows)
            k_new_all = ad.matmul(xw, layer.W_k)
            v_new_all = ad.matmul(xw, layer.W_v)
        pieces, rows = [], []
        for b in range(B):
            t_rows = np.flatnonzero(live[b * n:(b + 1) * n])
            if not len(t_rows):
                continue
            q_rows = ad.matmul(ad.take_rows(x, b * n + t_rows), layer.W_q)
            sel = np.flatnonzero((w_rows >= b * n) & (w_rows < (b + 1) * n))
            s_new = w_rows[sel] - b * n
            k_new = ad.take_rows(k_new_all, sel) if len(sel) else None
            v_new = ad.take_rows(v_new_all, sel) if len(sel) else None
            pieces.append(_lane_retrieval(q_rows, t_rows, keys0[b], values0[b], valid0[b],
                                          evict_old[b], k_new, v_new, s_new,
                                          evict_new[b, s_new], scale))
            rows.append(b * n + t_rows)
        rows = np.concatenate(rows)
        r_e = ad.concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
        mem_e = ad.scatter_rows(r_e, rows, N)
        live_rows = rows
    shadow = exec_flat == SHADOW
    if shadow.any():
        const = np.zeros((N, d))
        const[shadow] = rE.reshape(N, d)[shadow]
        mem_e = Tensor(const) if mem_e is None else ad.add(mem_e, const)

    u = ct_out
    if mem_e is not None:
        u = ad.add(u, ad.mul(ad.getitem(w, (slice(None), slice(1, 2))), mem_e))
    if allow_semantic:
        u = ad.add(u, ad.mul(ad.getitem(w, (slice(None), slice(2, 3))), r_s))
    a = ad.layer_norm(u, layer.g1, layer.n1)
    hidden = ad.relu(ad.add(ad.matmul(a, layer.F1), layer.c1))
    f = ad.add(ad.matmul(hidden, layer.F2), layer.c2)
    y = ad.layer_norm(ad.add(a, f), layer.g2, layer.n2)

    l_cons = None
    if r_e is not None and "no-consolidation-loss" not in flags and allow_semantic:
        # consolidation samples: tokens whose hard action was episodic
        pick = np.flatnonzero(flat_actions[live_rows] == EPISODIC)
        if len(pick):
            # the distillation target and the adapter input are both constants here,
            # so this term only ever trains the adapter
            x_cons = ad.stop_gradient(ad.take_rows(x, live_rows[pick]))
            l_cons = consolidation_loss(semantic_forward(layer.semantic, x_cons),
                                        ad.take_rows(r_e, pick))

    # tau bookkeeping for the next block of this lane
    bank.clock[:B] = tau[:, -1]
    stats = LayerStats(actions, probs, q, executed, written, cold, z.reshape(B, n, 4))
    return LayerOutput(y, pi, q.reshape(N), r_e, r_s, l_cons, stats, x, live_rows)


# ---------------------------------------------------------------- model


@dataclass
class ForwardResult:
    task_loss: Tensor
    ce: Tensor | None
    dyn_mse: Tensor
    loss: Tensor
    l_cons: Tensor | None
    value_logits: np.ndarray
    dyn_pred: np.ndarray
    layers: list[LayerOutput]

    @property
    def attention_ops(self) -> int:
        return int(sum((lo.stats.executed == EXECUTED).sum() for lo in self.layers))

    @property
    def shadow_ops(self) -> int:
        return int(sum((lo.stats.executed == SHADOW).sum() for lo in self.layers))

    @property
    def routed_episodic(self) -> int:
        return int(sum((lo.stats.actions == EPISODIC).sum() for lo in self.layers))

    @property
    def token_slots(self) -> int:
        return int(sum(lo.stats.actions.size for lo in self.layers))

    def attention_fraction(self) -> float:
        return self.attention_ops / self.token_slots

    def routing_histogram(self) -> np.ndarray:
        counts = np.zeros(3)
        for lo in self.layers:
            counts += np.bincount(lo.stats.actions.reshape(-1), minlength=3)
        return counts / counts.sum()


class MemoryModel:
    """Stacked memory layers with embedding and task heads.

    Parameters are held as named tensors (``embed.*``, ``l{i}.<group>.*``,
    ``head.*``); episodic buffers live in one :class:`BufferBank` per layer.
    """

    def __init__(self, config: ModelConfig, key_vocab: int = 128, value_vocab: int = 64):
        self.config = config
        self.key_vocab = key_vocab
        self.value_vocab = value_vocab
        d = config.d
        rng = np.random.default_rng([config.seed, 0x5EED])
        p = lambda scale, shape: ad.parameter(rng.normal(0, scale, shape))
        self.embed = {"W_in": p(0.1, (2, d)), "b_in": ad.parameter(np.zeros(d)),
                      "E_sym": p(1.0, (key_vocab + 1, d)),
                      "E_val": p(1.0, (value_vocab + 1, d)), "E_role": p(0.3, (3, d))}
        # row 0 means "no bound value"; starting it at zero keeps queries from
        # matching every other value-less token in the buffer
        self.embed["E_val"].data[0] = 0.0
        self.layers = [Layer.init(d, config.effective_rank, rng, config.ct_steps, config.ffn_mult,
                                  config.router_hidden, config.router_episodic_bias)
                       for _ in range(config.layers)]
        self.head = {"W_val": p(1 / math.sqrt(d), (d, value_vocab)),
                     "b_val": ad.parameter(np.zeros(value_vocab)),
                     "W_dyn": p(1 / math.sqrt(d), (d, 1)), "b_dyn": ad.parameter(np.zeros(1))}
        self.banks = [BufferBank.empty(config.batch, config.capacity, d)
                      for _ in range(config.layers)]

    # parameters ---------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"embed.{k}": v for k, v in self.embed.items()}
        for i, layer in enumerate(self.layers):
            out.update({f"l{i}.{k}": v for k, v in layer.named_parameters().items()})
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    @staticmethod
    def group_of(name: str) -> str:
        parts = name.split(".")
        return parts[0] if parts[0] in ("embed", "head") else parts[1]

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {g: [] for g in GROUPS}
        for name in self.named_parameters():
            groups[self.group_of(name)].append(name)
        return groups

    def reset_buffers(self) -> None:
        for bank in self.banks:
            bank.reset()

    def snapshot_buffers(self) -> list[BufferBank]:
        return [b.copy() for b in self.banks]

    def restore_buffers(self, banks: list[BufferBank]) -> None:
        self.banks = [b.copy() for b in banks]

    # forward ------------------------------------------------------------

    def embed_tokens(self, batch: Batch) -> Tensor:
        B, n = batch.shape
        N = B * n
        feat = np.stack([batch.v.reshape(N), np.log1p(batch.dtau.reshape(N))], axis=1)
        e = self.embed
        val_idx = np.where(batch.role == KEY, batch.bound, 0).reshape(N)
        x = ad.add(ad.matmul(feat, e["W_in"]), e["b_in"])
        x = ad.add(x, ad.take_rows(e["E_sym"], batch.symbol.reshape(N)))
        x = ad.add(x, ad.take_rows(e["E_val"], val_idx))
        return ad.add(x, ad.take_rows(e["E_role"], batch.role.reshape(N)))

    def forward(self, batch: Batch, mode: str = "eval", temperature: float = 1.0,
                rng: np.random.Generator | None = None) -> ForwardResult:
        cfg = self.config
        B, n = batch.shape
        N = B * n
        if B > self.banks[0].lanes:
            raise ad.DimensionError(f"batch of {B} exceeds the {self.banks[0].lanes} buffer lanes")
        x = self.embed_tokens(batch)
        outs = []
        for layer, bank in zip(self.layers, self.banks):
            tau = bank.clock[:B, None] + np.cumsum(batch.dtau, axis=1)
            out = layer_forward(layer, bank, x, batch.dtau, tau, mode, cfg, temperature, rng)
            outs.append(out)
            x = out.y

        h = self.head
        qrows = np.flatnonzero(batch.role.reshape(N) == QUERY)
        ce = None
        value_logits = np.zeros((0, self.value_vocab))
        if len(qrows):
            logits = ad.add(ad.matmul(ad.take_rows(x, qrows), h["W_val"]), h["b_val"])
            ce = ad.cross_entropy(logits, batch.target.reshape(N)[qrows] - 1)
            value_logits = logits.data
        pred = ad.add(ad.matmul(x, h["W_dyn"]), h["b_dyn"])
        drows = np.flatnonzero((np.arange(N) % n) < n - 1)
        err = ad.sub(ad.take_rows(pred, drows), batch.v.reshape(N)[drows + 1][:, None])
        dyn_mse = ad.reduce_mean(ad.mul(err, err))
        task = dyn_mse if ce is None else ad.add(dyn_mse, ce)

        pis = [o.pi for o in outs]
        pi = ad.concat(pis, axis=0) if len(pis) > 1 else pis[0]
        q = np.concatenate([o.q for o in outs])
        cons = [o.l_cons for o in outs if o.l_cons is not None]
        l_cons = None
        if cons:
            l_cons = cons[0]
            for c in cons[1:]:
                l_cons = ad.add(l_cons, c)
        if "ct-only" in cfg.ablations or "full-attention" in cfg.ablations:
            loss = task  # routing is fixed, the pressure terms are constants
            if l_cons is not None and cfg.gamma:
                loss = ad.add(loss, ad.scale(l_cons, cfg.gamma))
        else:
            loss = total_loss(task, pi, q, l_cons, cfg.weights)
        return ForwardResult(task, ce, dyn_mse, loss, l_cons, value_logits,
                             pred.data.reshape(B, n), outs)
