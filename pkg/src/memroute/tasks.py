"""SRCD sequence generation, the copy task used for transfer, and file I/O.

Sequences are stored column-wise (one numpy array per token field). The
``tokens`` property materialises :class:`SrcdToken` records when a per-token
view is more convenient.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.signal import lfilter

PLAIN, KEY, QUERY = 0, 1, 2
ROLE_NAMES = ("plain", "key", "query")
MIN_KEY_OFFSET = 4
GAP_XMIN = 0.1

# column order of the sequence file format
COLUMNS = ("seq", "v", "dtau", "symbol", "bound_value", "role", "target", "pattern_id",
           "repetition")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SrcdConfig:
    seq_len: int = 256
    query_fraction: float = 0.05
    recurring_fraction: float = 0.70
    pattern_count: int = 20
    key_vocab: int = 128
    value_vocab: int = 64
    ar_coef: float = 0.95
    dyn_amplitude: float = 0.3
    dyn_frequency: float = 1.0
    noise_std: float = 0.05
    pareto_shape: float = 1.5
    gap_clip: tuple[float, float] = (0.1, 1000.0)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.query_fraction < 1:
            raise ConfigError(f"query_fraction must be in (0, 1), got {self.query_fraction}")
        if not 0 <= self.recurring_fraction <= 1:
            raise ConfigError(f"recurring_fraction must be in [0, 1], got {self.recurring_fraction}")
        if not self.pareto_shape > 1:
            raise ConfigError(f"pareto_shape must exceed 1, got {self.pareto_shape}")
        if self.key_vocab < self.pattern_count:
            raise ConfigError(f"key_vocab ({self.key_vocab}) < pattern_count ({self.pattern_count})")
        if self.pattern_count < 1 or self.value_vocab < 1:
            raise ConfigError("pattern_count and value_vocab must be positive")
        if self.recurring_fraction < 1 and self.key_vocab == self.pattern_count:
            raise ConfigError("novel bindings need key symbols outside the pattern dictionary")
        if self.n_queries == 0:
            raise ConfigError(f"floor(query_fraction * seq_len) is 0 for seq_len={self.seq_len}")
        lo, hi = self.gap_clip
        if not 0 < lo < hi:
            raise ConfigError(f"bad gap_clip {self.gap_clip}")

    @property
    def n_queries(self) -> int:
        return int(math.floor(self.query_fraction * self.seq_len))

    @classmethod
    def desk(cls, **overrides) -> "SrcdConfig":
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "SrcdConfig":
        base = dict(seq_len=2048, pattern_count=100)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["gap_clip"] = list(self.gap_clip)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SrcdConfig":
        d = dict(d)
        if "gap_clip" in d:
            d["gap_clip"] = tuple(float(x) for x in d["gap_clip"])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown SRCD config key(s): {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


def stable_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class SrcdToken:
    v: float
    dtau: float
    symbol: int
    bound_value: int
    role: str
    target: int
    pattern_id: int
    repetition: int


@dataclass
class SrcdSequence:
    v: np.ndarray
    dtau: np.ndarray
    symbol: np.ndarray
    bound_value: np.ndarray
    role: np.ndarray
    target: np.ndarray
    pattern_id: np.ndarray
    repetition: np.ndarray
    config_hash: str = ""

    def __len__(self) -> int:
        return len(self.v)

    @property
    def tokens(self) -> list[SrcdToken]:
        return [SrcdToken(float(self.v[i]), float(self.dtau[i]), int(self.symbol[i]),
                          int(self.bound_value[i]), ROLE_NAMES[self.role[i]],
                          int(self.target[i]), int(self.pattern_id[i]),
                          int(self.repetition[i]))
                for i in range(len(self))]

    def query_positions(self) -> np.ndarray:
        return np.flatnonzero(self.role == QUERY)

    def key_positions(self) -> np.ndarray:
        return np.flatnonzero(self.role == KEY)


# ---------------------------------------------------------------- SRCD


def pareto_gaps(rng: np.random.Generator, size, shape: float,
                clip: tuple[float, float]) -> np.ndarray:
    """Inverse-CDF Pareto draws with x_min = lower clip bound, then clipped."""
    u = 1.0 - rng.random(size)  # (0, 1]
    return np.clip(clip[0] * u ** (-1.0 / shape), clip[0], clip[1])


def pattern_dictionary(config: SrcdConfig) -> tuple[np.ndarray, np.ndarray]:
    """Fixed (key symbol, value symbol) pairs for the recurring patterns."""
    rng = np.random.default_rng([config.seed, 0xD1C7])
    keys = rng.choice(np.arange(1, config.key_vocab + 1), size=config.pattern_count,
                      replace=False)
    values = rng.integers(1, config.value_vocab + 1, size=config.pattern_count)
    return keys.astype(np.int64), values.astype(np.int64)


class SrcdStream:
    """Deterministic, resumable stream of SRCD sequences.

    Sequence ``i`` draws from its own generator seeded with ``(seed, i)``, so
    any prefix of the stream is reproducible. Repetition counts of recurring
    patterns accumulate over the whole stream in order.
    """

    def __init__(self, config: SrcdConfig, start: int = 0):
        self.config = config
        self.index = start
        self.pattern_keys, self.pattern_values = pattern_dictionary(config)
        self.seen = np.zeros(config.pattern_count + 1, dtype=np.int64)
        in_dict = np.zeros(config.key_vocab + 1, dtype=bool)
        in_dict[self.pattern_keys] = True
        self.novel_symbols = np.flatnonzero(~in_dict[1:]) + 1
        self.hash = config.config_hash()

    def __iter__(self) -> Iterator[SrcdSequence]:
        return self

    def __next__(self) -> SrcdSequence:
        seq = self._generate(np.random.default_rng([self.config.seed, self.index]))
        self.index += 1
        return seq

    def take(self, count: int) -> list[SrcdSequence]:
        return [next(self) for _ in range(count)]

    def _generate(self, rng: np.random.Generator) -> SrcdSequence:
        c = self.config
        n = c.seq_len
        dtau = pareto_gaps(rng, n, c.pareto_shape, c.gap_clip)
        drive = c.dyn_amplitude * np.sin(c.dyn_frequency * dtau) + rng.normal(0.0, c.noise_std, n)
        drive[0] = 0.0
        v = lfilter([1.0], [1.0, -c.ar_coef], drive)

        role = np.zeros(n, dtype=np.int64)
        symbol = np.zeros(n, dtype=np.int64)
        bound = np.zeros(n, dtype=np.int64)
        target = np.zeros(n, dtype=np.int64)
        pattern = np.zeros(n, dtype=np.int64)
        reps = np.zeros(n, dtype=np.int64)

        eligible = np.arange(n)[np.arange(n) > n / 8]
        queries = np.sort(rng.choice(eligible, size=c.n_queries, replace=False))
        role[queries] = QUERY
        # keys for each query, placed uniformly among free earlier positions
        key_of = np.empty(len(queries), dtype=np.int64)
        for j, q in enumerate(queries):
            free = np.flatnonzero(role[: q - MIN_KEY_OFFSET + 1] == PLAIN)
            if len(free) == 0:
                raise ConfigError(f"no room for a key before query at {q}")
            key_of[j] = rng.choice(free)
            role[key_of[j]] = KEY

        recurring = rng.random(len(queries)) < c.recurring_fraction
        pat_idx = rng.integers(0, c.pattern_count, size=len(queries))
        novel_sym = rng.choice(self.novel_symbols, size=len(queries)) if len(
            self.novel_symbols) else np.zeros(len(queries), dtype=np.int64)
        novel_val = rng.integers(1, c.value_vocab + 1, size=len(queries))
        for j, k in enumerate(key_of):
            if recurring[j]:
                symbol[k] = self.pattern_keys[pat_idx[j]]
                bound[k] = self.pattern_values[pat_idx[j]]
                pattern[k] = pat_idx[j] + 1
            else:
                symbol[k] = novel_sym[j]
                bound[k] = novel_val[j]
            symbol[queries[j]] = symbol[k]

        # repetition counts in stream order (by key position)
        for k in np.sort(key_of):
            p = pattern[k]
            if p:
                reps[k] = self.seen[p]
                self.seen[p] += 1

        # most recent binding wins
        latest: dict[int, int] = {}
        for t in range(n):
            if role[t] == KEY:
                latest[symbol[t]] = t
            elif role[t] == QUERY:
                k = latest[symbol[t]]
                target[t] = bound[k]
                pattern[t] = pattern[k]
                reps[t] = reps[k]
        return SrcdSequence(v, dtau, symbol, bound, role, target, pattern, reps, self.hash)


def generate_srcd(config: SrcdConfig, count: int) -> list[SrcdSequence]:
    return SrcdStream(config).take(count)


def theoretical_opt(config: SrcdConfig) -> float:
    """Minimum attention fraction with perfect retrieval: queries x novel share."""
    return config.query_fraction * (1.0 - config.recurring_fraction)


# ---------------------------------------------------------------- copy task


def generate_copy_task(seq_len: int, vocab: int, copy_count: int, seed: int,
                       count: int = 1, value_vocab: int = 64) -> list[SrcdSequence]:
    """Keys bind fresh symbols to values in the first half; queries follow later.

    No continuous signal (v = 0, gap = 1) and no recurring patterns.
    """
    if copy_count < 1:
        raise ConfigError("copy_count must be at least 1")
    if vocab < copy_count:
        raise ConfigError(f"vocab {vocab} too small for {copy_count} distinct symbols")
    if 2 * copy_count > seq_len:
        raise ConfigError(f"seq_len {seq_len} cannot hold {copy_count} keys and queries")
    tag = stable_hash({"copy": [seq_len, vocab, copy_count, seed, value_vocab]})
    half = seq_len // 2
    out = []
    for i in range(count):
        rng = np.random.default_rng([seed, 0xC0B1, i])
        role = np.zeros(seq_len, dtype=np.int64)
        symbol = np.zeros(seq_len, dtype=np.int64)
        bound = np.zeros(seq_len, dtype=np.int64)
        target = np.zeros(seq_len, dtype=np.int64)
        keys = np.sort(rng.choice(half, size=copy_count, replace=False))
        queries = np.sort(rng.choice(np.arange(half, seq_len), size=copy_count, replace=False))
        syms = rng.choice(np.arange(1, vocab + 1), size=copy_count, replace=False)
        vals = rng.integers(1, value_vocab + 1, size=copy_count)
        role[keys] = KEY
        symbol[keys] = syms
        bound[keys] = vals
        order = rng.permutation(copy_count)
        role[queries] = QUERY
        symbol[queries] = syms[order]
        target[queries] = vals[order]
        zeros = np.zeros(seq_len, dtype=np.int64)
        out.append(SrcdSequence(np.zeros(seq_len), np.ones(seq_len), symbol, bound, role,
                                target, zeros, zeros.copy(), tag))
    return out


# ---------------------------------------------------------------- serialisation


def _format_row(seq_idx: int, s: SrcdSequence, t: int) -> str:
    return "\t".join((str(seq_idx), repr(float(s.v[t])), repr(float(s.dtau[t])),
                      str(s.symbol[t]), str(s.bound_value[t]), ROLE_NAMES[s.role[t]],
                      str(s.target[t]), str(s.pattern_id[t]), str(s.repetition[t])))


def dumps_sequences(sequences: list[SrcdSequence], config: dict | None = None) -> str:
    """Text form: ``# <hash> <json config>`` header, column header, one token per line."""
    config = config or {}
    h = sequences[0].config_hash if sequences else stable_hash(config)
    lines = [f"# {h} {json.dumps(config, sort_keys=True)}", "\t".join(COLUMNS)]
    for i, s in enumerate(sequences):
        lines.extend(_format_row(i, s, t) for t in range(len(s)))
    return "\n".join(lines) + "\n"


def write_sequences(path: str | Path, sequences: list[SrcdSequence],
                    config: dict | None = None) -> None:
    Path(path).write_text(dumps_sequences(sequences, config))


def read_sequences(path: str | Path) -> tuple[list[SrcdSequence], str, dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ConfigError(f"{path}: missing header line")
    _, h, cfg = lines[0].split(" ", 2)
    if tuple(lines[1].split("\t")) != COLUMNS:
        raise ConfigError(f"{path}: unexpected column header {lines[1]!r}")
    rows: dict[int, list[list[str]]] = {}
    for line in lines[2:]:
        parts = line.split("\t")
        rows.setdefault(int(parts[0]), []).append(parts)
    seqs = []
    role_code = {name: i for i, name in enumerate(ROLE_NAMES)}
    for idx in sorted(rows):
        cols = list(zip(*rows[idx]))
        seqs.append(SrcdSequence(
            np.array(cols[1], dtype=np.float64), np.array(cols[2], dtype=np.float64),
            np.array(cols[3], dtype=np.int64), np.array(cols[4], dtype=np.int64),
            np.array([role_code[r] for r in cols[5]], dtype=np.int64),
            np.array(cols[6], dtype=np.int64), np.array(cols[7], dtype=np.int64),
            np.array(cols[8], dtype=np.int64), h))
    return seqs, h, json.loads(cfg)
