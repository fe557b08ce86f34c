"""Post-hoc analytics: redundancy probes, power-law fits over routing logs and
transition detection on attention curves."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterError

TAXONOMY = ("redundant", "partial", "novel")


class InsufficientDataError(ValueError):
    pass


# ---------------------------------------------------------------- redundancy probe


@dataclass
class ProbeResult:
    layer: int
    weights: np.ndarray  # (d_in + 1, d_out); last row is the bias
    redundancy: float
    per_token: dict = field(default_factory=dict)
    held_out: int = 0

    def predict(self, h: np.ndarray) -> np.ndarray:
        return _augment(h) @ self.weights


def _augment(h: np.ndarray) -> np.ndarray:
    return np.hstack([h, np.ones((h.shape[0], 1))])


def token_redundancy(a: np.ndarray, a_hat: np.ndarray) -> np.ndarray:
    """``1 - ||a - a_hat|| / ||a||`` per row; rows with ``a = 0`` give NaN."""
    num = np.linalg.norm(a - a_hat, axis=1)
    den = np.linalg.norm(a, axis=1)
    out = np.full(len(a), np.nan)
    ok = den > 0
    out[ok] = 1.0 - num[ok] / den[ok]
    return out


def fit_ridge(h: np.ndarray, a: np.ndarray, ridge: float) -> np.ndarray:
    """Closed-form ridge regression with an unpenalised bias column."""
    X = _augment(h)
    G = X.T @ X
    penalty = np.full(X.shape[1], float(ridge))
    penalty[-1] = 0.0
    G[np.diag_indices_from(G)] += penalty
    if ridge == 0 and np.linalg.matrix_rank(G) < G.shape[0]:
        raise np.linalg.LinAlgError("design matrix is rank deficient; use a nonzero ridge")
    return np.linalg.solve(G, X.T @ a)


def train_redundancy_probe(h: np.ndarray, a: np.ndarray, ridge: float = 1e-3, layer: int = 0,
                           train_fraction: float = 0.8,
                           rng: np.random.Generator | None = None) -> ProbeResult:
    """Fit ``h -> a`` on a random 80% split and report mean held-out redundancy."""
    h = np.asarray(h, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if h.ndim != 2 or a.ndim != 2 or len(h) != len(a):
        raise ad.DimensionError(f"need paired (N, d) arrays, got {h.shape} and {a.shape}")
    if ridge < 0:
        raise ParameterError("ridge must be >= 0")
    if len(h) < 10 * h.shape[1]:
        raise InsufficientDataError(f"{len(h)} samples < 10 * d = {10 * h.shape[1]}")
    rng = np.random.default_rng(0) if rng is None else rng
    order = rng.permutation(len(h))
    cut = int(round(train_fraction * len(h)))
    tr, te = order[:cut], order[cut:]
    W = fit_ridge(h[tr], a[tr], ridge)
    r = token_redundancy(a[te], _augment(h[te]) @ W)
    r = r[np.isfinite(r)]
    summary = {"mean": float(r.mean()), "std": float(r.std()),
               "q05": float(np.quantile(r, 0.05)), "median": float(np.median(r)),
               "q95": float(np.quantile(r, 0.95))}
    return ProbeResult(layer, W, float(r.mean()), summary, len(r))


def head_taxonomy(redundancies: Sequence[float], high: float = 0.8,
                  low: float = 0.5) -> dict[str, int]:
    """Counts per group; both thresholds are strict (R = 0.8 is partial, R = 0.5 novel)."""
    counts = dict.fromkeys(TAXONOMY, 0)
    for r in redundancies:
        if r > high:
            counts["redundant"] += 1
        elif r > low:
            counts["partial"] += 1
        else:
            counts["novel"] += 1
    return counts


def collect_probe_pairs(model, sequences) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Layer input and episodic read for every token that had a non-empty buffer.

    Runs the model with every token retrieving, on a copy of its buffers.
    """
    from .model import Batch

    saved = model.snapshot_buffers()
    hs: dict[int, list] = {i: [] for i in range(len(model.layers))}
    As: dict[int, list] = {i: [] for i in range(len(model.layers))}
    B = model.config.batch
    try:
        with ad.no_tape():
            for i in range(0, len(sequences), B):
                model.reset_buffers()
                res = model.forward(Batch.from_sequences(list(sequences[i:i + B])), "relaxed")
                for li, lo in enumerate(res.layers):
                    if lo.r_e is None:
                        continue
                    hs[li].append(lo.x.data[lo.r_e_rows])
                    As[li].append(lo.r_e.data)
    finally:
        model.restore_buffers(saved)
    return {li: (np.concatenate(hs[li]), np.concatenate(As[li])) for li in hs if hs[li]}


# ---------------------------------------------------------------- power law


@dataclass
class PowerLawBin:
    k_lo: float
    k_hi: float
    k_center: float  # geometric mean of the k values that fell in the bin
    mean: float
    count: int


@dataclass
class PowerLawFit:
    p0: float
    gamma: float
    r2: float
    bins: list[PowerLawBin]
    gamma_se: float = math.nan

    def predict(self, k) -> np.ndarray:
        return self.p0 * np.asarray(k, dtype=np.float64) ** (-self.gamma)

    def valid_bins(self, min_count: int = 20) -> list[PowerLawBin]:
        return [b for b in self.bins if b.count >= min_count]

    def monotone_nonincreasing(self, min_count: int = 20) -> bool:
        m = [b.mean for b in self.valid_bins(min_count)]
        return all(x >= y for x, y in zip(m, m[1:]))

    def to_csv(self, config_hash: str = "", min_count: int = 20) -> str:
        lines = [f"# config_hash={config_hash}", "x,y,fitted_y,count"]
        for b in self.valid_bins(min_count):
            lines.append(f"{b.k_center!r},{b.mean!r},{float(self.predict(b.k_center))!r},{b.count}")
        return "\n".join(lines) + "\n"


def log_bins(k: np.ndarray, pi: np.ndarray, base: float = 1.5) -> list[PowerLawBin]:
    """Group ``k >= 1`` into ``[base**i, base**(i+1))`` and average ``pi`` per bin."""
    k = np.asarray(k, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    keep = k >= 1
    k, pi = k[keep], pi[keep]
    if not len(k):
        return []
    idx = np.floor(np.log(k) / math.log(base) + 1e-12).astype(np.int64)
    out = []
    for i in np.unique(idx):
        sel = idx == i
        out.append(PowerLawBin(base ** i, base ** (i + 1), float(np.exp(np.log(k[sel]).mean())),
                               float(pi[sel].mean()), int(sel.sum())))
    return out


def _ols_loglog(bins: list[PowerLawBin]) -> tuple[float, float, float]:
    x = np.log([b.k_center for b in bins])
    y = np.log([b.mean for b in bins])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (resid ** 2).sum() / ss_tot if ss_tot > 0 else 1.0
    return float(math.exp(intercept)), float(-slope), float(r2)


def fit_power_law(k, pi, min_count: int = 20, base: float = 1.5, bootstrap: int = 200,
                  rng: np.random.Generator | None = None) -> PowerLawFit:
    """Fit ``P(k) = P0 k^-gamma`` to binned mean soft episodic probability.

    ``k`` is the number of earlier sightings of the pattern; rows with
    ``k = 0`` are outside the log-spaced bins. The standard error of gamma
    comes from ``bootstrap`` resamples of the rows.
    """
    k = np.asarray(k, dtype=np.float64)
    pi = np.asarray(pi, dtype=np.float64)
    if k.shape != pi.shape:
        raise ad.DimensionError("k and pi must have the same shape")
    bins = log_bins(k, pi, base)

    def usable(bs):
        return [b for b in bs if b.count >= min_count and b.mean > 0]

    good = usable(bins)
    if len(good) < 3:
        raise InsufficientDataError(f"only {len(good)} bins with count >= {min_count}; need 3")
    p0, gamma, r2 = _ols_loglog(good)
    se = math.nan
    if bootstrap > 0:
        rng = np.random.default_rng(0) if rng is None else rng
        gs = []
        for _ in range(bootstrap):
            pick = rng.integers(0, len(k), len(k))
            g = usable(log_bins(k[pick], pi[pick], base))
            if len(g) >= 3:
                gs.append(_ols_loglog(g)[1])
        if len(gs) > 1:
            se = float(np.std(gs, ddof=1))
    return PowerLawFit(p0, gamma, r2, bins, se)


def synthetic_routing_log(p0: float, gamma: float, samples: int, k_max: int = 1000,
                          rng: np.random.Generator | None = None,
                          noise: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``k`` log-uniformly on ``[1, k_max]`` and set ``pi = P0 k^-gamma`` (plus noise)."""
    rng = np.random.default_rng(0) if rng is None else rng
    k = np.floor(np.exp(rng.uniform(0, math.log(k_max + 1), samples))).astype(np.int64)
    k = np.clip(k, 1, k_max)
    pi = p0 * k.astype(np.float64) ** (-gamma)
    if noise:
        pi = np.clip(pi + rng.normal(0, noise, samples), 1e-6, 1.0)
    return k, pi


# ---------------------------------------------------------------- transitions


@dataclass
class Transition:
    step: int | None
    pre_mean: float
    post_mean: float
    reduction_factor: float


def reduction_factor(attention: Sequence[float], edge: float = 0.05) -> float:
    a = np.asarray(attention, dtype=np.float64)
    m = max(1, int(round(edge * len(a))))
    last = a[-m:].mean()
    return float(a[:m].mean() / last) if last > 0 else math.inf


def detect_transition(steps: Sequence[int], attention: Sequence[float], window: int = 500,
                      drop: float = 0.5, min_span: int = 1000) -> Transition:
    """First step whose attention falls below ``drop`` times the mean of the
    preceding ``window`` steps; only steps with a full window are candidates."""
    s = np.asarray(steps, dtype=np.float64)
    a = np.asarray(attention, dtype=np.float64)
    if s.shape != a.shape or len(s) < 2:
        raise ad.DimensionError("steps and attention must be equal-length sequences")
    if s[-1] - s[0] < min_span:
        raise ParameterError(f"log spans {s[-1] - s[0]:.0f} steps; need >= {min_span}")
    if np.any(np.diff(s) <= 0):
        raise ParameterError("steps must be strictly increasing")
    found = None
    lo = 0
    csum = np.concatenate([[0.0], np.cumsum(a)])
    for i in range(len(s)):
        if s[i] - window < s[0]:
            continue
        while s[lo] < s[i] - window:
            lo += 1
        trailing = (csum[i] - csum[lo]) / (i - lo)
        if a[i] < drop * trailing:
            found = i
            break
    if found is None:
        pre = post = float(a.mean())
        step = None
    else:
        pre, post = float(a[:found].mean()), float(a[found:].mean())
        step = int(s[found])
    return Transition(step, pre, post, reduction_factor(a))


def digitized_attention_curve(points: Sequence[tuple[float, float]], every: int = 10,
                              ) -> tuple[np.ndarray, np.ndarray]:
    """Piecewise-linear resampling of ``(step, value)`` points on a regular grid."""
    xs = np.array([p[0] for p in points], dtype=np.float64)
    ys = np.array([p[1] for p in points], dtype=np.float64)
    grid = np.arange(xs[0], xs[-1] + every / 2, every)
    return grid.astype(np.int64), np.interp(grid, xs, ys)
