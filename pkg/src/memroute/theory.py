"""Executable versions of the static-routing lower bound and the consolidation phase model.

Frontier arithmetic uses :class:`fractions.Fraction` so the brute-force
enumeration and the closed form can be compared for exact equality.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .autodiff import ParameterError

MAX_ENUMERATION_K = 20


class BoundError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class StaticTask:
    """``n`` positions, a fraction ``f`` of which need retrieval from ``K`` equally likely
    recurring patterns; accuracy must be at least ``1 - eps`` (error counted per position)."""

    n: int
    f: float
    K: int
    eps: float = 0.0

    def __post_init__(self):
        if self.n < 1 or self.K < 1:
            raise ParameterError("n and K must be positive")
        if not 0 < self.f < 1:
            raise ParameterError(f"f must be in (0, 1), got {self.f}")
        if self.eps < 0:
            raise ParameterError("eps must be >= 0")

    @property
    def retrievals(self) -> Fraction:
        return Fraction(self.f) * self.n

    def occurrence_counts(self) -> np.ndarray:
        """Integer occurrences per pattern: round(f n) split evenly, remainder to the first."""
        total = int(round(self.f * self.n))
        base, extra = divmod(total, self.K)
        return np.array([base + (i < extra) for i in range(self.K)], dtype=np.int64)


@dataclass(frozen=True)
class FrontierPoint:
    size: int
    error: Fraction
    attention: Fraction

    def as_floats(self) -> tuple[int, float, float]:
        return self.size, float(self.error), float(self.attention)


def closed_form_frontier(task: StaticTask) -> list[FrontierPoint]:
    """Error ``f (K - |S|) / K`` and attention ``f n |S| / K`` for every subset size."""
    f, n, K = Fraction(task.f), task.n, task.K
    return [FrontierPoint(s, f * (K - s) / K, f * n * s / K) for s in range(K + 1)]


def static_routing_frontier(task: StaticTask, enumerate_subsets: bool = True) -> list[FrontierPoint]:
    """Per-size (error, attention) of static routing assignments.

    With ``enumerate_subsets`` every subset of patterns routed to attention is
    visited and the per-pattern contributions are summed; otherwise the closed
    form is returned. Enumeration is limited to ``K <= 20``.
    """
    if not enumerate_subsets:
        return closed_form_frontier(task)
    if task.K > MAX_ENUMERATION_K:
        raise BoundError(f"K={task.K} is too large to enumerate (limit {MAX_ENUMERATION_K}); "
                         "use enumerate_subsets=False for the closed form")
    share = Fraction(task.f) / task.K  # per-position frequency of each pattern
    best: dict[int, FrontierPoint] = {}
    for mask in range(1 << task.K):
        routed = [(mask >> i) & 1 for i in range(task.K)]
        error = sum((share for r in routed if not r), Fraction(0))
        attention = sum((share * task.n for r in routed if r), Fraction(0))
        size = sum(routed)
        cur = best.get(size)
        if cur is None or (attention, error) < (cur.attention, cur.error):
            best[size] = FrontierPoint(size, error, attention)
    return [best[s] for s in sorted(best)]


def min_static_attention(task: StaticTask, integer_counts: bool = False) -> Fraction | None:
    """Least attention over static assignments whose error is at most ``eps``.

    ``integer_counts`` uses :meth:`StaticTask.occurrence_counts` (searching the
    cheapest patterns to leave local) instead of equal real-valued shares.
    """
    eps = Fraction(task.eps)
    if not integer_counts:
        points = [p for p in closed_form_frontier(task) if p.error <= eps]
        return min((p.attention for p in points), default=None)
    occ = task.occurrence_counts()
    if task.K <= MAX_ENUMERATION_K:
        best = None
        for mask in range(1 << task.K):
            routed = np.array([(mask >> i) & 1 for i in range(task.K)], dtype=bool)
            error = Fraction(int(occ[~routed].sum()), task.n)
            if error <= eps:
                att = Fraction(int(occ[routed].sum()))
                best = att if best is None or att < best else best
        return best
    # leaving the smallest patterns local is optimal for the integer version
    order = np.sort(occ)
    local = 0
    for c in order:
        if Fraction(int(local + c), task.n) > eps:
            break
        local += int(c)
    return Fraction(int(occ.sum()) - local)


def static_lower_bound(task: StaticTask) -> Fraction:
    return max(Fraction(0), (Fraction(task.f) - Fraction(task.eps)) * task.n)


def consolidation_schedule_cost(task: StaticTask, eps_cons: float, m: int) -> float:
    """Attention ops of a router that attends to each pattern's first ``m`` occurrences
    and then hands the consolidatable share ``1 - eps_cons`` to semantic memory.

    Returns ``eps_cons f n + (1 - eps_cons) K min(m, f n / K)``.
    """
    if m < 1:
        raise ParameterError(f"exposures per pattern must be >= 1, got {m}")
    if not 0 <= eps_cons <= 1:
        raise ParameterError(f"eps_cons must be in [0, 1], got {eps_cons}")
    per_pattern = task.f * task.n / task.K
    return eps_cons * task.f * task.n + (1.0 - eps_cons) * task.K * min(m, per_pattern)


def simulate_consolidation_router(task: StaticTask, eps_cons: float, m: int,
                                  rng: np.random.Generator) -> int:
    """Monte Carlo walk over one sequence with integer occurrence counts.

    Each pattern independently fails to consolidate with probability
    ``eps_cons``; consolidating patterns stop using attention after ``m``
    exposures. Returns the attention ops spent.
    """
    occ = task.occurrence_counts()
    order = rng.permutation(np.repeat(np.arange(task.K), occ))
    fails = rng.random(task.K) < eps_cons
    seen = np.zeros(task.K, dtype=np.int64)
    ops = 0
    for p in order:
        if fails[p] or seen[p] < m:
            ops += 1
        seen[p] += 1
    return ops


# ---------------------------------------------------------------- phase model


@dataclass(frozen=True)
class PhaseState:
    q: float
    p: float
    eta_q: float = 1.0
    eta_p: float = 1.0
    q_star: float = 0.83

    def __post_init__(self):
        if not (0 <= self.q <= 1 and 0 <= self.p <= 1):
            raise ParameterError("q and p must lie in [0, 1]")


def phase_simulate(initial: PhaseState, dt: float = 0.01, steps: int = 5000) -> np.ndarray:
    """Explicit Euler for ``dq = eta_q p (1 - q)``, ``dp = eta_p (q - q*)`` with clipping.

    Returns a ``(steps + 1, 2)`` array of ``(q, p)``.
    """
    if not dt > 0:
        raise ParameterError("dt must be positive")
    if dt * max(initial.eta_q, initial.eta_p) >= 0.1:
        raise ParameterError(f"unstable step: dt * max(eta) = "
                             f"{dt * max(initial.eta_q, initial.eta_p)} must be < 0.1")
    out = np.empty((steps + 1, 2))
    q, p = initial.q, initial.p
    out[0] = q, p
    for i in range(1, steps + 1):
        dq = initial.eta_q * p * (1.0 - q)
        dp = initial.eta_p * (q - initial.q_star)
        q = min(max(q + dt * dq, 0.0), 1.0)
        p = min(max(p + dt * dp, 0.0), 1.0)
        out[i] = q, p
    return out


def classify_basin(traj: np.ndarray) -> str | None:
    q, p = traj[-1]
    if q > 0.99:
        return "consolidated"
    if p < 0.01:
        return "stalled"
    return None


@dataclass
class SeparatrixResult:
    threshold: float
    lo: float
    hi: float
    widths: list[float]


def find_separatrix(p0: float, q_star: float = 0.83, eta_q: float = 1.0, eta_p: float = 1.0,
                    tolerance: float = 1e-4, dt: float = 0.01, steps: int = 5000,
                    lo: float = 0.0, hi: float = 1.0) -> SeparatrixResult:
    """Bisect on the initial quality between the stalled and consolidated basins."""
    if not tolerance > 0:
        raise ParameterError("tolerance must be positive")

    def outcome(q0: float) -> str | None:
        return classify_basin(phase_simulate(PhaseState(q0, p0, eta_q, eta_p, q_star), dt, steps))

    low, high = outcome(lo), outcome(hi)
    if low == high or low is None or high is None:
        raise DomainError(f"endpoints q0={lo} ({low}) and q0={hi} ({high}) do not bracket "
                          "a basin boundary")
    widths = [hi - lo]
    while hi - lo > tolerance:
        mid = 0.5 * (lo + hi)
        res = outcome(mid)
        if res == low:
            lo = mid
        elif res == high:
            hi = mid
        else:
            raise DomainError(f"q0={mid} reaches neither basin within {steps} steps")
        widths.append(hi - lo)
    return SeparatrixResult(0.5 * (lo + hi), lo, hi, widths)
