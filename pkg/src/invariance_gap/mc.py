"""Seeded Monte-Carlo estimators used as independent oracles.

Every estimator draws its samples in fixed-size chunks; chunk ``i`` uses a
Philox generator keyed by ``(seed, i)``. Chunk statistics are merged in chunk
order, so the result does not depend on how many workers evaluated the chunks.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gaussian import make_rng

CHUNK_SIZE = 1 << 15

Sampler = Callable[[np.random.Generator, int], np.ndarray]


@dataclass(frozen=True)
class McEstimate:
    value: float
    stderr: float
    n: int
    seed: int

    def z_score(self, target: float) -> float:
        if self.stderr == 0.0:
            return 0.0 if self.value == target else math.inf
        return (self.value - target) / self.stderr

    def to_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr, "n": self.n, "seed": self.seed}


def _chunk_sizes(n: int, chunk_size: int) -> list[int]:
    full, rest = divmod(n, chunk_size)
    return [chunk_size] * full + ([rest] if rest else [])


def _merge(stats: list[tuple[int, float, float]]) -> tuple[int, float, float]:
    # Chan et al. parallel update of (count, mean, M2), applied in chunk order.
    n, mean, m2 = 0, 0.0, 0.0
    for nb, mb, m2b in stats:
        if nb == 0:
            continue
        tot = n + nb
        delta = mb - mean
        mean += delta * nb / tot
        m2 += m2b + delta**2 * n * nb / tot
        n = tot
    return n, mean, m2


def chunked_values(
    sampler: Sampler,
    f: Callable[[np.ndarray], np.ndarray],
    n: int,
    seed: int,
    workers: int = 1,
    chunk_size: int = CHUNK_SIZE,
) -> list[tuple[int, float, float]]:
    sizes = _chunk_sizes(n, chunk_size)

    def run(args):
        idx, size = args
        rng = make_rng(seed, idx)
        vals = np.asarray(f(sampler(rng, size)), dtype=float).reshape(-1)
        if vals.shape[0] != size:
            raise ValueError(f"integrand returned {vals.shape[0]} values for {size} samples")
        bad = ~np.isfinite(vals)
        if np.any(bad):
            raise FloatingPointError(f"non-finite integrand value in chunk {idx} at sample {int(np.argmax(bad))}")
        mean = float(np.mean(vals))
        return size, mean, float(np.sum((vals - mean) ** 2))

    jobs = list(enumerate(sizes))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, jobs))
    return [run(job) for job in jobs]


def mc_expectation(
    sampler: Sampler,
    f: Callable[[np.ndarray], np.ndarray],
    n: int,
    seed: int,
    workers: int = 1,
    chunk_size: int = CHUNK_SIZE,
) -> McEstimate:
    """Estimate ``E[f(X)]`` with ``X`` drawn by ``sampler(rng, count)``."""
    if n < 2:
        raise ValueError("need at least two samples")
    count, mean, m2 = _merge(chunked_values(sampler, f, n, seed, workers, chunk_size))
    var = m2 / (count - 1)
    return McEstimate(mean, math.sqrt(max(var, 0.0) / count), count, seed)


def mc_kl(
    sample_q: Sampler,
    log_q: Callable[[np.ndarray], np.ndarray],
    log_p: Callable[[np.ndarray], np.ndarray],
    n: int,
    seed: int,
    workers: int = 1,
) -> McEstimate:
    """Unbiased estimate of ``KL(q || p) = E_q[log q - log p]``."""

    def integrand(w):
        lq = np.asarray(log_q(w), dtype=float)
        lp = np.asarray(log_p(w), dtype=float)
        bad = ~(np.isfinite(lq) & np.isfinite(lp))
        if np.any(bad):
            i = int(np.argmax(bad))
            raise FloatingPointError(f"non-finite log density at sample {w[i]!r}")
        return lq - lp

    return mc_expectation(sample_q, integrand, n, seed, workers)


def combine_difference(a: McEstimate, b: McEstimate) -> tuple[float, float]:
    """Value and stderr of ``a - b`` for independent estimates."""
    return a.value - b.value, math.hypot(a.stderr, b.stderr)
