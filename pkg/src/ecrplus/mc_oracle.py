"""Monte Carlo simulation of the exact Bernoulli and mixed-Poisson models.

This is the benchmarking baseline for the Panjer engine.  In the Bernoulli
model each head's death indicator is Bernoulli with conditional probability
q_i (w_{i,0} + sum_k w_{i,k} Lambda_k); the gamma factors must be truncated
so no conditional probability exceeds one.  The mixed-Poisson simulator
draws from exactly the model the Panjer engine computes, so the two must
agree in distribution.

Simulation uses counter-based Philox streams, one per fixed-size chunk of
simulations, so results are reproducible and independent of how chunks are
scheduled.  ``method="individual"`` draws one indicator per head, the
model's literal definition; ``method="grouped"`` draws one binomial count
per representative cell, which has provably the same law and is the
practical choice for large simulation counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from .aggregation import LossDistribution
from .domain import Portfolio, RiskFactorSpec
from .errors import DataError, NumericalError

__all__ = ["SimConfig", "simulate_bernoulli", "simulate_poisson_model"]

_CHUNK = 16384
# Individual-level simulation materialises an (n_sims, heads) array per
# chunk, so chunks must stay small to bound memory.
_CHUNK_INDIVIDUAL = 512
_MAX_REJECTION_ROUNDS = 1000


@dataclass(frozen=True)
class SimConfig:
    """Simulation settings; identical seeds give identical empirical pmfs."""

    n_sims: int
    seed: int = 0
    truncate_factors: bool = True
    method: str = "grouped"

    def __post_init__(self):
        if self.n_sims < 1:
            raise ValueError("n_sims must be >= 1")
        if self.method not in ("grouped", "individual"):
            raise ValueError(f"unknown simulation method {self.method!r}")


def _chunk_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[np.uint64(seed & (2**64 - 1)), np.uint64(stream)]))


def _factor_bound(portfolio: Portfolio) -> float:
    """Largest factor value keeping every conditional death probability <= 1.

    Each factor is truncated at c = min_i (1 - q_i w_{i,0}) / (q_i (1 - w_{i,0}))
    over heads with non-idiosyncratic intensity; then
    q_i (w_{i,0} + sum_k w_{i,k} c) <= 1 for every head.
    """
    bound = np.inf
    for h in portfolio:
        non_idio = h.death_prob * (1.0 - h.weights[0])
        if non_idio > 0.0:
            bound = min(bound, (1.0 - h.death_prob * h.weights[0]) / non_idio)
    return bound


def _draw_truncated_factors(
    rng: np.random.Generator, shape_r: np.ndarray, scale: np.ndarray, bound: float, n: int
) -> np.ndarray:
    """Rejection sampling of gamma factors conditioned on Lambda <= bound."""
    K = shape_r.size
    out = rng.gamma(shape_r, scale, size=(n, K))
    if not np.isfinite(bound):
        return out
    accept_prob = special.gammainc(shape_r, bound / scale).min()
    if accept_prob < 1e-6:
        raise NumericalError(
            f"factor truncation at {bound:.4g} has acceptance probability {accept_prob:.2e}"
        )
    for _ in range(_MAX_REJECTION_ROUNDS):
        mask = out > bound
        if not mask.any():
            return out
        idx = np.argwhere(mask)
        out[idx[:, 0], idx[:, 1]] = rng.gamma(shape_r[idx[:, 1]], scale[idx[:, 1]])
    raise NumericalError("truncated gamma rejection sampling did not converge")


def _severity_totals(
    rng: np.random.Generator, counts: np.ndarray, atoms: np.ndarray, probs: np.ndarray
) -> np.ndarray:
    """Total lattice index of `counts[s]` i.i.d. severity draws per simulation."""
    if atoms.size == 1:
        return counts * atoms[0]
    draws = rng.multinomial(counts, probs)
    return draws @ atoms


def _conditional_probs(q, w, lam):
    """Conditional death probabilities q_i (w_{i,0} + sum_k w_{i,k} L_k).

    ``lam`` has shape (n, K); result (n, len(q)).
    """
    base = q * w[:, 0]
    if w.shape[1] > 1:
        return base[None, :] + lam @ (w[:, 1:] * q[:, None]).T
    return np.broadcast_to(base, (lam.shape[0], q.size)).copy()


def simulate_bernoulli(
    portfolio: Portfolio, rf: list[RiskFactorSpec], cfg: SimConfig
) -> LossDistribution:
    """Empirical law of S under the (mixed) Bernoulli model.

    Raises if an untruncated factor draw pushes some head's conditional
    death probability above one, naming the offending cell.
    """
    holders = list(portfolio)
    if not holders:
        return LossDistribution.point(0.0)
    unit = holders[0].payment.unit
    K = portfolio.n_causes - 1
    if len(rf) != K:
        raise DataError(f"expected {K} risk factors, got {len(rf)}")
    shape_r = np.array([1.0 / spec.variance for spec in sorted(rf, key=lambda s: s.k)])
    scale = np.array([spec.variance for spec in sorted(rf, key=lambda s: s.k)])
    bound = _factor_bound(portfolio) if cfg.truncate_factors else np.inf

    q = np.array([h.death_prob for h in holders])
    w = np.stack([h.weights for h in holders])
    mult = np.array([h.multiplicity for h in holders])
    sev = [
        (np.array(sorted(h.payment.pmf)), np.array([h.payment.pmf[k] for k in sorted(h.payment.pmf)]))
        for h in holders
    ]

    chunk = _CHUNK_INDIVIDUAL if cfg.method == "individual" else _CHUNK
    counts_hist = np.zeros(1, dtype=np.int64)
    n_done = 0
    stream = 0
    while n_done < cfg.n_sims:
        n = min(chunk, cfg.n_sims - n_done)
        rng = _chunk_rng(cfg.seed, stream)
        lam = (
            _draw_truncated_factors(rng, shape_r, scale, bound, n)
            if K
            else np.zeros((n, 0))
        )
        probs = _conditional_probs(q, w, lam)
        if np.any(probs > 1.0 + 1e-12):
            sim, hi = np.argwhere(probs > 1.0 + 1e-12)[0]
            raise DataError(
                f"conditional death probability {probs[sim, hi]:.4f} > 1 for "
                f"policyholder {holders[hi].id}; enable factor truncation"
            )
        probs = np.minimum(probs, 1.0)
        totals = np.zeros(n, dtype=np.int64)
        for g, h in enumerate(holders):
            if cfg.method == "individual":
                deaths = (rng.random((n, h.multiplicity)) < probs[:, g : g + 1]).sum(axis=1)
            else:
                deaths = rng.binomial(mult[g], probs[:, g])
            atoms, aprobs = sev[g]
            totals += _severity_totals(rng, deaths, atoms, aprobs)
        counts = np.bincount(totals)
        if counts.size > counts_hist.size:
            counts_hist = np.pad(counts_hist, (0, counts.size - counts_hist.size))
        counts_hist[: counts.size] += counts
        n_done += n
        stream += 1
    return LossDistribution(unit=unit, pmf=counts_hist / cfg.n_sims)


def simulate_poisson_model(
    portfolio: Portfolio, rf: list[RiskFactorSpec], cfg: SimConfig
) -> LossDistribution:
    """Empirical law of S under the mixed-Poisson model.

    Same model as the Panjer engine; the TV distance between this and the
    exact output vanishes as n_sims grows.  Counts within a cell are drawn
    as one Poisson per cause (exact by Poisson additivity).
    """
    holders = list(portfolio)
    if not holders:
        return LossDistribution.point(0.0)
    unit = holders[0].payment.unit
    K = portfolio.n_causes - 1
    if len(rf) != K:
        raise DataError(f"expected {K} risk factors, got {len(rf)}")
    shape_r = np.array([1.0 / spec.variance for spec in sorted(rf, key=lambda s: s.k)])
    scale = np.array([spec.variance for spec in sorted(rf, key=lambda s: s.k)])

    q = np.array([h.death_prob for h in holders])
    w = np.stack([h.weights for h in holders])
    mult = np.array([h.multiplicity for h in holders])
    # Cell-level intensity per cause: mult * q * w.
    intens = mult[:, None] * q[:, None] * w
    sev = [
        (np.array(sorted(h.payment.pmf)), np.array([h.payment.pmf[k] for k in sorted(h.payment.pmf)]))
        for h in holders
    ]

    counts_hist = np.zeros(1, dtype=np.int64)
    n_done = 0
    stream = 0
    while n_done < cfg.n_sims:
        n = min(_CHUNK, cfg.n_sims - n_done)
        rng = _chunk_rng(cfg.seed, stream)
        lam = rng.gamma(shape_r, scale, size=(n, K)) if K else np.zeros((n, 0))
        totals = np.zeros(n, dtype=np.int64)
        for g in range(len(holders)):
            rate = np.full(n, intens[g, 0])
            if K:
                rate = rate + lam @ intens[g, 1:]
            deaths = rng.poisson(rate)
            atoms, aprobs = sev[g]
            totals += _severity_totals(rng, deaths, atoms, aprobs)
        counts = np.bincount(totals)
        if counts.size > counts_hist.size:
            counts_hist = np.pad(counts_hist, (0, counts.size - counts_hist.size))
        counts_hist[: counts.size] += counts
        n_done += n
        stream += 1
    return LossDistribution(unit=unit, pmf=counts_hist / cfg.n_sims)
