"""
Priors over the object count n and its unary presence code.

A count n is written as z_pres = 1^n 0 (n ones then a zero; the zero is omitted
when n equals the step budget N). With tail masses mu_{>=n} = sum_{k>=n} p(k), the
conditional p(z_pres^i = 1 | previous ones) = mu_{>=i} / mu_{>=(i-1)} reproduces
p(n) exactly, so a sequential presence decision and a count prior are the same thing.
"""

from dataclasses import dataclass
from math import comb
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class CountPrior:
    """Distribution over n in {0..N} plus its tail masses mu_{>=n} for n = 0..N+1."""

    pmf: np.ndarray
    tail: np.ndarray

    @property
    def max_count(self) -> int:
        return len(self.pmf) - 1

    @classmethod
    def from_pmf(cls, pmf: Sequence[float]) -> "CountPrior":
        """
        Build a prior from probabilities p(0..N).

        Raises:
            ValueError: if the masses are negative or do not sum to 1 within 1e-12
        """
        pmf = np.asarray(pmf, dtype=np.float64)
        if pmf.ndim != 1 or len(pmf) == 0:
            raise ValueError("pmf must be a non-empty vector")
        if np.any(pmf < 0) or abs(pmf.sum() - 1.0) > 1e-12:
            raise ValueError(f"pmf must be non-negative and sum to 1 (sum={pmf.sum()!r})")
        tail = np.append(np.cumsum(pmf[::-1])[::-1], 0.0)
        tail[0] = 1.0
        tail = np.minimum.accumulate(tail)
        pmf.setflags(write=False)
        tail.setflags(write=False)
        return cls(pmf=pmf, tail=tail)

    def log_pmf(self, n) -> np.ndarray:
        n = np.asarray(n, dtype=np.int64)
        with np.errstate(divide="ignore"):
            return np.log(self.pmf[n])

    def sample(self, rng: np.random.Generator, size=None):
        return rng.choice(len(self.pmf), size=size, p=self.pmf)


def truncated_geometric(rho: float, max_count: int) -> CountPrior:
    """
    p(n) proportional to (1 - rho) rho^n on {0..N}, renormalized.

    Larger rho means more objects.

    Raises:
        ValueError: if rho is outside (0, 1) or max_count is negative
    """
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    if max_count < 0:
        raise ValueError("max_count must be >= 0")
    weights = (1.0 - rho) * rho ** np.arange(max_count + 1, dtype=np.float64)
    pmf = weights / weights.sum()
    pmf[-1] = 1.0 - pmf[:-1].sum()
    return CountPrior.from_pmf(pmf)


def binomial(max_count: int, alpha: float) -> CountPrior:
    """Count marginal of N independent Bernoulli(alpha) presence slots."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    n = np.arange(max_count + 1)
    pmf = np.array([comb(max_count, int(k)) for k in n], dtype=np.float64)
    pmf *= alpha ** n * (1.0 - alpha) ** (max_count - n)
    pmf[-1] = 1.0 - pmf[:-1].sum()
    return CountPrior.from_pmf(pmf)


def unary_conditional(i: int, prior: CountPrior) -> float:
    """
    p(z_pres^i = 1 | z_pres^{1..i-1} all 1) = mu_{>=i} / mu_{>=(i-1)}.

    Raises:
        ValueError: if i is outside 1..N+1 or the prefix has zero prior mass
    """
    if not 1 <= i <= prior.max_count + 1:
        raise ValueError(f"step index {i} outside 1..{prior.max_count + 1}")
    denominator = prior.tail[i - 1]
    if denominator <= 0.0:
        raise ValueError(f"prefix of {i - 1} ones has zero prior probability")
    return float(prior.tail[i] / denominator)


def validate_unary_code(bits: Sequence[int], max_count: int) -> int:
    """
    Check that bits are 1^n 0 (or 1^N at the budget) and return n.

    Raises:
        ValueError: for any other pattern
    """
    bits = [int(b) for b in bits]
    if any(b not in (0, 1) for b in bits):
        raise ValueError(f"unary code has non-binary entries: {bits}")
    n = 0
    while n < len(bits) and bits[n] == 1:
        n += 1
    if n > max_count:
        raise ValueError(f"code encodes {n} objects, budget is {max_count}")
    if n < max_count:
        if len(bits) != n + 1:
            raise ValueError(f"code {bits} must be {n} ones followed by exactly one zero")
    elif len(bits) != n:
        raise ValueError(f"code {bits} at the budget must be {n} ones without a terminator")
    return n


def unary_code(n: int, max_count: int):
    """The code for n: n ones, then a zero unless n == N."""
    if not 0 <= n <= max_count:
        raise ValueError(f"count {n} outside 0..{max_count}")
    return [1] * n + ([0] if n < max_count else [])


def log_prob_unary(code: Sequence[int], prior: CountPrior) -> float:
    """
    Sum of log step conditionals of a unary code; equals log p(n).

    Raises:
        ValueError: for malformed codes
    """
    validate_unary_code(code, prior.max_count)
    total = 0.0
    for i, bit in enumerate(code, start=1):
        if prior.tail[i - 1] <= 0.0:
            return float("-inf")
        cont = unary_conditional(i, prior)
        with np.errstate(divide="ignore"):
            total += float(np.log(cont if bit == 1 else 1.0 - cont))
    return total
