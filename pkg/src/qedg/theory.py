"""Query complexity under noisy hard-label feedback.

With a clean active learner needing ``q`` queries and an oracle whose
answers are wrong with probability at most ``phi < 1/2``, asking every
point ``R = 8 / (1 - 2 phi)^2 * ln(q / delta)`` times and taking a
majority vote needs ``Q = R * q`` queries in total.

:func:`validate_theorem` checks the guarantee empirically on thresholds
over [0, 1], learned by binary search.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .oracle import QueryLedger


class PreconditionViolated(ValueError):
    pass


def _check(phi_max: float, q: float, delta: float) -> None:
    if not 0.0 <= phi_max < 0.5:
        raise PreconditionViolated(f"phi_max must lie in [0, 0.5), got {phi_max}")
    if q < 1:
        raise PreconditionViolated(f"q must be >= 1, got {q}")
    if not 0.0 < delta < 1.0:
        raise PreconditionViolated(f"delta must lie in (0, 1), got {delta}")


def repeat_factor(phi_max: float, q: float, delta: float) -> float:
    """Unrounded per-point repeat count."""
    _check(phi_max, q, delta)
    return 8.0 / (1.0 - 2.0 * phi_max) ** 2 * math.log(q / delta)


def query_complexity_bound(phi_max: float, q: float, delta: float) -> float:
    _check(phi_max, q, delta)
    return 8.0 / (1.0 - 2.0 * phi_max) ** 2 * q * math.log(q / delta)


def repeat_count(phi_max: float, q: float, delta: float) -> int:
    """Smallest integer >= the repeat factor, and at least 1."""
    return max(1, math.ceil(repeat_factor(phi_max, q, delta)))


def chernoff_failure_bound(repeats: int, phi: float) -> float:
    """Upper bound on P(majority of ``repeats`` answers is wrong)."""
    return math.exp(-repeats / 2.0 * (phi - 0.5) ** 2)


def majority_vote_label(responses) -> int:
    """Most frequent label; ties go to the lowest label."""
    labels = np.asarray(responses, dtype=np.int64).reshape(1, -1)
    if labels.size == 0:
        raise ValueError("majority vote of no responses")
    if labels.min() < 0:
        raise ValueError("labels must be nonnegative")
    return int(kernels.majority_vote_rows(labels, int(labels.max()) + 1)[0])


def binary_search_queries(epsilon: float) -> int:
    """Clean query complexity of bisection on [0, 1] to precision epsilon."""
    if not 0.0 < epsilon < 1.0:
        raise PreconditionViolated(f"epsilon must lie in (0, 1), got {epsilon}")
    return max(1, math.ceil(math.log2(1.0 / epsilon)))


@dataclass
class TheoryReport:
    phi: float
    epsilon: float
    delta: float
    q: int
    R: int
    Q_bound: float
    trials: int
    success_rate: float
    mean_queries_used: float
    max_queries_used: int
    guarantee: float

    def to_dict(self) -> dict:
        return asdict(self)


def validate_theorem(phi: float, epsilon: float, delta: float, trials: int, seed: int = 0) -> TheoryReport:
    """Noisy binary search for a uniformly drawn threshold, repeated ``trials`` times.

    Each probe is answered ``R`` times by an oracle that flips the true bit
    with probability ``phi``; the majority decides which half to keep.  A
    trial succeeds when the final midpoint is within ``epsilon`` of the true
    threshold (the disagreement mass of two thresholds under the uniform
    distribution).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    q = binary_search_queries(epsilon)
    r = repeat_count(phi, q, delta)
    bound = query_complexity_bound(phi, q, delta)
    rng = np.random.default_rng(seed)
    thetas = rng.uniform(0.0, 1.0, size=trials)
    flips = rng.random((trials, q, r)) < phi
    ledger = QueryLedger()
    estimates = kernels.noisy_threshold_search(thetas, flips)
    per_trial = q * r
    ledger.charge(per_trial * trials)
    errors = np.abs(estimates - thetas)
    return TheoryReport(
        phi=phi,
        epsilon=epsilon,
        delta=delta,
        q=q,
        R=r,
        Q_bound=bound,
        trials=trials,
        success_rate=float((errors <= epsilon).mean()),
        mean_queries_used=ledger.count / trials,
        max_queries_used=per_trial,
        guarantee=1.0 - 2.0 * delta,
    )
