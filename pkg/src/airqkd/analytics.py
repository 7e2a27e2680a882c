"""Closed-form performance of the appending reconciliation rounds.

Notation: round ``i`` (1-based) has cumulative disclosure ``q_i`` and decoding
failure probability ``eps_i`` with ``eps_0 = 1``; ``c = 1 - eps_crc`` is the
probability that a wrong decoding is caught by the CRC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def binary_entropy(x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError("binary entropy needs x in [0, 1]")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def crc_failure_bound(list_size: int, crc_len: int) -> float:
    """``min(1, L / 2^d)``; an upper bound used as a point value."""
    return min(1.0, list_size / 2.0**crc_len)


def round_success_delta(eps_prev: float, eps_cur: float) -> float:
    """Probability that decoding first succeeds once disclosure grows."""
    if eps_cur > eps_prev:
        raise ValueError("failure probability cannot grow with more disclosure")
    return eps_prev - eps_cur


@dataclass(frozen=True)
class RoundModel:
    eps: tuple
    q: tuple
    eps_crc: float
    n: int
    e_mu: float
    d: int

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps)
        q = tuple(int(x) for x in self.q)
        if not eps or len(eps) != len(q):
            raise ValueError("eps and q must be non-empty and of equal length")
        if any(not 0.0 <= e <= 1.0 for e in eps):
            raise ValueError("eps values must lie in [0, 1]")
        if any(b > a for a, b in zip(eps, eps[1:])):
            raise ValueError("eps must be non-increasing")
        if any(b <= a for a, b in zip(q, q[1:])):
            raise ValueError("q must be strictly increasing")
        if not 0.0 <= self.eps_crc <= 1.0:
            raise ValueError("eps_crc must lie in [0, 1]")
        object.__setattr__(self, "eps", eps)
        object.__setattr__(self, "q", q)

    @classmethod
    def from_decoder(cls, eps, q, n, e_mu, d=64, list_size=16):
        return cls(tuple(eps), tuple(q), crc_failure_bound(list_size, d), n, e_mu, d)

    @property
    def r_max(self) -> int:
        return len(self.eps)

    def eps_ext(self) -> list:
        """``[eps_0, eps_1, ..., eps_R]`` with ``eps_0 = 1``."""
        return [1.0, *self.eps]

    def cpow(self, i: int) -> float:
        """``(1 - eps_crc)^i`` evaluated in the log domain."""
        if i == 0:
            return 1.0
        if self.eps_crc >= 1.0:
            return 0.0
        return math.exp(i * math.log1p(-self.eps_crc))


@dataclass(frozen=True)
class PerformanceReport:
    p_stop: tuple
    eps_overall: float
    eps_loose: float
    avg_rounds: float
    leakage: tuple
    efficiency: float
    eps_crc_is_bound: bool = True


def stop_probabilities(model: RoundModel) -> np.ndarray:
    e = model.eps_ext()
    R = model.r_max
    p = np.empty(R)
    for i in range(1, R):
        p[i - 1] = e[i - 1] * model.cpow(i - 1) - e[i] * model.cpow(i)
    p[R - 1] = e[R - 1] * model.cpow(R - 1)
    return p


def overall_failure(model: RoundModel):
    """Exact failure probability and the loose bound ``R eps_crc + eps_R``."""
    R = model.r_max
    case1 = model.eps_crc * sum(model.eps[i - 1] * model.cpow(i - 1) for i in range(1, R + 1))
    case2 = model.eps[-1] * model.cpow(R)
    return case1 + case2, R * model.eps_crc + model.eps[-1]


def average_rounds(model: RoundModel) -> float:
    """Mean number of rounds, summed in the split two-series form."""
    e = model.eps_ext()
    R = model.r_max
    a = sum(i * e[i - 1] * model.cpow(i - 1) for i in range(1, R + 1))
    b = sum(i * e[i] * model.cpow(i) for i in range(1, R))
    return a - b


def expected_leakage(model: RoundModel) -> np.ndarray:
    return np.asarray(model.q, dtype=np.float64) * stop_probabilities(model)


def _shannon_bits(model: RoundModel) -> float:
    if model.e_mu <= 0.0:
        raise ValueError("efficiency is undefined for e_mu = 0")
    return model.n * binary_entropy(model.e_mu)


def efficiency(model: RoundModel) -> float:
    """Leaked bits over ``n H2(e_mu)``, summed in the two-series form."""
    e = model.eps_ext()
    R = model.r_max
    q = model.q
    a = sum(q[i - 1] * e[i - 1] * model.cpow(i - 1) for i in range(1, R + 1))
    b = sum(q[i - 1] * e[i] * model.cpow(i) for i in range(1, R))
    return (model.d + a - b) / _shannon_bits(model)


def efficiency_direct(model: RoundModel) -> float:
    return (model.d + float(expected_leakage(model).sum())) / _shannon_bits(model)


def report(model: RoundModel) -> PerformanceReport:
    eps, loose = overall_failure(model)
    return PerformanceReport(
        p_stop=tuple(float(x) for x in stop_probabilities(model)),
        eps_overall=eps,
        eps_loose=loose,
        avg_rounds=average_rounds(model),
        leakage=tuple(float(x) for x in expected_leakage(model)),
        efficiency=efficiency(model),
    )


def simulate_rounds(model: RoundModel, trials: int, rng: np.random.Generator) -> dict:
    """Run the round process as nested Bernoulli events, without any decoder.

    One uniform draw per trial fixes the disclosure level at which decoding
    starts to succeed (``u < eps_i`` means round ``i`` still decodes wrongly);
    every wrong decoding independently slips past the CRC with ``eps_crc``.
    Returns per-trial arrays ``rounds``, ``failed`` and ``leaked``.
    """
    R = model.r_max
    eps = np.asarray(model.eps)
    q = np.asarray(model.q)
    u = rng.random(trials)
    rounds = np.zeros(trials, dtype=np.int64)
    failed = np.zeros(trials, dtype=bool)
    active = np.ones(trials, dtype=bool)
    for i in range(R):
        wrong = active & (u < eps[i])
        collide = wrong & (rng.random(trials) < model.eps_crc)
        stop = active & (~wrong | collide)
        if i == R - 1:
            stop = active.copy()
            failed |= wrong & active
        else:
            failed |= collide
        rounds[stop] = i + 1
        active &= ~stop
    leaked = model.d + q[rounds - 1]
    return {"rounds": rounds, "failed": failed, "leaked": leaked}
