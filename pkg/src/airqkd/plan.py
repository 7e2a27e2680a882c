"""Frozen-vector optimization and the pre-shared plan file.

A plan fixes the channel ranking ``w`` and the cumulative disclosure sizes
``q_1 < ... < q_R``: round ``i`` discloses ``U[w[q_{i-1}:q_i]]``.
"""

from __future__ import annotations

import base64
import hashlib
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import isotonic_regression

from .analytics import RoundModel, binary_entropy, crc_failure_bound, efficiency
from .construction import DEGRADING, ErrorProfile, PopulationProfile, construct_profile
from .crc import crc_tag
from .decoder import DecoderConfig, decode_fails
from .harness import rand_pair
from .polar import new_syndrome_string, polar_transform

PLAN_FORMAT_VERSION = 1
EXHAUSTIVE_LIMIT = 1_000_000


class PlanInfeasible(ValueError):
    pass


# -- Monte-Carlo failure measurement -----------------------------------------


@dataclass(frozen=True)
class MeasureConfig:
    """How decoding failure probabilities are measured.

    ``max_failures`` stops a sweep point early once that many failures are
    seen (the estimate is then failures / trials run). ``carry_forward``
    reuses trials that already decoded at a smaller disclosure instead of
    decoding them again. ``None`` / ``False`` give the plain fixed-t count.
    """

    t: int = 10_000
    root_seed: int = 0
    list_size: int = 16
    crc_len: int = 64
    max_failures: int | None = 100
    carry_forward: bool = True
    workers: int = 1
    chunk: int = 256


def _trial_fails(n, e_mu, w_head, j, root_seed, list_size, crc_len) -> bool:
    k_a, k_b = rand_pair(n, e_mu, (root_seed, j))
    if e_mu == 0.0:
        return False
    u = polar_transform(k_a)
    sd = new_syndrome_string(n)
    sd[w_head] = u[w_head]
    cfg = DecoderConfig(e_mu=e_mu, list_size=list_size, crc_len=crc_len)
    return decode_fails(k_b, sd, u, cfg, crc_tag(u, crc_len))


def _chunk_fails(args):
    n, e_mu, w_head, idx, root_seed, L, d = args
    return [_trial_fails(n, e_mu, w_head, int(j), root_seed, L, d) for j in idx]


@dataclass
class Measurement:
    alpha: int
    failures: int
    trials: int

    @property
    def p(self) -> float:
        return self.failures / self.trials


class FailureMeter:
    """Measures decoding failure at growing disclosure over one trial pool.

    Trial ``j`` always uses the key pair seeded by ``(root_seed, j)``, so the
    result does not depend on the worker count.
    """

    def __init__(self, n: int, e_mu: float, w, mc: MeasureConfig):
        self.n = n
        self.e_mu = float(e_mu)
        self.w = np.asarray(w, dtype=np.int64)
        self.mc = mc
        self.known_ok = np.zeros(mc.t, dtype=bool)
        self._pool = None

    def _evaluate(self, alpha, idx):
        if idx.size == 0:
            return np.zeros(0, dtype=bool)
        head = self.w[:alpha]
        mc = self.mc
        if mc.workers <= 1:
            out = _chunk_fails((self.n, self.e_mu, head, idx, mc.root_seed, mc.list_size, mc.crc_len))
            return np.array(out, dtype=bool)
        if self._pool is None:
            self._pool = ProcessPoolExecutor(mc.workers)
        parts = np.array_split(idx, mc.workers)
        jobs = [(self.n, self.e_mu, head, p, mc.root_seed, mc.list_size, mc.crc_len) for p in parts]
        return np.array(sum(self._pool.map(_chunk_fails, jobs), []), dtype=bool)

    def measure(self, alpha: int) -> Measurement:
        if not 0 <= alpha <= self.n:
            raise ValueError("alpha must lie in [0, n]")
        mc = self.mc
        if alpha == self.n or self.e_mu == 0.0:
            return Measurement(alpha, 0, mc.t)
        failures = 0
        done = 0
        limit = mc.max_failures
        while done < mc.t:
            # chunk boundaries must not depend on the worker count
            stop = min(mc.t, done + mc.chunk)
            idx = np.arange(done, stop)
            if mc.carry_forward:
                todo = idx[~self.known_ok[idx]]
            else:
                todo = idx
            fails = np.zeros(idx.size, dtype=bool)
            fails[todo - done] = self._evaluate(alpha, todo)
            self.known_ok[idx[~fails]] = True
            if limit is not None:
                cum = np.cumsum(fails)
                hit = np.nonzero(failures + cum >= limit)[0]
                if hit.size:
                    k = int(hit[0]) + 1
                    return Measurement(alpha, failures + int(cum[k - 1]), done + k)
            failures += int(fails.sum())
            done = stop
        return Measurement(alpha, failures, done)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def measure_failure_prob(n, e_mu, w, alpha, t, root_seed=0, **kw) -> float:
    """Fraction of ``t`` trials whose decoding misses Alice's codeword."""
    kw.setdefault("max_failures", None)
    kw.setdefault("carry_forward", False)
    meter = FailureMeter(n, e_mu, w, MeasureConfig(t=t, root_seed=root_seed, **kw))
    try:
        return meter.measure(int(alpha)).p
    finally:
        meter.close()


# -- candidate collection ----------------------------------------------------

ZERO_RULE = 3.0  # measured zero over t trials becomes 3/t


@dataclass
class CandidateSet:
    q: list = field(default_factory=list)
    eps: list = field(default_factory=list)  # raw estimates, zero replaced by 3/t
    trials: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    alpha_last: int = 0

    def add(self, q, eps, trials, failures):
        if self.q and q <= self.q[-1]:
            raise ValueError("candidate sizes must increase")
        self.q.append(int(q))
        self.eps.append(float(eps))
        self.trials.append(int(trials))
        self.failures.append(int(failures))

    def __len__(self):
        return len(self.q)

    def monotone_eps(self) -> np.ndarray:
        """Trial-weighted isotonic (non-increasing) fit of the estimates."""
        if not self.eps:
            return np.zeros(0)
        wts = np.maximum(np.asarray(self.trials, dtype=float), 1.0)
        res = isotonic_regression(np.asarray(self.eps), weights=wts, increasing=False)
        return np.clip(res.x, 0.0, 1.0)


def default_beta(n: int) -> int:
    return max(1, math.ceil(n / 400))


def collect_candidates(n, e_mu, w, beta=None, t=10_000, root_seed=0, mc: MeasureConfig | None = None,
                       log=None) -> CandidateSet:
    """Sweep the disclosure size upward until a point shows no failures.

    Starts from ``(ceil(n H2), 1)``; each later entry is a measured point.
    The point that measures zero is kept with ``3/t`` in place of zero.
    """
    beta = default_beta(n) if beta is None else int(beta)
    if beta < 1 or t < 1:
        raise ValueError("beta and t must be positive")
    mc = MeasureConfig(t=t, root_seed=root_seed) if mc is None else mc
    if mc.t != t:
        raise ValueError("t disagrees with the measurement config")
    alpha = math.ceil(n * binary_entropy(e_mu))
    cands = CandidateSet()
    cands.add(alpha, 1.0, 0, 0)
    meter = FailureMeter(n, e_mu, w, mc)
    try:
        while True:
            alpha += beta
            if alpha > n:
                raise RuntimeError(f"disclosure sweep ran past n={n} without a failure-free point")
            m = meter.measure(alpha)
            if log:
                log(f"alpha={alpha} failures={m.failures}/{m.trials}")
            if m.failures == 0:
                cands.add(alpha, ZERO_RULE / m.trials, m.trials, 0)
                cands.alpha_last = alpha
                return cands
            cands.add(alpha, m.p, m.trials, m.failures)
    finally:
        meter.close()


# -- final round and cut optimization ------------------------------------------


def final_round_size(profile: ErrorProfile, alpha_last: int, eps_target: float) -> int:
    """Smallest disclosure whose union bound over the rest is <= eps_target."""
    if not 0.0 < eps_target < 1.0:
        raise ValueError("eps_target must lie in (0, 1)")
    tail = np.cumsum(profile.sorted_p_e[::-1])  # tail[k-1] = sum of the k smallest
    k = int(np.searchsorted(tail, eps_target, side="right"))
    return max(profile.n - k, int(alpha_last))


def _objective(qs, es, c_pow):
    # d-free numerator of the efficiency: sum_i eps_{i-1} c^{i-1} (q_i - q_{i-1})
    total = 0.0
    prev_q = 0
    prev_e = 1.0
    for i, (q, e) in enumerate(zip(qs, es)):
        total += prev_e * c_pow[i] * (q - prev_q)
        prev_q, prev_e = q, e
    return total


def opti_effi(cands: CandidateSet, r_max: int, q_final: int, eps_target: float, n: int, e_mu: float,
              d: int = 64, list_size: int = 16, strategy: str = "auto"):
    """Pick ``r_max - 1`` candidate cuts minimizing the predicted efficiency.

    Returns ``(qs, epss, f)`` with the final ``(q_final, eps_target)`` appended.
    """
    if r_max < 1:
        raise ValueError("r_max must be at least 1")
    eps_all = cands.monotone_eps()
    ok = [j for j in range(len(cands)) if cands.q[j] < q_final]
    k = r_max - 1
    if len(ok) < k:
        raise PlanInfeasible(f"need {k} candidates below q_final={q_final}, have {len(ok)}")
    qv = [cands.q[j] for j in ok]
    # a measured point may undercut the analytic target; keep the sequence monotone
    ev = [max(float(eps_all[j]), eps_target) for j in ok]
    ecrc = crc_failure_bound(list_size, d)
    c_pow = [(1.0 - ecrc) ** i for i in range(r_max)]
    if strategy == "auto":
        strategy = "exhaustive" if math.comb(len(ok), k) <= EXHAUSTIVE_LIMIT else "dp"
    if strategy == "exhaustive":
        best = None
        for combo in itertools.combinations(range(len(ok)), k):
            qs = [qv[j] for j in combo] + [q_final]
            es = [ev[j] for j in combo] + [eps_target]
            val = _objective(qs, es, c_pow)
            if best is None or val < best[0]:
                best = (val, combo)
        chosen = best[1]
    elif strategy == "dp":
        chosen = _dp_cuts(qv, ev, k, q_final, c_pow)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    qs = tuple([qv[j] for j in chosen] + [int(q_final)])
    es = tuple([ev[j] for j in chosen] + [float(eps_target)])
    model = RoundModel(es, qs, ecrc, n, e_mu, d)
    return qs, es, efficiency(model)


def _dp_cuts(qv, ev, k, q_final, c_pow):
    """Stage-wise minimization over ordered candidates, O(k C^2)."""
    if k == 0:
        return ()
    C = len(qv)
    q = np.asarray(qv, dtype=float)
    e = np.asarray(ev, dtype=float)
    INF = math.inf
    # cost[s][j]: best cost of rounds 1..s+1 with round s+1 cut at candidate j
    cost = np.full((k, C), INF)
    back = np.full((k, C), -1, dtype=np.int64)
    cost[0] = q * c_pow[0]
    for s in range(1, k):
        for j in range(s, C):
            prev = cost[s - 1, :j] + e[:j] * c_pow[s] * (q[j] - q[:j])
            i = int(np.argmin(prev))
            cost[s, j] = prev[i]
            back[s, j] = i
    total = cost[k - 1] + e * c_pow[k] * (q_final - q)
    j = int(np.argmin(total))
    out = [j]
    for s in range(k - 1, 0, -1):
        j = int(back[s, j])
        out.append(j)
    return tuple(reversed(out))


# -- the plan ----------------------------------------------------------------


@dataclass(frozen=True)
class FrozenPlan:
    n: int
    e_mu: float
    w: np.ndarray = field(repr=False)
    cuts: tuple = ()
    eps: tuple = ()
    eps_target: float = 1e-8
    crc_len: int = 64
    list_size: int = 16
    eps_source: tuple = ()  # per round: "measured", "rule-of-three" or "bound"
    method: str = DEGRADING
    fidelity: int = 64
    root_seed: int = 0
    beta: int = 0
    t: int = 0
    profile_checksum: str = ""
    candidates: tuple = ()  # (q, eps, trials, failures) rows, for reports

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.int64)
        object.__setattr__(self, "w", w)
        if not np.array_equal(np.sort(w), np.arange(self.n)):
            raise ValueError("w is not a permutation of range(n)")
        cuts = tuple(int(c) for c in self.cuts)
        if not cuts or any(b <= a for a, b in zip(cuts, cuts[1:])) or cuts[0] < 1 or cuts[-1] > self.n:
            raise ValueError("cuts must be strictly increasing within [1, n]")
        if len(self.eps) != len(cuts):
            raise ValueError("one eps per round required")
        object.__setattr__(self, "cuts", cuts)
        object.__setattr__(self, "eps", tuple(float(e) for e in self.eps))

    @property
    def r_max(self) -> int:
        return len(self.cuts)

    def vector(self, i: int) -> np.ndarray:
        """Frozen vector of round ``i`` (1-based)."""
        lo = 0 if i == 1 else self.cuts[i - 2]
        return self.w[lo : self.cuts[i - 1]]

    def vectors(self) -> list:
        return [self.vector(i) for i in range(1, self.r_max + 1)]

    def round_model(self) -> RoundModel:
        return RoundModel.from_decoder(self.eps, self.cuts, self.n, self.e_mu, self.crc_len, self.list_size)

    def decoder_config(self, e_mu: float | None = None) -> DecoderConfig:
        return DecoderConfig(e_mu=self.e_mu if e_mu is None else e_mu, list_size=self.list_size,
                             crc_len=self.crc_len)

    # serialization

    def to_dict(self) -> dict:
        w = self.w
        deltas = np.diff(w, prepend=0).tolist()
        return {
            "format": "airqkd-plan",
            "version": PLAN_FORMAT_VERSION,
            "header": {
                "n": self.n,
                "e_mu": self.e_mu,
                "r_max": self.r_max,
                "eps_target": self.eps_target,
                "d": self.crc_len,
                "L": self.list_size,
                "method": self.method,
                "fidelity": self.fidelity,
                "root_seed": self.root_seed,
                "beta": self.beta,
                "t": self.t,
            },
            "body": {
                "w_delta": deltas,
                "cuts": list(self.cuts),
                "eps": list(self.eps),
                "eps_source": list(self.eps_source),
                "profile_checksum": self.profile_checksum,
                "candidates": [list(r) for r in self.candidates],
            },
        }

    def to_bytes(self) -> bytes:
        """Canonical encoding: sorted keys, no whitespace, shortest float repr."""
        return (json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), allow_nan=False) + "\n").encode()

    def hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FrozenPlan":
        obj = json.loads(data.decode())
        if obj.get("format") != "airqkd-plan":
            raise ValueError("not a plan file")
        if obj.get("version") != PLAN_FORMAT_VERSION:
            raise ValueError(f"unsupported plan format version {obj.get('version')}")
        h, b = obj["header"], obj["body"]
        w = np.cumsum(np.asarray(b["w_delta"], dtype=np.int64))
        plan = cls(
            n=int(h["n"]), e_mu=float(h["e_mu"]), w=w, cuts=tuple(b["cuts"]), eps=tuple(b["eps"]),
            eps_target=float(h["eps_target"]), crc_len=int(h["d"]), list_size=int(h["L"]),
            eps_source=tuple(b["eps_source"]), method=h["method"], fidelity=int(h["fidelity"]),
            root_seed=int(h["root_seed"]), beta=int(h["beta"]), t=int(h["t"]),
            profile_checksum=b["profile_checksum"], candidates=tuple(tuple(r) for r in b["candidates"]),
        )
        if plan.r_max != int(h["r_max"]):
            raise ValueError("header r_max disagrees with the cut list")
        return plan

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FrozenPlan":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def profile_to_bytes(profile: ErrorProfile) -> bytes:
    """Canonical profile cache entry (header plus base64 float64 image)."""
    obj = {
        "format": "airqkd-profile",
        "version": PLAN_FORMAT_VERSION,
        "n": profile.n,
        "e_mu": profile.e_mu,
        "method": profile.method,
        "fidelity": profile.fidelity,
        "checksum": profile.checksum(),
        "p_e": base64.b64encode(profile.p_e.astype("<f8").tobytes()).decode(),
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def population_to_bytes(pop: PopulationProfile) -> bytes:
    obj = {
        "format": "airqkd-population",
        "version": PLAN_FORMAT_VERSION,
        "n": pop.n,
        "e_mu": pop.e_mu,
        "fidelity": pop.fidelity,
        "resolution": pop.resolution,
        "p_e": base64.b64encode(pop.p_e.astype("<f8").tobytes()).decode(),
        "count": base64.b64encode(pop.count.astype("<f8").tobytes()).decode(),
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def population_from_bytes(data: bytes) -> PopulationProfile:
    obj = json.loads(data.decode())
    if obj.get("format") != "airqkd-population":
        raise ValueError("not a population profile file")
    p = np.frombuffer(base64.b64decode(obj["p_e"]), dtype="<f8").astype(np.float64)
    c = np.frombuffer(base64.b64decode(obj["count"]), dtype="<f8").astype(np.float64)
    return PopulationProfile(int(obj["n"]), float(obj["e_mu"]), p, c, int(obj["fidelity"]), int(obj["resolution"]))


def profile_from_bytes(data: bytes) -> ErrorProfile:
    from .construction import descend

    obj = json.loads(data.decode())
    if obj.get("format") != "airqkd-profile":
        raise ValueError("not a profile file")
    p = np.frombuffer(base64.b64decode(obj["p_e"]), dtype="<f8").astype(np.float64)
    _, w = descend(p)
    prof = ErrorProfile(n=int(obj["n"]), e_mu=float(obj["e_mu"]), p_e=p, w=w, method=obj["method"],
                        fidelity=int(obj["fidelity"]))
    if prof.checksum() != obj["checksum"]:
        raise ValueError("profile checksum mismatch")
    return prof


def build_plan(n, e_mu, r_max=4, eps_target=1e-8, beta=None, t=10_000, d=64, L=16, root_seed=0,
               profile: ErrorProfile | None = None, mc: MeasureConfig | None = None, log=None) -> FrozenPlan:
    """Descend, sweep candidates, size the last round, choose cuts, slice ``w``."""
    if not 1 <= r_max:
        raise ValueError("r_max must be at least 1")
    if profile is None:
        profile = construct_profile(n, e_mu)
    if profile.n != n or profile.e_mu != e_mu:
        raise ValueError("profile does not match (n, e_mu)")
    beta = default_beta(n) if beta is None else int(beta)
    mc = mc or MeasureConfig(t=t, root_seed=root_seed, list_size=L, crc_len=d)
    cands = collect_candidates(n, e_mu, profile.w, beta, t, root_seed, mc=mc, log=log)
    q_final = final_round_size(profile, cands.alpha_last, eps_target)
    qs, es, _ = opti_effi(cands, r_max, q_final, eps_target, n, e_mu, d, L)
    kind = {}
    for q, tr, fl in zip(cands.q, cands.trials, cands.failures):
        kind[q] = "initial" if tr == 0 else ("measured" if fl else "rule-of-three")
    src = tuple(kind[q] for q in qs[:-1]) + ("bound",)
    mono = cands.monotone_eps()
    rows = tuple((q, float(e), tr, fl) for q, e, tr, fl in zip(cands.q, mono, cands.trials, cands.failures))
    return FrozenPlan(
        n=n, e_mu=float(e_mu), w=profile.w, cuts=qs, eps=es, eps_target=float(eps_target), crc_len=d,
        list_size=L, eps_source=src, method=profile.method, fidelity=profile.fidelity, root_seed=root_seed,
        beta=beta, t=t, profile_checksum=profile.checksum(), candidates=rows,
    )


# -- analytic plans for very long codes ----------------------------------------


@dataclass(frozen=True)
class AnalyticPlan:
    """Cut sizes chosen with the union bound standing in for measured failure.

    No ranking is stored: a population profile only knows how many channels
    share each error probability, which is all the closed forms need.
    """

    n: int
    e_mu: float
    cuts: tuple
    eps: tuple
    eps_target: float
    crc_len: int
    list_size: int
    beta: int
    candidates: int

    def round_model(self) -> RoundModel:
        return RoundModel.from_decoder(self.eps, self.cuts, self.n, self.e_mu, self.crc_len, self.list_size)

    @property
    def efficiency(self) -> float:
        return efficiency(self.round_model())


def analytic_beta(n: int) -> int:
    # the sweep costs nothing here, so step 100x finer than the measured default
    return max(1, math.ceil(n / 40_000))


def bound_candidates(pop: PopulationProfile, beta: int, eps_target: float) -> CandidateSet:
    """The sweep of ``collect_candidates`` with eps(q) = min(1, union bound).

    Stops at the first point whose bound reaches ``eps_target``, the
    counterpart of a sweep point that measures no failures.
    """
    n = pop.n
    alpha = math.ceil(n * binary_entropy(pop.e_mu))
    cands = CandidateSet()
    cands.add(alpha, 1.0, 0, 0)
    while True:
        alpha = min(n, alpha + beta)
        b = pop.block_error_bound(alpha)
        cands.add(alpha, b, 1, 0)
        if b <= eps_target or alpha == n:
            cands.alpha_last = alpha
            return cands


def build_analytic_plan(pop: PopulationProfile, r_max=4, eps_target=1e-8, beta=None, d=64, L=16) -> AnalyticPlan:
    beta = analytic_beta(pop.n) if beta is None else int(beta)
    cands = bound_candidates(pop, beta, eps_target)
    q_final = pop.final_round_size(cands.alpha_last, eps_target)
    qs, es, _ = opti_effi(cands, r_max, q_final, eps_target, pop.n, pop.e_mu, d, L)
    return AnalyticPlan(pop.n, pop.e_mu, qs, es, float(eps_target), d, L, beta, len(cands))
