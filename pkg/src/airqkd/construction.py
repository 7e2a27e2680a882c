"""Synthetic-channel error profiles for BSC(e_mu) and the union bound.

A binary memoryless symmetric channel is held as a mixture of BSC
components ``(pi_j, delta_j)`` with ``delta_j`` in ``[0, 1/2]``. Its ML
decision error is ``sum(pi * delta)``. Channel combining maps mixtures to
mixtures exactly; merging two components into their weighted average is a
degrading operation, so after every step the retained mixture is degraded
with respect to the true synthetic channel and its error is an upper bound.

Index convention matches :mod:`airqkd.decoder`: at every level channel ``j``
spawns ``2j`` (check node, worse) and ``2j+1`` (variable node, better), so
the first polarization step is the most significant bit of the final index.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .polar import as_indices, log2_exact

DEGRADING = "degrading"
MONTE_CARLO = "monte-carlo"
METHODS = (DEGRADING, MONTE_CARLO)

# channels whose Bhattacharyya parameter drops below this are no longer
# expanded; descendants get the bound Z/2 propagated through Z+ = Z^2,
# Z- <= 2Z - Z^2
Z_PRUNE = 1e-30


@dataclass(frozen=True)
class ErrorProfile:
    n: int
    e_mu: float
    p_e: np.ndarray = field(repr=False)
    w: np.ndarray = field(repr=False)
    method: str = DEGRADING
    fidelity: int = 64

    def __post_init__(self):
        p = np.asarray(self.p_e, dtype=np.float64)
        if p.size != self.n:
            raise ValueError("profile length does not match n")
        if p.size and (p.min() < 0 or p.max() > 1 or np.isnan(p).any()):
            raise ValueError("error probabilities must lie in [0, 1]")
        w = np.asarray(self.w, dtype=np.int64)
        if not np.array_equal(np.sort(w), np.arange(self.n)):
            raise ValueError("w is not a permutation")
        if np.any(np.diff(p[w]) > 0):
            raise ValueError("p_e[w] must be non-increasing")
        object.__setattr__(self, "p_e", p)
        object.__setattr__(self, "w", w)

    @property
    def sorted_p_e(self) -> np.ndarray:
        return self.p_e[self.w]

    def checksum(self) -> str:
        """SHA-256 over the little-endian float64 image of ``p_e``."""
        return hashlib.sha256(self.p_e.astype("<f8").tobytes()).hexdigest()


def descend(p_e):
    """Stable descending sort; equal values keep ascending index order."""
    p = np.asarray(p_e, dtype=np.float64)
    w = np.argsort(-p, kind="stable")
    return p[w], w.astype(np.int64)


def block_error_bound(profile: ErrorProfile, frozen) -> float:
    """Union bound over the unfrozen channels, clamped to 1."""
    v = as_indices(frozen, profile.n)
    mask = np.ones(profile.n, dtype=bool)
    mask[v] = False
    return float(min(1.0, profile.p_e[mask].sum()))


# -- degrading quantization ---------------------------------------------------


@njit(cache=True)
def _h2(x):
    if x <= 0.0 or x >= 1.0:
        return 0.0
    return -x * np.log2(x) - (1.0 - x) * np.log2(1.0 - x)


@njit(cache=True)
def _merge_loss(p1, d1, p2, d2):
    # capacity lost by replacing two BSC components with their average
    s = p1 + p2
    if s <= 0.0:
        return 0.0
    dm = (p1 * d1 + p2 * d2) / s
    return s * _h2(dm) - p1 * _h2(d1) - p2 * _h2(d2)


@njit(cache=True)
def _heap_push(hk, hi, hv, size, key, idx, ver):
    j = size
    hk[j] = key
    hi[j] = idx
    hv[j] = ver
    while j > 0:
        par = (j - 1) >> 1
        if hk[par] <= hk[j]:
            break
        hk[par], hk[j] = hk[j], hk[par]
        hi[par], hi[j] = hi[j], hi[par]
        hv[par], hv[j] = hv[j], hv[par]
        j = par
    return size + 1


@njit(cache=True)
def _heap_pop(hk, hi, hv, size):
    key, idx, ver = hk[0], hi[0], hv[0]
    size -= 1
    hk[0], hi[0], hv[0] = hk[size], hi[size], hv[size]
    j = 0
    while True:
        a = 2 * j + 1
        if a >= size:
            break
        b = a + 1
        c = a
        if b < size and hk[b] < hk[a]:
            c = b
        if hk[j] <= hk[c]:
            break
        hk[c], hk[j] = hk[j], hk[c]
        hi[c], hi[j] = hi[j], hi[c]
        hv[c], hv[j] = hv[j], hv[c]
        j = c
    return key, idx, ver, size


@njit(cache=True)
def _quantize(pi, dl, mu, out_pi, out_dl):
    """Greedy adjacent merge (smallest capacity loss first) down to ``mu``.

    Returns the number of components written to ``out_*``.
    """
    order = np.argsort(dl, kind="mergesort")
    k = 0
    p = np.empty(order.size)
    d = np.empty(order.size)
    # drop empty components and fuse exact duplicates
    for t in range(order.size):
        j = order[t]
        if pi[j] <= 0.0:
            continue
        if k > 0 and d[k - 1] == dl[j]:
            p[k - 1] += pi[j]
        else:
            p[k] = pi[j]
            d[k] = dl[j]
            k += 1
    if k <= mu:
        for t in range(k):
            out_pi[t] = p[t]
            out_dl[t] = d[t]
        return k
    nxt = np.empty(k, dtype=np.int64)
    prv = np.empty(k, dtype=np.int64)
    ver = np.zeros(k, dtype=np.int64)
    alive = np.ones(k, dtype=np.bool_)
    for t in range(k):
        nxt[t] = t + 1
        prv[t] = t - 1
    nxt[k - 1] = -1
    cap = 4 * k
    hk = np.empty(cap)
    hi = np.empty(cap, dtype=np.int64)
    hv = np.empty(cap, dtype=np.int64)
    size = 0
    for t in range(k - 1):
        size = _heap_push(hk, hi, hv, size, _merge_loss(p[t], d[t], p[t + 1], d[t + 1]), t, 0)
    live = k
    while live > mu:
        key, a, va, size = _heap_pop(hk, hi, hv, size)
        if not alive[a] or va != ver[a] or nxt[a] < 0:
            continue
        b = nxt[a]
        s = p[a] + p[b]
        d[a] = (p[a] * d[a] + p[b] * d[b]) / s
        p[a] = s
        alive[b] = False
        nxt[a] = nxt[b]
        if nxt[b] >= 0:
            prv[nxt[b]] = a
        live -= 1
        ver[a] += 1
        if nxt[a] >= 0:
            c = nxt[a]
            size = _heap_push(hk, hi, hv, size, _merge_loss(p[a], d[a], p[c], d[c]), a, ver[a])
        if prv[a] >= 0:
            c = prv[a]
            ver[c] += 1
            size = _heap_push(hk, hi, hv, size, _merge_loss(p[c], d[c], p[a], d[a]), c, ver[c])
        if size + 2 >= cap:
            # compact stale entries
            ns = 0
            for t in range(size):
                if alive[hi[t]] and hv[t] == ver[hi[t]] and nxt[hi[t]] >= 0:
                    hk[ns], hi[ns], hv[ns] = hk[t], hi[t], hv[t]
                    ns += 1
            size = 0
            for t in range(ns):
                size = _heap_push(hk, hi, hv, size, hk[t], hi[t], hv[t])
    t = 0
    j = 0
    while j >= 0:
        out_pi[t] = p[j]
        out_dl[t] = d[j]
        t += 1
        j = nxt[j]
    return t


@njit(cache=True)
def _minus(pa, da, ka, mu, out_pi, out_dl):
    npairs = ka * (ka + 1) // 2
    pi = np.empty(npairs)
    dl = np.empty(npairs)
    t = 0
    for i in range(ka):
        for j in range(i, ka):
            w = pa[i] * pa[j]
            if i != j:
                w *= 2.0
            pi[t] = w
            dl[t] = da[i] + da[j] - 2.0 * da[i] * da[j]
            t += 1
    return _quantize(pi, dl, mu, out_pi, out_dl)


@njit(cache=True)
def _plus(pa, da, ka, mu, out_pi, out_dl):
    npairs = ka * (ka + 1) // 2
    pi = np.empty(2 * npairs)
    dl = np.empty(2 * npairs)
    t = 0
    for i in range(ka):
        for j in range(i, ka):
            w = pa[i] * pa[j]
            if i != j:
                w *= 2.0
            a = da[i]
            b = da[j]
            agree = a * b + (1.0 - a) * (1.0 - b)
            disagree = 1.0 - agree
            pi[t] = w * agree
            dl[t] = a * b / agree if agree > 0.0 else 0.0
            t += 1
            pi[t] = w * disagree
            if disagree > 0.0:
                lo = min(a, b)
                hi = max(a, b)
                dl[t] = lo * (1.0 - hi) / disagree
            else:
                dl[t] = 0.0
            t += 1
    return _quantize(pi, dl, mu, out_pi, out_dl)


@njit(cache=True)
def _bhatt(p, d, k):
    z = 0.0
    for t in range(k):
        z += p[t] * 2.0 * np.sqrt(d[t] * (1.0 - d[t]))
    return z


@njit(cache=True)
def _pe(p, d, k):
    s = 0.0
    for t in range(k):
        s += p[t] * d[t]
    return min(s, 0.5)


@njit(cache=True)
def _degrading_kernel(e_mu, m, mu):
    n = 1 << m
    cur_p = np.zeros((1, mu))
    cur_d = np.zeros((1, mu))
    cur_k = np.zeros(1, dtype=np.int64)
    cur_z = np.zeros(1)
    cur_p[0, 0] = 1.0
    cur_d[0, 0] = e_mu
    cur_k[0] = 1
    cur_z[0] = 2.0 * np.sqrt(e_mu * (1.0 - e_mu))
    bp = np.empty(mu)
    bd = np.empty(mu)
    for lev in range(m):
        cnt = 1 << lev
        nxt_p = np.zeros((2 * cnt, mu))
        nxt_d = np.zeros((2 * cnt, mu))
        nxt_k = np.zeros(2 * cnt, dtype=np.int64)
        nxt_z = np.zeros(2 * cnt)
        for j in range(cnt):
            z = cur_z[j]
            if cur_k[j] == 0:
                # pruned: propagate Bhattacharyya bounds only
                nxt_z[2 * j] = min(1.0, 2.0 * z - z * z)
                nxt_z[2 * j + 1] = z * z
                continue
            ka = cur_k[j]
            for s in range(2):
                if s == 0:
                    k = _minus(cur_p[j], cur_d[j], ka, mu, bp, bd)
                else:
                    k = _plus(cur_p[j], cur_d[j], ka, mu, bp, bd)
                c = 2 * j + s
                zc = _bhatt(bp, bd, k)
                nxt_z[c] = zc
                if zc < Z_PRUNE:
                    nxt_k[c] = 0
                else:
                    nxt_k[c] = k
                    for t in range(k):
                        nxt_p[c, t] = bp[t]
                        nxt_d[c, t] = bd[t]
        cur_p, cur_d, cur_k, cur_z = nxt_p, nxt_d, nxt_k, nxt_z
    out = np.empty(n)
    for j in range(n):
        if cur_k[j] == 0:
            out[j] = min(0.5, 0.5 * cur_z[j])
        else:
            out[j] = _pe(cur_p[j], cur_d[j], cur_k[j])
    return out


@njit(cache=True)
def _population_children(rp, rd, rk, rz, mu):
    """Both children of every representative channel (rows 2j and 2j+1)."""
    K = rk.size
    op = np.zeros((2 * K, mu))
    od = np.zeros((2 * K, mu))
    ok = np.zeros(2 * K, dtype=np.int64)
    oz = np.zeros(2 * K)
    oe = np.zeros(2 * K)
    bp = np.empty(mu)
    bd = np.empty(mu)
    for j in range(K):
        z = rz[j]
        if rk[j] == 0:
            oz[2 * j] = min(1.0, 2.0 * z - z * z)
            oz[2 * j + 1] = z * z
            oe[2 * j] = min(0.5, 0.5 * oz[2 * j])
            oe[2 * j + 1] = 0.5 * oz[2 * j + 1]
            continue
        for s in range(2):
            if s == 0:
                k = _minus(rp[j], rd[j], rk[j], mu, bp, bd)
            else:
                k = _plus(rp[j], rd[j], rk[j], mu, bp, bd)
            c = 2 * j + s
            zc = _bhatt(bp, bd, k)
            oz[c] = zc
            if zc < Z_PRUNE:
                oe[c] = min(0.5, 0.5 * zc)
                continue
            ok[c] = k
            oe[c] = _pe(bp, bd, k)
            for t in range(k):
                op[c, t] = bp[t]
                od[c, t] = bd[t]
    return op, od, ok, oz, oe


@dataclass(frozen=True)
class PopulationProfile:
    """Error-probability histogram of all ``n`` synthetic channels.

    ``p_e[j]`` is shared by ``count[j]`` channels. Used where a per-channel
    profile does not fit in memory (n up to 2^30 and beyond); channels are
    not individually addressable, so only rank statistics are available.
    """

    n: int
    e_mu: float
    p_e: np.ndarray = field(repr=False)
    count: np.ndarray = field(repr=False)
    fidelity: int = 32
    resolution: int = 40

    def __post_init__(self):
        order = np.argsort(-self.p_e, kind="stable")
        object.__setattr__(self, "p_e", np.asarray(self.p_e, dtype=np.float64)[order])
        object.__setattr__(self, "count", np.asarray(self.count, dtype=np.float64)[order])
        if self.count.sum() != self.n:
            raise ValueError("multiplicities do not add up to n")

    def tail_sum(self, q) -> np.ndarray:
        """Union bound when the ``q`` worst channels are frozen (not clamped)."""
        q = np.asarray(q, dtype=np.float64)
        cum_n = np.concatenate([[0.0], np.cumsum(self.count)])
        # suffix sums from the small end; total minus head loses tails near 1e-8
        suf = np.concatenate([np.cumsum((self.count * self.p_e)[::-1])[::-1], [0.0]])
        b = np.clip(np.searchsorted(cum_n, q, side="right") - 1, 0, self.p_e.size - 1)
        tail = suf[b + 1] + (cum_n[b + 1] - q) * self.p_e[b]
        return np.where(q >= self.n, 0.0, np.maximum(tail, 0.0))

    def block_error_bound(self, q) -> float:
        return float(min(1.0, self.tail_sum(q)))

    @classmethod
    def from_profile(cls, profile: ErrorProfile) -> "PopulationProfile":
        """One bucket per channel; lets the analytic pipeline run on exact profiles."""
        return cls(profile.n, profile.e_mu, profile.p_e.copy(), np.ones(profile.n), profile.fidelity, 0)

    def final_round_size(self, alpha_last: int, eps_target: float) -> int:
        """Population version of the final-round rule (whole channels only)."""
        lo, hi = 0, self.n
        # smallest q with tail_sum(q) <= eps_target; tail_sum is non-increasing
        while lo < hi:
            mid = (lo + hi) // 2
            if self.tail_sum(mid) <= eps_target:
                hi = mid
            else:
                lo = mid + 1
        return max(lo, int(alpha_last))


def _bucket_key(pe, z, res):
    lp = np.floor(np.log10(np.maximum(pe, 1e-320)) * res).astype(np.int64)
    lz = np.floor(np.log10(np.maximum(z, 1e-320)) * res).astype(np.int64)
    return lp, lz


def population_profile(n: int, e_mu: float, fidelity: int = 32, resolution: int = 40) -> PopulationProfile:
    """Channel-error histogram by propagating bucketed representatives.

    After every polarization step the children are grouped by
    ``(log10 P_e, log10 Z)`` on a grid with ``resolution`` cells per decade;
    each group keeps one representative (the member with the largest P_e,
    then largest Z) and the summed multiplicity. Channels pruned at
    ``Z_PRUNE`` keep only Z, merged by maximum, which stays an upper bound.
    Bucketing with the worst P_e is an approximation, not a strict
    degradation; its effect is checked against ``degrading_profile``.
    """
    m = log2_exact(n)
    if not 0.0 < e_mu < 0.5:
        raise ValueError("e_mu must lie in (0, 0.5)")
    mu = int(fidelity)
    rp = np.zeros((1, mu))
    rd = np.zeros((1, mu))
    rp[0, 0] = 1.0
    rd[0, 0] = e_mu
    rk = np.ones(1, dtype=np.int64)
    rz = np.array([2.0 * np.sqrt(e_mu * (1.0 - e_mu))])
    re = np.array([e_mu])
    cnt = np.ones(1)
    for _ in range(m):
        op, od, ok, oz, oe = _population_children(rp, rd, rk, rz, mu)
        oc = np.repeat(cnt, 2)
        lp, lz = _bucket_key(oe, oz, resolution)
        pruned = (ok == 0).astype(np.int64)
        lp = np.where(pruned == 1, 0, lp)
        # representative first within each group: largest P_e, then largest Z
        order = np.lexsort((-oz, -oe, lz, lp, pruned))
        keys = np.stack([pruned[order], lp[order], lz[order]], axis=1)
        first = np.ones(order.size, dtype=bool)
        first[1:] = np.any(keys[1:] != keys[:-1], axis=1)
        grp = np.cumsum(first) - 1
        reps = order[first]
        cnt = np.bincount(grp, weights=oc[order])
        rp, rd, rk, rz, re = op[reps], od[reps], ok[reps], oz[reps], oe[reps]
        zmax = np.zeros(reps.size)
        np.maximum.at(zmax, grp, oz[order])
        pr = rk == 0
        rz = np.where(pr, zmax, rz)
        re = np.where(pr, np.minimum(0.5, 0.5 * rz), re)
    return PopulationProfile(n=n, e_mu=float(e_mu), p_e=re, count=cnt, fidelity=mu, resolution=resolution)


def degrading_profile(n: int, e_mu: float, fidelity: int = 64) -> np.ndarray:
    m = log2_exact(n)
    if fidelity < 2:
        raise ValueError("fidelity must be at least 2")
    return _degrading_kernel(float(e_mu), m, int(fidelity))


def monte_carlo_profile(n: int, e_mu: float, trials: int, root_seed: int = 0) -> np.ndarray:
    """Per-channel error frequency of genie-aided decisions with exact likelihoods."""
    from .decoder import genie_ml_errors
    from .harness import rand_pair
    from .polar import polar_transform

    acc = np.zeros(n)
    for t in range(trials):
        ka, kb = rand_pair(n, e_mu, (root_seed, t))
        acc += genie_ml_errors(kb, polar_transform(ka), e_mu)
    return acc / float(trials)


def construct_profile(
    n: int, e_mu: float, method: str = DEGRADING, fidelity: int | None = None, root_seed: int = 0
) -> ErrorProfile:
    log2_exact(n)
    if not 0.0 < e_mu < 0.5:
        raise ValueError("e_mu must lie in (0, 0.5)")
    if method == DEGRADING:
        fidelity = 64 if fidelity is None else int(fidelity)
        p = degrading_profile(n, e_mu, fidelity)
    elif method == MONTE_CARLO:
        fidelity = 10_000 if fidelity is None else int(fidelity)
        p = monte_carlo_profile(n, e_mu, fidelity, root_seed)
    else:
        raise ValueError(f"unknown construction method {method!r}")
    _, w = descend(p)
    return ErrorProfile(n=n, e_mu=float(e_mu), p_e=p, w=w, method=method, fidelity=fidelity)
