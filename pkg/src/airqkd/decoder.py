"""SC and CRC-aided SCL decoding of Bob's sifted key against the syndrome string.

Bob's key is treated as Alice's key seen through a BSC(e_mu). Since
``k = U . G`` (the transform is its own inverse), this is an ordinary polar
decoding problem for the input vector ``U`` with the disclosed cells of the
syndrome string acting as frozen bits with known values.

Internally the channel LLRs are bit-reversal permuted once, after which the
decoder walks the plain ``F^{(x)m}`` tree: left child by the f-rule, right
child by the g-rule, partial sums combined on the way up. Per-path arrays are
held in per-depth pools with reference counts; every write to a node array
overwrites it completely, so a cloned path only needs a fresh slot, never a
copy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .crc import crc_args, crc_of_bits_core
from .polar import UNDISCLOSED, as_bits, bit_reversal_perm, log2_exact

_P_FLOOR = 1e-15
_NO_TAG = np.uint64(0)


@dataclass(frozen=True)
class DecoderConfig:
    e_mu: float
    list_size: int = 16
    crc_len: int = 64
    exact: bool = False  # exact log-domain f-rule and path penalty instead of min-sum

    def __post_init__(self):
        if self.list_size < 1:
            raise ValueError("list size must be >= 1")
        if not 0.0 <= self.e_mu < 0.5:
            raise ValueError("e_mu must lie in [0, 0.5)")

    @property
    def eps_crc(self) -> float:
        return min(1.0, self.list_size / 2.0**self.crc_len)


@dataclass
class DecodeResult:
    codeword: np.ndarray
    crc_matched: bool
    path_metric: float


def channel_llr(y: np.ndarray, e_mu: float, exact: bool = False) -> np.ndarray:
    """LLRs of Bob's bits in decoder (bit-reversed) order.

    Min-sum decoding is invariant to scaling the LLRs, so unless ``exact`` is
    set the channel LLR is taken as +-1; every intermediate value is then an
    integer and ties are resolved exactly.
    """
    if exact:
        p = max(float(e_mu), _P_FLOOR)
        c = math.log((1.0 - p) / p)
    else:
        c = 1.0
    llr = np.where(y == 0, c, -c)
    return llr[bit_reversal_perm(log2_exact(y.size))]


@njit(cache=True, inline="always")
def _fmin(a, b, exact):
    aa = abs(a)
    bb = abs(b)
    s = aa if aa < bb else bb
    if (a < 0.0) != (b < 0.0):
        s = -s
    if exact:
        s += math.log1p(math.exp(-abs(a + b))) - math.log1p(math.exp(-abs(a - b)))
    return s


@njit(cache=True, inline="always")
def _penalty(lam, bit, exact):
    # cost of deciding `bit` given LLR lam = log P(0)/P(1)
    if exact:
        x = lam if bit == 0 else -lam
        if x > 30.0:
            return math.exp(-x)
        return math.log1p(math.exp(-x))
    if bit == 0:
        return -lam if lam < 0.0 else 0.0
    return lam if lam > 0.0 else 0.0


@njit(cache=True)
def _trailing_zeros(i):
    c = 0
    while (i & 1) == 0:
        i >>= 1
        c += 1
    return c


@njit(cache=True)
def _take_slot(ptr, rc, l, d, L):
    s = ptr[l, d]
    if rc[d, s] > 1:
        rc[d, s] -= 1
        for s2 in range(L):
            if rc[d, s2] == 0:
                rc[d, s2] = 1
                ptr[l, d] = s2
                return s2
    return s


@njit(cache=True)
def _kron_inplace(a):
    n = a.size
    h = n >> 1
    while h >= 1:
        for start in range(0, n, 2 * h):
            for j in range(start, start + h):
                a[j] ^= a[j + h]
        h >>= 1


@njit(cache=True)
def _run_depths(frozen, m, want_frozen):
    """Depth of the largest aligned subtree starting at each leaf whose leaves
    are all frozen (``want_frozen``) or all free; -1 where the leaf itself
    does not qualify."""
    n = frozen.size
    out = np.full(n, -1, np.int64)
    cnt = np.zeros(n + 1, np.int64)
    for i in range(n):
        hit = frozen[i] >= 0 if want_frozen else frozen[i] < 0
        cnt[i + 1] = cnt[i] + (1 if hit else 0)
    for d in range(m + 1):
        s = n >> d
        for i in range(0, n, s):
            if out[i] < 0 and cnt[i + s] - cnt[i] == s:
                out[i] = d
    return out


@njit(cache=True)
def _insert_candidate(cand_pm, cand_id, nc, v, cid):
    p = nc
    while p > 0 and cand_pm[p - 1] > v:
        cand_pm[p] = cand_pm[p - 1]
        cand_id[p] = cand_id[p - 1]
        p -= 1
    cand_pm[p] = v
    cand_id[p] = cid


@njit(cache=True)
def scl_kernel(
    llr0, frozen, L, exact, truth, genie, use_crc, tag, table, width, init, reflect, xorout
):
    """Run SCL and return ``(u, crc_matched, metric, truth_survived)``.

    ``frozen[i]`` is -1 for free positions, else the forced bit. With
    ``genie`` set, decoding stops as soon as no surviving path agrees with
    ``truth``; the returned ``u`` is then meaningless and ``truth_survived``
    is False.

    In min-sum mode whole frozen subtrees and whole free subtrees are handled
    at once. For a fully determined subtree the min-sum metric increment is
    the sum of |LLR| over positions whose hard decision disagrees with the
    subtree codeword. In a free subtree every increment is non-negative and
    the hard decision costs nothing, so forking on the L-1 least reliable
    positions yields the same L best paths as going leaf by leaf.
    """
    n = llr0.size
    m = 0
    while (1 << m) < n:
        m += 1

    size = np.zeros(m + 1, np.int64)
    base = np.zeros(m + 1, np.int64)
    tot = 0
    for d in range(m + 1):
        size[d] = n >> d
        if d >= 1:
            base[d] = tot
            tot += L * size[d]
    poolA = np.empty(max(tot, 1), np.float64)
    poolB = np.empty(max(tot, 1), np.uint8)
    pA = np.zeros((L, m + 1), np.int64)
    pB = np.zeros((L, m + 1), np.int64)
    rcA = np.zeros((m + 1, L), np.int64)
    rcB = np.zeros((m + 1, L), np.int64)
    for d in range(m + 1):
        rcA[d, 0] = 1
        rcB[d, 0] = 1

    active = np.zeros(L, np.bool_)
    active[0] = True
    pm = np.zeros(L, np.float64)
    ok = np.zeros(L, np.bool_)
    ok[0] = True
    tmp1 = np.empty(n, np.uint8)
    tmp2 = np.empty(n, np.uint8)
    node_c = np.empty(n, np.uint8)
    truth_c = np.empty(n, np.uint8)
    xs = np.zeros((L, n), np.uint8)

    cand_pm = np.empty(2 * L, np.float64)
    cand_id = np.empty(2 * L, np.int64)
    keep0 = np.zeros(L, np.bool_)
    keep1 = np.zeros(L, np.bool_)
    snap = np.empty(L, np.int64)
    kmax = L - 1 if L > 1 else 1
    kpos = np.zeros((L, kmax), np.int64)
    kabs = np.zeros((L, kmax), np.float64)
    flips = np.zeros((L, kmax), np.int64)
    nflip = np.zeros(L, np.int64)

    # subtree shortcuts rely on min-sum identities; with L == 1 free leaves
    # stay leaf-wise so SC resolves zero LLRs exactly like the genie pass
    r0 = np.full(n, -1, np.int64)
    r1 = np.full(n, -1, np.int64)
    for i in range(n):
        if frozen[i] >= 0:
            r0[i] = m
        else:
            r1[i] = m
    if not exact:
        r0 = _run_depths(frozen, m, True)
        if L > 1:
            r1 = _run_depths(frozen, m, False)

    i = 0
    while i < n:
        dstart = 0 if i == 0 else m - 1 - _trailing_zeros(i)
        is_frozen = r0[i] >= 0
        dv = r0[i] if is_frozen else r1[i]
        sv = size[dv]
        # descend to depth dv for every active path
        for l in range(L):
            if not active[l]:
                continue
            for d in range(dstart, dv):
                h = size[d + 1]
                s = _take_slot(pA, rcA, l, d + 1, L)
                o2 = base[d + 1] + s * h
                if d == 0:
                    if i > 0:
                        ob = base[1] + pB[l, 1] * h
                        for k in range(h):
                            if poolB[ob + k]:
                                poolA[o2 + k] = llr0[k + h] - llr0[k]
                            else:
                                poolA[o2 + k] = llr0[k + h] + llr0[k]
                    else:
                        for k in range(h):
                            poolA[o2 + k] = _fmin(llr0[k], llr0[k + h], exact)
                else:
                    o = base[d] + pA[l, d] * size[d]
                    if d == dstart and i > 0:
                        ob = base[d + 1] + pB[l, d + 1] * h
                        for k in range(h):
                            if poolB[ob + k]:
                                poolA[o2 + k] = poolA[o + k + h] - poolA[o + k]
                            else:
                                poolA[o2 + k] = poolA[o + k + h] + poolA[o + k]
                    else:
                        for k in range(h):
                            poolA[o2 + k] = _fmin(poolA[o + k], poolA[o + k + h], exact)

        if genie:
            for k in range(sv):
                truth_c[k] = truth[i + k]
            _kron_inplace(truth_c[:sv])

        if is_frozen:
            for k in range(sv):
                node_c[k] = frozen[i + k]
            _kron_inplace(node_c[:sv])
            truth_ok = True
            if genie:
                for k in range(sv):
                    if truth_c[k] != node_c[k]:
                        truth_ok = False
                        break
            for l in range(L):
                if not active[l]:
                    continue
                acc = 0.0
                if dv == 0:
                    for k in range(sv):
                        acc += _penalty(llr0[k], node_c[k], exact)
                else:
                    o = base[dv] + pA[l, dv] * sv
                    for k in range(sv):
                        acc += _penalty(poolA[o + k], node_c[k], exact)
                pm[l] += acc
                if not truth_ok:
                    ok[l] = False
        else:
            K = L - 1 if L - 1 < sv else sv
            # K least reliable positions of each path, ascending |llr|
            for l in range(L):
                if not active[l]:
                    continue
                nflip[l] = 0
                o = 0 if dv == 0 else base[dv] + pA[l, dv] * sv
                if exact:
                    # the hard decision is not free here; flipping adds |llr| on top
                    for k in range(sv):
                        a = llr0[k] if dv == 0 else poolA[o + k]
                        pm[l] += _penalty(abs(a), 0, exact)
                cnt = 0
                for k in range(sv):
                    a = abs(llr0[k]) if dv == 0 else abs(poolA[o + k])
                    if cnt == K and (K == 0 or a >= kabs[l, K - 1]):
                        continue
                    p = cnt if cnt < K else K - 1
                    while p > 0 and kabs[l, p - 1] > a:
                        kabs[l, p] = kabs[l, p - 1]
                        kpos[l, p] = kpos[l, p - 1]
                        p -= 1
                    kabs[l, p] = a
                    kpos[l, p] = k
                    if cnt < K:
                        cnt += 1
            for st in range(K):
                nc = 0
                for l in range(L):
                    keep0[l] = False
                    keep1[l] = False
                    if active[l]:
                        _insert_candidate(cand_pm, cand_id, nc, pm[l], 2 * l)
                        nc += 1
                        _insert_candidate(cand_pm, cand_id, nc, pm[l] + kabs[l, st], 2 * l + 1)
                        nc += 1
                keepn = nc if nc < L else L
                for r in range(keepn):
                    c = cand_id[r]
                    if c & 1:
                        keep1[c >> 1] = True
                    else:
                        keep0[c >> 1] = True
                for l in range(L):
                    if active[l] and not keep0[l] and not keep1[l]:
                        active[l] = False
                        for d in range(m + 1):
                            rcA[d, pA[l, d]] -= 1
                            rcB[d, pB[l, d]] -= 1
                ns = 0
                for l in range(L):
                    if active[l]:
                        snap[ns] = l
                        ns += 1
                for q in range(ns):
                    l = snap[q]
                    if keep0[l] and keep1[l]:
                        nl = -1
                        for c in range(L):
                            if not active[c]:
                                nl = c
                                break
                        active[nl] = True
                        for d in range(m + 1):
                            pA[nl, d] = pA[l, d]
                            pB[nl, d] = pB[l, d]
                            rcA[d, pA[l, d]] += 1
                            rcB[d, pB[l, d]] += 1
                        for k in range(K):
                            kpos[nl, k] = kpos[l, k]
                            kabs[nl, k] = kabs[l, k]
                        for k in range(nflip[l]):
                            flips[nl, k] = flips[l, k]
                        nflip[nl] = nflip[l] + 1
                        flips[nl, nflip[l]] = kpos[l, st]
                        pm[nl] = pm[l] + kabs[l, st]
                        ok[nl] = ok[l]
                    elif keep1[l]:
                        flips[l, nflip[l]] = kpos[l, st]
                        nflip[l] += 1
                        pm[l] += kabs[l, st]

        # propagate partial sums upwards from the finished node at depth dv
        for l in range(L):
            if not active[l]:
                continue
            cur = tmp1
            other = tmp2
            clen = sv
            if is_frozen:
                for k in range(clen):
                    cur[k] = node_c[k]
            else:
                o = 0 if dv == 0 else base[dv] + pA[l, dv] * sv
                for k in range(clen):
                    a = llr0[k] if dv == 0 else poolA[o + k]
                    cur[k] = 1 if a < 0.0 else 0
                for k in range(nflip[l]):
                    cur[flips[l, k]] ^= 1
                if genie and ok[l]:
                    for k in range(clen):
                        if cur[k] != truth_c[k]:
                            ok[l] = False
                            break
            d = dv
            while True:
                if d == 0:
                    for k in range(n):
                        xs[l, k] = cur[k]
                    break
                j = i >> (m - d)
                if (j & 1) == 0:
                    s = _take_slot(pB, rcB, l, d, L)
                    ob = base[d] + s * clen
                    for k in range(clen):
                        poolB[ob + k] = cur[k]
                    break
                ob = base[d] + pB[l, d] * clen
                for k in range(clen):
                    other[k] = poolB[ob + k] ^ cur[k]
                    other[clen + k] = cur[k]
                clen *= 2
                t = cur
                cur = other
                other = t
                d -= 1

        if genie:
            alive = False
            for l in range(L):
                if active[l] and ok[l]:
                    alive = True
                    break
            if not alive:
                return np.zeros(n, np.uint8), False, 0.0, False
        i += sv

    # rank survivors by metric, check CRC in that order
    na = 0
    for l in range(L):
        if active[l]:
            snap[na] = l
            na += 1
    ids = snap[:na].copy()
    order = np.argsort(pm[ids], kind="mergesort")
    scratch = np.empty((n + 7) >> 3, np.uint8)
    u = np.empty(n, np.uint8)
    best_l = ids[order[0]]
    survived = False
    if genie:
        for l in ids:
            if ok[l]:
                survived = True
    if use_crc:
        for r in range(na):
            l = ids[order[r]]
            for k in range(n):
                u[k] = xs[l, k]
            _kron_inplace(u)
            if crc_of_bits_core(u, scratch, table, width, init, reflect, xorout) == tag:
                return u, True, pm[l], survived
    for k in range(n):
        u[k] = xs[best_l, k]
    _kron_inplace(u)
    return u, False, pm[best_l], survived


def _frozen_from_sd(sd: np.ndarray, n: int) -> np.ndarray:
    sd = np.asarray(sd, dtype=np.int8)
    if sd.size != n:
        raise ValueError(f"syndrome string has {sd.size} cells, key has {n}")
    if np.any((sd != UNDISCLOSED) & (sd != 0) & (sd != 1)):
        raise ValueError("syndrome cells must be -1, 0 or 1")
    return sd


_EMPTY_TRUTH = np.zeros(1, np.uint8)


def _run(y, sd, e_mu, L, exact, tag, crc_len, truth=None):
    y = as_bits(y)
    n = y.size
    log2_exact(n)
    frozen = _frozen_from_sd(sd, n)
    llr = channel_llr(y, e_mu, exact)
    genie = truth is not None
    tr = as_bits(truth, n) if genie else np.zeros(n, np.uint8)
    use_crc = tag is not None
    table, width, init, reflect, xorout = crc_args(crc_len)
    t = np.uint64(tag) if use_crc else _NO_TAG
    return scl_kernel(
        llr, frozen, int(L), bool(exact), tr, genie, use_crc, t, table, width, init, reflect, xorout
    )


def decode_llr(llr, sd, list_size: int, exact: bool = False, tag: int | None = None,
               crc_len: int = 64) -> DecodeResult:
    """SCL on LLRs already in decoder order (see :func:`channel_llr`)."""
    llr = np.ascontiguousarray(llr, dtype=np.float64)
    n = llr.size
    log2_exact(n)
    frozen = _frozen_from_sd(sd, n)
    table, width, init, reflect, xorout = crc_args(crc_len)
    use_crc = tag is not None
    t = np.uint64(tag) if use_crc else _NO_TAG
    u, matched, metric, _ = scl_kernel(
        llr, frozen, int(list_size), bool(exact), np.zeros(n, np.uint8), False, use_crc, t, table, width, init,
        reflect, xorout,
    )
    return DecodeResult(u, bool(matched), float(metric))


def scl_decode(y, sd, cfg: DecoderConfig, tag: int | None) -> DecodeResult:
    """CRC-aided SCL decode of Bob's key ``y`` against syndrome string ``sd``.

    Surviving paths are checked against ``tag`` in order of increasing path
    metric; the first match wins. If none matches (or ``tag`` is None) the
    best-metric path is returned with ``crc_matched`` False.
    """
    sd = np.asarray(sd)
    if not np.any(sd != UNDISCLOSED):
        raise ValueError("syndrome string has no disclosed cell")
    u, matched, metric, _ = _run(y, sd, cfg.e_mu, cfg.list_size, cfg.exact, tag, cfg.crc_len)
    return DecodeResult(u, bool(matched), float(metric))


def sc_decode(y, sd, e_mu: float, exact: bool = False) -> DecodeResult:
    """Plain successive cancellation (list size one, no tag)."""
    return scl_decode(y, sd, DecoderConfig(e_mu=e_mu, list_size=1, exact=exact), None)


def decode_fails(y, sd, u, cfg: DecoderConfig, tag: int | None) -> bool:
    """True when decoding ``y`` against ``sd`` does not reproduce ``u``.

    Same outcome as comparing :func:`scl_decode` with ``u``, but stops early
    once the true codeword has left the list, which makes failing trials
    cheap in Monte-Carlo sweeps.
    """
    out, _, _, survived = _run(y, sd, cfg.e_mu, cfg.list_size, cfg.exact, tag, cfg.crc_len, truth=u)
    if not survived:
        return True
    return not np.array_equal(out, u)


@njit(cache=True)
def genie_sc_kernel(llr0, truth, exact):
    """Genie-aided SC: error weight of each position's decision given the true past.

    Min-sum mode decides 0 on a zero LLR, exactly like the decoder. Exact mode
    scores a zero LLR as half an error (the ML rule with a fair coin).
    """
    n = llr0.size
    m = 0
    while (1 << m) < n:
        m += 1
    A = np.empty(2 * n, np.float64)  # A[n >> d : 2 * (n >> d)] holds depth d
    B = np.zeros(2 * n, np.uint8)
    A[n : 2 * n] = llr0
    err = np.zeros(n, np.float64)
    tmp1 = np.empty(n, np.uint8)
    tmp2 = np.empty(n, np.uint8)
    for i in range(n):
        dstart = 0 if i == 0 else m - 1 - _trailing_zeros(i)
        for d in range(dstart, m):
            h = n >> (d + 1)
            so = 2 * h
            do = h
            if d == dstart and i > 0:
                for k in range(h):
                    if B[do + k]:
                        A[do + k] = A[so + k + h] - A[so + k]
                    else:
                        A[do + k] = A[so + k + h] + A[so + k]
            else:
                for k in range(h):
                    A[do + k] = _fmin(A[so + k], A[so + k + h], exact)
        lam = A[1]
        if exact and lam == 0.0:
            err[i] = 0.5
        else:
            dec = 1 if lam < 0.0 else 0
            if dec != truth[i]:
                err[i] = 1.0
        cur = tmp1
        other = tmp2
        cur[0] = truth[i]
        clen = 1
        d = m
        while d > 0:
            j = i >> (m - d)
            if (j & 1) == 0:
                for k in range(clen):
                    B[(n >> d) + k] = cur[k]
                break
            for k in range(clen):
                other[k] = B[(n >> d) + k] ^ cur[k]
                other[clen + k] = cur[k]
            clen *= 2
            t = cur
            cur = other
            other = t
            d -= 1
    return err


def genie_sc_errors(y, u, e_mu: float) -> np.ndarray:
    """Per-channel error flags of genie-aided min-sum SC decoding.

    SC decoding with frozen set F fails exactly when some position outside F
    is flagged here.
    """
    y = as_bits(y)
    return genie_sc_kernel(channel_llr(y, e_mu), as_bits(u, y.size), False) > 0


def genie_ml_errors(y, u, e_mu: float) -> np.ndarray:
    """Per-channel ML decision error weights (exact likelihoods, ties count 1/2)."""
    y = as_bits(y)
    return genie_sc_kernel(channel_llr(y, e_mu, exact=True), as_bits(u, y.size), True)
