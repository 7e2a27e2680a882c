import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airqkd.analytics import RoundModel, binary_entropy, efficiency
from airqkd.construction import block_error_bound, construct_profile
from airqkd.plan import (
    CandidateSet,
    FailureMeter,
    FrozenPlan,
    MeasureConfig,
    PlanInfeasible,
    build_plan,
    collect_candidates,
    default_beta,
    final_round_size,
    measure_failure_prob,
    opti_effi,
    profile_from_bytes,
    profile_to_bytes,
)


@pytest.fixture(scope="module")
def prof1024():
    return construct_profile(1024, 0.02)


@pytest.fixture(scope="module")
def small_plan():
    return build_plan(256, 0.05, r_max=3, eps_target=1e-3, t=200, root_seed=1)


# -- measurement ---------------------------------------------------------------


def test_everything_disclosed_never_fails(prof1024):
    assert measure_failure_prob(1024, 0.02, prof1024.w, 1024, t=50) == 0.0


def test_noiseless_channel_never_fails():
    prof = construct_profile(256, 1e-9)
    assert measure_failure_prob(256, 1e-9, prof.w, 1, t=50) == 0.0


def test_measurement_is_deterministic(prof1024):
    a = measure_failure_prob(1024, 0.02, prof1024.w, 170, t=100, root_seed=4)
    b = measure_failure_prob(1024, 0.02, prof1024.w, 170, t=100, root_seed=4)
    assert a == b
    assert 0.0 < a < 1.0


def test_meter_without_speedups_is_the_plain_count(prof1024):
    mc = MeasureConfig(t=120, root_seed=2, max_failures=None, carry_forward=False, chunk=7)
    meter = FailureMeter(1024, 0.02, prof1024.w, mc)
    for alpha in (250, 300, 350):
        m = meter.measure(alpha)
        assert m.trials == 120
        assert m.p == measure_failure_prob(1024, 0.02, prof1024.w, alpha, t=120, root_seed=2)


def test_early_stop_counts_trials_run(prof1024):
    mc = MeasureConfig(t=500, root_seed=0, max_failures=5, carry_forward=False)
    m = FailureMeter(1024, 0.02, prof1024.w, mc).measure(200)
    assert m.failures == 5
    assert m.trials < 500


def test_worker_count_does_not_change_results(prof1024):
    base = MeasureConfig(t=64, root_seed=5, chunk=16)
    one = FailureMeter(1024, 0.02, prof1024.w, base)
    two = FailureMeter(1024, 0.02, prof1024.w, MeasureConfig(t=64, root_seed=5, chunk=16, workers=2))
    try:
        for alpha in (260, 320):
            a, b = one.measure(alpha), two.measure(alpha)
            assert (a.failures, a.trials) == (b.failures, b.trials)
    finally:
        two.close()


# -- candidate collection --------------------------------------------------------


def test_first_alpha_and_degenerate_t():
    n, e = 1 << 13, 0.02
    assert math.ceil(n * binary_entropy(e)) == 1159
    w = construct_profile(n, e).w
    cands = collect_candidates(n, e, w, beta=200, t=1, root_seed=0)
    assert cands.q[0] == 1159 and cands.eps[0] == 1.0
    assert all(b - a == 200 for a, b in zip(cands.q, cands.q[1:]))
    # t = 1: stop at the first trial that decodes
    assert cands.failures[-1] == 0 and all(f == 1 for f in cands.failures[1:-1])
    assert cands.alpha_last == cands.q[-1]


def test_sweep_trend_is_monotone(prof1024):
    cands = collect_candidates(1024, 0.02, prof1024.w, beta=16, t=400, root_seed=3)
    raw = np.array(cands.eps)
    fit = cands.monotone_eps()
    assert np.all(np.diff(fit) <= 0)
    # raw estimates deviate from the fit by sampling noise only
    tr = np.maximum(np.array(cands.trials), 1)
    assert np.all(np.abs(raw - fit) <= 4 * np.sqrt(np.maximum(fit * (1 - fit), 1 / tr) / tr) + 1e-12)


def test_sweep_guards():
    w = np.arange(64)
    with pytest.raises(ValueError):
        collect_candidates(64, 0.1, w, beta=0, t=10)
    cs = CandidateSet()
    cs.add(10, 0.5, 10, 5)
    with pytest.raises(ValueError):
        cs.add(10, 0.4, 10, 4)


def test_default_beta():
    assert default_beta(1 << 20) == 2622
    assert default_beta(8) == 1


# -- final round ---------------------------------------------------------------


def test_final_round_matches_linear_scan(prof1024):
    target = 1e-4
    s = prof1024.sorted_p_e
    best = 0
    for i in range(1, 1025):
        # i smallest p_e left unfrozen
        if math.fsum(s[1024 - i :]) <= target:
            best = i
    assert final_round_size(prof1024, 0, target) == 1024 - best
    assert block_error_bound(prof1024, prof1024.w[: 1024 - best]) <= target


def test_final_round_clamps(prof1024):
    assert final_round_size(prof1024, 321, 0.999999) >= 321
    # channels whose bound underflowed to zero may stay unfrozen at any target
    tiny = prof1024.p_e[prof1024.p_e > 0].min() / 2
    assert final_round_size(prof1024, 0, tiny) == 1024 - np.count_nonzero(prof1024.p_e == 0)
    with pytest.raises(ValueError):
        final_round_size(prof1024, 0, 0.0)


# -- cut selection -------------------------------------------------------------


def brute_force(cands, r_max, q_final, eps_target, n, e_mu):
    fit = cands.monotone_eps()
    best = None
    idx = [j for j in range(len(cands)) if cands.q[j] < q_final]
    for combo in itertools.combinations(idx, r_max - 1):
        qs = [cands.q[j] for j in combo] + [q_final]
        es = [max(fit[j], eps_target) for j in combo] + [eps_target]
        f = efficiency(RoundModel.from_decoder(es, qs, n, e_mu))
        if best is None or f < best:
            best = f
    return best


@st.composite
def candidate_sets(draw):
    C = draw(st.integers(3, 20))
    q = np.cumsum(draw(st.lists(st.integers(1, 40), min_size=C, max_size=C)))
    eps = np.sort(draw(st.lists(st.floats(1e-6, 1.0), min_size=C, max_size=C)))[::-1]
    cs = CandidateSet()
    for a, b in zip(q, eps):
        cs.add(int(a) + 100, float(b), 1000, 10)
    return cs


@settings(max_examples=60, deadline=None)
@given(candidate_sets(), st.integers(1, 5))
def test_opti_effi_is_optimal(cands, r_max):
    n, e = 4096, 0.05
    q_final = cands.q[-1] + 50
    if len(cands) < r_max - 1:
        with pytest.raises(PlanInfeasible):
            opti_effi(cands, r_max, q_final, 1e-8, n, e)
        return
    qs_e, es_e, f_e = opti_effi(cands, r_max, q_final, 1e-8, n, e, strategy="exhaustive")
    qs_d, es_d, f_d = opti_effi(cands, r_max, q_final, 1e-8, n, e, strategy="dp")
    assert f_d == pytest.approx(f_e, rel=1e-12)
    assert f_e == pytest.approx(brute_force(cands, r_max, q_final, 1e-8, n, e), rel=1e-12)
    assert qs_e[-1] == q_final and es_e[-1] == 1e-8
    assert list(qs_e) == sorted(set(qs_e))


@settings(max_examples=30, deadline=None)
@given(candidate_sets())
def test_more_rounds_never_hurt(cands):
    n, e = 4096, 0.05
    q_final = cands.q[-1] + 50
    fs = [opti_effi(cands, r, q_final, 1e-8, n, e)[2] for r in range(1, min(len(cands), 5) + 2)]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(fs, fs[1:]))


def test_single_round_formula():
    cs = CandidateSet()
    cs.add(100, 1.0, 0, 0)
    n, e = 1024, 0.05
    qs, es, f = opti_effi(cs, 1, 300, 1e-6, n, e)
    assert qs == (300,)
    assert f == pytest.approx((64 + 300) / (n * binary_entropy(e)))


def test_unknown_strategy():
    cs = CandidateSet()
    cs.add(100, 1.0, 0, 0)
    with pytest.raises(ValueError):
        opti_effi(cs, 2, 300, 1e-6, 1024, 0.05, strategy="greedy")


# -- plans -----------------------------------------------------------------------


def test_plan_invariants(small_plan):
    p = small_plan
    vs = p.vectors()
    allv = np.concatenate(vs)
    assert allv.size == len(set(allv.tolist())) == p.cuts[-1]
    assert np.array_equal(allv, p.w[: p.cuts[-1]])
    prof = construct_profile(256, 0.05)
    assert block_error_bound(prof, allv) <= p.eps_target
    assert np.all(np.diff(prof.p_e[allv]) <= 0)
    assert list(p.eps) == sorted(p.eps, reverse=True)
    assert p.eps_source[-1] == "bound"
    assert set(p.eps_source) <= {"initial", "measured", "rule-of-three", "bound"}


def test_plan_round_trip(small_plan, tmp_path):
    data = small_plan.to_bytes()
    back = FrozenPlan.from_bytes(data)
    assert back.to_bytes() == data
    assert back.hash() == small_plan.hash()
    assert np.array_equal(back.w, small_plan.w)
    path = tmp_path / "p.json"
    small_plan.save(path)
    assert FrozenPlan.load(path).hash() == small_plan.hash()


def test_plan_bytes_are_canonical(small_plan):
    data = small_plan.to_bytes()
    assert data.endswith(b"\n") and b" " not in data
    obj = json.loads(data)
    assert obj["format"] == "airqkd-plan" and obj["version"] == 1
    assert obj["header"]["r_max"] == small_plan.r_max


def test_plan_build_is_reproducible(small_plan):
    again = build_plan(256, 0.05, r_max=3, eps_target=1e-3, t=200, root_seed=1)
    assert again.hash() == small_plan.hash()


def test_plan_rejects_bad_files(small_plan):
    obj = json.loads(small_plan.to_bytes())
    obj["version"] = 99
    with pytest.raises(ValueError):
        FrozenPlan.from_bytes(json.dumps(obj).encode())
    obj = json.loads(small_plan.to_bytes())
    obj["header"]["r_max"] = 7
    with pytest.raises(ValueError):
        FrozenPlan.from_bytes(json.dumps(obj).encode())
    with pytest.raises(ValueError):
        FrozenPlan(4, 0.1, np.array([0, 1, 1, 3]), (1, 2), (0.5, 0.1))
    with pytest.raises(ValueError):
        FrozenPlan(4, 0.1, np.arange(4), (2, 2), (0.5, 0.1))


def test_profile_cache_round_trip(prof1024):
    data = profile_to_bytes(prof1024)
    back = profile_from_bytes(data)
    assert back.checksum() == prof1024.checksum()
    assert np.array_equal(back.w, prof1024.w)
    obj = json.loads(data)
    obj["checksum"] = "0" * 64
    with pytest.raises(ValueError):
        profile_from_bytes(json.dumps(obj).encode())
