import math
import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airqkd.analytics import binary_entropy
from airqkd.construction import construct_profile
from airqkd.crc import crc_tag
from airqkd.harness import rand_pair
from airqkd.plan import FrozenPlan
from airqkd.protocol import (
    ABORTED,
    FAILED_MAXROUNDS,
    MSG_SYNDROME,
    SUCCESS,
    AbortMsg,
    AliceSession,
    BobSession,
    FlagMsg,
    HelloMsg,
    QueueTransport,
    StreamTransport,
    SyndromeMsg,
    TagMsg,
    TransportError,
    alice_loop,
    alice_next,
    alice_on_flag,
    bob_loop,
    bob_on_syndrome,
    bob_on_tag,
    decode,
    encode,
    keys_agree,
    run_session,
)
from airqkd.polar import polar_transform

N, E = 512, 0.04


def make_plan(n=N, e=E, steps=(20, 45, 80, 160), eps=(0.5, 0.2, 0.05, 1e-3)):
    prof = construct_profile(n, e)
    base = math.ceil(n * binary_entropy(e))
    cuts = tuple(base + s for s in steps)
    return FrozenPlan(n=n, e_mu=e, w=prof.w, cuts=cuts, eps=eps, eps_target=eps[-1],
                      eps_source=("measured",) * (len(cuts) - 1) + ("bound",), profile_checksum=prof.checksum())


@pytest.fixture(scope="module")
def plan():
    return make_plan()


# -- wire format ----------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(0, 2**16 - 1), st.lists(st.integers(0, 1), max_size=200))
def test_syndrome_round_trip(sid, rnd, bits):
    msg = SyndromeMsg(sid, rnd, np.array(bits, dtype=np.uint8))
    frame = encode(msg)
    assert decode(frame) == msg
    assert frame[0] == MSG_SYNDROME
    assert struct.unpack_from("<I", frame, 1)[0] == len(frame) - 5


@pytest.mark.parametrize("msg", [
    TagMsg(7, 0x0123456789ABCDEF, 64),
    TagMsg(1, 0xA5, 8),
    FlagMsg(3, 2, 1),
    FlagMsg(3, 4, 0),
    AbortMsg(9, "maximum rounds reached", 4),
    HelloMsg(2, 1, bytes(range(32))),
])
def test_message_round_trip(msg):
    assert decode(encode(msg)) == msg


def test_frame_layout_is_little_endian():
    frame = encode(FlagMsg(0x0102, 3, 1))
    assert frame == bytes([3, 11, 0, 0, 0, 2, 1, 0, 0, 0, 0, 0, 0, 3, 0, 1])
    frame = encode(SyndromeMsg(0, 1, np.array([1, 0, 1], dtype=np.uint8)))
    assert frame[-5:] == bytes([3, 0, 0, 0, 0b101])


@pytest.mark.parametrize("frame", [
    b"",
    b"\x03\x01\x00",
    encode(FlagMsg(0, 1, 1))[:-1],
    encode(FlagMsg(0, 1, 1)) + b"\x00",
    bytes([9, 10, 0, 0, 0]) + bytes(10),
    bytes([3, 11, 0, 0, 0]) + bytes(10) + b"\x02",
    bytes([2, 15, 0, 0, 0]) + bytes(10) + struct.pack("<I", 3) + b"\x08",
    bytes([2, 15, 0, 0, 0]) + bytes(10) + struct.pack("<I", 30) + b"\x00",
    bytes([1, 12, 0, 0, 0]) + bytes(10) + bytes([12, 0]),
    bytes([1, 12, 0, 0, 0]) + bytes(10) + bytes([64, 0]),
    bytes([5, 11, 0, 0, 0]) + bytes(11),
])
def test_malformed_frames_are_rejected(frame):
    with pytest.raises(TransportError):
        decode(frame)


# -- sessions ------------------------------------------------------------------


def test_clean_channel_succeeds_in_round_one(plan):
    k_a, _ = rand_pair(N, E, (1, 0))
    a, b, tr = run_session(k_a, k_a.copy(), plan)
    assert a.status == b.status == SUCCESS
    assert a.rounds_used == 1
    assert a.leaked_bits == 64 + plan.cuts[0]
    assert keys_agree(a, b)
    assert np.array_equal(a.k_ir, polar_transform(k_a))
    assert len(tr) == 3


@pytest.mark.parametrize("j", range(40))
def test_session_accounting_and_agreement(plan, j):
    k_a, k_b = rand_pair(N, E, (2, j))
    a, b, tr = run_session(k_a, k_b, plan, session_id=j)
    assert a.status == b.status
    assert a.rounds_used == b.rounds_used <= plan.r_max
    assert a.leaked_bits == b.leaked_bits == plan.crc_len + plan.cuts[a.rounds_used - 1]
    sent = sum(decode(f).payload.size for f in tr if f[0] == MSG_SYNDROME)
    assert a.leaked_bits == plan.crc_len + sent
    if a.status == SUCCESS:
        assert keys_agree(a, b)


def test_hopeless_channel_runs_out_of_rounds(plan):
    k_a, k_b = rand_pair(N, 0.3, (3, 0))
    a, b, tr = run_session(k_a, k_b, plan)
    assert a.status == b.status == FAILED_MAXROUNDS
    assert a.rounds_used == plan.r_max
    assert a.leaked_bits == 64 + plan.cuts[-1]
    assert isinstance(decode(tr[-1]), AbortMsg)
    assert a.k_ir is None and b.k_ir is None


def test_flag_soundness(plan):
    for j in range(30):
        k_a, k_b = rand_pair(N, E * 1.5, (4, j))
        alice = AliceSession(k_a, plan, j)
        bob = BobSession(k_b, plan, j)
        bob_on_tag(bob, TagMsg(j, alice.tag, 64))
        for _ in range(plan.r_max):
            reply = bob_on_syndrome(bob, alice_next(alice))
            assert reply.sigma == int(crc_tag(bob.last_decode.codeword, 64) == alice.tag)
            if reply.sigma:
                break


def test_transcript_is_deterministic(plan):
    k_a, k_b = rand_pair(N, E, (5, 1))
    t1 = run_session(k_a, k_b, plan)[2]
    t2 = run_session(k_a, k_b, plan)[2]
    assert t1 == t2


@pytest.mark.parametrize("j", range(6))
def test_stream_matches_queue(plan, j):
    k_a, k_b = rand_pair(N, E * 1.5, (6, j))
    qa, qb, qt = run_session(k_a, k_b, plan, "queue", session_id=j)
    sa, sb, st_ = run_session(k_a, k_b, plan, "stream", session_id=j)
    assert qt == st_
    assert (qa.status, qa.rounds_used, qa.leaked_bits) == (sa.status, sa.rounds_used, sa.leaked_bits)
    assert (qb.status, qb.rounds_used, qb.leaked_bits) == (sb.status, sb.rounds_used, sb.leaked_bits)


def test_unknown_transport(plan):
    k = np.zeros(N, np.uint8)
    with pytest.raises(ValueError):
        run_session(k, k, plan, "carrier-pigeon")


# -- misbehaving peers ------------------------------------------------------------


def _bob_with_tag(plan, k_b, tag):
    bob = BobSession(k_b, plan, 0)
    assert bob_on_tag(bob, TagMsg(0, tag, 64)) is None
    return bob


def test_syndrome_before_tag_aborts(plan):
    bob = BobSession(np.zeros(N, np.uint8), plan, 0)
    v = plan.vector(1)
    reply = bob_on_syndrome(bob, SyndromeMsg(0, 1, np.zeros(v.size, np.uint8)))
    assert isinstance(reply, AbortMsg) and bob.outcome.status == ABORTED


def test_out_of_order_round_aborts(plan):
    bob = _bob_with_tag(plan, np.zeros(N, np.uint8), 0)
    reply = bob_on_syndrome(bob, SyndromeMsg(0, 2, np.zeros(plan.vector(2).size, np.uint8)))
    assert isinstance(reply, AbortMsg)
    assert bob.outcome.leaked_bits == 64


def test_wrong_length_syndrome_aborts(plan):
    bob = _bob_with_tag(plan, np.zeros(N, np.uint8), 0)
    reply = bob_on_syndrome(bob, SyndromeMsg(0, 1, np.zeros(3, np.uint8)))
    assert isinstance(reply, AbortMsg) and bob.outcome.status == ABORTED


def test_wrong_tag_length_aborts(plan):
    bob = BobSession(np.zeros(N, np.uint8), plan, 0)
    reply = bob_on_tag(bob, TagMsg(0, 5, 8))
    assert isinstance(reply, AbortMsg)


def test_corrupted_syndrome_never_yields_mismatched_keys(plan):
    # flip one disclosed bit per round: Bob decodes towards the wrong codeword
    # and the CRC must keep him from accepting it
    for j in range(20):
        k_a, k_b = rand_pair(N, E, (7, j))
        alice = AliceSession(k_a, plan, j)
        bob = _bob_with_tag(plan, k_b, alice.tag)
        bob.session_id = j
        while True:
            msg = alice_next(alice)
            if isinstance(msg, AbortMsg):
                bob_on_syndrome(bob, msg)
                break
            bad = msg.payload.copy()
            bad[j % bad.size] ^= 1
            reply = bob_on_syndrome(bob, decode(encode(SyndromeMsg(msg.session_id, msg.round, bad))))
            if alice_on_flag(alice, reply):
                break
        assert not (bob.outcome.status == SUCCESS and not np.array_equal(bob.outcome.k_ir, alice.u))


def test_dropped_link_aborts_both_sides(plan):
    sa, sb = socket.socketpair()
    la, lb = StreamTransport(sa), StreamTransport(sb)
    k_a, k_b = rand_pair(N, E, (8, 0))
    alice = AliceSession(k_a, plan, 0)
    bob = BobSession(k_b, plan, 0)
    la.send(TagMsg(0, alice.tag, 64))
    la.close()
    out = bob_loop(bob, lb)
    lb.close()
    assert out.status == ABORTED and "transport" in out.reason


def _loops(plan_a, plan_b, k_a, k_b, hello=True):
    sa, sb = socket.socketpair()
    la, lb = StreamTransport(sa), StreamTransport(sb)
    alice = AliceSession(k_a, plan_a, 0)
    bob = BobSession(k_b, plan_b, 0)
    th = threading.Thread(target=bob_loop, args=(bob, lb, hello))
    th.start()
    alice_loop(alice, la, hello)
    th.join(timeout=60)
    la.close()
    lb.close()
    return alice.outcome, bob.outcome, la.transcript, lb.transcript


def test_handshake_accepts_identical_plans(plan):
    k_a, k_b = rand_pair(N, E, (9, 0))
    a, b, ta, tb = _loops(plan, make_plan(), k_a, k_b)
    assert a.status == b.status
    assert isinstance(decode(ta[0]), HelloMsg) and isinstance(decode(tb[0]), HelloMsg)
    # without the hello frames the exchange is the in-process transcript
    q = run_session(k_a, k_b, plan)[2]
    # merged order is tag, syndrome, flag, syndrome, flag, ...
    assert ta[1:] == q[:1] + q[1::2] and tb[1:] == q[2::2]


def test_handshake_rejects_a_different_plan(plan):
    other = make_plan(steps=(21, 45, 80, 160))
    assert other.hash() != plan.hash()
    k_a, k_b = rand_pair(N, E, (9, 1))
    a, b, ta, tb = _loops(plan, other, k_a, k_b)
    assert a.status == ABORTED and b.status == ABORTED
    # leakage is booked as d + sum |V_i| on every path, so an abort before round 1 books d
    assert a.leaked_bits == b.leaked_bits == 64
    assert not any(f[0] == MSG_SYNDROME for f in ta)


# -- stress --------------------------------------------------------------------


def test_mismatched_qber_stress():
    # plan sized for 0.04, channel at 0.11: mostly failures, never a silent key mismatch
    p = make_plan(n=256, e=0.04, steps=(2, 6, 10, 16))
    outcomes = []
    for j in range(200):
        k_a, k_b = rand_pair(256, 0.11, (10, j))
        a, b, _ = run_session(k_a, k_b, p, session_id=j)
        assert a.status == b.status and a.leaked_bits == b.leaked_bits
        assert a.status != SUCCESS or keys_agree(a, b)
        outcomes.append(a.status)
    assert outcomes.count(FAILED_MAXROUNDS) > 0


def test_queue_transport_empty_recv():
    ta, tb = QueueTransport.pair()
    with pytest.raises(TransportError):
        ta.recv()
