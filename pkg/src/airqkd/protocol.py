"""The two-party appending reconciliation session.

Alice encodes her sifted key, sends the CRC tag once, then discloses one more
slice of the codeword per round until Bob's decoder reproduces a codeword
with a matching tag or the round budget runs out.

Wire frames are little-endian ``[u8 type][u32 length][payload]`` and every
payload starts with ``[u64 session_id][u16 round]``.
"""

from __future__ import annotations

import socket
import struct
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .crc import crc_params, crc_tag
from .decoder import scl_decode
from .plan import FrozenPlan
from .polar import (
    ProtocolViolation,
    as_bits,
    index_select,
    insert,
    new_syndrome_string,
    pack_bits,
    polar_transform,
    unpack_bits,
)

PROTOCOL_VERSION = 1

MSG_TAG = 1
MSG_SYNDROME = 2
MSG_FLAG = 3
MSG_ABORT = 4
MSG_HELLO = 5

SUCCESS = "success"
FAILED_MAXROUNDS = "failed-maxrounds"
ABORTED = "aborted"

_FRAME = struct.Struct("<BI")
_HEAD = struct.Struct("<QH")
MAX_FRAME = 1 << 28


class TransportError(Exception):
    pass


# -- messages -----------------------------------------------------------------


@dataclass(frozen=True)
class TagMsg:
    session_id: int
    tag: int
    d: int
    round: int = 0


@dataclass(frozen=True)
class SyndromeMsg:
    session_id: int
    round: int
    payload: np.ndarray = field(compare=False)

    def __eq__(self, other):
        return (
            isinstance(other, SyndromeMsg)
            and (self.session_id, self.round) == (other.session_id, other.round)
            and np.array_equal(self.payload, other.payload)
        )


@dataclass(frozen=True)
class FlagMsg:
    session_id: int
    round: int
    sigma: int


@dataclass(frozen=True)
class AbortMsg:
    session_id: int
    reason: str
    round: int = 0


@dataclass(frozen=True)
class HelloMsg:
    session_id: int
    version: int
    plan_hash: bytes
    round: int = 0


def encode(msg) -> bytes:
    if isinstance(msg, TagMsg):
        nbytes = msg.d // 8
        body = struct.pack("<B", msg.d) + int(msg.tag).to_bytes(nbytes, "little")
        kind = MSG_TAG
    elif isinstance(msg, SyndromeMsg):
        bits = as_bits(msg.payload)
        body = struct.pack("<I", bits.size) + pack_bits(bits)
        kind = MSG_SYNDROME
    elif isinstance(msg, FlagMsg):
        body = struct.pack("<B", msg.sigma)
        kind = MSG_FLAG
    elif isinstance(msg, AbortMsg):
        body = msg.reason.encode("utf-8")
        kind = MSG_ABORT
    elif isinstance(msg, HelloMsg):
        if len(msg.plan_hash) != 32:
            raise ValueError("plan hash must be 32 bytes")
        body = struct.pack("<H", msg.version) + msg.plan_hash
        kind = MSG_HELLO
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    payload = _HEAD.pack(msg.session_id, msg.round) + body
    return _FRAME.pack(kind, len(payload)) + payload


def decode(frame: bytes):
    if len(frame) < _FRAME.size:
        raise TransportError("truncated frame header")
    kind, length = _FRAME.unpack_from(frame)
    payload = frame[_FRAME.size :]
    if len(payload) != length:
        raise TransportError(f"frame length {length} but {len(payload)} payload bytes")
    if length < _HEAD.size:
        raise TransportError("payload shorter than its header")
    sid, rnd = _HEAD.unpack_from(payload)
    body = payload[_HEAD.size :]
    try:
        if kind == MSG_TAG:
            d = body[0]
            crc_params(d)
            if len(body) != 1 + d // 8:
                raise TransportError("tag length does not match d")
            return TagMsg(sid, int.from_bytes(body[1:], "little"), d, rnd)
        if kind == MSG_SYNDROME:
            (nbits,) = struct.unpack_from("<I", body)
            data = body[4:]
            if len(data) != (nbits + 7) // 8:
                raise TransportError("syndrome byte count does not match its bit count")
            return SyndromeMsg(sid, rnd, unpack_bits(data, nbits))
        if kind == MSG_FLAG:
            if len(body) != 1 or body[0] > 1:
                raise TransportError("malformed flag")
            return FlagMsg(sid, rnd, body[0])
        if kind == MSG_ABORT:
            return AbortMsg(sid, body.decode("utf-8"), rnd)
        if kind == MSG_HELLO:
            if len(body) != 34:
                raise TransportError("malformed hello")
            (ver,) = struct.unpack_from("<H", body)
            return HelloMsg(sid, ver, bytes(body[2:]), rnd)
    except (struct.error, IndexError, ValueError) as exc:
        raise TransportError(f"malformed payload: {exc}") from None
    raise TransportError(f"unknown message type {kind}")


# -- outcomes and state machines ----------------------------------------------


@dataclass
class SessionOutcome:
    status: str
    rounds_used: int
    leaked_bits: int
    k_ir: np.ndarray | None = None
    reason: str = ""


class AliceSession:
    def __init__(self, k_a, plan: FrozenPlan, session_id: int = 0):
        self.plan = plan
        self.session_id = session_id
        self.u = polar_transform(as_bits(k_a, plan.n))
        self.tag = crc_tag(self.u, plan.crc_len)
        self.round = 0
        self.disclosed = 0
        self.outcome: SessionOutcome | None = None

    def _finish(self, status, reason=""):
        k = self.u.copy() if status == SUCCESS else None
        self.outcome = SessionOutcome(status, self.round, self.plan.crc_len + self.disclosed, k, reason)


class BobSession:
    def __init__(self, k_b, plan: FrozenPlan, session_id: int = 0, e_mu: float | None = None):
        self.plan = plan
        self.session_id = session_id
        self.k_b = as_bits(k_b, plan.n)
        self.cfg = plan.decoder_config(e_mu)
        self.sd = new_syndrome_string(plan.n)
        self.tag: int | None = None
        self.round = 0
        self.disclosed = 0
        self.outcome: SessionOutcome | None = None
        self.last_decode = None

    def _finish(self, status, k=None, reason=""):
        self.outcome = SessionOutcome(status, self.round, self.plan.crc_len + self.disclosed, k, reason)


def alice_start(k_a, plan: FrozenPlan, session_id: int = 0):
    s = AliceSession(k_a, plan, session_id)
    return s, TagMsg(session_id, s.tag, plan.crc_len)


def alice_next(s: AliceSession):
    """Next syndrome slice, or an abort once the round budget is spent."""
    if s.outcome is not None:
        raise ProtocolViolation("session already finished")
    if s.round >= s.plan.r_max:
        s._finish(FAILED_MAXROUNDS, "maximum rounds reached")
        return AbortMsg(s.session_id, "maximum rounds reached", s.round)
    s.round += 1
    v = s.plan.vector(s.round)
    s.disclosed += v.size
    return SyndromeMsg(s.session_id, s.round, index_select(s.u, v))


def alice_on_flag(s: AliceSession, msg):
    """Returns True when the session is over."""
    if isinstance(msg, AbortMsg):
        s._finish(ABORTED, msg.reason)
        return True
    if not isinstance(msg, FlagMsg) or msg.session_id != s.session_id or msg.round != s.round:
        s._finish(ABORTED, "unexpected reply")
        return True
    if msg.sigma == 1:
        s._finish(SUCCESS)
        return True
    return False


def bob_on_tag(s: BobSession, msg):
    if not isinstance(msg, TagMsg) or msg.session_id != s.session_id:
        return _bob_abort(s, "expected the tag message")
    if msg.d != s.plan.crc_len:
        return _bob_abort(s, "tag length does not match the plan")
    s.tag = msg.tag
    return None


def _bob_abort(s: BobSession, reason):
    s._finish(ABORTED, reason=reason)
    return AbortMsg(s.session_id, reason, s.round)


def bob_on_syndrome(s: BobSession, msg):
    """Insert the slice, decode, and answer with the flag (or an abort)."""
    if s.outcome is not None:
        raise ProtocolViolation("session already finished")
    if isinstance(msg, AbortMsg):
        s._finish(FAILED_MAXROUNDS if s.round >= s.plan.r_max else ABORTED, reason=msg.reason)
        return None
    if s.tag is None:
        return _bob_abort(s, "syndrome before tag")
    if not isinstance(msg, SyndromeMsg) or msg.session_id != s.session_id:
        return _bob_abort(s, "unexpected message")
    if msg.round != s.round + 1 or msg.round > s.plan.r_max:
        return _bob_abort(s, f"round {msg.round} out of order")
    v = s.plan.vector(msg.round)
    try:
        s.sd = insert(s.sd, msg.payload, v)
    except (ProtocolViolation, ValueError) as exc:
        return _bob_abort(s, str(exc))
    s.round = msg.round
    s.disclosed += v.size
    res = scl_decode(s.k_b, s.sd, s.cfg, s.tag)
    s.last_decode = res
    sigma = 1 if res.crc_matched else 0
    if sigma:
        s._finish(SUCCESS, res.codeword)
    return FlagMsg(s.session_id, s.round, sigma)


# -- transports ----------------------------------------------------------------


class QueueTransport:
    """One end of an in-process duplex link that carries encoded frames."""

    def __init__(self, inbox: deque, outbox: deque, transcript: list):
        self.inbox = inbox
        self.outbox = outbox
        self.transcript = transcript

    @classmethod
    def pair(cls):
        a, b, log = deque(), deque(), []
        return cls(a, b, log), cls(b, a, log)

    def send(self, msg):
        frame = encode(msg)
        self.transcript.append(frame)
        self.outbox.append(frame)

    def recv(self):
        if not self.inbox:
            raise TransportError("nothing to receive")
        return decode(self.inbox.popleft())

    def close(self):
        pass


class StreamTransport:
    """Frames over a stream socket."""

    def __init__(self, sock: socket.socket, transcript: list | None = None):
        self.sock = sock
        self.rfile = sock.makefile("rb")
        self.transcript = transcript if transcript is not None else []

    def send(self, msg):
        frame = encode(msg)
        self.transcript.append(frame)
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise TransportError(f"send failed: {exc}") from None

    def _read(self, k):
        data = self.rfile.read(k)
        if data is None or len(data) < k:
            raise TransportError("connection closed mid-frame")
        return data

    def recv(self):
        try:
            head = self._read(_FRAME.size)
        except OSError as exc:
            raise TransportError(f"receive failed: {exc}") from None
        _, length = _FRAME.unpack(head)
        if length > MAX_FRAME:
            raise TransportError("frame too large")
        return decode(head + self._read(length))

    def close(self):
        try:
            self.rfile.close()
            self.sock.close()
        except OSError:
            pass


# -- driving a session ---------------------------------------------------------


def alice_loop(s: AliceSession, link, hello: bool = False) -> SessionOutcome:
    """Drive Alice to completion over ``link``."""
    try:
        if hello:
            if not _handshake(link, s.session_id, s.plan, first=True):
                s._finish(ABORTED, "plan hash or version mismatch")
                return s.outcome
        link.send(TagMsg(s.session_id, s.tag, s.plan.crc_len))
        while True:
            msg = alice_next(s)
            link.send(msg)
            if isinstance(msg, AbortMsg):
                return s.outcome
            if alice_on_flag(s, link.recv()):
                return s.outcome
    except TransportError as exc:
        if s.outcome is None:
            s._finish(ABORTED, f"transport: {exc}")
        return s.outcome


def bob_loop(s: BobSession, link, hello: bool = False) -> SessionOutcome:
    try:
        if hello:
            if not _handshake(link, s.session_id, s.plan, first=False):
                s._finish(ABORTED, reason="plan hash or version mismatch")
                return s.outcome
        reply = bob_on_tag(s, link.recv())
        if reply is not None:
            link.send(reply)
            return s.outcome
        while s.outcome is None:
            reply = bob_on_syndrome(s, link.recv())
            if reply is not None:
                link.send(reply)
        return s.outcome
    except TransportError as exc:
        if s.outcome is None:
            s._finish(ABORTED, reason=f"transport: {exc}")
        return s.outcome


def _handshake(link, sid, plan: FrozenPlan, first: bool) -> bool:
    mine = HelloMsg(sid, PROTOCOL_VERSION, bytes.fromhex(plan.hash()))
    if first:
        link.send(mine)
        theirs = link.recv()
    else:
        theirs = link.recv()
        link.send(mine)
    if isinstance(theirs, AbortMsg):
        return False
    ok = isinstance(theirs, HelloMsg) and theirs.version == mine.version and theirs.plan_hash == mine.plan_hash
    if not ok and first:
        link.send(AbortMsg(sid, "plan hash or version mismatch"))
    return ok


def _run_queue(alice: AliceSession, bob: BobSession):
    # strictly alternating, so one thread can play both sides
    ta, tb = QueueTransport.pair()
    ta.send(TagMsg(alice.session_id, alice.tag, alice.plan.crc_len))
    reply = bob_on_tag(bob, tb.recv())
    if reply is not None:
        tb.send(reply)
        alice._finish(ABORTED, reply.reason)
        return ta.transcript
    while True:
        msg = alice_next(alice)
        ta.send(msg)
        reply = bob_on_syndrome(bob, tb.recv())
        if reply is None:
            return ta.transcript
        tb.send(reply)
        if alice_on_flag(alice, ta.recv()):
            return ta.transcript


def _run_stream(alice: AliceSession, bob: BobSession):
    sa, sb = socket.socketpair()
    la, lb = StreamTransport(sa), StreamTransport(sb)
    th = threading.Thread(target=bob_loop, args=(bob, lb))
    th.start()
    try:
        alice_loop(alice, la)
    finally:
        th.join()
        la.close()
        lb.close()
    return _merge_transcripts(la.transcript, lb.transcript)


def _merge_transcripts(a_sent, b_sent):
    # the exchange alternates: tag, syndrome, flag, syndrome, flag, ...
    out = list(a_sent[:1])
    ai, bi = 1, 0
    while ai < len(a_sent) or bi < len(b_sent):
        if ai < len(a_sent):
            out.append(a_sent[ai])
            ai += 1
        if bi < len(b_sent):
            out.append(b_sent[bi])
            bi += 1
    return out


def run_session(k_a, k_b, plan: FrozenPlan, transport: str = "queue", session_id: int = 0,
                e_mu: float | None = None):
    """Run one session; returns ``(alice_outcome, bob_outcome, transcript)``."""
    k_a = as_bits(k_a, plan.n)
    k_b = as_bits(k_b, plan.n)
    alice = AliceSession(k_a, plan, session_id)
    bob = BobSession(k_b, plan, session_id, e_mu)
    if transport == "queue":
        transcript = _run_queue(alice, bob)
    elif transport == "stream":
        transcript = _run_stream(alice, bob)
    else:
        raise ValueError(f"unknown transport {transport!r}")
    return alice.outcome, bob.outcome, transcript


def keys_agree(a: SessionOutcome, b: SessionOutcome) -> bool:
    return a.k_ir is not None and b.k_ir is not None and np.array_equal(a.k_ir, b.k_ir)
