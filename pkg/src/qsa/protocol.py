"""Verifier and prover state machines and their TCP framing.

Frame layout: ``len32 | type | body`` where ``len32`` is the big-endian byte
count of ``type | body`` and ``body`` is a sequence of TLV fields
(``tag | len32 | value``). The machines are transport-free: they consume
decoded messages and return messages to send, and ``run_session`` drives
one over a socket.
"""

from __future__ import annotations

import json
import secrets
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Sequence

from . import tlv
from .compile import (
    CompilerConfig,
    SymmetricChallenge,
    bundle_json,
    circuit_digest,
    compile_symmetric,
    guard_phase,
    plant_for_index,
    plant_state,
    read_bundle,
)
from .errors import QSAError, ValidationError
from .extract import EvalConfig, FeatureVector, evaluate_one, pack_buckets, quantize_phase
from .keyring import NONCE_LEN, ConfirmationGate, SessionKey, Transcript, confirm_tag, derive_key, verify_confirmation
from .rng import stream

VERSION = 1
MAX_FRAME = 64 * 2**20


class MsgType(IntEnum):
    HELLO = 0x01
    CHALLENGE_SET = 0x02
    CONFIRM_REQ = 0x03
    CONFIRM_RESP = 0x04
    RESULT = 0x05
    ERROR = 0x7F


class Field(IntEnum):
    VERSION = 0x01
    NONCE = 0x02
    SCHEDULE = 0x03
    N = 0x04
    M = 0x05
    K = 0x06
    BUNDLE = 0x07
    TAG = 0x08
    VERDICT = 0x09
    REASON = 0x0A
    DEPTH = 0x0B


# (required, optional); BUNDLE is the only field that may repeat
_SCHEMA: dict[MsgType, tuple[frozenset, frozenset]] = {
    MsgType.HELLO: (frozenset({Field.VERSION, Field.NONCE}), frozenset({Field.N, Field.M, Field.K, Field.DEPTH})),
    MsgType.CHALLENGE_SET: (frozenset({Field.SCHEDULE, Field.BUNDLE}), frozenset()),
    MsgType.CONFIRM_REQ: (frozenset({Field.NONCE}), frozenset()),
    MsgType.CONFIRM_RESP: (frozenset({Field.TAG}), frozenset()),
    MsgType.RESULT: (frozenset({Field.VERDICT}), frozenset({Field.TAG, Field.REASON})),
    MsgType.ERROR: (frozenset({Field.REASON}), frozenset()),
}


class ProtocolError(QSAError, ValueError):
    """A message that is malformed or arrives in the wrong phase."""


@dataclass(frozen=True)
class Message:
    type: MsgType
    fields: tuple[tuple[int, bytes], ...] = ()

    def get(self, tag: Field) -> bytes:
        for t, v in self.fields:
            if t == tag:
                return v
        raise ProtocolError(f"{self.type.name} lacks field {tag.name}")

    def all(self, tag: Field) -> list[bytes]:
        return [v for t, v in self.fields if t == tag]

    def has(self, tag: Field) -> bool:
        return any(t == tag for t, _ in self.fields)


def message(kind: MsgType, *fields: tuple[Field, bytes]) -> Message:
    msg = Message(kind, tuple((int(t), bytes(v)) for t, v in fields))
    validate(msg)
    return msg


def validate(msg: Message) -> None:
    required, optional = _SCHEMA[msg.type]
    seen: list[int] = [t for t, _ in msg.fields]
    unknown = [t for t in seen if t not in {int(f) for f in required | optional}]
    if unknown:
        raise ProtocolError(f"{msg.type.name} carries unexpected tags {[hex(t) for t in unknown]}")
    missing = [f.name for f in required if int(f) not in seen]
    if missing:
        raise ProtocolError(f"{msg.type.name} is missing {missing}")
    for t in set(seen):
        if t != Field.BUNDLE and seen.count(t) > 1:
            raise ProtocolError(f"{msg.type.name} repeats tag 0x{t:02x}")


def encode_message(msg: Message) -> bytes:
    validate(msg)
    return bytes([msg.type]) + tlv.encode(msg.fields)


def decode_message(data: bytes) -> Message:
    if not data:
        raise ProtocolError("empty message")
    try:
        kind = MsgType(data[0])
    except ValueError:
        raise ProtocolError(f"unknown message type 0x{data[0]:02x}") from None
    try:
        fields = tlv.decode(data[1:])
    except ValidationError as e:
        raise ProtocolError(str(e)) from None
    msg = Message(kind, tuple(fields))
    validate(msg)
    return msg


def frame(msg: Message) -> bytes:
    body = encode_message(msg)
    return len(body).to_bytes(4, "big") + body


def _recv_exact(sock: socket.socket, size: int) -> bytes:
    buf = bytearray()
    while len(buf) < size:
        chunk = sock.recv(size - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket, limit: int = MAX_FRAME) -> bytes:
    size = int.from_bytes(_recv_exact(sock, 4), "big")
    if size > limit:
        raise ProtocolError(f"frame of {size} bytes exceeds the {limit}-byte limit")
    return _recv_exact(sock, size)


def send_message(sock: socket.socket, msg: Message) -> None:
    sock.sendall(frame(msg))


# ---------------------------------------------------------------------------
# schedules


@dataclass
class Schedule:
    """The verifier's compiled challenges together with their witnesses."""

    schedule_id: str
    m: int
    plant_depth: int
    challenges: list[SymmetricChallenge]
    indices: list[int]

    @property
    def n(self) -> int:
        return self.challenges[0].n

    @property
    def k(self) -> int:
        return len(self.challenges)

    def bundles(self) -> list[str]:
        return [bundle_json(ch.public, self.m, i) for ch, i in zip(self.challenges, self.indices)]

    def digests(self) -> list[bytes]:
        return [circuit_digest(ch.public) for ch in self.challenges]

    def expected_features(self) -> bytes:
        """Closed-form buckets read off from the witnesses."""
        return pack_buckets([quantize_phase(ch.phase(), self.m) for ch in self.challenges], self.m)


def compile_schedule(
    master: bytes,
    n: int,
    m: int,
    k: int,
    plant_depth: int = 2,
    config: CompilerConfig | None = None,
    schedule_id: str = "default",
    first_index: int = 0,
    edge_margin: float = 0.2,
) -> Schedule:
    """Compile ``k`` symmetric challenges for consecutive plant indices.

    Each challenge's phase is kept ``edge_margin`` bucket widths away from a
    bucket edge, so an honest estimate that is slightly off still quantizes
    to the verifier's closed-form bucket.
    """
    config = config or CompilerConfig()
    challenges, indices = [], []
    for i in range(first_index, first_index + k):
        plant = plant_for_index(master, i, n, plant_depth)
        seed = f"{config.seed}/{schedule_id}/{i}"
        ch = compile_symmetric(plant, n, CompilerConfig(config.delta, config.layers, config.spsa, seed=seed))
        challenges.append(guard_phase(ch, m, edge_margin, stream(seed, "edge-guard")))
        indices.append(i)
    return Schedule(schedule_id, m, plant_depth, challenges, indices)


# ---------------------------------------------------------------------------
# state machines


class Phase:
    INIT = "init"
    CHALLENGED = "challenged"
    CONFIRMED = "confirmed"
    ACCEPTED = "accepted"
    REJECTED = "rejected"


NonceSource = Callable[[], bytes]


def _fresh_nonce() -> bytes:
    return secrets.token_bytes(NONCE_LEN)


@dataclass
class _Machine:
    role: str
    max_attempts: int = 1
    nonce_source: NonceSource = _fresh_nonce
    phase: str = Phase.INIT
    reason: str = ""
    log: list[dict] = field(default_factory=list)
    transcript: Transcript | None = None

    @property
    def done(self) -> bool:
        return self.phase in (Phase.ACCEPTED, Phase.REJECTED)

    @property
    def accepted(self) -> bool:
        return self.phase == Phase.ACCEPTED

    def _note(self, direction: str, msg: Message) -> None:
        self.log.append({"t": time.time(), "role": self.role, "dir": direction, "type": msg.type.name, "phase": self.phase})

    def _out(self, *msgs: Message) -> list[Message]:
        for m in msgs:
            self._note("send", m)
        return list(msgs)

    def reject(self, reason: str, notify: bool = True) -> list[Message]:
        """Move to the rejected state; optionally tell the peer why."""
        was_done = self.done
        self.phase, self.reason = Phase.REJECTED, reason
        self.log.append({"t": time.time(), "role": self.role, "event": "reject", "reason": reason})
        if notify and not was_done:
            return self._out(message(MsgType.ERROR, (Field.REASON, reason.encode())))
        return []

    def receive(self, msg: Message) -> list[Message]:
        if self.done:
            return []
        self._note("recv", msg)
        if msg.type == MsgType.ERROR:
            return self.reject("peer error: " + msg.get(Field.REASON).decode(errors="replace"), notify=False)
        try:
            return self._handle(msg)
        except (ProtocolError, ValidationError, KeyError, ValueError) as e:
            return self.reject(f"{type(e).__name__}: {e}")

    def _handle(self, msg: Message) -> list[Message]:  # pragma: no cover - abstract
        raise NotImplementedError


def _expect(msg: Message, kind: MsgType, phase: str) -> None:
    if msg.type != kind:
        raise ProtocolError(f"expected {kind.name} in phase {phase}, got {msg.type.name}")


@dataclass
class VerifierMachine(_Machine):
    """Sends challenges, checks the prover's tag, then proves its own key in RESULT."""

    schedule: Schedule | None = None
    role: str = "verifier"
    _nonce: bytes = b""
    _confirm_nonce: bytes = b""
    _key: SessionKey | None = None
    _gate: ConfirmationGate | None = None
    _stage: int = 0

    def start(self) -> list[Message]:
        s = self.schedule
        self._nonce = self.nonce_source()
        return self._out(
            message(
                MsgType.HELLO,
                (Field.VERSION, bytes([VERSION])),
                (Field.NONCE, self._nonce),
                (Field.N, tlv.u32(s.n)),
                (Field.M, tlv.u32(s.m)),
                (Field.K, tlv.u32(s.k)),
                (Field.DEPTH, tlv.u32(s.plant_depth)),
            )
        )

    def _handle(self, msg: Message) -> list[Message]:
        s = self.schedule
        if self._stage == 0:
            _expect(msg, MsgType.HELLO, self.phase)
            if msg.has(Field.N) or msg.has(Field.M) or msg.has(Field.K) or msg.has(Field.DEPTH):
                raise ProtocolError("prover HELLO must not carry parameters")
            if msg.get(Field.VERSION) != bytes([VERSION]):
                raise ProtocolError("version mismatch")
            prover_nonce = msg.get(Field.NONCE)
            if len(prover_nonce) != NONCE_LEN or prover_nonce == self._nonce:
                raise ProtocolError("bad prover nonce")
            self.transcript = Transcript(VERSION, self._nonce, prover_nonce, s.schedule_id, tuple(s.digests()), s.m, s.k)
            self._key = derive_key(s.expected_features(), self.transcript)
            self._confirm_nonce = self.nonce_source()
            self._gate = ConfirmationGate(self._key, "prover", self._confirm_nonce, self.max_attempts)
            self._stage, self.phase = 1, Phase.CHALLENGED
            challenge = message(
                MsgType.CHALLENGE_SET,
                (Field.SCHEDULE, s.schedule_id.encode()),
                *[(Field.BUNDLE, b.encode()) for b in s.bundles()],
            )
            return self._out(challenge, message(MsgType.CONFIRM_REQ, (Field.NONCE, self._confirm_nonce)))
        if self._stage == 1:
            _expect(msg, MsgType.CONFIRM_RESP, self.phase)
            verdict = self._gate.check(msg.get(Field.TAG))
            self.log.append({"t": time.time(), "role": self.role, "event": "confirm", "accepted": verdict.accepted, "attempt": verdict.attempt})
            if not verdict.accepted:
                self.phase, self.reason = Phase.REJECTED, "prover confirmation tag mismatch"
                return self._out(message(MsgType.RESULT, (Field.VERDICT, b"\x00"), (Field.REASON, self.reason.encode())))
            self.phase = Phase.CONFIRMED
            own = confirm_tag(self._key, "verifier", self.transcript.prover_nonce)
            result = self._out(message(MsgType.RESULT, (Field.VERDICT, b"\x01"), (Field.TAG, own)))
            self.phase = Phase.ACCEPTED
            return result
        raise ProtocolError(f"unexpected {msg.type.name} after the exchange")


@dataclass
class ProverConfig:
    regime: str = "Q"
    eval: EvalConfig = field(default_factory=EvalConfig)


@dataclass
class ProverMachine(_Machine):
    """Evaluates received challenges under plants regenerated from the master seed."""

    master: bytes = b""
    config: ProverConfig = field(default_factory=ProverConfig)
    role: str = "prover"
    features: FeatureVector | None = None
    _params: dict = field(default_factory=dict)
    _nonce: bytes = b""
    _key: SessionKey | None = None
    _stage: int = 0

    def start(self) -> list[Message]:
        return []

    def _evaluate(self, bundles: Sequence[bytes]) -> tuple[FeatureVector, list[bytes]]:
        n, m, depth = self._params["n"], self._params["m"], self._params["depth"]
        feats, digests = [], []
        for pos, raw in enumerate(bundles):
            public, meta = read_bundle(raw)
            if public.n != n or meta["m"] != m or meta["n"] != n:
                raise ProtocolError("bundle parameters disagree with HELLO")
            psi = plant_state(plant_for_index(self.master, int(meta["index"]), n, depth))
            feats.append(evaluate_one(public, psi, self.config.regime, m, self.config.eval, pos))
            digests.append(bytes.fromhex(meta["digest"]))
        return FeatureVector(feats, m), digests

    def _handle(self, msg: Message) -> list[Message]:
        if self._stage == 0:
            _expect(msg, MsgType.HELLO, self.phase)
            if msg.get(Field.VERSION) != bytes([VERSION]):
                raise ProtocolError("version mismatch")
            verifier_nonce = msg.get(Field.NONCE)
            if len(verifier_nonce) != NONCE_LEN:
                raise ProtocolError("bad verifier nonce")
            self._params = {
                "verifier_nonce": verifier_nonce,
                "n": tlv.read_u32(msg.get(Field.N)),
                "m": tlv.read_u32(msg.get(Field.M)),
                "k": tlv.read_u32(msg.get(Field.K)),
                "depth": tlv.read_u32(msg.get(Field.DEPTH)),
            }
            if not (1 <= self._params["m"] <= 32 and self._params["k"] >= 1):
                raise ProtocolError("unsupported m or k")
            self._nonce = self.nonce_source()
            self._stage = 1
            return self._out(message(MsgType.HELLO, (Field.VERSION, bytes([VERSION])), (Field.NONCE, self._nonce)))
        if self._stage == 1:
            _expect(msg, MsgType.CHALLENGE_SET, self.phase)
            bundles = msg.all(Field.BUNDLE)
            if len(bundles) != self._params["k"]:
                raise ProtocolError(f"expected {self._params['k']} challenges, got {len(bundles)}")
            self.features, digests = self._evaluate(bundles)
            p = self._params
            self.transcript = Transcript(VERSION, p["verifier_nonce"], self._nonce, msg.get(Field.SCHEDULE).decode(), tuple(digests), p["m"], p["k"])
            self._key = derive_key(self.features, self.transcript)
            self._stage, self.phase = 2, Phase.CHALLENGED
            return []
        if self._stage == 2:
            _expect(msg, MsgType.CONFIRM_REQ, self.phase)
            nonce = msg.get(Field.NONCE)
            if len(nonce) != NONCE_LEN:
                raise ProtocolError("bad confirmation nonce")
            self._stage, self.phase = 3, Phase.CONFIRMED
            return self._out(message(MsgType.CONFIRM_RESP, (Field.TAG, confirm_tag(self._key, "prover", nonce))))
        if self._stage == 3:
            _expect(msg, MsgType.RESULT, self.phase)
            if msg.get(Field.VERDICT) != b"\x01":
                reason = msg.get(Field.REASON).decode(errors="replace") if msg.has(Field.REASON) else "rejected"
                return self.reject("verifier: " + reason, notify=False)
            if not msg.has(Field.TAG) or not verify_confirmation(self._key, "verifier", self._nonce, msg.get(Field.TAG)):
                return self.reject("verifier confirmation tag mismatch", notify=False)
            self.phase = Phase.ACCEPTED
            return []
        raise ProtocolError(f"unexpected {msg.type.name} after the exchange")


# ---------------------------------------------------------------------------
# transport


@dataclass(frozen=True)
class SessionOutcome:
    accepted: bool
    reason: str
    log: list[dict]

    def log_lines(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.log)


def run_session(machine: _Machine, sock: socket.socket, timeout: float | None = 60.0) -> SessionOutcome:
    """Drive ``machine`` over ``sock`` until it accepts or rejects."""
    sock.settimeout(timeout)
    try:
        for msg in machine.start():
            send_message(sock, msg)
        while not machine.done:
            try:
                msg = decode_message(read_frame(sock))
            except ProtocolError as e:
                for out in machine.reject(f"malformed message: {e}"):
                    send_message(sock, out)
                break
            for out in machine.receive(msg):
                send_message(sock, out)
    except (OSError, ConnectionError) as e:
        machine.reject(f"transport failure: {e}", notify=False)
    return SessionOutcome(machine.accepted, machine.reason, machine.log)


def verifier_session(sock: socket.socket, schedule: Schedule, **kw) -> SessionOutcome:
    return run_session(VerifierMachine(schedule=schedule, **kw), sock)


def prover_session(sock: socket.socket, master: bytes, config: ProverConfig | None = None, **kw) -> SessionOutcome:
    return run_session(ProverMachine(master=master, config=config or ProverConfig(), **kw), sock)


def local_session(schedule: Schedule, master: bytes, config: ProverConfig | None = None) -> tuple[SessionOutcome, SessionOutcome]:
    """Run both roles over a socket pair in this process; returns (verifier, prover)."""
    a, b = socket.socketpair()
    result: dict[str, SessionOutcome] = {}
    t = threading.Thread(target=lambda: result.__setitem__("p", prover_session(b, master, config)))
    t.start()
    try:
        v = verifier_session(a, schedule)
    finally:
        t.join()
        a.close()
        b.close()
    return v, result["p"]


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        outcome = verifier_session(self.request, self.server.schedule)
        self.server.record(outcome)


class VerifierServer(socketserver.ThreadingTCPServer):
    """Accepts provers; each connection gets its own machine and fresh nonces."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], schedule: Schedule, on_outcome: Callable[[SessionOutcome], None] | None = None):
        super().__init__(address, _Handler)
        self.schedule = schedule
        self.outcomes: list[SessionOutcome] = []
        self._done = threading.Condition()
        self._on_outcome = on_outcome

    def record(self, outcome: SessionOutcome) -> None:
        if self._on_outcome:
            self._on_outcome(outcome)
        with self._done:
            self.outcomes.append(outcome)
            self._done.notify_all()

    def wait_for(self, count: int, timeout: float | None = None) -> bool:
        """Block until ``count`` sessions have finished."""
        with self._done:
            return self._done.wait_for(lambda: len(self.outcomes) >= count, timeout)


def connect(host: str, port: int, master: bytes, config: ProverConfig | None = None, timeout: float = 60.0) -> SessionOutcome:
    with socket.create_connection((host, port), timeout=timeout) as sock:
        return prover_session(sock, master, config)


def default_master(seed: bytes | int | str) -> bytes:
    """Deterministic 32-byte master secret for demos and tests."""
    return stream(seed, "master-secret").bytes(32)


__all__ = [
    "Field",
    "Message",
    "MsgType",
    "Phase",
    "ProtocolError",
    "ProverConfig",
    "ProverMachine",
    "Schedule",
    "SessionOutcome",
    "VerifierMachine",
    "VerifierServer",
    "compile_schedule",
    "connect",
    "decode_message",
    "default_master",
    "encode_message",
    "frame",
    "local_session",
    "message",
    "prover_session",
    "read_frame",
    "run_session",
    "verifier_session",
]
