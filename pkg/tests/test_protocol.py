import itertools
import json
import socket
import threading

import pytest
from hypothesis import given, settings, strategies as st

from qsa import protocol as pr
from qsa import tlv
from qsa.compile import CompilerConfig, SPSAConfig
from qsa.extract import EvalConfig
from qsa.protocol import Field, Message, MsgType, Phase, ProtocolError
from qsa.qsim import NoiseModel

MASTER = pr.default_master("protocol-tests")
CONFIG = CompilerConfig(delta=0.1, layers=4, spsa=SPSAConfig(steps=1500, a=4.0, restarts=2), seed="p")


@pytest.fixture(scope="module")
def schedule():
    return pr.compile_schedule(MASTER, 4, 4, 4, config=CONFIG, schedule_id="unit")


def pump(verifier, prover):
    """Run both machines in memory; returns every message in delivery order."""
    sent = []
    queue = [("p", m) for m in verifier.start()] + [("v", m) for m in prover.start()]
    while queue:
        to, msg = queue.pop(0)
        sent.append((to, msg))
        target = prover if to == "p" else verifier
        queue += [("v" if to == "p" else "p", out) for out in target.receive(msg)]
    return sent


def test_honest_in_memory(schedule):
    v, p = pr.VerifierMachine(schedule=schedule), pr.ProverMachine(master=MASTER)
    sent = pump(v, p)
    assert v.accepted and p.accepted
    assert [m.type for _, m in sent] == [
        MsgType.HELLO, MsgType.HELLO, MsgType.CHALLENGE_SET, MsgType.CONFIRM_REQ, MsgType.CONFIRM_RESP, MsgType.RESULT,
    ]
    assert v.transcript == p.transcript


def test_wrong_master_rejected(schedule):
    v, p = pr.VerifierMachine(schedule=schedule), pr.ProverMachine(master=bytes(32))
    pump(v, p)
    assert v.phase == Phase.REJECTED and not p.accepted
    assert "mismatch" in v.reason


def test_verifier_result_requires_prover_tag(schedule):
    v = pr.VerifierMachine(schedule=schedule)
    v.start()
    v.receive(pr.message(MsgType.HELLO, (Field.VERSION, b"\x01"), (Field.NONCE, b"\x09" * 16)))
    out = v.receive(pr.message(MsgType.CONFIRM_RESP, (Field.TAG, b"\0" * 16)))
    assert [m.get(Field.VERDICT) for m in out] == [b"\x00"]
    assert not v.accepted


def test_verifier_locks_after_one_attempt(schedule):
    v = pr.VerifierMachine(schedule=schedule)
    v.start()
    v.receive(pr.message(MsgType.HELLO, (Field.VERSION, b"\x01"), (Field.NONCE, b"\x09" * 16)))
    v.receive(pr.message(MsgType.CONFIRM_RESP, (Field.TAG, b"\0" * 16)))
    assert v.done and v.receive(pr.message(MsgType.CONFIRM_RESP, (Field.TAG, b"\1" * 16))) == []


def test_replayed_confirmation_rejected(schedule):
    v1, p1 = pr.VerifierMachine(schedule=schedule), pr.ProverMachine(master=MASTER)
    sent = pump(v1, p1)
    old_hello = next(m for to, m in sent if to == "v" and m.type == MsgType.HELLO)
    old_resp = next(m for _, m in sent if m.type == MsgType.CONFIRM_RESP)
    v2 = pr.VerifierMachine(schedule=schedule)
    v2.start()
    v2.receive(old_hello)
    out = v2.receive(old_resp)
    assert not v2.accepted and out[0].get(Field.VERDICT) == b"\x00"


def test_replayed_result_rejected_by_prover(schedule):
    sent = pump(pr.VerifierMachine(schedule=schedule), pr.ProverMachine(master=MASTER))
    verifier_msgs = [m for to, m in sent if to == "p"]
    p2 = pr.ProverMachine(master=MASTER)
    v2 = pr.VerifierMachine(schedule=schedule)
    p2.receive(v2.start()[0])
    for m in verifier_msgs[1:]:
        p2.receive(m)
    assert not p2.accepted


def test_missing_challenge_rejected(schedule):
    p = pr.ProverMachine(master=MASTER)
    v = pr.VerifierMachine(schedule=schedule)
    p.receive(v.start()[0])
    short = pr.message(MsgType.CHALLENGE_SET, (Field.SCHEDULE, b"unit"), *[(Field.BUNDLE, b.encode()) for b in schedule.bundles()[:-1]])
    out = p.receive(short)
    assert p.phase == Phase.REJECTED and out[0].type == MsgType.ERROR


def test_tampered_bundle_rejected(schedule):
    p = pr.ProverMachine(master=MASTER)
    v = pr.VerifierMachine(schedule=schedule)
    p.receive(v.start()[0])
    bundles = schedule.bundles()
    doc = json.loads(bundles[0])
    doc["meta"]["digest"] = "00" * 32
    bundles[0] = json.dumps(doc)
    p.receive(pr.message(MsgType.CHALLENGE_SET, (Field.SCHEDULE, b"unit"), *[(Field.BUNDLE, b.encode()) for b in bundles]))
    assert p.phase == Phase.REJECTED


def test_version_mismatch(schedule):
    v = pr.VerifierMachine(schedule=schedule)
    v.start()
    v.receive(pr.message(MsgType.HELLO, (Field.VERSION, b"\x02"), (Field.NONCE, b"\x01" * 16)))
    assert v.phase == Phase.REJECTED and "version" in v.reason


@pytest.fixture(scope="module")
def honest_trace(schedule):
    sent = pump(pr.VerifierMachine(schedule=schedule), pr.ProverMachine(master=MASTER))
    return [m for to, m in sent if to == "p"], [m for to, m in sent if to == "v"]


@settings(max_examples=40, deadline=None)
@given(data=st.data())
def test_prover_never_accepts_shuffled_order(schedule, honest_trace, data):
    to_prover, _ = honest_trace
    order = data.draw(st.permutations(range(len(to_prover))))
    p = pr.ProverMachine(master=MASTER)
    for i in order:
        p.receive(to_prover[i])
    # the recorded RESULT tag is bound to the original prover nonce, so even the honest order fails here
    assert not p.accepted


@settings(max_examples=40, deadline=None)
@given(data=st.data())
def test_verifier_result_only_after_confirmation(schedule, honest_trace, data):
    _, to_verifier = honest_trace
    msgs = data.draw(st.lists(st.sampled_from(to_verifier), max_size=5))
    v = pr.VerifierMachine(schedule=schedule)
    v.start()
    for m in msgs:
        for out in v.receive(m):
            if out.type == MsgType.RESULT and out.get(Field.VERDICT) == b"\x01":
                pytest.fail("verifier accepted a replayed or reordered transcript")
    assert not v.accepted


def test_all_orders_of_short_sequences(schedule, honest_trace):
    to_prover, _ = honest_trace
    for r in range(1, len(to_prover) + 1):
        for perm in itertools.permutations(to_prover, r):
            p = pr.ProverMachine(master=MASTER)
            for m in perm:
                p.receive(m)
            assert not p.accepted


# --- wire format

@st.composite
def messages(draw):
    kind = draw(st.sampled_from(list(MsgType)))
    required, optional = pr._SCHEMA[kind]
    chosen = sorted(required)
    if optional:
        chosen += draw(st.lists(st.sampled_from(sorted(optional)), unique=True))
    fields = [(int(t), draw(st.binary(max_size=64))) for t in chosen]
    if kind == MsgType.CHALLENGE_SET:
        fields += [(int(Field.BUNDLE), draw(st.binary(max_size=32))) for _ in range(draw(st.integers(0, 4)))]
    fields = draw(st.permutations(fields))
    return Message(kind, tuple(fields))


@settings(max_examples=10_000, deadline=None)
@given(msg=messages())
def test_wire_round_trip(msg):
    raw = pr.frame(msg)
    assert int.from_bytes(raw[:4], "big") == len(raw) - 4
    assert pr.decode_message(raw[4:]) == msg


def test_frame_layout_bytes():
    msg = pr.message(MsgType.CONFIRM_REQ, (Field.NONCE, b"\xaa" * 16))
    assert pr.frame(msg) == bytes.fromhex("00000016" "03" "02" "00000010") + b"\xaa" * 16


def test_unknown_tag_rejected():
    raw = bytes([MsgType.CONFIRM_RESP]) + tlv.encode([(Field.TAG, b"t"), (0x33, b"x")])
    with pytest.raises(ProtocolError):
        pr.decode_message(raw)


def test_unknown_type_and_truncation_rejected():
    with pytest.raises(ProtocolError):
        pr.decode_message(b"\x42")
    with pytest.raises(ProtocolError):
        pr.decode_message(b"")
    with pytest.raises(ProtocolError):
        pr.decode_message(bytes([MsgType.CONFIRM_RESP, Field.TAG, 0, 0, 0, 9, 1]))


def test_missing_and_repeated_fields_rejected():
    with pytest.raises(ProtocolError):
        pr.message(MsgType.HELLO, (Field.VERSION, b"\x01"))
    with pytest.raises(ProtocolError):
        pr.message(MsgType.CONFIRM_RESP, (Field.TAG, b"a"), (Field.TAG, b"b"))


def test_read_frame_limits():
    a, b = socket.socketpair()
    with a, b:
        a.sendall((100).to_bytes(4, "big"))
        with pytest.raises(ProtocolError):
            pr.read_frame(b, limit=50)
    a, b = socket.socketpair()
    with a, b:
        a.sendall(b"\x00\x00")
        a.close()
        with pytest.raises((ConnectionError, OSError)):
            pr.read_frame(b)


# --- sockets


def test_local_session(schedule):
    v, p = pr.local_session(schedule, MASTER)
    assert v.accepted and p.accepted
    lines = v.log_lines().splitlines()
    assert all(json.loads(line)["role"] == "verifier" for line in lines)


def test_local_session_regime_m(schedule):
    v, p = pr.local_session(schedule, MASTER, pr.ProverConfig("M"))
    assert v.accepted and p.accepted


def test_noisy_prover_with_shots(schedule):
    cfg = pr.ProverConfig("Q", EvalConfig(shots=4000, noise=NoiseModel(1e-4), seed=3, trajectories=32))
    v, p = pr.local_session(schedule, MASTER, cfg)
    assert v.accepted == p.accepted


def test_tcp_server_handles_concurrent_provers(schedule):
    with pr.VerifierServer(("127.0.0.1", 0), schedule) as server:
        host, port = server.server_address
        t = threading.Thread(target=server.serve_forever, daemon=True)
        t.start()
        results = [None] * 3
        masters = [MASTER, MASTER, bytes(32)]

        def run(i):
            results[i] = pr.connect(host, port, masters[i])

        threads = [threading.Thread(target=run, args=(i,)) for i in range(3)]
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        server.shutdown()
    assert [r.accepted for r in results] == [True, True, False]
    assert sorted(o.accepted for o in server.outcomes) == [False, True, True]


def test_garbage_peer_gets_error(schedule):
    a, b = socket.socketpair()
    with a, b:
        t = threading.Thread(target=lambda: b.sendall((3).to_bytes(4, "big") + b"\x42\x00\x00"))
        t.start()
        out = pr.verifier_session(a, schedule)
        t.join()
        assert not out.accepted and "malformed" in out.reason
        pr.read_frame(b)  # the verifier's HELLO
        assert pr.decode_message(pr.read_frame(b)).type == MsgType.ERROR


def test_transport_failure_rejects(schedule):
    a, b = socket.socketpair()
    b.close()
    with a:
        out = pr.verifier_session(a, schedule)
    assert not out.accepted and "transport" in out.reason
