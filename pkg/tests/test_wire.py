"""Wire protocol: framing, round trips, request-id scoping."""

import random

import pytest

from fiddle import wire
from fiddle.wire import Envelope, FrameError, Session, decode, encode


def test_request_encoding_matches_fixed_form():
    env = Envelope(kind="request", client="c1", rid=7, service="evaluate",
                   args=[2, "value"])
    assert encode(env) == (b'{"kind":"request","client":"c1","rid":7,'
                           b'"service":"evaluate","args":[2,"value"]}\n')


def test_reply_carries_status_and_payload():
    env = Envelope(kind="reply", client="c1", rid=7, status="ok",
                   payload={"value": 1, "initialized": True, "ordinal": 2})
    line = encode(env)
    assert b'"status":"ok"' in line
    assert b'"value":1' in line and b'"initialized":true' in line
    assert decode(line) == env


def test_event_envelope_names_program():
    env = Envelope(kind="event", client="c2",
                   payload={"seq": 3, "kind": "Spawned",
                            "body": {"tid": 2, "program": "echo_server"}})
    line = encode(env)
    assert b'"kind":"event"' in line and b"echo_server" in line
    assert decode(line) == env


def _random_envelope(rng):
    kind = rng.choice(wire.KINDS)
    args = [rng.choice([rng.randint(-5, 99), "txt", 'quo"te\nnl', True, None,
                        [1, 2], {"k": "v"}])
            for _ in range(rng.randint(0, 4))]
    payload = rng.choice([None, {"value": rng.randint(-9, 9)},
                          {"nested": {"list": [1, "two"]}}, [1, 2, 3], "plain"])
    return Envelope(
        kind=kind,
        client=rng.choice(["", "c1", "c2", "launcher-1"]),
        rid=rng.randint(0, 500),
        service=rng.choice(["", "evaluate", "list_tids", "wait_stop"]),
        args=args,
        status=rng.choice(["", "ok", "unknown_tid"]),
        payload=payload,
    )


def test_round_trip_on_randomized_envelopes():
    rng = random.Random(20030901)
    for _ in range(1000):
        env = _random_envelope(rng)
        assert decode(encode(env)) == env


def test_no_embedded_raw_newlines():
    env = Envelope(kind="reply", client="c1", rid=1, status="ok",
                   payload={"text": "line1\nline2"})
    line = encode(env)
    assert line.endswith(b"\n") and line.count(b"\n") == 1


def test_truncated_line_is_frame_error():
    env = Envelope(kind="request", client="c1", rid=1, service="s", args=[])
    with pytest.raises(FrameError):
        decode(encode(env)[:-10])


def test_unknown_extra_keys_ignored():
    line = (b'{"kind":"request","client":"c1","rid":3,"service":"tids",'
            b'"future_field":42}\n')
    env = decode(line)
    assert env == Envelope(kind="request", client="c1", rid=3, service="tids")


def test_unknown_kind_rejected():
    with pytest.raises(FrameError):
        decode(b'{"kind":"telegram"}\n')
    with pytest.raises(FrameError):
        encode(Envelope(kind="telegram"))


def test_concatenated_stream_decodes_unambiguously():
    rng = random.Random(7)
    envelopes = [_random_envelope(rng) for _ in range(50)]
    stream = b"".join(encode(e) for e in envelopes)
    decoded = [decode(line) for line in stream.splitlines()]
    assert decoded == envelopes


def test_session_request_ids_monotonic_from_one():
    session = Session("c1")
    assert session.next_request_id() == 1
    assert [session.next_request_id() for _ in range(3)] == [2, 3, 4]


def test_request_ids_are_client_scoped():
    a, b = Session("c1"), Session("c2")
    assert a.next_request_id() == 1
    assert b.next_request_id() == 1  # identifiers are per-session


def test_request_id_uniqueness_within_session():
    session = Session("c1")
    seen = {session.next_request_id() for _ in range(500)}
    assert len(seen) == 500
