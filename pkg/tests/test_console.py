"""Console command parsing and rendering."""

import pytest

from fiddle import corpus
from fiddle.console import (
    AmbiguousPrefix, Command, ConsoleSession, Layer0Backend, MissingTid,
    UnknownVerb, parse_command, render_tids,
)


# -- parsing ------------------------------------------------------------------

def test_parse_tid_verb_args():
    assert parse_command("2 evaluate value") == Command(2, "evaluate", ("value",))


def test_unique_prefix_expands():
    assert parse_command("2 ev value") == Command(2, "evaluate", ("value",))
    assert parse_command("t") == Command(None, "tids", ())
    assert parse_command("2 c") == Command(2, "continue", ())
    assert parse_command("2 i") == Command(2, "info-line", ())


def test_ambiguous_prefix_rejected():
    with pytest.raises(AmbiguousPrefix):
        parse_command("2 s")  # set / step / status
    with pytest.raises(AmbiguousPrefix):
        parse_command("2 st")  # step / status


def test_unknown_verb():
    with pytest.raises(UnknownVerb):
        parse_command("2 explode")


def test_missing_tid_for_per_process_verbs():
    with pytest.raises(MissingTid):
        parse_command("evaluate value")
    with pytest.raises(MissingTid):
        parse_command("continue")


# -- execution + rendering ---------------------------------------------------------

@pytest.fixture
def session():
    backend = Layer0Backend(corpus.DIR, start="echo_client")
    sess = ConsoleSession(backend)
    yield sess
    backend.close()


def test_tids_table_rendering(session):
    out = session.execute_line("tids")
    lines = out.split("\n")
    assert lines[0] == "  TID  ATT  TP_PID  LLD_PID  L_TID MACHINE"
    assert lines[1].startswith("  1    n    1001    2001     1 ")
    assert len(lines) == 2


def test_evaluate_rendering_with_session_ordinals(session):
    backend = session.backend
    assert session.execute_line("1 evaluate value") == "=> $1 = 0 (uninitialized)"
    backend.engine.set_variable(1, "value", 1)
    assert session.execute_line("1 evaluate value") == "=> $2 = 1"


def test_set_then_evaluate(session):
    assert session.execute_line("1 set value 1") == "ok"
    assert session.execute_line("1 ev value") == "=> $1 = 1"


def test_info_line_rendering(session):
    assert session.execute_line("1 info-line") == 'Line 11 of "echo_client.mpl"'


def test_break_continue_status_flow(session):
    assert session.execute_line("1 break 17") == "breakpoint 1 set"
    assert session.execute_line("1 continue") == "ok"
    engine = session.backend.engine
    engine.wait_stop(1, 5)
    assert session.execute_line("1 status") == "tid 1: stopped_before line=17"
    assert session.execute_line("1 delete 1") == "ok"


def test_errors_rendered_as_bang_code(session):
    assert session.execute_line("9 evaluate value") == "! unknown_tid"
    assert session.execute_line("1 break 12") == "! bad_line"
    assert session.execute_line("1 explode") == "! unknown_verb"


def test_tids_rendering_deterministic(session):
    assert session.execute_line("tids") == session.execute_line("tids")


def test_layer1_backend_talks_to_a_node_daemon():
    from fiddle.console import Layer1Backend
    from fiddle.node import NodeServer

    node = NodeServer(corpus.DIR)
    node.start_program("echo_client")
    backend = Layer1Backend(node.endpoint)
    console = ConsoleSession(backend)
    try:
        out = console.execute_line("tids")
        assert out.split("\n")[1].startswith("  1    n")
        assert console.execute_line("1 info-line") == 'Line 11 of "echo_client.mpl"'
        assert console.execute_line("1 set value 9") == "ok"
        assert console.execute_line("1 evaluate value") == "=> $1 = 9"
    finally:
        backend.close()
        node.close()


def test_repl_scripted_session(capsys):
    from fiddle.console import repl

    backend = Layer0Backend(corpus.DIR, start="echo_client")
    session = ConsoleSession(backend)
    lines = iter(["", "1 ev totid", "bogus", "q"])
    try:
        repl(session, "0s", input_fn=lambda prompt: next(lines))
    finally:
        backend.close()
    out = capsys.readouterr().out
    assert "Level 0s console" in out
    assert "=> $1 = 0 (uninitialized)" in out
    assert "! unknown_verb" in out


def test_every_console_command_is_one_hub_request():
    """Observable via PeerRequest events seen by another client."""
    import threading
    import time

    from fiddle.console import Layer2Backend
    from fiddle.client import HubClient
    from fiddle.hub import HubServer
    from fiddle.node import NodeServer

    node = NodeServer(corpus.DIR)
    hub = HubServer()
    hub.register_node(node.endpoint)
    hub.serve()
    node.start_program("echo_client")
    peer_requests = []
    lock = threading.Lock()

    def spy(_rid, record):
        if record.get("kind") == "PeerRequest":
            with lock:
                peer_requests.append(record["body"])

    observer = HubClient(hub.endpoint, mode="event_async", on_event=spy)
    backend = Layer2Backend(hub.endpoint)
    console = ConsoleSession(backend)
    try:
        commands = ["tids", "1 evaluate totid", "1 info-line", "1 status"]
        for line in commands:
            console.execute_line(line)
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            with lock:
                if len(peer_requests) >= len(commands):
                    break
            time.sleep(0.02)
        with lock:
            mine = [p for p in peer_requests if p["client"] == backend.client.client_id]
        assert [p["service"] for p in mine] == ["list_tids", "evaluate",
                                                "info_line", "status"]
    finally:
        backend.close()
        observer.close()
        hub.close()
        node.close()


def test_render_tids_two_rows():
    rows = [
        {"tid": 1, "att": "n", "tp_pid": 1001, "lld_pid": 2001, "l_tid": 1,
         "machine": "m"},
        {"tid": 2, "att": "n", "tp_pid": 1002, "lld_pid": 2002, "l_tid": 2,
         "machine": "m"},
    ]
    out = render_tids(rows)
    assert out.split("\n") == [
        "  TID  ATT  TP_PID  LLD_PID  L_TID MACHINE",
        "  1    n    1001    2001     1 m",
        "  2    n    1002    2002     2 m",
    ]
