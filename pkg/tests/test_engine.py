"""Local engine: registry, breakpoints, execution control, inspection.

Derived expectations (stop positions, executed line sets) come from the
reference interpreter in reference_interp.py.
"""

import threading

import pytest

from fiddle import corpus
from fiddle.engine import (
    AFTER, BEFORE, BadLine, BadValue, DuplicateBreakpoint, LocalEngine,
    NotStopped, UnknownBreakpoint, UnknownTid, WaitTimeout,
)
from fiddle.mpl import Runtime, TaskStatus


@pytest.fixture
def engine():
    runtime = Runtime(corpus.DIR, debug_capture=True)
    eng = LocalEngine(runtime, machine="testhost")
    yield eng
    eng.shutdown()


def _register(engine, name):
    task = engine.runtime.spawn_task(name, debug_capture=True)
    return engine.register_process(task)


# -- registry ---------------------------------------------------------------

def test_register_assigns_sequential_tids(engine):
    assert _register(engine, "echo_client") == 1
    assert _register(engine, "echo_server") == 2
    assert _register(engine, "echo_server") == 3


def test_registry_bijection_grows_by_one(engine):
    assert engine.list_tids() == []
    _register(engine, "echo_client")
    rows = engine.list_tids()
    assert [r["tid"] for r in rows] == [1]
    _register(engine, "echo_server")
    rows = engine.list_tids()
    assert [r["tid"] for r in rows] == [1, 2]
    assert [r["l_tid"] for r in rows] == [1, 2]


def test_synthetic_pids_and_machine(engine):
    tid = _register(engine, "echo_client")
    row = engine.list_tids()[0]
    assert row["tp_pid"] == 1000 + tid
    assert row["lld_pid"] == 2000 + tid
    assert row["machine"] == "testhost"
    assert row["att"] == "n"


def test_registered_process_stays_stopped(engine):
    tid = _register(engine, "echo_client")
    assert engine.wait_stop(tid, 0.2) == TaskStatus.created()
    assert engine.status(tid) == TaskStatus.created()
    assert engine.runtime.tasks[1].pc == 11  # never executed a statement


# -- breakpoints ---------------------------------------------------------------

def test_breakpoint_set_returns_ids(engine):
    tid = _register(engine, "echo_client")
    assert engine.breakpoint_set(tid, 17, BEFORE) == 1
    assert engine.breakpoint_set(tid, 28, AFTER) == 2


def test_breakpoint_on_blank_line_rejected(engine):
    tid = _register(engine, "echo_client")
    with pytest.raises(BadLine):
        engine.breakpoint_set(tid, 12, BEFORE)


def test_duplicate_breakpoint_rejected(engine):
    tid = _register(engine, "echo_client")
    engine.breakpoint_set(tid, 17, BEFORE)
    with pytest.raises(DuplicateBreakpoint):
        engine.breakpoint_set(tid, 17, BEFORE)
    # before and after on the same line may coexist
    engine.breakpoint_set(tid, 17, AFTER)


def test_clear_twice_reports_unknown(engine):
    tid = _register(engine, "echo_client")
    bp_id = engine.breakpoint_set(tid, 17, BEFORE)
    engine.breakpoint_clear(tid, bp_id)
    with pytest.raises(UnknownBreakpoint):
        engine.breakpoint_clear(tid, bp_id)


def test_unknown_tid_everywhere(engine):
    with pytest.raises(UnknownTid):
        engine.breakpoint_set(99, 17, BEFORE)
    with pytest.raises(UnknownTid):
        engine.resume(99)
    with pytest.raises(UnknownTid):
        engine.status(99)
    with pytest.raises(UnknownTid):
        engine.wait_stop(99, 0.1)


# -- execution control -------------------------------------------------------------

def test_resume_runs_to_breakpoint(engine):
    tid = _register(engine, "echo_client")
    engine.breakpoint_set(tid, 17, BEFORE)
    engine.breakpoint_set(tid, 28, BEFORE)
    engine.resume(tid)
    assert engine.wait_stop(tid, 5) == TaskStatus.stopped_before(17)
    clock_at_17 = engine.runtime.clock
    engine.resume(tid)
    # reference interpreter: lines 17,24,25,26,27 run before the stop at 28
    assert engine.wait_stop(tid, 5) == TaskStatus.stopped_before(28)
    assert engine.runtime.clock - clock_at_17 == 5
    assert engine.runtime.tasks[1].vars["value"] == 0


def test_single_step_stops_before_next_line(engine):
    tid = _register(engine, "echo_client")
    engine.breakpoint_set(tid, 24, BEFORE, one_shot=True)
    engine.resume(tid)
    engine.wait_stop(tid, 5)
    engine.single_step(tid)
    assert engine.wait_stop(tid, 5) == TaskStatus.stopped_before(25)
    assert engine.evaluate(tid, "value").value == 0
    assert engine.evaluate(tid, "value").initialized is True


def test_resume_on_exited_process_rejected(engine):
    tid = _register(engine, "echo_server")
    # server with empty mailbox blocks at 13; give it a message first
    engine.runtime.deliver(9, 1, 1, [9, 0])
    engine.resume(tid)
    status = engine.wait_stop(tid, 5)
    assert status.state == "exited" and status.code == 0 and status.line == 18
    with pytest.raises(NotStopped):
        engine.resume(tid)


def test_one_shot_breakpoints_auto_clear(engine):
    tid = _register(engine, "echo_client")
    engine.breakpoint_set(tid, 17, BEFORE, one_shot=True)
    engine.resume(tid)
    engine.wait_stop(tid, 5)
    assert engine.breakpoints(tid) == []


def test_blocked_recv_counts_as_running(engine):
    tid = _register(engine, "echo_client")
    engine.breakpoint_set(tid, 31, BEFORE, one_shot=True)
    engine.resume(tid)
    engine.wait_stop(tid, 5)
    engine.resume(tid)  # runs into recv with no reply in sight
    with pytest.raises(WaitTimeout):
        engine.wait_stop(tid, 0.3)
    assert engine.status(tid) == TaskStatus.blocked_recv(-1)


def test_wait_stop_on_exited_returns_immediately(engine):
    tid = _register(engine, "echo_server")
    engine.runtime.deliver(9, 1, 1, [9, 0])
    engine.resume(tid)
    engine.wait_stop(tid, 5)
    assert engine.wait_stop(tid, 0.01).state == "exited"


def test_after_breakpoint_on_exit_line_reports_exited(engine):
    tid = _register(engine, "echo_server")
    engine.runtime.deliver(9, 1, 1, [9, 0])
    engine.breakpoint_set(tid, 18, AFTER, one_shot=True)
    engine.resume(tid)
    status = engine.wait_stop(tid, 5)
    assert status.state == "exited" and status.line == 18
    assert engine.breakpoints(tid) == []  # the one-shot was consumed


def test_before_and_after_on_same_line_stop_before_first(engine):
    tid = _register(engine, "echo_client")
    engine.breakpoint_set(tid, 24, BEFORE)
    engine.breakpoint_set(tid, 24, AFTER)
    engine.resume(tid)
    assert engine.wait_stop(tid, 5) == TaskStatus.stopped_before(24)
    engine.resume(tid)
    assert engine.wait_stop(tid, 5) == TaskStatus.stopped_after(24)


def test_resume_soundness_never_passes_armed_before(engine):
    """A resumed process stops only at armed breakpoints (or terminal)."""
    tid = _register(engine, "echo_client")
    engine.breakpoint_set(tid, 26, BEFORE)
    engine.resume(tid)
    status = engine.wait_stop(tid, 5)
    assert status == TaskStatus.stopped_before(26)
    # nothing after line 26 ran
    assert "value" in engine.runtime.tasks[1].vars  # line 24 executed
    assert engine.runtime.tasks[1].outbuf == []     # line 26 did not


def test_att_flips_after_first_resume(engine):
    tid = _register(engine, "echo_client")
    assert engine.list_tids()[0]["att"] == "n"
    engine.breakpoint_set(tid, 17, BEFORE, one_shot=True)
    engine.resume(tid)
    engine.wait_stop(tid, 5)
    assert engine.list_tids()[0]["att"] == "y"


# -- inspection --------------------------------------------------------------------

def test_evaluate_uninitialized_flag(engine):
    tid = _register(engine, "echo_server")
    result = engine.evaluate(tid, "value", client="c9")
    assert result.initialized is False and result.value == 0
    assert result.ordinal == 1


def test_evaluate_after_patch(engine):
    tid = _register(engine, "echo_server")
    engine.set_variable(tid, "value", 1)
    result = engine.evaluate(tid, "value", client="c9")
    assert result.initialized is True and result.value == 1


def test_evaluate_ordinals_per_client_no_gaps(engine):
    tid = _register(engine, "echo_server")
    mine = [engine.evaluate(tid, "x", client="a").ordinal for _ in range(4)]
    other = engine.evaluate(tid, "x", client="b").ordinal
    assert mine == [1, 2, 3, 4]
    assert other == 1


def test_evaluate_requires_stopped(engine):
    tid = _register(engine, "echo_client")
    engine.resume(tid)  # free-runs into the recv at 31
    try:
        engine.wait_stop(tid, 0.5)
    except WaitTimeout:
        pass
    with pytest.raises(NotStopped):
        engine.evaluate(tid, "value")


def test_info_line_tracks_position(engine):
    tid = _register(engine, "echo_client")
    engine.breakpoint_set(tid, 31, AFTER, one_shot=True)
    engine.runtime.deliver(9, 1, 1, [-1])  # park a reply so the recv completes
    engine.resume(tid)
    status = engine.wait_stop(tid, 5)
    assert status == TaskStatus.stopped_after(31)
    assert engine.info_line(tid) == (32, "echo_client.mpl")


def test_set_variable_rules(engine):
    tid = _register(engine, "echo_server")
    engine.set_variable(tid, "newvar", 5)
    assert engine.evaluate(tid, "newvar").value == 5
    with pytest.raises(BadValue):
        engine.set_variable(tid, "v", "seven")
    engine.resume(tid)  # blocks in recv -> not stopped
    try:
        engine.wait_stop(tid, 0.3)
    except WaitTimeout:
        pass
    with pytest.raises(NotStopped):
        engine.set_variable(tid, "value", 1)


def test_read_source_returns_program_text(engine):
    tid = _register(engine, "echo_client")
    source, filename = engine.read_source(tid)
    assert filename == "echo_client.mpl"
    assert 'spawn "echo_server" -> totid' in source


# -- before/after purity -----------------------------------------------------------

def test_before_after_purity_at_line_24(engine):
    """value is unassigned at before-24 and 0 at after-24."""
    tid = _register(engine, "echo_client")
    engine.breakpoint_set(tid, 24, BEFORE, one_shot=True)
    engine.resume(tid)
    engine.wait_stop(tid, 5)
    assert engine.evaluate(tid, "value").initialized is False
    engine.breakpoint_set(tid, 24, AFTER, one_shot=True)
    engine.resume(tid)
    assert engine.wait_stop(tid, 5) == TaskStatus.stopped_after(24)
    result = engine.evaluate(tid, "value")
    assert result.initialized is True and result.value == 0


def test_wait_stop_concurrent_callers(engine):
    """wait_stop blocks its caller without blocking other callers."""
    tid_a = _register(engine, "echo_client")
    tid_b = _register(engine, "echo_server")
    engine.breakpoint_set(tid_a, 28, BEFORE, one_shot=True)
    engine.resume(tid_a)
    results = {}

    def waiter():
        results["a"] = engine.wait_stop(tid_a, 5)

    thread = threading.Thread(target=waiter)
    thread.start()
    # while the waiter blocks, other calls proceed
    assert engine.status(tid_b) == TaskStatus.created()
    assert engine.evaluate(tid_b, "x").ordinal == 1
    thread.join(timeout=6)
    assert results["a"] == TaskStatus.stopped_before(28)


def test_kill_terminates_even_a_blocked_process(engine):
    tid = _register(engine, "echo_server")
    engine.resume(tid)  # blocks in the recv at 13
    try:
        engine.wait_stop(tid, 0.3)
    except WaitTimeout:
        pass
    assert engine.status(tid).state == "blocked_recv"
    engine.kill(tid)
    status = engine.wait_stop(tid, 1)
    assert status.state == "errored" and status.reason == "killed"
    with pytest.raises(NotStopped):
        engine.kill(tid)  # already terminal


def test_kill_unblocks_waiters(engine):
    tid = _register(engine, "echo_client")
    engine.breakpoint_set(tid, 31, BEFORE, one_shot=True)
    engine.resume(tid)
    engine.wait_stop(tid, 5)
    engine.resume(tid)  # into the recv, nothing will ever arrive
    results = {}

    def waiter():
        results["status"] = engine.wait_stop(tid, 5)

    thread = threading.Thread(target=waiter)
    thread.start()
    engine.kill(tid)
    thread.join(6)
    assert results["status"].state == "errored"


def test_persistent_before_breakpoint_refires_on_loop(engine):
    """Resume from a before-stop executes the line; each fresh arrival
    (here via goto) triggers the breakpoint again."""
    from fiddle.mpl import parse_program
    source = "set x = 0\nset x = x + 1\nif x < 3 goto 2\nexit 0\n"
    engine.runtime.add_program(parse_program(source, "looper"))
    tid = engine.register_process(
        engine.runtime.spawn_task("looper", debug_capture=True))
    engine.breakpoint_set(tid, 2, BEFORE)  # persistent
    values = []
    engine.resume(tid)
    while True:
        status = engine.wait_stop(tid, 5)
        if status.state == "exited":
            break
        assert status == TaskStatus.stopped_before(2)
        values.append(engine.evaluate(tid, "x").value)
        engine.resume(tid)
    assert values == [0, 1, 2]


def test_event_stream_reports_registration_and_stops(engine):
    events = []
    engine.event_hook = lambda kind, payload: events.append((kind, payload))
    tid = _register(engine, "echo_client")
    engine.breakpoint_set(tid, 17, BEFORE, one_shot=True)
    engine.resume(tid)
    engine.wait_stop(tid, 5)
    kinds = [k for k, _ in events]
    assert kinds == ["Registered", "Stopped"]
    assert events[0][1]["program"] == "echo_client"
    assert events[1][1] == {"tid": tid, "state": "stopped_before", "line": 17}
