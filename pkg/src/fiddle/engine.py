"""Local debugging engine: owns one node-debugger handle per target task
and implements the core debugging services (breakpoints, stepping,
variable access, blocking waits).

The engine embeds an MPL runtime and drives all task execution from a
single scheduler thread; every public method may be called concurrently
from any thread and is serialized on one internal lock.  `wait_stop`
blocks its caller without blocking other callers.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from . import mpl
from .errors import FiddleError
from .mpl import Runtime, SpawnStmt, Task, TaskStatus

log = logging.getLogger(__name__)

BEFORE = "before"
AFTER = "after"

# states wait_stop returns on
_STOPPED_STATES = ("created", "stopped_before", "stopped_after", "exited", "errored")


class UnknownTid(FiddleError):
    code = "unknown_tid"


class NotStopped(FiddleError):
    code = "not_stopped"


class BadLine(FiddleError):
    code = "bad_line"


class DuplicateBreakpoint(FiddleError):
    code = "duplicate_breakpoint"


class UnknownBreakpoint(FiddleError):
    code = "unknown_breakpoint"


class WaitTimeout(FiddleError):
    code = "timeout"


class BadValue(FiddleError):
    code = "bad_value"


@dataclass
class Breakpoint:
    id: int
    line: int
    when: str  # BEFORE | AFTER
    one_shot: bool = False


class NodeDebuggerHandle:
    """Control surface over one target task; exactly one handle per task."""

    def __init__(self, task: Task):
        self.task = task

    @property
    def program(self) -> mpl.Program:
        return self.task.program


@dataclass
class ProcessRecord:
    tid: int
    handle: NodeDebuggerHandle
    attached: bool
    tp_pid: int
    lld_pid: int
    machine: str
    breakpoints: dict  # (line, when) -> Breakpoint

    def row(self) -> dict:
        return {
            "tid": self.tid,
            "att": "y" if self.attached else "n",
            "tp_pid": self.tp_pid,
            "lld_pid": self.lld_pid,
            "l_tid": self.tid,
            "machine": self.machine,
            "program": self.handle.program.name,
        }


@dataclass(frozen=True)
class EvalResult:
    ordinal: int
    initialized: bool
    value: int

    def payload(self) -> dict:
        return {"ordinal": self.ordinal, "initialized": self.initialized,
                "value": self.value}


class _CaptureJob:
    def __init__(self, spawner: Task, stmt: SpawnStmt, new_task: Task, line: int):
        self.spawner = spawner
        self.stmt = stmt
        self.new_task = new_task
        self.line = line


class LocalEngine:
    def __init__(self, runtime: Runtime, machine: str = "", start_scheduler: bool = True):
        self.runtime = runtime
        self.machine = machine or socket.gethostname()
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._records: dict[int, ProcessRecord] = {}
        self._by_rtid: dict[int, int] = {}  # runtime tid -> engine tid
        self._next_bp_id = 1
        self._eval_counters: dict[str, int] = {}
        self._last_pick = 0
        self._shutdown = False
        # Called outside the engine lock with (kind, payload); kinds are
        # Registered, Stopped, Exited, Output.
        self.event_hook: Optional[Callable[[str, dict], None]] = None
        self._capture: Optional[Callable[[Task, str], int]] = None
        self._scheduler = threading.Thread(target=self._loop, daemon=True,
                                           name="engine-scheduler")
        if start_scheduler:
            self._scheduler.start()

    # -- lifecycle ---------------------------------------------------------

    def attach_capture(self, hook: Callable[[Task, str], int]):
        """Install the spawn-capture agent for debug-flagged spawns."""
        self._capture = hook

    def shutdown(self):
        with self._cond:
            self._shutdown = True
            self._cond.notify_all()
        if self._scheduler.is_alive():
            self._scheduler.join(timeout=2)

    # -- registry ----------------------------------------------------------

    def register_process(self, task: Task) -> int:
        """Incorporate a task as a debugger-controlled target process.

        The task stays stopped until the first resume.
        """
        with self._cond:
            if task.tid in self._by_rtid:
                raise FiddleError(f"task {task.tid} already registered")
            tid = 1
            while tid in self._records:
                tid += 1
            record = ProcessRecord(
                tid=tid,
                handle=NodeDebuggerHandle(task),
                attached=False,
                tp_pid=1000 + tid,
                lld_pid=2000 + tid,
                machine=self.machine,
                breakpoints={},
            )
            self._records[tid] = record
            self._by_rtid[task.tid] = tid
            program = task.program
        self._emit("Registered", {"tid": tid, "program": program.name,
                                  "source_path": self.runtime.program_path(program.name)})
        return tid

    def list_tids(self) -> list[dict]:
        with self._lock:
            return [self._records[t].row() for t in sorted(self._records)]

    def tids(self) -> list[int]:
        with self._lock:
            return sorted(self._records)

    def runtime_tid(self, tid: int) -> Optional[int]:
        with self._lock:
            record = self._records.get(tid)
            return record.handle.task.tid if record else None

    def _record(self, tid: int) -> ProcessRecord:
        record = self._records.get(tid)
        if record is None:
            raise UnknownTid(f"no process with tid {tid}")
        return record

    # -- breakpoints ---------------------------------------------------------

    def breakpoint_set(self, tid: int, line: int, when: str, one_shot: bool = False) -> int:
        if when not in (BEFORE, AFTER):
            raise BadValue(f"breakpoint kind must be before/after, got {when!r}")
        with self._cond:
            record = self._record(tid)
            if line not in record.handle.program.lines:
                raise BadLine(f"no statement at line {line}")
            if (line, when) in record.breakpoints:
                raise DuplicateBreakpoint(f"breakpoint ({line}, {when}) already set")
            bp = Breakpoint(self._next_bp_id, line, when, one_shot)
            self._next_bp_id += 1
            record.breakpoints[(line, when)] = bp
            return bp.id

    def breakpoint_clear(self, tid: int, bp_id: int):
        with self._cond:
            record = self._record(tid)
            for key, bp in list(record.breakpoints.items()):
                if bp.id == bp_id:
                    del record.breakpoints[key]
                    return
            raise UnknownBreakpoint(f"no breakpoint with id {bp_id}")

    def breakpoints(self, tid: int) -> list[Breakpoint]:
        with self._lock:
            return sorted(self._record(tid).breakpoints.values(), key=lambda b: b.id)

    # -- execution control ---------------------------------------------------

    def resume(self, tid: int):
        """Let the process run until a breakpoint, block, exit, or error.

        Returns immediately after initiating the run; pair with wait_stop.
        """
        with self._cond:
            record = self._record(tid)
            task = record.handle.task
            if task.status.state not in ("created", "stopped_before", "stopped_after"):
                raise NotStopped(f"tid {tid} is {task.status.state}")
            record.attached = True
            task.step_pending = False
            task.status = TaskStatus.runnable()
            self._cond.notify_all()

    def single_step(self, tid: int):
        """Execute exactly one statement, then stop before the next line."""
        with self._cond:
            record = self._record(tid)
            task = record.handle.task
            if task.status.state not in ("created", "stopped_before", "stopped_after"):
                raise NotStopped(f"tid {tid} is {task.status.state}")
            task.step_pending = True
            task.status = TaskStatus.runnable()
            self._cond.notify_all()

    def kill(self, tid: int):
        """Terminate a target process; it ends Errored("killed")."""
        events: list = []
        with self._cond:
            record = self._record(tid)
            task = record.handle.task
            if task.status.is_terminal:
                raise NotStopped(f"tid {tid} already {task.status.state}")
            task.step_pending = False
            task.status = TaskStatus.errored("killed", line=task.pc)
            events = self._stop_events(record, tid, task)
            self._cond.notify_all()
        for kind, payload in events:
            self._emit(kind, payload)

    def wait_stop(self, tid: int, timeout: float) -> TaskStatus:
        """Block until the process stops or terminates; a task blocked in
        recv counts as still running."""
        deadline = time.monotonic() + timeout
        with self._cond:
            record = self._record(tid)
            task = record.handle.task
            while True:
                if task.status.state in _STOPPED_STATES and not task.in_capture:
                    return task.status
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise WaitTimeout(f"tid {tid} still {task.status.state} "
                                      f"after {timeout:g}s")
                self._cond.wait(remaining)

    # -- inspection ----------------------------------------------------------

    def status(self, tid: int) -> TaskStatus:
        with self._lock:
            return self._record(tid).handle.task.status

    def evaluate(self, tid: int, name: str, client: str = "local") -> EvalResult:
        with self._lock:
            task = self._record(tid).handle.task
            if not task.status.is_stopped:
                raise NotStopped(f"tid {tid} is {task.status.state}")
            ordinal = self._eval_counters.get(client, 0) + 1
            self._eval_counters[client] = ordinal
            if name in task.vars:
                return EvalResult(ordinal, True, task.vars[name])
            return EvalResult(ordinal, False, 0)

    def info_line(self, tid: int) -> tuple[int, str]:
        with self._lock:
            task = self._record(tid).handle.task
            if not task.status.is_stopped:
                raise NotStopped(f"tid {tid} is {task.status.state}")
            if task.status.is_terminal and task.status.line is not None:
                return task.status.line, task.program.filename
            return task.pc, task.program.filename

    def read_source(self, tid: int) -> tuple[str, str]:
        with self._lock:
            program = self._record(tid).handle.program
            return program.source, program.filename

    def set_variable(self, tid: int, name: str, value: int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise BadValue(f"variable values are integers, got {value!r}")
        with self._cond:
            task = self._record(tid).handle.task
            if not task.status.is_stopped:
                raise NotStopped(f"tid {tid} is {task.status.state}")
            task.vars[name] = mpl._wrap64(value)

    def task_output(self, tid: int) -> list[str]:
        with self._lock:
            return list(self._record(tid).handle.task.output)

    # -- scheduler -----------------------------------------------------------

    def _emit(self, kind: str, payload: dict):
        hook = self.event_hook
        if hook is None:
            return
        try:
            hook(kind, payload)
        except Exception:  # noqa: BLE001 - a broken consumer must not kill the scheduler
            log.exception("event hook failed for %s", kind)

    def _pick(self) -> Optional[Task]:
        runnable = self.runtime.runnable_tasks()
        if not runnable:
            return None
        for task in runnable:
            if task.tid > self._last_pick:
                self._last_pick = task.tid
                return task
        task = runnable[0]
        self._last_pick = task.tid
        return task

    def _loop(self):
        while True:
            job = None
            events: list = []
            with self._cond:
                if self._shutdown:
                    return
                task = self._pick()
                if task is None:
                    self._cond.wait(0.05)
                    continue
                events, job = self._turn(task)
                self._cond.notify_all()
            for kind, payload in events:
                self._emit(kind, payload)
            if job is not None:
                self._run_capture(job)

    def _turn(self, task: Task):
        """Execute one scheduling turn for a runnable task (lock held)."""
        events: list = []
        engine_tid = self._by_rtid.get(task.tid)
        record = self._records.get(engine_tid) if engine_tid is not None else None
        line = task.pc
        stmt = task.program.lines.get(line)

        if record and not task.step_pending and task.before_done_line != line \
                and stmt is not None:
            bp = record.breakpoints.get((line, BEFORE))
            if bp is not None:
                if bp.one_shot:
                    del record.breakpoints[(line, BEFORE)]
                task.before_done_line = line
                task.status = TaskStatus.stopped_before(line)
                events.append(("Stopped", {"tid": engine_tid,
                                           "state": "stopped_before", "line": line}))
                return events, None

        task.before_done_line = line
        if isinstance(stmt, SpawnStmt) and self.runtime.debug_capture \
                and self._capture is not None:
            try:
                program = self.runtime.load_program(stmt.program)
            except mpl.UnknownProgram as exc:
                task.status = TaskStatus.errored(str(exc), line=line)
                events.extend(self._stop_events(record, engine_tid, task))
                return events, None
            new_task = self.runtime.create_task(program, TaskStatus.created())
            task.in_capture = True
            return events, _CaptureJob(task, stmt, new_task, line)

        outcome = mpl.execute_line(task, self.runtime)
        events.extend(self._after_execution(task, record, engine_tid, line, outcome))
        return events, None

    def _after_execution(self, task, record, engine_tid, line, outcome) -> list:
        events: list = []
        if outcome.kind == "output" and record is not None:
            events.append(("Output", {"tid": engine_tid, "text": outcome.text}))
        if outcome.kind == "blocked":
            return events
        if outcome.kind in ("errored", "exited"):
            task.step_pending = False
            if record is not None:
                # a one-shot after-breakpoint on an exit line is satisfied
                # by the exit itself
                bp = record.breakpoints.get((line, AFTER))
                if bp is not None and bp.one_shot:
                    del record.breakpoints[(line, AFTER)]
                events.extend(self._stop_events(record, engine_tid, task))
            return events
        # advanced / spawned / output
        if task.step_pending:
            task.step_pending = False
            task.status = TaskStatus.stopped_before(task.pc)
            task.before_done_line = task.pc
            if record is not None:
                events.append(("Stopped", {"tid": engine_tid,
                                           "state": "stopped_before", "line": task.pc}))
            return events
        if record is not None:
            bp = record.breakpoints.get((line, AFTER))
            if bp is not None:
                if bp.one_shot:
                    del record.breakpoints[(line, AFTER)]
                task.status = TaskStatus.stopped_after(line)
                events.append(("Stopped", {"tid": engine_tid,
                                           "state": "stopped_after", "line": line}))
        return events

    def _stop_events(self, record, engine_tid, task) -> list:
        if record is None:
            return []
        status = task.status
        if status.state == "exited":
            return [("Exited", {"tid": engine_tid, "code": status.code,
                                "line": status.line})]
        if status.state == "errored":
            return [("Stopped", {"tid": engine_tid, "state": "errored",
                                 "line": status.line, "reason": status.reason})]
        return [("Stopped", {"tid": engine_tid, "state": status.state,
                             "line": status.line})]

    def _run_capture(self, job: _CaptureJob):
        """Run the spawn-capture agent outside the engine lock, then finish
        the spawn statement."""
        result_tid = None
        error: Optional[str] = None
        try:
            result_tid = self._capture(job.new_task, job.stmt.program)
        except FiddleError as exc:
            error = str(exc)
        except Exception as exc:  # noqa: BLE001 - capture agents are pluggable
            log.exception("spawn capture failed")
            error = f"spawn capture failed: {exc}"
        events: list = []
        with self._cond:
            task = job.spawner
            task.in_capture = False
            engine_tid = self._by_rtid.get(task.tid)
            record = self._records.get(engine_tid) if engine_tid is not None else None
            if task.status.is_terminal:
                pass  # killed while the capture was in flight
            elif error is not None:
                task.status = TaskStatus.errored(error, line=job.line)
                events.extend(self._stop_events(record, engine_tid, task))
            else:
                task.vars[job.stmt.var] = result_tid
                self.runtime.clock += 1
                task.pc = task.program.next_line(job.line)
                task.before_done_line = None
                outcome = mpl.StepOutcome("spawned", job.line,
                                          program=job.stmt.program, tid=result_tid)
                events.extend(self._after_execution(task, record, engine_tid,
                                                    job.line, outcome))
            self._cond.notify_all()
        for kind, payload in events:
            self._emit(kind, payload)
