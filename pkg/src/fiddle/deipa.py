"""Script-driven execution controller.

Loads a behavior-specification (.tes) file, starts the application under
debugger control, and advances it global-breakpoint-by-global-breakpoint:
for each local breakpoint of the current global breakpoint it arms a
one-shot engine breakpoint, resumes the process, and waits for the stop;
all resumes are issued before any wait so rendezvous points (a send and
the matching recv in flight at once) make progress.  Variable-patching
actions apply only once every process of the global breakpoint stopped.

Virtual process ids (vids) from the spawn table map to engine tids at
runtime: the start program takes the root row, spawned processes claim
the lowest-index unmatched row with a matching program name when their
launcher announces them.
"""

from __future__ import annotations

import argparse
import os
import socket
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from . import corpus, tess, wire
from .client import HubClient, ServiceError
from .errors import FiddleError
from .launcher import parse_endpoint

_WHEN_NAME = {tess.BEFORE_CODE: "before", tess.AFTER_CODE: "after"}


class StartupError(FiddleError):
    code = "startup_error"


class EndOfScript(FiddleError):
    code = "end_of_script"


class DriveTimeout(FiddleError):
    code = "drive_timeout"

    def __init__(self, vids: list[int], detail: str = ""):
        self.vids = sorted(vids)
        text = f"unsatisfied vids {self.vids}"
        if detail:
            text += f" ({detail})"
        super().__init__(text)


@dataclass
class VidRecord:
    prev: Optional[tuple[int, int]] = None    # (when, line)
    actual: Optional[tuple[int, int]] = None
    status: str = ""


class VidMap:
    """Bidirectional vid <-> engine-tid map driven by the spawn table."""

    def __init__(self, rows):
        self.rows = list(rows)
        self.vid_to_tid: dict[int, int] = {}
        self.tid_to_vid: dict[int, int] = {}
        self.matched: set[int] = set()  # row indices
        self.cond = threading.Condition()

    def match_start(self, tid: int) -> int:
        with self.cond:
            for i, row in enumerate(self.rows):
                if row.parent_vid == 0:
                    self._bind(i, row.vid, tid)
                    return row.vid
            raise StartupError("spawn table has no root row")

    def match_announce(self, program: str, tid: int) -> Optional[int]:
        with self.cond:
            for i, row in enumerate(self.rows):
                if i in self.matched or row.program != program:
                    continue
                self._bind(i, row.vid, tid)
                return row.vid
            return None

    def _bind(self, row_index: int, vid: int, tid: int):
        self.matched.add(row_index)
        self.vid_to_tid[vid] = tid
        self.tid_to_vid[tid] = vid
        self.cond.notify_all()

    def tid_for(self, vid: int, timeout: float = 0.0) -> Optional[int]:
        deadline = time.monotonic() + timeout
        with self.cond:
            while vid not in self.vid_to_tid:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self.cond.wait(remaining)
            return self.vid_to_tid[vid]

    def mapped_vids(self) -> list[int]:
        with self.cond:
            return sorted(self.vid_to_tid)


def _fmt_field(value: Optional[int], width: int) -> str:
    return "NULL" if value is None else f"{value:>{width}d}"


class DeipaController:
    """Drives one loaded behavior specification against a hub."""

    def __init__(self, hub_endpoint: tuple[str, int],
                 timeout: float = 10.0,
                 println: Optional[Callable[[str], None]] = None,
                 announce_listen: tuple[str, int] = ("127.0.0.1", 0)):
        self.timeout = timeout
        self.transcript: list[str] = []
        self._println_hook = println
        self.client = HubClient(hub_endpoint, role="tool", mode="blocking")
        self.spec: Optional[tess.TessSpec] = None
        self.vidmap: Optional[VidMap] = None
        self.state: dict[int, VidRecord] = {}
        self.cursor = 0
        self.started = False
        self._armed: list[tuple[int, int]] = []  # (tid, breakpoint id)
        self._closed = False

        # announce listener: spawn launchers report new processes here
        self._announce_sock = socket.create_server(announce_listen)
        self.announce_endpoint = self._announce_sock.getsockname()[:2]
        self._next_launcher = 1
        threading.Thread(target=self._announce_accept, daemon=True,
                         name="deipa-announce").start()

    # -- console output ----------------------------------------------------------

    def println(self, text: str):
        for line in text.split("\n"):
            self.transcript.append(line)
            if self._println_hook is not None:
                self._println_hook(line)
            else:
                print(line, flush=True)

    # -- script lifecycle ----------------------------------------------------------

    def open(self, path: Path) -> int:
        """Load a specification file; resets all drive state.  Returns the
        number of global breakpoints."""
        spec = tess.load_tess(Path(path))
        warnings = tess.validate(spec, self._programs_dir())
        for warning in warnings:
            self.println(f"warning: {warning}")
        self.spec = spec
        self.vidmap = VidMap(spec.spawn_rows)
        self.state = {}
        self.cursor = 0
        self.started = False
        self._armed = []
        return len(spec.global_bps)

    def _programs_dir(self) -> Path:
        return corpus.DIR

    def run(self):
        """Start the application stopped at entry and drive it to the first
        global breakpoint."""
        if self.spec is None:
            raise StartupError("no specification loaded")
        if self.started:
            raise StartupError("application already started")
        try:
            payload = self.client.submit("start_program", [self.spec.start_file])
        except ServiceError as exc:
            raise StartupError(f"cannot start {self.spec.start_file}: {exc}")
        tid = int(payload["tid"])
        vid = self.vidmap.match_start(tid)
        self.state[vid] = VidRecord(status="created")
        self.started = True
        if self.spec.global_bps:
            self.cursor = 1
            self.drive_to(self.spec.global_bps[0])
        return self.state

    def step(self):
        """Advance to the next global breakpoint; prints the process list
        before acting."""
        if self.spec is None or not self.started:
            raise StartupError("run the application first")
        if self.cursor >= len(self.spec.global_bps):
            raise EndOfScript(f"all {len(self.spec.global_bps)} global "
                              f"breakpoints reached")
        self.println(self.report())
        gbp = self.spec.global_bps[self.cursor]
        self.cursor += 1
        self.drive_to(gbp)
        return self.state

    # -- driving ------------------------------------------------------------------

    def _status(self, tid: int) -> dict:
        return self.client.submit("status", [tid])

    def _satisfied(self, status: dict, bp: tess.LocalBp) -> bool:
        state = status.get("state")
        line = status.get("line")
        if bp.when == tess.BEFORE_CODE:
            return state == "stopped_before" and line == bp.line
        if state == "stopped_after" and line == bp.line:
            return True
        return state == "exited" and line == bp.line

    def drive_to(self, gbp: tess.GlobalBp):
        deadline = time.monotonic() + self.timeout
        outcomes: dict[int, str] = {}
        plan: list[tuple[tess.LocalBp, int]] = []

        for bp in gbp.breakpoints:
            tid = self.vidmap.tid_for(bp.vid, timeout=max(0.0, deadline - time.monotonic()))
            if tid is None:
                outcomes[bp.vid] = "unmapped"
                continue
            status = self._status(tid)
            if self._satisfied(status, bp):
                outcomes[bp.vid] = "ok"
                self._note_stop(bp)
                continue
            plan.append((bp, tid))

        resumed: list[tuple[tess.LocalBp, int]] = []
        for bp, tid in plan:
            try:
                payload = self.client.submit(
                    "break_set", [tid, bp.line, _WHEN_NAME[bp.when], True])
                self._armed.append((tid, int(payload["id"])))
            except ServiceError as exc:
                if exc.code != "duplicate_breakpoint":
                    outcomes[bp.vid] = f"error:{exc.code}"
                    continue
            try:
                self.client.submit("resume", [tid])
                resumed.append((bp, tid))
            except ServiceError as exc:
                outcomes[bp.vid] = f"error:{exc.code}"

        threads = []
        results: dict[int, str] = {}
        for bp, tid in resumed:
            thread = threading.Thread(
                target=self._wait_for, args=(bp, tid, deadline, results),
                daemon=True, name=f"deipa-vid{bp.vid}")
            threads.append(thread)
            thread.start()
        for thread in threads:
            thread.join()
        outcomes.update(results)

        failed = [vid for vid, outcome in outcomes.items() if outcome != "ok"]
        if failed:
            detail = ", ".join(f"vid {vid}: {outcomes[vid]}" for vid in sorted(failed))
            raise DriveTimeout(failed, detail)

        for bp in gbp.breakpoints:
            for action in bp.actions:
                self._apply_action(action)

    def _wait_for(self, bp: tess.LocalBp, tid: int, deadline: float,
                  results: dict):
        """Process-thread body: wait until this process reaches its local
        breakpoint, resuming past stops armed by other tools."""
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                results[bp.vid] = "timeout"
                return
            try:
                status = self.client.submit("wait_stop", [tid, remaining],
                                            timeout=remaining + 10.0)
            except ServiceError as exc:
                results[bp.vid] = "timeout" if exc.code == "timeout" else f"error:{exc.code}"
                return
            if self._satisfied(status, bp):
                self._note_stop(bp)
                results[bp.vid] = "ok"
                return
            if status.get("state") in ("exited", "errored"):
                results[bp.vid] = f"unsatisfiable:{status.get('state')}@" \
                                  f"{status.get('line')}"
                return
            # stopped at someone else's breakpoint; keep driving
            try:
                self.client.submit("resume", [tid])
            except ServiceError:
                time.sleep(0.02)

    def _note_stop(self, bp: tess.LocalBp):
        # prev shifts on every satisfied stop, so a process parked at the
        # same position across steps shows prev == actual
        record = self.state.setdefault(bp.vid, VidRecord())
        record.prev = record.actual
        record.actual = (bp.when, bp.line)
        record.status = "stopped"

    def _apply_action(self, action: tess.SetVarAction):
        if action.code != tess.SET_VAR_CODE:
            self.println(f"set_all_vars_func: skipping unknown action code "
                         f"{action.code}")
            return
        tid = self.vidmap.tid_for(action.vid)
        if tid is None:
            self.println(f"set_all_vars_func: vid {action.vid} unmapped; "
                         f"setvar skipped")
            return
        self.client.submit("set_variable", [tid, action.var, action.int_value])
        self.println(f"set_all_vars_func: setvar {action.var}={action.value}")

    # -- reporting -------------------------------------------------------------------

    def report(self) -> str:
        lines = ["pth_manager: *** begin of process threads' list ***"]
        if self.vidmap is not None:
            for vid in self.vidmap.mapped_vids():
                record = self.state.get(vid, VidRecord())
                prev = record.prev or (None, None)
                actual = record.actual or (None, None)
                lines.append(
                    f"({vid:>2d}) "
                    f"prev=[bptype={_fmt_field(prev[0], 2)} line={_fmt_field(prev[1], 3)}] "
                    f"actual=[bptype={_fmt_field(actual[0], 2)} line={_fmt_field(actual[1], 3)}]")
        lines.append("pth_manager: *** end of process thread's list ***")
        return "\n".join(lines)

    def release(self):
        """Clear controller-armed breakpoints and resume every stopped
        process; the application runs free afterwards."""
        for tid, bp_id in self._armed:
            try:
                self.client.submit("break_clear", [tid, bp_id])
            except ServiceError:
                pass  # already consumed by a hit
        self._armed = []
        if self.vidmap is None:
            return
        for vid in self.vidmap.mapped_vids():
            tid = self.vidmap.vid_to_tid[vid]
            try:
                status = self._status(tid)
                if status.get("state") in ("created", "stopped_before", "stopped_after"):
                    self.client.submit("resume", [tid])
            except ServiceError:
                pass

    # -- announce listener --------------------------------------------------------------

    def _announce_accept(self):
        while not self._closed:
            try:
                sock, addr = self._announce_sock.accept()
            except OSError:
                return
            threading.Thread(target=self._announce_conn, args=(sock, addr),
                             daemon=True).start()

    def _announce_conn(self, sock: socket.socket, addr):
        rfile = sock.makefile("rb")
        wlock = threading.Lock()

        def write(env: wire.Envelope):
            with wlock:
                try:
                    sock.sendall(wire.encode(env))
                except OSError:
                    pass

        conn_id = ""
        try:
            for raw in rfile:
                try:
                    env = wire.decode(raw)
                except wire.FrameError:
                    break
                if env.kind == "hello":
                    conn_id = f"l{self._next_launcher}"
                    self._next_launcher += 1
                    self.println(f"pth_launcher: connection from {addr[0]}")
                    write(wire.reply_ok(conn_id, 0, {"client_id": conn_id}))
                elif env.kind == "register":
                    self._handle_announce(env, conn_id, write)
        except OSError:
            pass
        finally:
            try:
                sock.close()
            except OSError:
                pass

    def _handle_announce(self, env: wire.Envelope, conn_id: str, write):
        program = str(env.args[0])
        tid = int(env.args[1])
        source_path = str(env.args[2]) if len(env.args) > 2 else ""
        if source_path:
            self.println(f"pth_launcher: {source_path}")
        if self.vidmap is None:
            write(wire.reply_error(conn_id, env.rid, "no_matching_row",
                                   "no specification loaded"))
            return
        vid = self.vidmap.match_announce(program, tid)
        if vid is None:
            self.println(f"pth_launcher: no spawn-table row for {program} (tid={tid})")
            write(wire.reply_error(conn_id, env.rid, "no_matching_row",
                                   f"no unmatched row for {program}"))
            return
        self.state.setdefault(vid, VidRecord())
        self.println(f"pth_launcher: [tid={tid}, vid={vid}]")
        write(wire.reply_ok(conn_id, env.rid, {"vid": vid}))

    def close(self):
        self._closed = True
        try:
            self._announce_sock.close()
        except OSError:
            pass
        self.client.close()


# -- interactive console -----------------------------------------------------------

_BANNER = """+--------------------------------------------+
| DEIPA - v0.1.0       (Level 2m console)    |
+--------------------------------------------+
| Type 'help' on prompt to get help          |
| Abbreviations are accepted if unambiguous  |
+--------------------------------------------+"""

_COMMANDS = ("open", "run", "step", "state", "release", "quit", "help")

_HELP = """commands:
  open PATH   load a behavior specification (.tes) file
  run         start the application, stop at the first global breakpoint
  step        advance to the next global breakpoint
  state       print the process threads' list
  release     clear controller breakpoints and resume all processes
  quit        leave the console
  help        this text"""


def match_command(word: str) -> str:
    matches = [c for c in _COMMANDS if c.startswith(word)]
    if not matches:
        raise FiddleError(f"unknown command {word!r}")
    if len(matches) > 1:
        raise FiddleError(f"ambiguous command {word!r}: {', '.join(matches)}")
    return matches[0]


def repl(controller: DeipaController, script: Path, input_fn=input):
    print(_BANNER)
    count = controller.open(script)
    print(f"loaded {script} ({count} global breakpoints)")
    while True:
        try:
            line = input_fn("console_deipa > ")
        except EOFError:
            return
        words = line.strip().split()
        if not words:
            continue
        try:
            command = match_command(words[0])
        except FiddleError as exc:
            print(f"! {exc}")
            continue
        try:
            if command == "quit":
                return
            if command == "help":
                print(_HELP)
            elif command == "open":
                if len(words) < 2:
                    print("! open needs a path")
                    continue
                count = controller.open(Path(words[1]))
                print(f"loaded {words[1]} ({count} global breakpoints)")
            elif command == "run":
                controller.run()
            elif command == "step":
                controller.step()
            elif command == "state":
                controller.println(controller.report())
            elif command == "release":
                controller.release()
        except (FiddleError, ServiceError) as exc:
            print(f"! {getattr(exc, 'code', 'error')}: {exc}")


def main(argv=None):
    parser = argparse.ArgumentParser(prog="console-deipa",
                                     description="script-driven execution controller")
    parser.add_argument("script", help="behavior specification (.tes) file")
    parser.add_argument("--hub", default=os.environ.get("FIDDLE_ENDPOINT",
                                                        "127.0.0.1:4250"),
                        metavar="HOST:PORT")
    parser.add_argument("--timeout", type=float, default=10.0,
                        help="per-step drive timeout in seconds")
    parser.add_argument("--announce", metavar="HOST:PORT",
                        default=os.environ.get("DEIPA_ENDPOINT", "127.0.0.1:0"),
                        help="endpoint to accept launcher announcements on")
    args = parser.parse_args(argv)

    controller = DeipaController(parse_endpoint(args.hub), timeout=args.timeout,
                                 announce_listen=parse_endpoint(args.announce))
    host, port = controller.announce_endpoint
    print(f"announce endpoint: {host}:{port} (export DEIPA_ENDPOINT to match)")
    try:
        repl(controller, Path(args.script))
    finally:
        controller.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
