"""Interactive text consoles, one per engine layer.

Commands are `[tid] verb args...`; verbs may be abbreviated to any
unambiguous prefix.  Layer 0 embeds a local engine, layer 1 talks to one
node daemon, layer 2 talks to the hub and also prints subscribed events
as they arrive.
"""

from __future__ import annotations

import argparse
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import corpus
from .client import HubClient, ServiceError, WireClient
from .errors import FiddleError
from .launcher import parse_endpoint

VERBS = ("tids", "evaluate", "set", "break", "delete", "continue", "step",
         "status", "info-line", "help", "quit")
_PER_PROCESS = ("evaluate", "set", "break", "delete", "continue", "step",
                "status", "info-line")


class UnknownVerb(FiddleError):
    code = "unknown_verb"


class AmbiguousPrefix(FiddleError):
    code = "ambiguous_prefix"


class MissingTid(FiddleError):
    code = "missing_tid"


@dataclass(frozen=True)
class Command:
    tid: Optional[int]
    verb: str
    args: tuple


def parse_command(line: str) -> Command:
    words = line.strip().split()
    if not words:
        raise UnknownVerb("empty command")
    tid = None
    if words[0].lstrip("-").isdigit():
        tid = int(words[0])
        words = words[1:]
        if not words:
            raise UnknownVerb("missing verb after tid")
    prefix = words[0]
    matches = [v for v in VERBS if v.startswith(prefix)]
    if not matches:
        raise UnknownVerb(f"unknown verb {prefix!r}")
    if len(matches) > 1:
        raise AmbiguousPrefix(f"{prefix!r} matches {', '.join(matches)}")
    verb = matches[0]
    if verb in _PER_PROCESS and tid is None:
        raise MissingTid(f"{verb} needs a tid prefix")
    return Command(tid, verb, tuple(words[1:]))


class Backend:
    """One request per console command, whatever the layer."""

    prompt = "f?m []> "

    def call(self, service: str, args: list):
        raise NotImplementedError

    def close(self):
        pass


class Layer0Backend(Backend):
    prompt = "f0s []> "

    def __init__(self, programs_dir: Path, start: Optional[str] = None):
        from .engine import LocalEngine
        from .mpl import Runtime

        self.runtime = Runtime(programs_dir, debug_capture=True)
        self.engine = LocalEngine(self.runtime)
        if start:
            task = self.runtime.spawn_task(start, debug_capture=True)
            self.engine.register_process(task)

    def call(self, service: str, args: list):
        engine = self.engine
        if service == "list_tids":
            return {"records": engine.list_tids()}
        if service == "evaluate":
            return engine.evaluate(args[0], args[1], client="console").payload()
        if service == "set_variable":
            engine.set_variable(args[0], args[1], args[2])
            return {"ok": True}
        if service == "break_set":
            return {"id": engine.breakpoint_set(args[0], args[1], args[2])}
        if service == "break_clear":
            engine.breakpoint_clear(args[0], args[1])
            return {"ok": True}
        if service == "resume":
            engine.resume(args[0])
            return {"ok": True}
        if service == "single_step":
            engine.single_step(args[0])
            return {"ok": True}
        if service == "status":
            return engine.status(args[0]).payload()
        if service == "info_line":
            line, filename = engine.info_line(args[0])
            return {"line": line, "file": filename}
        raise FiddleError(f"unknown service {service!r}")

    def close(self):
        self.engine.shutdown()


class Layer1Backend(Backend):
    prompt = "f1m []> "

    def __init__(self, endpoint: tuple[str, int]):
        self.client = WireClient(endpoint, role="tool")

    def call(self, service: str, args: list):
        return self.client.request(service, args)

    def close(self):
        self.client.close()


class Layer2Backend(Backend):
    prompt = "f2m []> "

    def __init__(self, endpoint: tuple[str, int], print_events: bool = False):
        self._print_events = print_events
        self.client = HubClient(endpoint, role="tool", mode="event_async",
                                on_event=self._on_event)

    def _on_event(self, rid: int, record: dict):
        if not self._print_events:
            return
        kind = record.get("kind")
        if kind == "Reply":
            return
        body = record.get("body", {})
        detail = " ".join(f"{k}={v}" for k, v in sorted(body.items()))
        print(f"\n[event] {kind} {detail}", flush=True)

    def call(self, service: str, args: list):
        return self.client.call(service, args)

    def close(self):
        self.client.close()


class ConsoleSession:
    """Parses, executes, and renders console commands."""

    def __init__(self, backend: Backend):
        self.backend = backend
        self._eval_ordinal = 0

    def execute(self, cmd: Command) -> str:
        try:
            return self._execute(cmd)
        except (FiddleError, ServiceError) as exc:
            return f"! {getattr(exc, 'code', 'error')}"

    def execute_line(self, line: str) -> str:
        try:
            cmd = parse_command(line)
        except FiddleError as exc:
            return f"! {exc.code}"
        return self.execute(cmd)

    def _execute(self, cmd: Command) -> str:
        verb = cmd.verb
        if verb == "tids":
            payload = self.backend.call("list_tids", [])
            return render_tids(payload.get("records", []))
        if verb == "help":
            return _HELP
        if verb == "evaluate":
            if not cmd.args:
                raise FiddleError("evaluate needs a variable name")
            payload = self.backend.call("evaluate", [cmd.tid, cmd.args[0]])
            self._eval_ordinal += 1
            suffix = "" if payload.get("initialized") else " (uninitialized)"
            return f"=> ${self._eval_ordinal} = {payload.get('value')}{suffix}"
        if verb == "set":
            if len(cmd.args) < 2:
                raise FiddleError("set needs a name and a value")
            self.backend.call("set_variable",
                              [cmd.tid, cmd.args[0], int(cmd.args[1])])
            return "ok"
        if verb == "break":
            if not cmd.args:
                raise FiddleError("break needs a line number")
            when = cmd.args[1] if len(cmd.args) > 1 else "before"
            when = {"1": "before", "2": "after"}.get(when, when)
            payload = self.backend.call("break_set", [cmd.tid, int(cmd.args[0]),
                                                      when, False])
            return f"breakpoint {payload['id']} set"
        if verb == "delete":
            self.backend.call("break_clear", [cmd.tid, int(cmd.args[0])])
            return "ok"
        if verb == "continue":
            self.backend.call("resume", [cmd.tid])
            return "ok"
        if verb == "step":
            self.backend.call("single_step", [cmd.tid])
            return "ok"
        if verb == "status":
            payload = self.backend.call("status", [cmd.tid])
            detail = " ".join(f"{k}={payload[k]}" for k in ("line", "code", "tag", "reason")
                              if k in payload)
            return f"tid {cmd.tid}: {payload.get('state')}" + (f" {detail}" if detail else "")
        if verb == "info-line":
            payload = self.backend.call("info_line", [cmd.tid])
            return f"Line {payload['line']} of \"{payload['file']}\""
        raise FiddleError(f"unhandled verb {verb!r}")


def render_tids(records: list[dict]) -> str:
    lines = ["  TID  ATT  TP_PID  LLD_PID  L_TID MACHINE"]
    for r in records:
        lines.append(f"  {r['tid']:<5}{r['att']:<5}{r['tp_pid']:<8}"
                     f"{r['lld_pid']:<9}{r['l_tid']} {r['machine']}")
    return "\n".join(lines)


_HELP = """commands ([tid] verb args; unambiguous prefixes accepted):
  tids                      list target processes
  TID evaluate NAME         evaluate a variable
  TID set NAME VALUE        set a variable
  TID break LINE [before|after]   set a breakpoint
  TID delete BPID           clear a breakpoint
  TID continue              resume the process
  TID step                  execute one statement
  TID status                current process status
  TID info-line             current line and source file
  help / quit"""

_BANNER = """+--------------------------------------------+
| FIDDLE - v0.1.0      (Level {level} console)    |
+--------------------------------------------+
| Type 'help' on prompt to get help          |
| Abbreviations are accepted if unambiguous  |
+--------------------------------------------+"""


def repl(session: ConsoleSession, layer: str, input_fn=input):
    print(_BANNER.format(level=layer))
    prompt = session.backend.prompt
    while True:
        try:
            line = input_fn(prompt)
        except EOFError:
            return
        if not line.strip():
            continue
        if line.strip() in ("q", "qu", "qui", "quit"):
            return
        print(session.execute_line(line))


def main(argv=None):
    parser = argparse.ArgumentParser(prog="fiddle-console",
                                     description="interactive debugging console")
    parser.add_argument("--layer", type=int, choices=(0, 1, 2), default=2)
    parser.add_argument("--hub", default=os.environ.get("FIDDLE_ENDPOINT",
                                                        "127.0.0.1:4250"))
    parser.add_argument("--node", default=os.environ.get("FIDDLE_NODE_ENDPOINT",
                                                         "127.0.0.1:4240"))
    parser.add_argument("--programs", default=str(corpus.DIR))
    parser.add_argument("--start", help="layer 0: program to load stopped at entry")
    args = parser.parse_args(argv)

    if args.layer == 0:
        backend: Backend = Layer0Backend(Path(args.programs), args.start)
        level = "0s"
    elif args.layer == 1:
        try:
            backend = Layer1Backend(parse_endpoint(args.node))
        except OSError as exc:
            print(f"cannot connect to node at {args.node}: {exc}")
            return 1
        level = "1m"
    else:
        try:
            backend = Layer2Backend(parse_endpoint(args.hub), print_events=True)
        except OSError as exc:
            print(f"cannot connect to hub at {args.hub}: {exc}")
            return 1
        level = "2m"

    session = ConsoleSession(backend)
    try:
        repl(session, level)
    finally:
        backend.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
