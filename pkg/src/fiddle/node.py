"""Per-node daemon: serves the local engine over the wire protocol and
hosts the spawn-capture agent.

One daemon runs on every node that hosts target processes.  Connections
speak the line-envelope protocol; requests map one-to-one onto engine
services, replies carry the matching request id, and connections opened
in an event mode also receive unsolicited node events (Registered,
Stopped, Exited, Output).
"""

from __future__ import annotations

import argparse
import logging
import socket
import threading
import time
from pathlib import Path
from typing import Optional

from . import corpus, wire
from .engine import LocalEngine
from .errors import FiddleError
from .launcher import Launcher, deipa_endpoint_from_env, parse_endpoint
from .mpl import Runtime

log = logging.getLogger(__name__)

FIDDLE_NODE_ENDPOINT_VAR = "FIDDLE_NODE_ENDPOINT"


class BindError(FiddleError):
    code = "bind_error"


class _Conn:
    def __init__(self, sock: socket.socket, conn_id: str):
        self.sock = sock
        self.id = conn_id
        self.role = "tool"
        self.events_on = False
        self.wlock = threading.Lock()
        self.open = True

    def write(self, env: wire.Envelope):
        data = wire.encode(env)
        with self.wlock:
            if not self.open:
                return
            try:
                self.sock.sendall(data)
            except OSError:
                self.open = False

    def close(self):
        with self.wlock:
            self.open = False
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


class NodeServer:
    def __init__(self, programs_dir: Path, listen: tuple[str, int] = ("127.0.0.1", 0),
                 deipa_endpoint: Optional[tuple[str, int]] = None,
                 machine: str = ""):
        self.runtime = Runtime(programs_dir, debug_capture=True)
        self.engine = LocalEngine(self.runtime, machine=machine)
        self.engine.event_hook = self._on_engine_event
        self.engine.attach_capture(self._capture_spawn)
        self.runtime.resolve_tid = self._resolve_dst
        self.deipa_endpoint = deipa_endpoint
        self.launchers: list[Launcher] = []

        self._globals: dict[int, int] = {}  # engine local tid -> global tid
        self._gcond = threading.Condition()
        self._upstream = False

        self._conns: list[_Conn] = []
        self._conns_lock = threading.Lock()
        self._next_conn = 1
        self._closed = False
        try:
            self._listener = socket.create_server(listen)
        except OSError as exc:
            raise BindError(f"cannot bind {listen}: {exc}")
        self.endpoint = self._listener.getsockname()[:2]
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True,
                                               name="node-accept")
        self._accept_thread.start()

    # -- global tid plumbing ---------------------------------------------------

    def adopt(self):
        """Mark this node as governed by an upstream hub that assigns
        global tids."""
        with self._gcond:
            self._upstream = True

    def set_global_tid(self, local_tid: int, global_tid: int):
        with self._gcond:
            self._globals[local_tid] = global_tid
            self._gcond.notify_all()

    def global_tid_for(self, local_tid: int, timeout: float = 5.0) -> int:
        deadline = time.monotonic() + timeout
        with self._gcond:
            if not self._upstream:
                return local_tid
            while local_tid not in self._globals:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    log.warning("no global tid for local %d after %.1fs; "
                                "falling back to the local id", local_tid, timeout)
                    return local_tid
                self._gcond.wait(remaining)
            return self._globals[local_tid]

    def _resolve_dst(self, dst: int) -> Optional[int]:
        """Map a message destination (possibly a hub-global tid) to a local
        runtime tid.  Global assignments win; unmapped ids fall back to the
        local id space."""
        with self._gcond:
            engine_tid = next((local for local, g in self._globals.items()
                               if g == dst), None)
        if engine_tid is not None:
            runtime_tid = self.engine.runtime_tid(engine_tid)
            if runtime_tid is not None:
                return runtime_tid
        if dst in self.runtime.tasks:
            return dst
        return None

    # -- spawn capture -----------------------------------------------------------

    def _capture_spawn(self, task, program_name: str) -> int:
        agent = Launcher(self.endpoint, self.deipa_endpoint, node=self)
        self.launchers.append(agent)
        return agent.capture_spawn(task, program_name)

    def start_program(self, name: str) -> int:
        """Spawn a program under debugger control, stopped at entry."""
        task = self.runtime.spawn_task(name, debug_capture=True)
        return self.engine.register_process(task)

    # -- events --------------------------------------------------------------------

    def _on_engine_event(self, kind: str, payload: dict):
        env = wire.event("", dict(payload, kind=kind))
        with self._conns_lock:
            conns = [c for c in self._conns if c.events_on and c.open]
        for conn in conns:
            conn.write(env)

    # -- connection handling ----------------------------------------------------------

    def _accept_loop(self):
        while not self._closed:
            try:
                sock, _addr = self._listener.accept()
            except OSError:
                return
            with self._conns_lock:
                conn = _Conn(sock, f"n{self._next_conn}")
                self._next_conn += 1
                self._conns.append(conn)
            threading.Thread(target=self._read_loop, args=(conn,), daemon=True,
                             name=f"node-conn-{conn.id}").start()

    def _read_loop(self, conn: _Conn):
        rfile = conn.sock.makefile("rb")
        try:
            for raw in rfile:
                try:
                    env = wire.decode(raw)
                except wire.FrameError as exc:
                    conn.write(wire.event("", {"kind": "FrameError", "error": str(exc)}))
                    break
                if env.kind == "hello":
                    conn.role = env.args[0] if env.args else "tool"
                    mode = env.args[1] if len(env.args) > 1 else "blocking"
                    conn.events_on = mode in ("event_async", "event_sync")
                    conn.write(wire.reply_ok(conn.id, 0, {"client_id": conn.id}))
                elif env.kind == "register":
                    threading.Thread(target=self._serve_register,
                                     args=(conn, env), daemon=True).start()
                elif env.kind == "request":
                    threading.Thread(target=self._serve_request,
                                     args=(conn, env), daemon=True).start()
        except OSError:
            pass
        finally:
            conn.close()
            with self._conns_lock:
                if conn in self._conns:
                    self._conns.remove(conn)

    def _serve_register(self, conn: _Conn, env: wire.Envelope):
        requester = env.client or conn.id
        try:
            runtime_tid = int(env.args[0])
            task = self.runtime.tasks.get(runtime_tid)
            if task is None:
                raise FiddleError(f"no runtime task {runtime_tid}")
            tid = self.engine.register_process(task)
            conn.write(wire.reply_ok(requester, env.rid, {
                "tid": tid,
                "source_path": self.runtime.program_path(task.program.name),
            }))
        except FiddleError as exc:
            conn.write(wire.reply_error(requester, env.rid, exc.code, str(exc)))

    def _serve_request(self, conn: _Conn, env: wire.Envelope):
        # replies echo the requester's client id, which may be a forwarded
        # tool id rather than this connection's own
        requester = env.client or conn.id
        try:
            payload = self._dispatch(env)
            conn.write(wire.reply_ok(requester, env.rid, payload))
        except FiddleError as exc:
            conn.write(wire.reply_error(requester, env.rid, exc.code, str(exc)))
        except Exception as exc:  # noqa: BLE001
            log.exception("request %s failed", env.service)
            conn.write(wire.reply_error(requester, env.rid, "internal_error", str(exc)))

    def _dispatch(self, env: wire.Envelope):
        service = env.service
        args = env.args
        engine = self.engine
        client_key = env.client or "anonymous"
        if service == "list_tids":
            return {"records": engine.list_tids()}
        if service == "status":
            return engine.status(int(args[0])).payload()
        if service == "wait_stop":
            return engine.wait_stop(int(args[0]), float(args[1])).payload()
        if service == "resume":
            engine.resume(int(args[0]))
            return {"ok": True}
        if service == "single_step":
            engine.single_step(int(args[0]))
            return {"ok": True}
        if service == "kill":
            engine.kill(int(args[0]))
            return {"ok": True}
        if service == "break_set":
            one_shot = bool(args[3]) if len(args) > 3 else False
            bp_id = engine.breakpoint_set(int(args[0]), int(args[1]),
                                          str(args[2]), one_shot)
            return {"id": bp_id}
        if service == "break_clear":
            engine.breakpoint_clear(int(args[0]), int(args[1]))
            return {"ok": True}
        if service == "evaluate":
            return engine.evaluate(int(args[0]), str(args[1]), client=client_key).payload()
        if service == "set_variable":
            engine.set_variable(int(args[0]), str(args[1]), args[2])
            return {"ok": True, "tid": int(args[0]), "name": str(args[1]),
                    "value": args[2]}
        if service == "info_line":
            line, filename = engine.info_line(int(args[0]))
            return {"line": line, "file": filename}
        if service == "read_source":
            source, filename = engine.read_source(int(args[0]))
            return {"source": source, "file": filename}
        if service == "start_program":
            tid = self.start_program(str(args[0]))
            return {"tid": tid}
        if service == "adopt_node":
            self.adopt()
            return {"ok": True}
        if service == "set_global_tid":
            self.set_global_tid(int(args[0]), int(args[1]))
            return {"ok": True}
        raise FiddleError(f"unknown service {service!r}")

    # -- lifecycle --------------------------------------------------------------------

    def close(self):
        self._closed = True
        try:
            self._listener.close()
        except OSError:
            pass
        with self._conns_lock:
            conns = list(self._conns)
        for conn in conns:
            conn.close()
        self.engine.shutdown()


def main(argv=None):
    parser = argparse.ArgumentParser(prog="fiddle-node",
                                     description="per-node debugging daemon")
    parser.add_argument("--programs", default=str(corpus.DIR),
                        help="directory with .mpl programs (default: bundled corpus)")
    parser.add_argument("--listen", default="127.0.0.1:4240", metavar="HOST:PORT")
    parser.add_argument("--start", metavar="PROGRAM",
                        help="launch PROGRAM under debugger control, stopped at entry")
    parser.add_argument("--deipa", metavar="HOST:PORT",
                        help="announce endpoint (default: $DEIPA_ENDPOINT)")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    deipa = parse_endpoint(args.deipa) if args.deipa else deipa_endpoint_from_env()
    server = NodeServer(Path(args.programs), parse_endpoint(args.listen),
                        deipa_endpoint=deipa)
    if args.start:
        tid = server.start_program(args.start)
        print(f"started {args.start} as tid {tid} (stopped at entry)")
    host, port = server.endpoint
    print(f"fiddle-node listening on {host}:{port}")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        server.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
