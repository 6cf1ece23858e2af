"""Hub daemon: multiplexes many simultaneous client tools over one target
application, serializes their requests into a total-order log, and
delivers replies and notifications as events.

Delivery modes per client session:

  blocking     replies return inline; no events are pushed
  event_async  submit returns at once; the reply and all subscribed
               notifications are pushed as event envelopes
  event_sync   events queue at the hub until the client fetches them

Every request is one atomic log entry.  Long-blocking services
(`wait_stop`) are ordered in the log but executed outside its critical
section so they cannot starve other clients.  Reply events go to exactly
the issuing session; PeerRequest events tell every other subscribed
client who asked for what.
"""

from __future__ import annotations

import argparse
import logging
import os
import socket
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from . import wire
from .errors import FiddleError
from .launcher import parse_endpoint
from .routing import L1Session

log = logging.getLogger(__name__)

FIDDLE_ENDPOINT_VAR = "FIDDLE_ENDPOINT"
FIDDLE_GATEWAY_VAR = "FIDDLE_GATEWAY"

EVENT_KINDS = ("Reply", "Stopped", "Exited", "Spawned", "Output", "PeerRequest")
_NOTIFY_KINDS = ("Stopped", "Exited", "Spawned", "Output", "PeerRequest")
_EVENT_MODES = ("event_async", "event_sync")
_PENDING_WARN_THRESHOLD = 4096

# services a client may submit; True when the first argument is a global tid
SERVICES = {
    "list_tids": False,
    "start_program": False,
    "status": True,
    "wait_stop": True,
    "resume": True,
    "single_step": True,
    "kill": True,
    "break_set": True,
    "break_clear": True,
    "evaluate": True,
    "set_variable": True,
    "info_line": True,
    "read_source": True,
}


@dataclass(frozen=True)
class EventRecord:
    seq: int
    kind: str
    body: dict

    def payload(self) -> dict:
        return {"seq": self.seq, "kind": self.kind, "body": self.body}


@dataclass
class LogEntry:
    seq: int
    client: str
    service: str
    args: list


@dataclass
class ClientSession:
    client_id: str
    role: str
    delivery_mode: str
    writer: Optional[Callable[[wire.Envelope], None]]
    subscriptions: set = field(default_factory=set)
    pending: list = field(default_factory=list)
    plock: threading.Lock = field(default_factory=threading.Lock)
    open: bool = True

    def wants_events(self) -> bool:
        return self.delivery_mode in _EVENT_MODES


class HubServer:
    def __init__(self, wait_stop_cap: float = 60.0):
        self.l1 = L1Session(on_event=self._node_event)
        self.sessions: dict[str, ClientSession] = {}
        self._sessions_lock = threading.Lock()
        self._next_client = 1
        self.request_log: list[LogEntry] = []
        self._log_lock = threading.Lock()
        self._event_seq = 0
        self._seq_lock = threading.Lock()
        self._wait_stop_cap = wait_stop_cap
        self._listener: Optional[socket.socket] = None
        self.endpoint: Optional[tuple[str, int]] = None
        self._closed = False

    # -- topology ---------------------------------------------------------------

    def register_node(self, endpoint: tuple[str, int]) -> int:
        return self.l1.register_node(endpoint)

    # -- client sessions ----------------------------------------------------------

    def register_client(self, role: str, delivery_mode: str,
                        writer: Optional[Callable[[wire.Envelope], None]] = None
                        ) -> ClientSession:
        with self._sessions_lock:
            client_id = f"c{self._next_client}"
            self._next_client += 1
            session = ClientSession(client_id, role, delivery_mode, writer)
            if session.wants_events():
                session.subscriptions = set(_NOTIFY_KINDS)
            self.sessions[client_id] = session
            return session

    def drop_client(self, client_id: str):
        with self._sessions_lock:
            session = self.sessions.pop(client_id, None)
        if session is not None:
            session.open = False

    # -- events ---------------------------------------------------------------------

    def _next_seq(self) -> int:
        self._event_seq += 1
        return self._event_seq

    def _deliver(self, session: ClientSession, record: EventRecord, rid: int = 0):
        if not session.open:
            return
        if session.delivery_mode == "event_sync":
            with session.plock:
                session.pending.append(record)
                if len(session.pending) == _PENDING_WARN_THRESHOLD:
                    log.warning("client %s has %d pending events",
                                session.client_id, _PENDING_WARN_THRESHOLD)
            return
        writer = session.writer
        if writer is not None:
            try:
                writer(wire.event(session.client_id, record.payload(), rid=rid))
            except Exception:  # noqa: BLE001 - dead writers drop events
                session.open = False

    def _fan_out(self, kind: str, body: dict, exclude: str = ""):
        # seq assignment and delivery are atomic so every session observes
        # events in seq order
        with self._seq_lock:
            record = EventRecord(self._next_seq(), kind, body)
            with self._sessions_lock:
                targets = [s for s in self.sessions.values()
                           if s.wants_events() and kind in s.subscriptions
                           and s.client_id != exclude]
            for session in targets:
                self._deliver(session, record)

    def _reply_event(self, session: ClientSession, rid: int, status: str,
                     payload: Any) -> EventRecord:
        with self._seq_lock:
            record = EventRecord(self._next_seq(), "Reply",
                                 {"request_id": rid, "status": status,
                                  "payload": payload})
            self._deliver(session, record, rid=rid)
        return record

    def _node_event(self, node_id: int, payload: dict):
        kind = payload.pop("kind", "")
        if kind == "Registered":
            self._fan_out("Spawned", payload)
        elif kind in ("Stopped", "Exited", "Output"):
            self._fan_out(kind, payload)

    # -- the request path -------------------------------------------------------------

    def submit(self, session: ClientSession, service: str, args: list,
               rid: int = 0) -> tuple[str, Any]:
        """Run one request through the total-order log; returns (status,
        payload).  Reply delivery per mode is the caller's job."""
        deferred = self.submit_ordered(session, service, args)
        if deferred is None:
            return self._execute(session, service, args)
        return deferred

    def submit_ordered(self, session: ClientSession, service: str, args: list
                       ) -> Optional[tuple[str, Any]]:
        """Order one request in the log; execute it there unless it is a
        long-blocking service.  Returns the result, or None when execution
        was deferred (the caller runs _execute outside the critical
        section)."""
        if service == "fetch_pending":
            return self._fetch_pending(session, args)
        if service not in SERVICES:
            return ("unknown_service", {"error": f"unknown service {service!r}"})
        with self._log_lock:
            entry = LogEntry(len(self.request_log) + 1, session.client_id,
                             service, list(args))
            self.request_log.append(entry)
            tid = args[0] if SERVICES[service] and args else None
            self._fan_out("PeerRequest",
                          {"client": session.client_id, "service": service, "tid": tid},
                          exclude=session.client_id)
            if service != "wait_stop":
                return self._execute(session, service, args)
        return None

    def _execute(self, session: ClientSession, service: str, args: list
                 ) -> tuple[str, Any]:
        try:
            return ("ok", self._run_service(session, service, args))
        except FiddleError as exc:
            return (exc.code, {"error": str(exc)})
        except Exception as exc:  # noqa: BLE001
            log.exception("service %s failed", service)
            return ("internal_error", {"error": str(exc)})

    def _run_service(self, session: ClientSession, service: str, args: list) -> Any:
        if service == "list_tids":
            return {"records": self._merged_tids()}
        if service == "start_program":
            return {"tid": self._start_program(str(args[0]))}
        if not args:
            raise FiddleError(f"service {service} needs a tid")
        gtid = int(args[0])
        rest = list(args[1:])
        if service == "wait_stop":
            timeout = min(float(rest[0]) if rest else 10.0, self._wait_stop_cap)
            return self.l1.route(gtid, "wait_stop", [timeout],
                                 client=session.client_id, timeout=timeout + 10.0)
        return self.l1.route(gtid, service, rest, client=session.client_id)

    def _merged_tids(self) -> list[dict]:
        rows = []
        for node_id in self.l1.node_ids():
            payload = self.l1.route_node(node_id, "list_tids", [])
            for row in payload.get("records", []):
                gtid = self.l1.global_for(node_id, int(row["tid"]))
                if gtid is None:
                    continue
                rows.append(dict(row, tid=gtid))
        rows.sort(key=lambda r: r["tid"])
        return rows

    def _start_program(self, name: str) -> int:
        node_ids = self.l1.node_ids()
        if not node_ids:
            raise FiddleError("no node registered with the hub")
        node_id = node_ids[0]
        payload = self.l1.route_node(node_id, "start_program", [name])
        local_tid = int(payload["tid"])
        gtid = self.l1.global_for(node_id, local_tid, wait=True, timeout=5.0)
        if gtid is None:
            raise FiddleError(f"no global tid assigned for {name}")
        return gtid

    def _fetch_pending(self, session: ClientSession, args: list) -> tuple[str, Any]:
        if session.delivery_mode != "event_sync":
            return ("wrong_mode", {"error": "fetch_pending needs event_sync mode"})
        limit = int(args[0]) if args else 64
        with session.plock:
            batch = session.pending[:limit]
            del session.pending[:limit]
        return ("ok", {"events": [record.payload() for record in batch]})

    # -- wire front end ----------------------------------------------------------------

    def handle_envelope(self, session: ClientSession, env: wire.Envelope):
        """Process one request envelope from an attached session.

        Requests enter the log in arrival order (per-connection FIFO);
        only wait_stop execution leaves the caller's thread.
        """
        if env.kind != "request":
            return
        result = self.submit_ordered(session, env.service, env.args)
        if result is not None:
            self._send_reply(session, env, result)
            return
        threading.Thread(
            target=lambda: self._send_reply(
                session, env, self._execute(session, env.service, env.args)),
            daemon=True, name="hub-wait").start()

    def _send_reply(self, session: ClientSession, env: wire.Envelope,
                    result: tuple[str, Any]):
        status, payload = result
        inline = env.service == "fetch_pending" or session.delivery_mode == "blocking"
        if inline:
            if session.writer is not None:
                session.writer(wire.Envelope(kind="reply", client=session.client_id,
                                             rid=env.rid, status=status,
                                             payload=payload))
            return
        self._reply_event(session, env.rid, status, payload)

    # -- TCP server ----------------------------------------------------------------------

    def serve(self, listen: tuple[str, int] = ("127.0.0.1", 0)) -> tuple[str, int]:
        self._listener = socket.create_server(listen)
        self.endpoint = self._listener.getsockname()[:2]
        threading.Thread(target=self._accept_loop, daemon=True,
                         name="hub-accept").start()
        return self.endpoint

    def _accept_loop(self):
        while not self._closed:
            try:
                sock, _addr = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._conn_loop, args=(sock,), daemon=True,
                             name="hub-conn").start()

    def _conn_loop(self, sock: socket.socket):
        wlock = threading.Lock()

        def writer(env: wire.Envelope):
            data = wire.encode(env)
            with wlock:
                sock.sendall(data)

        session: Optional[ClientSession] = None
        rfile = sock.makefile("rb")
        try:
            for raw in rfile:
                try:
                    env = wire.decode(raw)
                except wire.FrameError as exc:
                    try:
                        writer(wire.event("", {"kind": "FrameError", "error": str(exc)}))
                    except OSError:
                        pass
                    break
                if env.kind == "hello":
                    role = env.args[0] if env.args else "tool"
                    mode = env.args[1] if len(env.args) > 1 else "blocking"
                    session = self.register_client(role, mode, writer)
                    writer(wire.reply_ok(session.client_id, 0,
                                         {"client_id": session.client_id}))
                elif env.kind == "request" and session is not None:
                    # in-order handling keeps this connection's requests FIFO
                    # in the log; wait_stop execution forks off internally
                    self.handle_envelope(session, env)
        except OSError:
            pass
        finally:
            if session is not None:
                self.drop_client(session.client_id)
            try:
                sock.close()
            except OSError:
                pass

    def close(self):
        self._closed = True
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        self.l1.close()


def main(argv=None):
    parser = argparse.ArgumentParser(prog="fiddle-hub",
                                     description="multi-client debugging hub")
    parser.add_argument("--listen",
                        default=os.environ.get(FIDDLE_ENDPOINT_VAR, "127.0.0.1:4250"),
                        metavar="HOST:PORT")
    parser.add_argument("--gateway", metavar="HOST:HTTPPORT",
                        default=os.environ.get(FIDDLE_GATEWAY_VAR, ""),
                        help="also serve the web gateway on this endpoint")
    parser.add_argument("--node", action="append", default=[], metavar="ENDPOINT",
                        help="node daemon endpoint (repeatable)")
    parser.add_argument("--webui-dir", default="",
                        help="directory with the built web UI bundle")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    hub = HubServer()
    for endpoint in args.node:
        node_id = hub.register_node(parse_endpoint(endpoint))
        print(f"registered node {node_id} at {endpoint}")
    host, port = hub.serve(parse_endpoint(args.listen))
    print(f"fiddle-hub listening on {host}:{port}")
    if args.gateway:
        from .gateway import serve_gateway
        ghost, gport = serve_gateway(hub, parse_endpoint(args.gateway),
                                     webui_dir=args.webui_dir or None)
        print(f"gateway serving on http://{ghost}:{gport}/")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        hub.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
