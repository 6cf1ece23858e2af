"""Socket client library for the line-envelope protocol.

WireClient gives request/reply over one connection with unsolicited
events demultiplexed to a callback; HubClient layers the three delivery
modes on top of it:

  blocking     submit() waits for the reply envelope inline
  event_async  submit() returns the request id at once; the reply and all
               notifications arrive as events, each handler invocation on
               a fresh thread
  event_sync   like event_async, but events stay queued at the hub until
               fetch_pending() asks for them
"""

from __future__ import annotations

import socket
import threading
from typing import Any, Callable, Optional

from . import wire
from .errors import FiddleError


class ServiceError(FiddleError):
    """A request was answered with a non-ok status."""

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(message or code)


class ConnectionClosed(FiddleError):
    code = "connection_closed"


class _Pending:
    __slots__ = ("event", "envelope")

    def __init__(self):
        self.event = threading.Event()
        self.envelope: Optional[wire.Envelope] = None


class WireClient:
    """One connection to a daemon, speaking hello + request/reply + events."""

    def __init__(self, endpoint: tuple[str, int], role: str = "tool",
                 mode: str = "blocking",
                 on_event: Optional[Callable[[wire.Envelope], None]] = None,
                 connect_timeout: float = 5.0):
        self.endpoint = endpoint
        self.role = role
        self.mode = mode
        self.on_event = on_event
        self._sock = socket.create_connection(endpoint, timeout=connect_timeout)
        self._sock.settimeout(None)
        self._rfile = self._sock.makefile("rb")
        self._wlock = threading.Lock()
        self._pending: dict[int, _Pending] = {}
        self._plock = threading.Lock()
        self._closed = False
        self.session = wire.Session()
        self._reader = threading.Thread(target=self._read_loop, daemon=True,
                                        name=f"wire-reader-{endpoint[1]}")
        self._reader.start()
        payload = self._call(wire.Envelope(kind="hello", args=[role, mode]), rid=0)
        self.client_id = payload["client_id"]
        self.session.client_id = self.client_id

    # -- plumbing ------------------------------------------------------------

    def _write(self, env: wire.Envelope):
        data = wire.encode(env)
        with self._wlock:
            if self._closed:
                raise ConnectionClosed("connection already closed")
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise ConnectionClosed(str(exc))

    def _read_loop(self):
        try:
            for raw in self._rfile:
                try:
                    env = wire.decode(raw)
                except wire.FrameError:
                    break
                if env.kind == "reply":
                    with self._plock:
                        waiter = self._pending.pop(env.rid, None)
                    if waiter is not None:
                        waiter.envelope = env
                        waiter.event.set()
                elif env.kind == "event":
                    handler = self.on_event
                    if handler is not None:
                        try:
                            handler(env)
                        except Exception:  # noqa: BLE001
                            pass
        except OSError:
            pass
        finally:
            self._fail_pending()

    def _fail_pending(self):
        with self._plock:
            waiters = list(self._pending.values())
            self._pending.clear()
        for waiter in waiters:
            waiter.event.set()

    def _call(self, env: wire.Envelope, rid: int, timeout: float = 15.0) -> Any:
        waiter = _Pending()
        with self._plock:
            self._pending[rid] = waiter
        env.rid = rid
        self._write(env)
        if not waiter.event.wait(timeout):
            with self._plock:
                self._pending.pop(rid, None)
            raise ServiceError("timeout", f"no reply to rid {rid} within {timeout:g}s")
        if waiter.envelope is None:
            raise ConnectionClosed("connection closed while waiting for reply")
        reply = waiter.envelope
        if reply.status != "ok":
            message = ""
            if isinstance(reply.payload, dict):
                message = reply.payload.get("error", "")
            raise ServiceError(reply.status or "error", message)
        return reply.payload

    # -- public API ------------------------------------------------------------

    def request(self, service: str, args: list, timeout: float = 15.0) -> Any:
        rid = self.session.next_request_id()
        env = wire.request(self.client_id, rid, service, args)
        return self._call(env, rid, timeout)

    def request_as(self, client: str, service: str, args: list,
                   timeout: float = 15.0) -> Any:
        """Issue a request on behalf of another client id (used by daemons
        that forward requests so per-client state keys stay intact)."""
        rid = self.session.next_request_id()
        env = wire.request(client or self.client_id, rid, service, args)
        return self._call(env, rid, timeout)

    def send_request(self, service: str, args: list) -> int:
        """Fire a request without waiting; returns its request id."""
        rid = self.session.next_request_id()
        self._write(wire.request(self.client_id, rid, service, args))
        return rid

    def register(self, args: list, timeout: float = 15.0) -> Any:
        rid = self.session.next_request_id()
        env = wire.Envelope(kind="register", client=self.client_id, args=args)
        return self._call(env, rid, timeout)

    def close(self):
        with self._wlock:
            self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass


class HubClient:
    """A client tool session against the hub."""

    def __init__(self, endpoint: tuple[str, int], role: str = "tool",
                 mode: str = "blocking",
                 on_event: Optional[Callable[[int, dict], None]] = None):
        self.mode = mode
        self._handler = on_event
        self._reply_waiters: dict[int, _Pending] = {}
        self._rlock = threading.Lock()
        self.events: list[dict] = []
        self._events_lock = threading.Lock()
        self.wire = WireClient(endpoint, role=role, mode=mode,
                               on_event=self._dispatch_event)
        self.client_id = self.wire.client_id

    def _dispatch_event(self, env: wire.Envelope):
        record = env.payload if isinstance(env.payload, dict) else {}
        with self._events_lock:
            self.events.append(record)
        if record.get("kind") == "Reply":
            body = record.get("body", {})
            rid = body.get("request_id", env.rid)
            with self._rlock:
                waiter = self._reply_waiters.pop(rid, None)
            if waiter is not None:
                waiter.envelope = wire.Envelope(kind="event", rid=rid, payload=record)
                waiter.event.set()
        handler = self._handler
        if handler is not None:
            # one handler invocation per event, each on its own thread
            threading.Thread(target=handler, args=(env.rid, record),
                             daemon=True).start()

    # -- requests ---------------------------------------------------------------

    def submit(self, service: str, args: list, timeout: float = 15.0) -> Any:
        """Blocking mode: returns the reply payload (raises ServiceError).
        Event modes: returns the request id immediately."""
        if self.mode == "blocking":
            return self.wire.request(service, args, timeout)
        return self.wire.send_request(service, args)

    def call(self, service: str, args: list, timeout: float = 15.0) -> Any:
        """Reply payload regardless of mode (waits on the Reply event in
        event_async mode)."""
        if self.mode == "blocking":
            return self.wire.request(service, args, timeout)
        if self.mode != "event_async":
            raise ServiceError("wrong_mode", "call() needs blocking or event_async")
        waiter = _Pending()
        with self._rlock:
            rid = self.wire.session.next_request_id()
            self._reply_waiters[rid] = waiter
        self.wire._write(wire.request(self.client_id, rid, service, args))
        if not waiter.event.wait(timeout):
            raise ServiceError("timeout", f"no Reply event for rid {rid}")
        record = waiter.envelope.payload
        body = record.get("body", {})
        if body.get("status") != "ok":
            message = ""
            if isinstance(body.get("payload"), dict):
                message = body["payload"].get("error", "")
            raise ServiceError(body.get("status", "error"), message)
        return body.get("payload")

    def fetch_pending(self, max_events: int = 64, timeout: float = 15.0) -> list[dict]:
        payload = self.wire.request("fetch_pending", [max_events], timeout)
        return payload.get("events", [])

    def close(self):
        self.wire.close()
