"""Routing client library: maps global tids to (node, local tid) pairs so
tools can reach local and remote target processes transparently.

Global tids are assigned here, sequentially in registration order, and
pushed back to each node daemon so in-node agents (the spawn launcher)
can name processes globally.  Node events arrive on a dispatcher thread,
already translated to global tids.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import wire
from .client import ConnectionClosed, ServiceError, WireClient
from .errors import FiddleError


class UnknownGlobalTid(FiddleError):
    code = "unknown_global_tid"


class NodeUnreachable(FiddleError):
    code = "node_unreachable"


class DuplicateEndpoint(FiddleError):
    code = "duplicate_endpoint"


@dataclass
class NodeRegistration:
    node_id: int
    endpoint: tuple[str, int]
    client: WireClient
    locals_to_global: dict[int, int] = field(default_factory=dict)


class L1Session:
    """Thread-safe access to the processes of every registered node."""

    def __init__(self, on_event: Optional[Callable[[int, dict], None]] = None):
        self.nodes: dict[int, NodeRegistration] = {}
        self.global_map: dict[int, tuple[int, int]] = {}  # gtid -> (node, local)
        self._next_node = 1
        self._next_global = 1
        self._lock = threading.Lock()
        self._gcond = threading.Condition(self._lock)
        self._events: queue.Queue = queue.Queue()
        self._on_event = on_event
        self._closed = False
        self._dispatcher = threading.Thread(target=self._dispatch_loop, daemon=True,
                                            name="l1-dispatch")
        self._dispatcher.start()

    # -- topology -------------------------------------------------------------

    def register_node(self, endpoint: tuple[str, int]) -> int:
        with self._lock:
            if any(n.endpoint == tuple(endpoint) for n in self.nodes.values()):
                raise DuplicateEndpoint(f"node {endpoint} already registered")
            node_id = self._next_node
            self._next_node += 1
        try:
            client = WireClient(tuple(endpoint), role="tool", mode="event_async",
                                on_event=lambda env, nid=node_id: self._on_node_event(nid, env))
        except OSError as exc:
            raise NodeUnreachable(f"cannot reach node at {endpoint}: {exc}")
        registration = NodeRegistration(node_id, tuple(endpoint), client)
        with self._lock:
            self.nodes[node_id] = registration
        client.request("adopt_node", [])
        existing = client.request("list_tids", [])
        for row in existing.get("records", []):
            self._assign_global(node_id, int(row["tid"]))
        return node_id

    def _assign_global(self, node_id: int, local_tid: int) -> int:
        with self._gcond:
            registration = self.nodes[node_id]
            if local_tid in registration.locals_to_global:
                return registration.locals_to_global[local_tid]
            gtid = self._next_global
            self._next_global += 1
            registration.locals_to_global[local_tid] = gtid
            self.global_map[gtid] = (node_id, local_tid)
            self._gcond.notify_all()
        registration.client.request("set_global_tid", [local_tid, gtid])
        return gtid

    def global_for(self, node_id: int, local_tid: int,
                   wait: bool = False, timeout: float = 5.0) -> Optional[int]:
        deadline = time.monotonic() + timeout
        with self._gcond:
            while True:
                registration = self.nodes.get(node_id)
                if registration and local_tid in registration.locals_to_global:
                    return registration.locals_to_global[local_tid]
                if not wait:
                    return None
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._gcond.wait(remaining)

    # -- events -----------------------------------------------------------------

    def _on_node_event(self, node_id: int, env: wire.Envelope):
        if isinstance(env.payload, dict):
            self._events.put((node_id, env.payload))

    def _dispatch_loop(self):
        while not self._closed:
            try:
                node_id, payload = self._events.get(timeout=0.2)
            except queue.Empty:
                continue
            try:
                self._dispatch_one(node_id, payload)
            except Exception:  # noqa: BLE001 - keep dispatching
                pass

    def _dispatch_one(self, node_id: int, payload: dict):
        kind = payload.get("kind", "")
        if kind == "Registered":
            gtid = self._assign_global(node_id, int(payload["tid"]))
            translated = dict(payload, tid=gtid)
        elif "tid" in payload:
            gtid = self.global_for(node_id, int(payload["tid"]))
            if gtid is None:
                return
            translated = dict(payload, tid=gtid)
        else:
            translated = dict(payload)
        if self._on_event is not None:
            self._on_event(node_id, translated)

    # -- requests ------------------------------------------------------------------

    def route(self, global_tid: int, service: str, args: list,
              client: str = "l1", timeout: float = 15.0):
        """Forward a per-process request to the owning node; blocks until
        the reply arrives.  The result is identical to calling the engine
        locally on that node."""
        with self._lock:
            located = self.global_map.get(int(global_tid))
            if located is None:
                raise UnknownGlobalTid(f"no process with global tid {global_tid}")
            node_id, local_tid = located
            registration = self.nodes[node_id]
        return self._request(registration, service, [local_tid, *args], client, timeout)

    def route_node(self, node_id: int, service: str, args: list,
                   client: str = "l1", timeout: float = 15.0):
        with self._lock:
            registration = self.nodes.get(node_id)
        if registration is None:
            raise NodeUnreachable(f"no node {node_id}")
        return self._request(registration, service, args, client, timeout)

    def _request(self, registration: NodeRegistration, service: str, args: list,
                 client: str, timeout: float):
        link = registration.client
        try:
            return link.request_as(client, service, args, timeout)
        except ConnectionClosed as exc:
            raise NodeUnreachable(f"node {registration.endpoint} unreachable: {exc}")
        except ServiceError as exc:
            if exc.code == "timeout" and "no reply" in str(exc):
                raise NodeUnreachable(f"node {registration.endpoint} not answering")
            raise

    def node_ids(self) -> list[int]:
        with self._lock:
            return sorted(self.nodes)

    def close(self):
        self._closed = True
        with self._lock:
            nodes = list(self.nodes.values())
        for registration in nodes:
            registration.client.close()
