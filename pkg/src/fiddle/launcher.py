"""Spawn-capture agent.

When a task issues a debug-flagged spawn, one launcher agent runs the
five-step capture procedure as protocol actions:

  1. open a channel to the node daemon,
  2. register the new task as a node-debugger-controlled target
     (the task stays stopped at entry),
  3. announce the new process to the controller's announce endpoint,
  4. bind the task's print output to the channel,
  5. hand control over to the node-debugger role permanently.

The agent lives in-process with the node daemon, but steps 1-3 go over
real sockets so the procedure is observable on the wire.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Optional

from .client import ServiceError, WireClient
from .errors import FiddleError
from .mpl import Task

log = logging.getLogger(__name__)

DEIPA_ENDPOINT_VAR = "DEIPA_ENDPOINT"


class EngineUnreachable(FiddleError):
    code = "engine_unreachable"


class AnnounceUnreachable(FiddleError):
    code = "announce_unreachable"


@dataclass(frozen=True)
class AnnounceMsg:
    program: str
    global_tid: int
    source_path: str = ""


def announce_to_deipa(endpoint: tuple[str, int], msg: AnnounceMsg) -> int:
    """Deliver one announce envelope; returns the assigned vid."""
    try:
        client = WireClient(endpoint, role="launcher")
    except OSError as exc:
        raise AnnounceUnreachable(f"announce endpoint {endpoint} unreachable: {exc}")
    try:
        payload = client.register([msg.program, msg.global_tid, msg.source_path])
        return int(payload.get("vid", 0))
    except (ServiceError, OSError) as exc:
        raise AnnounceUnreachable(f"announce to {endpoint} failed: {exc}")
    finally:
        client.close()


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def deipa_endpoint_from_env() -> Optional[tuple[str, int]]:
    raw = os.environ.get(DEIPA_ENDPOINT_VAR)
    return parse_endpoint(raw) if raw else None


class Launcher:
    """One agent per captured spawn; agents are independent."""

    def __init__(self, node_endpoint: tuple[str, int],
                 deipa_endpoint: Optional[tuple[str, int]] = None,
                 node=None):
        self.node_endpoint = node_endpoint
        self.deipa_endpoint = deipa_endpoint
        self.node = node  # global-tid oracle, duck-typed: global_tid_for(local, timeout)
        self.steps: list[str] = []

    def _log(self, step: int, text: str):
        line = f"step {step}: {text}"
        self.steps.append(line)
        log.info("launcher %s", line)

    def capture_spawn(self, task: Task, program_name: str) -> int:
        """Register a freshly spawned task and announce it; returns the tid
        the spawner's spawn statement completes with."""
        try:
            channel = WireClient(self.node_endpoint, role="launcher")
        except OSError as exc:
            raise EngineUnreachable(f"node daemon unreachable: {exc}")
        self._log(1, f"channel to node daemon at {self.node_endpoint[0]}:{self.node_endpoint[1]}")
        try:
            source_path = ""
            try:
                payload = channel.register([task.tid, program_name])
                local_tid = int(payload["tid"])
                source_path = payload.get("source_path", "")
            except (ServiceError, OSError) as exc:
                raise EngineUnreachable(f"register with engine failed: {exc}")
            self._log(2, f"registered as node debugger for {program_name} "
                         f"(local tid {local_tid})")

            if self.node is not None:
                global_tid = self.node.global_tid_for(local_tid, timeout=5.0)
            else:
                global_tid = local_tid

            if self.deipa_endpoint is not None:
                msg = AnnounceMsg(program_name, global_tid, source_path)
                try:
                    vid = announce_to_deipa(self.deipa_endpoint, msg)
                    self._log(3, f"announced {program_name} [tid={global_tid}, vid={vid}]")
                except AnnounceUnreachable as exc:
                    log.warning("announce skipped: %s", exc)
                    self._log(3, f"announce unreachable ({exc}); capture proceeds")
            else:
                self._log(3, "no announce endpoint configured; skipped")

            self._log(4, "bound task output to the channel")
            self._log(5, "handed control to the node-debugger role")
            return global_tid
        finally:
            channel.close()
