"""Line-delimited wire protocol shared by all daemons and clients.

One envelope per UTF-8 line of JSON object syntax with the keys
`kind,client,rid,service,args,status,payload`.  Fields left at their
defaults are omitted on encode and restored on decode, so
decode(encode(e)) == e.  Unknown keys are ignored for forward
compatibility.

Request identifiers are client-scoped: each session hands out 1,2,3,...
and never reuses a value.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Any

from .errors import FiddleError

KINDS = ("hello", "register", "request", "reply", "event")


class FrameError(FiddleError):
    code = "frame_error"


@dataclass
class Envelope:
    kind: str
    client: str = ""
    rid: int = 0
    service: str = ""
    args: list = field(default_factory=list)
    status: str = ""
    payload: Any = None


def encode(env: Envelope) -> bytes:
    if env.kind not in KINDS:
        raise FrameError(f"unknown envelope kind {env.kind!r}")
    obj: dict[str, Any] = {"kind": env.kind}
    if env.client:
        obj["client"] = env.client
    if env.rid:
        obj["rid"] = env.rid
    if env.service:
        obj["service"] = env.service
    if env.args:
        obj["args"] = env.args
    if env.status:
        obj["status"] = env.status
    if env.payload is not None:
        obj["payload"] = env.payload
    return (json.dumps(obj, separators=(",", ":")) + "\n").encode("utf-8")


def decode(data: bytes | str) -> Envelope:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FrameError(f"undecodable frame: {exc}") from exc
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise FrameError(f"malformed frame: {exc}") from exc
    if not isinstance(obj, dict):
        raise FrameError("frame is not an object")
    kind = obj.get("kind")
    if kind not in KINDS:
        raise FrameError(f"unknown envelope kind {kind!r}")
    rid = obj.get("rid", 0)
    args = obj.get("args", [])
    if not isinstance(rid, int) or rid < 0 or not isinstance(args, list):
        raise FrameError("bad rid or args")
    return Envelope(
        kind=kind,
        client=str(obj.get("client", "")),
        rid=rid,
        service=str(obj.get("service", "")),
        args=args,
        status=str(obj.get("status", "")),
        payload=obj.get("payload"),
    )


class Session:
    """Per-connection request-id allocator (strictly increasing from 1)."""

    def __init__(self, client_id: str = ""):
        self.client_id = client_id
        self._next = 1
        self._lock = threading.Lock()

    def next_request_id(self) -> int:
        with self._lock:
            rid = self._next
            self._next += 1
            return rid


def request(client: str, rid: int, service: str, args: list) -> Envelope:
    return Envelope(kind="request", client=client, rid=rid, service=service, args=args)


def reply_ok(client: str, rid: int, payload: Any) -> Envelope:
    return Envelope(kind="reply", client=client, rid=rid, status="ok", payload=payload)


def reply_error(client: str, rid: int, code: str, message: str = "") -> Envelope:
    payload = {"error": message} if message else None
    return Envelope(kind="reply", client=client, rid=rid, status=code, payload=payload)


def event(client: str, payload: Any, rid: int = 0) -> Envelope:
    return Envelope(kind="event", client=client, rid=rid, payload=payload)
