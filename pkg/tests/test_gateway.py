"""HTTP/WebSocket gateway smoke tests (in-process ASGI client)."""

import pytest
from fastapi.testclient import TestClient

from fiddle import corpus, wire
from fiddle.gateway import build_app
from fiddle.hub import HubServer
from fiddle.node import NodeServer


@pytest.fixture
def stack():
    node = NodeServer(corpus.DIR)
    hub = HubServer()
    hub.register_node(node.endpoint)
    node.start_program("echo_client")
    app = build_app(hub)
    with TestClient(app) as client:
        yield node, hub, client
    hub.close()
    node.close()


def _send(ws, env):
    ws.send_text(wire.encode(env).decode().rstrip("\n"))


def _recv(ws):
    return wire.decode(ws.receive_text())


def test_index_served(stack):
    _node, _hub, client = stack
    response = client.get("/")
    assert response.status_code == 200
    assert "fiddle" in response.text.lower()


def test_ws_hello_and_list_tids_matches_console_payload(stack):
    _node, hub, client = stack
    with client.websocket_connect("/ws") as ws:
        _send(ws, wire.Envelope(kind="hello", args=["tool", "blocking"]))
        hello = _recv(ws)
        assert hello.kind == "reply" and hello.payload["client_id"]
        _send(ws, wire.request(hello.payload["client_id"], 1, "list_tids", []))
        reply = _recv(ws)
        assert reply.status == "ok"
        # identical to a direct hub submission
        session = hub.register_client("tool", "blocking")
        status, payload = hub.submit(session, "list_tids", [])
        assert status == "ok" and reply.payload == payload


def test_two_tabs_get_independent_client_ids(stack):
    _node, _hub, client = stack
    with client.websocket_connect("/ws") as one, \
            client.websocket_connect("/ws") as two:
        _send(one, wire.Envelope(kind="hello", args=["tool", "event_async"]))
        _send(two, wire.Envelope(kind="hello", args=["tool", "event_async"]))
        id_one = _recv(one).payload["client_id"]
        id_two = _recv(two).payload["client_id"]
        assert id_one != id_two


def test_ws_event_mode_receives_reply_events(stack):
    _node, _hub, client = stack
    with client.websocket_connect("/ws") as ws:
        _send(ws, wire.Envelope(kind="hello", args=["tool", "event_async"]))
        me = _recv(ws).payload["client_id"]
        _send(ws, wire.request(me, 1, "evaluate", [1, "totid"]))
        env = _recv(ws)
        assert env.kind == "event"
        assert env.payload["kind"] == "Reply"
        assert env.payload["body"]["request_id"] == 1
        assert env.payload["body"]["status"] == "ok"
