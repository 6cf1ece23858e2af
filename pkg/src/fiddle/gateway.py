"""HTTP/WebSocket gateway for the hub.

Serves the web UI bundle at `/` and bridges WebSocket frames at `/ws` to
hub sessions: each text frame carries exactly one wire envelope, same
schema as the socket protocol, so gateway sessions are ordinary hub
clients.
"""

from __future__ import annotations

import asyncio
import logging
import threading
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.concurrency import run_in_threadpool
from fastapi.responses import FileResponse, HTMLResponse

from . import wire
from .hub import HubServer

log = logging.getLogger(__name__)

_FALLBACK_PAGE = """<!doctype html>
<html><head><title>fiddle hub</title></head>
<body><h1>fiddle hub gateway</h1>
<p>The web UI bundle was not found. Build the frontend and point the hub
at it with <code>--webui-dir</code>, or connect to <code>/ws</code>
directly with a wire-protocol client.</p></body></html>
"""


def build_app(hub: HubServer, webui_dir: Optional[Path] = None) -> FastAPI:
    app = FastAPI(title="fiddle gateway")
    ui_dir = Path(webui_dir) if webui_dir else None
    if ui_dir is not None and (ui_dir / "assets").is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/assets", StaticFiles(directory=ui_dir / "assets"), name="assets")

    @app.get("/")
    async def index():
        if ui_dir is not None:
            page = ui_dir / "index.html"
            if page.is_file():
                return FileResponse(page)
        return HTMLResponse(_FALLBACK_PAGE)

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        loop = asyncio.get_running_loop()
        session = None

        def writer(env: wire.Envelope):
            text = wire.encode(env).decode("utf-8").rstrip("\n")
            asyncio.run_coroutine_threadsafe(ws.send_text(text), loop)

        try:
            while True:
                raw = await ws.receive_text()
                try:
                    env = wire.decode(raw)
                except wire.FrameError:
                    break
                if env.kind == "hello":
                    role = env.args[0] if env.args else "tool"
                    mode = env.args[1] if len(env.args) > 1 else "event_async"
                    session = hub.register_client(role, mode, writer)
                    writer(wire.reply_ok(session.client_id, 0,
                                         {"client_id": session.client_id}))
                elif env.kind == "request" and session is not None:
                    await run_in_threadpool(hub.handle_envelope, session, env)
        except WebSocketDisconnect:
            pass
        finally:
            if session is not None:
                hub.drop_client(session.client_id)

    return app


def serve_gateway(hub: HubServer, listen: tuple[str, int],
                  webui_dir: Optional[Path] = None) -> tuple[str, int]:
    """Run the gateway in a background thread; returns the bound endpoint."""
    import uvicorn

    from .node import BindError

    app = build_app(hub, webui_dir)
    config = uvicorn.Config(app, host=listen[0], port=listen[1], log_level="warning")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True, name="gateway")
    thread.start()
    while not server.started:
        if not thread.is_alive():
            raise BindError(f"gateway failed to start on {listen}")
        threading.Event().wait(0.02)
    sockets = server.servers[0].sockets if server.servers else []
    if sockets:
        host, port = sockets[0].getsockname()[:2]
        return host, port
    return listen
