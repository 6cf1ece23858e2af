"""One-process demo stack: node + hub + gateway + controller.

Boots the bundled echo scenario, prints a READY line with the bound
endpoints, then reads commands from stdin (`run`, `step`, `state`,
`quit`).  Used by the web UI's end-to-end tests and handy for manual
exploration:

    python -m fiddle.demo --gateway 127.0.0.1:8450
"""

from __future__ import annotations

import argparse
import sys

from . import corpus
from .deipa import DeipaController, DriveTimeout, EndOfScript
from .errors import FiddleError
from .gateway import serve_gateway
from .hub import HubServer
from .launcher import parse_endpoint
from .node import NodeServer


def main(argv=None):
    parser = argparse.ArgumentParser(prog="fiddle-demo")
    parser.add_argument("--gateway", default="127.0.0.1:0", metavar="HOST:PORT")
    parser.add_argument("--webui-dir", default="")
    parser.add_argument("--script", default=str(corpus.path("echo_example.tes")))
    parser.add_argument("--timeout", type=float, default=10.0)
    args = parser.parse_args(argv)

    hub = HubServer()
    hub_host, hub_port = hub.serve()
    controller = DeipaController(
        (hub_host, hub_port), timeout=args.timeout,
        println=lambda line: print(line, flush=True))
    node = NodeServer(corpus.DIR, deipa_endpoint=controller.announce_endpoint)
    hub.register_node(node.endpoint)
    gw_host, gw_port = serve_gateway(hub, parse_endpoint(args.gateway),
                                     webui_dir=args.webui_dir or None)
    controller.open(args.script)
    print(f"READY gateway=127.0.0.1:{gw_port} hub={hub_host}:{hub_port}",
          flush=True)

    try:
        for line in sys.stdin:
            command = line.strip()
            if command == "quit":
                break
            try:
                if command == "run":
                    controller.run()
                elif command == "step":
                    controller.step()
                elif command == "state":
                    controller.println(controller.report())
                elif command:
                    print(f"? unknown command {command!r}", flush=True)
            except (DriveTimeout, EndOfScript, FiddleError) as exc:
                print(f"! {exc}", flush=True)
            print("DONE", flush=True)
    finally:
        controller.close()
        hub.close()
        node.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
