"""Command line entry points.

    keyjack serve     run the capture server
    keyjack node      run a node (embedded simulated radio) against a server
    keyjack simulate  run a whole scenario in-process and print the outcome
    keyjack decode    recover and decode frames from a raw hex window
    keyjack inject    enqueue an injection command on a running server
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import urllib.request
from pathlib import Path

from . import ms_protocol as ms
from .promiscuous import AirCapture, format_recovered, recover_frames
from .simrun import PlannedInjection, run_node_loop, run_scenario


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    return args.func(args)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="keyjack")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(required=True)

    serve_p = sub.add_parser("serve", help="run the capture server")
    serve_p.add_argument("--host", default="127.0.0.1")
    serve_p.add_argument("--port", type=int, default=8400)
    serve_p.add_argument("--data-dir", default="./keyjack-data")
    serve_p.add_argument("--static-dir", default=None,
                         help="directory with the operator console build")
    serve_p.set_defaults(func=_cmd_serve)

    node_p = sub.add_parser("node", help="run a node with an embedded simulated radio")
    node_p.add_argument("--server", required=True, help="server base URL")
    node_p.add_argument("--node-id", required=True)
    node_p.add_argument("--location", default="")
    node_p.add_argument("--scenario", required=True, help="scenario file for the embedded radio")
    node_p.add_argument("--duration-us", type=int, default=None)
    node_p.set_defaults(func=_cmd_node)

    sim_p = sub.add_parser("simulate", help="run scenario + node + server in-process")
    sim_p.add_argument("--scenario", required=True)
    sim_p.add_argument("--data-dir", default=None,
                       help="server data directory (default: temporary)")
    sim_p.add_argument("--duration-us", type=int, default=None)
    sim_p.add_argument("--node-id", default="node-1")
    sim_p.add_argument("--inject", action="append", default=[], metavar="MAC:TEXT@T_US",
                       help="enqueue TEXT for MAC at sim time T_US (repeatable)")
    sim_p.set_defaults(func=_cmd_simulate)

    dec_p = sub.add_parser("decode", help="recover frames from a raw hex window")
    dec_p.add_argument("hexdump", help="hex octets, '-' for stdin, or @FILE")
    dec_p.add_argument("--channel", type=int, default=0)
    dec_p.set_defaults(func=_cmd_decode)

    inj_p = sub.add_parser("inject", help="enqueue an injection command")
    inj_p.add_argument("--server", required=True)
    inj_p.add_argument("--mac", required=True)
    inj_p.add_argument("--text", required=True)
    inj_p.add_argument("--no-wait", action="store_true",
                       help="do not poll the command to a terminal state")
    inj_p.add_argument("--timeout", type=float, default=90.0)
    inj_p.set_defaults(func=_cmd_inject)
    return parser


def _cmd_serve(args: argparse.Namespace) -> int:
    from .server import CaptureStore, serve

    static_dir = Path(args.static_dir) if args.static_dir else _default_static_dir()
    store = CaptureStore(args.data_dir)
    httpd = serve(store, host=args.host, port=args.port, static_dir=static_dir)
    host, port = httpd.server_address[:2]
    print(f"keyjack server on http://{host}:{port} (data: {args.data_dir})")
    if static_dir:
        print(f"console: serving static files from {static_dir}")
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.shutdown()
        store.close()
    return 0


def _default_static_dir() -> Path | None:
    candidate = Path(__file__).resolve().parents[2] / "frontend" / "dist"
    return candidate if candidate.is_dir() else None


def _cmd_node(args: argparse.Namespace) -> int:
    scenario_text = Path(args.scenario).read_text()
    outputs = run_node_loop(
        scenario_text, args.server, node_id=args.node_id, location=args.location,
        duration_us=args.duration_us,
    )
    for mac, text in outputs.items():
        print(f"dongle {mac}: {text!r}")
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    import tempfile

    scenario_text = Path(args.scenario).read_text()
    injections = tuple(_parse_injection_arg(raw) for raw in args.inject)

    def execute(data_dir: str) -> int:
        report = run_scenario(
            scenario_text, data_dir, node_id=args.node_id,
            duration_us=args.duration_us, injections=injections,
        )
        for mac, text in report.dongle_outputs.items():
            print(f"dongle {mac}: {text!r}")
        for mac, text in report.text_views.items():
            print(f"server text {mac}: {text!r}")
        for cmd in report.commands:
            line = f"command {cmd['command_id']} [{cmd['text']!r}] -> {cmd['status']}"
            if cmd.get("reason"):
                line += f" ({cmd['reason']})"
            print(line)
        print(f"server records={report.record_count} log_sha256={report.log_sha256}")
        return 0

    if args.data_dir:
        return execute(args.data_dir)
    with tempfile.TemporaryDirectory(prefix="keyjack-sim-") as tmp:
        return execute(tmp)


def _parse_injection_arg(raw: str) -> PlannedInjection:
    target, _, at_text = raw.rpartition("@")
    mac, _, text = target.partition(":")
    if not (target and at_text and mac and text):
        raise SystemExit(f"bad --inject value {raw!r}, expected MAC:TEXT@T_US")
    return PlannedInjection(at_us=int(at_text), mac_hex=mac, text=text)


def _cmd_decode(args: argparse.Namespace) -> int:
    raw_text = args.hexdump
    if raw_text == "-":
        raw_text = sys.stdin.read()
    elif raw_text.startswith("@"):
        raw_text = Path(raw_text[1:]).read_text()
    cleaned = "".join(ch for ch in raw_text if ch not in " \t\n\r:")
    try:
        raw = bytes.fromhex(cleaned)
    except ValueError:
        print("input is not valid hex", file=sys.stderr)
        return 2
    if len(raw) < 9:
        print("window too short for recovery (need >= 9 octets)", file=sys.stderr)
        return 2
    recovered = recover_frames(AirCapture(raw=raw, channel=args.channel, t=0))
    if not recovered:
        print("no frames recovered")
        return 1
    for rec in recovered:
        print(format_recovered(rec))
        pkt = ms.decode(rec.frame)
        if pkt is None:
            continue
        kind = "keystroke" if pkt.is_keystroke else "idle"
        char = ms.hid_to_char(pkt.hid_code, pkt.modifiers)
        line = (f"  ms {kind} seq={pkt.sequence} hid=0x{pkt.hid_code:02X} "
                f"mods=0x{pkt.modifiers:02X}")
        if char:
            line += f" char={char!r}"
        print(line)
    return 0


def _cmd_inject(args: argparse.Namespace) -> int:
    base = args.server.rstrip("/")
    mac = args.mac.replace(":", "").lower()
    body = json.dumps({"text": args.text}).encode()
    request = urllib.request.Request(
        f"{base}/api/keyboards/{mac}/inject", data=body,
        headers={"Content-Type": "application/json"}, method="POST",
    )
    try:
        with urllib.request.urlopen(request, timeout=10) as resp:
            command_id = json.loads(resp.read().decode())["command_id"]
    except urllib.error.HTTPError as exc:
        print(f"server refused injection: {exc.read().decode()}", file=sys.stderr)
        return 1
    print(f"command {command_id} enqueued")
    if args.no_wait:
        return 0
    deadline = time.monotonic() + args.timeout
    status = "pending"
    while time.monotonic() < deadline:
        with urllib.request.urlopen(f"{base}/api/commands/{command_id}", timeout=10) as resp:
            cmd = json.loads(resp.read().decode())
        status = cmd["status"]
        if status in ("done", "failed"):
            reason = f" ({cmd['reason']})" if cmd.get("reason") else ""
            print(f"command {command_id}: {status}{reason}")
            return 0 if status == "done" else 1
        time.sleep(0.5)
    print(f"command {command_id}: still {status} after {args.timeout}s")
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
