"""In-process scenario runner: medium, node agent and server wired together.

Drives the simulation clock in fixed ticks; the server's clock is the
simulation clock, so persisted logs are byte-reproducible for a given
scenario and seed.  The node talks to the server over real local HTTP,
exercising the same wire protocol a remote node would use.
"""
from __future__ import annotations

import hashlib
import json
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

from .node_agent import NodeAgent, NodeIdentity, ServerClient
from .rf_sim import IDLE_LAG_US, Scenario, Simulator, parse_scenario
from .scanner import Scanner
from .server import CaptureStore, KeyjackHttpServer, serve

DEFAULT_TICK_US = 50_000
END_GRACE_US = 3_000_000


class SimClock:
    """Mutable clock handle the server reads instead of wall time."""

    def __init__(self) -> None:
        self.now_us = 0

    def __call__(self) -> int:
        return self.now_us


@dataclass(frozen=True)
class PlannedInjection:
    at_us: int
    mac_hex: str
    text: str


@dataclass
class ScenarioReport:
    dongle_outputs: dict[str, str]
    text_views: dict[str, str]
    record_count: int
    log_sha256: str
    log_path: Path
    server_url: str
    commands: list[dict] = field(default_factory=list)
    ingest_bodies: list[str] = field(default_factory=list)
    trace_lines: int = 0
    injected_frames: list = field(default_factory=list)


def _default_duration(scenario: Scenario, injections: tuple[PlannedInjection, ...]) -> int:
    typing_end = 0
    for script in scenario.typists:
        if script.text:
            last_key = script.start_time_us + (len(script.text) - 1) * script.inter_key_delay_us
            typing_end = max(typing_end, last_key + IDLE_LAG_US)
    inject_end = max((p.at_us for p in injections), default=0)
    return max(typing_end, inject_end) + END_GRACE_US


def run_scenario(scenario: Scenario | str, data_dir: str | Path, *,
                 node_id: str = "node-1", location: str = "lab",
                 duration_us: int | None = None, tick_us: int = DEFAULT_TICK_US,
                 injections: tuple[PlannedInjection, ...] = (),
                 report_idles: bool = False,
                 scanner: Scanner | None = None) -> ScenarioReport:
    if isinstance(scenario, str):
        scenario = parse_scenario(scenario)
    clock = SimClock()
    store = CaptureStore(data_dir, clock=clock)
    httpd = serve(store)
    server_thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    server_thread.start()
    try:
        return _run(scenario, store, httpd, clock, node_id, location, duration_us,
                    tick_us, injections, report_idles, scanner)
    finally:
        httpd.shutdown()
        server_thread.join(timeout=5)
        store.close()


def _run(scenario: Scenario, store: CaptureStore, httpd: KeyjackHttpServer,
         clock: SimClock, node_id: str, location: str, duration_us: int | None,
         tick_us: int, injections: tuple[PlannedInjection, ...],
         report_idles: bool, scanner: Scanner | None) -> ScenarioReport:
    host, port = httpd.server_address[:2]
    base_url = f"http://{host}:{port}"
    sim = Simulator(scenario.config)
    for script in scenario.typists:
        sim.add_typist(script)
    scanner = scanner or Scanner()
    sniffer = sim.attach_sniffer(scanner.current_channel)
    client = ServerClient(base_url)
    agent = NodeAgent(NodeIdentity(node_id, location), client, sim, sniffer, scanner,
                      report_idles=report_idles)
    duration = duration_us if duration_us is not None else _default_duration(scenario, injections)
    pending = sorted(injections, key=lambda p: p.at_us)
    command_ids: list[int] = []
    now = 0
    while now < duration:
        now = min(now + tick_us, duration)
        clock.now_us = now
        sim.advance(now)
        while pending and pending[0].at_us <= now:
            planned = pending.pop(0)
            command_ids.append(_post_injection(base_url, planned))
        agent.run_cycle(now)
    agent.flush()
    dongles = {
        script.mac.hex: output
        for script in scenario.typists
        if (output := _dongle_output(sim, script)) is not None
    }
    text_views: dict[str, str] = {}
    for board in store.keyboards():
        captured = store.captures(board["mac"].lower())
        text_views[board["mac"]] = captured["text"] if captured else ""
    commands = [_get_command(base_url, cid) for cid in command_ids if cid > 0]
    log_bytes = store.log_path.read_bytes()
    return ScenarioReport(
        dongle_outputs=dongles,
        text_views=text_views,
        record_count=sum(board["records"] for board in store.keyboards()),
        log_sha256=hashlib.sha256(log_bytes).hexdigest(),
        log_path=store.log_path,
        server_url=base_url,
        commands=commands,
        ingest_bodies=list(client.sent_batches),
        trace_lines=len(sim.trace),
        injected_frames=list(agent.injected_frames),
    )


def _dongle_output(sim: Simulator, script) -> str | None:
    dongle = sim.dongle(script.mac)
    return dongle.typed_output if dongle else None


def _post_injection(base_url: str, planned: PlannedInjection) -> int:
    body = json.dumps({"text": planned.text}).encode()
    request = urllib.request.Request(
        f"{base_url}/api/keyboards/{planned.mac_hex.lower()}/inject",
        data=body, headers={"Content-Type": "application/json"}, method="POST",
    )
    try:
        with urllib.request.urlopen(request, timeout=5) as resp:
            return json.loads(resp.read().decode())["command_id"]
    except urllib.error.HTTPError:
        return -1


def _get_command(base_url: str, command_id: int) -> dict:
    with urllib.request.urlopen(f"{base_url}/api/commands/{command_id}", timeout=5) as resp:
        return json.loads(resp.read().decode())


def run_node_loop(scenario: Scenario | str, server_url: str, *,
                  node_id: str = "node-1", location: str = "lab",
                  duration_us: int | None = None, tick_us: int = DEFAULT_TICK_US,
                  report_idles: bool = False) -> dict[str, str]:
    """Embedded-simulation node against an external server; returns dongle text."""
    if isinstance(scenario, str):
        scenario = parse_scenario(scenario)
    sim = Simulator(scenario.config)
    for script in scenario.typists:
        sim.add_typist(script)
    scanner = Scanner()
    sniffer = sim.attach_sniffer(scanner.current_channel)
    agent = NodeAgent(NodeIdentity(node_id, location), ServerClient(server_url),
                      sim, sniffer, scanner, report_idles=report_idles)
    duration = duration_us if duration_us is not None else _default_duration(scenario, ())
    now = 0
    while now < duration:
        now = min(now + tick_us, duration)
        sim.advance(now)
        agent.run_cycle(now)
    agent.flush()
    return {script.mac.hex: sim.dongle(script.mac).typed_output
            for script in scenario.typists}
