#!/usr/bin/env python3
"""Live backend for console tests.

Starts the capture server on an ephemeral port, then keeps a simulated
scenario running: one typist on channel 3 typing a known sentence forever,
one node locked on it and executing injection commands.  Prints PORT=<n>
once the API is up, then loops until killed.
"""
from __future__ import annotations

import sys
import threading
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[2] / "src"))

from keyjack.esb import MacAddress
from keyjack.node_agent import NodeAgent, NodeIdentity, ServerClient
from keyjack.rf_sim import SimConfig, Simulator, TypistScript
from keyjack.scanner import Scanner
from keyjack.server import AttackScript, CaptureStore, ScriptStep, serve

SENTENCE = "the quick brown fox jumps over the lazy dog "
MAC = MacAddress.from_hex("CD1122AA55")


def main() -> int:
    import tempfile

    clock = {"now": 0}
    with tempfile.TemporaryDirectory(prefix="keyjack-console-fixture-") as tmp:
        store = CaptureStore(tmp, clock=lambda: clock["now"])
        store.save_script(AttackScript("greet", (
            ScriptStep(0, "hi"), ScriptStep(200_000, " there"))))
        httpd = serve(store)
        thread = threading.Thread(target=httpd.serve_forever, daemon=True)
        thread.start()
        host, port = httpd.server_address[:2]

        sim = Simulator(SimConfig(seed=11, noise_bytes_per_window=2, bit_offset=None))
        sim.add_typist(TypistScript(text=SENTENCE * 400, inter_key_delay_us=150_000,
                                    start_time_us=200_000, mac=MAC, channel=3))
        scanner = Scanner()
        sniffer = sim.attach_sniffer(scanner.current_channel)
        agent = NodeAgent(NodeIdentity("node-1", "console test bench"),
                          ServerClient(f"http://{host}:{port}"), sim, sniffer, scanner)

        print(f"PORT={port}", flush=True)
        now = 0
        try:
            while True:
                now += 50_000
                clock["now"] = now
                sim.advance(now)
                agent.run_cycle(now)
                time.sleep(0.01)
        except KeyboardInterrupt:
            pass
        finally:
            httpd.shutdown()
            store.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
