#!/usr/bin/env python3
"""Run the canonical eavesdrop-then-inject demo and print what happened.

A typist starts mid-sweep on channel 25; the node discovers it, streams
keystrokes to the server, then executes an operator injection against the
victim dongle.
"""
from __future__ import annotations

import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from keyjack.simrun import PlannedInjection, run_scenario

SCENARIO = """
config seed=42 loss=0.0 noise=4 offset=random
typist mac=CD1122AA55 ch=25 start=4500000 delay=100000 text="the quick brown fox"
"""


def main() -> int:
    with tempfile.TemporaryDirectory(prefix="keyjack-demo-") as tmp:
        report = run_scenario(
            SCENARIO, tmp,
            injections=(PlannedInjection(at_us=8_000_000, mac_hex="cd1122aa55",
                                         text=" jumps"),),
        )
    print("victim dongle saw :", report.dongle_outputs)
    print("server text view  :", report.text_views)
    for cmd in report.commands:
        print(f"injection command {cmd['command_id']} ({cmd['text']!r}):",
              cmd["status"], cmd.get("reason") or "")
    print("records stored    :", report.record_count)
    print("log digest        :", report.log_sha256)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
