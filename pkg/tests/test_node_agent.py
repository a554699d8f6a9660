"""Node agent against a live local server and simulated radio."""
from __future__ import annotations

import threading

import pytest

from keyjack import ms_protocol as ms
from keyjack import node_agent as na
from keyjack.esb import MacAddress
from keyjack.node_agent import NodeAgent, NodeIdentity, ServerClient, ServerUnreachable
from keyjack.rf_sim import Channel, SimConfig, Simulator, TypistScript
from keyjack.scanner import ScanPlan, Scanner
from keyjack.server import CaptureStore, serve

MAC = MacAddress.from_hex("CD1122AA55")
MAC_HEX = "cd1122aa55"


class Harness:
    def __init__(self, tmp_path, *, seed=1, text="secret", start=100_000,
                 delay=50_000, report_idles=False):
        self.clock_now = 0
        self.store = CaptureStore(tmp_path, clock=lambda: self.clock_now)
        self.httpd = serve(self.store)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()
        host, port = self.httpd.server_address[:2]
        self.sim = Simulator(SimConfig(seed=seed, noise_bytes_per_window=2,
                                       bit_offset=None))
        self.script = TypistScript(text=text, inter_key_delay_us=delay,
                                   start_time_us=start, mac=MAC, channel=25)
        self.sim.add_typist(self.script)
        scanner = Scanner(plan=ScanPlan(channels=(Channel(25),)))
        self.sniffer = self.sim.attach_sniffer(scanner.current_channel)
        self.client = ServerClient(f"http://{host}:{port}")
        self.agent = NodeAgent(NodeIdentity("node-1", "test bench"), self.client,
                               self.sim, self.sniffer, scanner,
                               report_idles=report_idles)

    def drive(self, until: int, tick: int = 50_000):
        now = self.sim.now
        while now < until:
            now = min(now + tick, until)
            self.clock_now = now
            self.sim.advance(now)
            self.agent.run_cycle(now)

    def close(self):
        self.httpd.shutdown()
        self.thread.join(timeout=5)
        self.store.close()


@pytest.fixture
def harness(tmp_path):
    h = Harness(tmp_path)
    yield h
    h.close()


class TestReporting:
    def test_secret_reaches_server(self, harness):
        harness.drive(3_000_000)
        captured = harness.store.captures(MAC_HEX)
        assert captured is not None
        assert captured["text"] == "secret"
        keystrokes = [r for r in captured["records"] if r["packet_type"] == "78"]
        assert len(keystrokes) == 6
        assert all(r["node_id"] == "node-1" for r in keystrokes)

    def test_node_registered_with_location(self, harness):
        harness.drive(3_000_000)
        nodes = harness.store.nodes()
        assert [n["node_id"] for n in nodes] == ["node-1"]
        assert nodes[0]["location"] == "test bench"

    def test_idles_counted_not_reported_by_default(self, harness):
        harness.drive(3_000_000)
        assert harness.agent.idle_packets_seen == 6
        records = harness.store.captures(MAC_HEX)["records"]
        assert all(r["packet_type"] == "78" for r in records)

    def test_report_idles_flag(self, tmp_path):
        h = Harness(tmp_path, report_idles=True)
        try:
            h.drive(3_000_000)
            records = h.store.captures(MAC_HEX)["records"]
            assert {r["packet_type"] for r in records} == {"78", "38"}
        finally:
            h.close()

    def test_records_arrive_in_nondecreasing_time_order(self, tmp_path):
        h = Harness(tmp_path, text="orderly typing here", delay=30_000)
        try:
            h.drive(4_000_000)
            rows = h.store._records[bytes(MAC)]
            times = [r.t for r in rows]   # insertion order, not query sort
            assert times == sorted(times)
        finally:
            h.close()

    def test_flush_by_size_happens_before_age(self, tmp_path):
        h = Harness(tmp_path, text="x" * 40, delay=10_000)
        try:
            h.drive(1_000_000)  # well under the 2 s age threshold
            captured = h.store.captures(MAC_HEX)
            assert captured is not None
            assert len(captured["records"]) >= na.BATCH_MAX_RECORDS
        finally:
            h.close()


class TestBuffering:
    def test_outage_buffers_then_delivers(self, harness, monkeypatch):
        original = ServerClient._request
        broken = {"on": False}

        def flaky(self, *args, **kwargs):
            if broken["on"]:
                raise ServerUnreachable("injected outage")
            return original(self, *args, **kwargs)

        monkeypatch.setattr(ServerClient, "_request", flaky)
        broken["on"] = True
        harness.drive(4_000_000)
        assert harness.store.captures(MAC_HEX) is None   # nothing got through
        assert len(harness.agent.outbound) == 6
        broken["on"] = False
        harness.drive(7_000_000)
        assert harness.store.captures(MAC_HEX)["text"] == "secret"
        assert harness.agent.dropped_records == 0

    def test_queue_bound_drops_oldest(self, tmp_path, monkeypatch):
        monkeypatch.setattr(na, "QUEUE_BOUND", 4)
        h = Harness(tmp_path, text="abcdefgh", delay=20_000)
        try:
            monkeypatch.setattr(ServerClient, "_request",
                                lambda *a, **k: (_ for _ in ()).throw(
                                    ServerUnreachable("down")))
            h.drive(3_000_000)
            assert len(h.agent.outbound) == 4
            assert h.agent.dropped_records == 4
            kept = [r.char for r in h.agent.outbound]
            assert kept == list("efgh")   # oldest dropped first
        finally:
            h.close()


class TestInjection:
    def test_command_executed_and_marked_done(self, harness):
        harness.drive(2_500_000)        # typing done, records flushed
        command = harness.store.enqueue_injection(MAC_HEX, "ok")
        harness.drive(3_500_000)
        assert harness.store.command(command.command_id).status == "done"
        assert harness.sim.dongle(MAC).typed_output == "secretok"

    def test_sequence_continues_observed_counter(self, harness):
        harness.drive(2_500_000)
        observed = harness.agent.scanner.discovered[bytes(MAC)].last_sequence
        harness.store.enqueue_injection(MAC_HEX, "ok")
        harness.drive(3_500_000)
        sequences = [ms.decode(f).sequence for f in harness.agent.injected_frames]
        assert sequences == [observed + 1, observed + 2]

    def test_injected_keystrokes_recaptured_and_reported(self, harness):
        harness.drive(2_500_000)
        harness.store.enqueue_injection(MAC_HEX, "ok")
        harness.drive(6_000_000)
        assert harness.store.captures(MAC_HEX)["text"] == "secretok"

    def test_replaying_injected_frames_is_stale(self, harness):
        harness.drive(2_500_000)
        harness.store.enqueue_injection(MAC_HEX, "ok")
        harness.drive(3_500_000)
        frames = list(harness.agent.injected_frames)
        assert frames
        for frame in frames:
            outcome = harness.sim.inject(frame, 25, harness.sim.now)
            assert (outcome.status, outcome.reason) == ("rejected", "stale-sequence")

    def test_consecutive_commands_both_land(self, harness):
        harness.drive(2_500_000)
        first = harness.store.enqueue_injection(MAC_HEX, "one")
        second = harness.store.enqueue_injection(MAC_HEX, "two")
        harness.drive(4_000_000)
        assert harness.store.command(first.command_id).status == "done"
        assert harness.store.command(second.command_id).status == "done"
        assert harness.sim.dongle(MAC).typed_output == "secretonetwo"

    def test_unclaimable_without_lock(self, tmp_path):
        h = Harness(tmp_path, text="a", start=30_000_000)   # nothing to lock on yet
        try:
            h.store.ingest("v1|node-9|" + MAC_HEX + "|25|1|78|04|00")
            command = h.store.enqueue_injection(MAC_HEX, "ok")
            h.drive(2_000_000)
            assert h.store.command(command.command_id).status == "pending"
        finally:
            h.close()


class TestIdentity:
    def test_node_id_validation(self):
        with pytest.raises(ValueError):
            NodeIdentity("")
        with pytest.raises(ValueError):
            NodeIdentity("white space")
        with pytest.raises(ValueError):
            NodeIdentity("x" * 33)
        NodeIdentity("node-42", "lab", lat=1.5, lon=2.5)
