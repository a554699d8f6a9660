"""Deterministic discrete-event simulation of the 2.4 GHz desk radio medium.

Scripted typists transmit keyboard frames on fixed channels; a dongle per
keyboard converts accepted frames back into typed characters; attached
sniffers receive raw byte windows with configurable noise, loss and bit
misalignment.  Identical configuration, scripts and call sequence produce
byte-identical event traces: time is integer microseconds, the event queue
breaks ties by insertion order, and every random draw comes from one
seeded generator consumed in a fixed order.
"""
from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Callable

from . import ms_protocol as ms
from .esb import Bitstream, EsbFrame, MacAddress, serialize_frame
from .promiscuous import AirCapture, SnifferConfig, sniffer_config

CHANNEL_MIN = 0
CHANNEL_MAX = 83
IDLE_LAG_US = 10_000          # idle frame follows each keystroke frame by 10 ms
SEQUENCE_WINDOW = 4096        # dongle accepts sequences 1..4096 ahead, mod 2^16


@dataclass(frozen=True)
class Channel:
    """One 1 MHz channel; carrier = 2400 + number MHz."""

    number: int

    def __post_init__(self) -> None:
        if not CHANNEL_MIN <= self.number <= CHANNEL_MAX:
            raise ValueError(f"channel number out of range: {self.number}")

    @property
    def carrier_mhz(self) -> int:
        return 2400 + self.number


def channel_number(value: int | Channel) -> int:
    num = value.number if isinstance(value, Channel) else int(value)
    if not CHANNEL_MIN <= num <= CHANNEL_MAX:
        raise ValueError(f"channel number out of range: {num}")
    return num


@dataclass(frozen=True)
class TypistScript:
    """A scripted keyboard: types `text` starting at `start_time_us`."""

    text: str
    inter_key_delay_us: int
    start_time_us: int
    mac: MacAddress
    channel: int

    def __post_init__(self) -> None:
        if self.inter_key_delay_us <= 0:
            raise ValueError("inter_key_delay_us must be positive")
        if self.mac[0] != ms.MS_ADDRESS_PREFIX:
            raise ValueError("typists speak the Microsoft profile; address must start 0xCD")
        channel_number(self.channel)


@dataclass
class SimConfig:
    """Reproducibility knobs; same seed + same scripts = same trace."""

    seed: int = 0
    loss_probability: float = 0.0
    noise_bytes_per_window: int = 0
    bit_offset: int | None = 0     # fixed offset 0..7, or None for a random draw per window

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_probability <= 1.0:
            raise ValueError("loss_probability must be within [0, 1]")
        if self.noise_bytes_per_window < 0:
            raise ValueError("noise_bytes_per_window must be >= 0")
        if self.bit_offset is not None and not 0 <= self.bit_offset <= 7:
            raise ValueError("bit_offset must be 0..7 or None")


@dataclass
class DongleState:
    """Receiver-side view: last accepted sequence and the host's text."""

    mac: MacAddress
    channel: int
    last_sequence: int = 0
    typed_output: str = ""
    frames_accepted: int = 0
    frames_rejected: int = 0


@dataclass
class InjectionOutcome:
    status: str = "pending"        # pending | accepted | rejected
    reason: str | None = None


@dataclass
class SnifferHandle:
    """An attached receiver; promiscuous mode queues raw windows."""

    sniffer_id: int
    channel: int
    config: SnifferConfig
    attached_at: int
    windows: list[AirCapture] = field(default_factory=list)
    frames: list[EsbFrame] = field(default_factory=list)

    @property
    def promiscuous(self) -> bool:
        return self.config.crc_check is False and self.config.address_length != 5

    def drain(self) -> list[AirCapture]:
        out = self.windows
        self.windows = []
        return out

    def drain_frames(self) -> list[EsbFrame]:
        out = self.frames
        self.frames = []
        return out


class Simulator:
    """Single-owner event loop over typists, dongles and sniffers."""

    def __init__(self, config: SimConfig | None = None):
        self.config = config or SimConfig()
        self.now = 0
        self._rng = random.Random(self.config.seed)
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._insert_seq = 0
        self._dongles: list[DongleState] = []
        self._sniffers: list[SnifferHandle] = []
        self._next_sniffer_id = 0
        self.trace: list[str] = []
        self._pending_events: list[str] = []

    # -- topology -----------------------------------------------------------

    def add_dongle(self, mac: MacAddress, channel: int | Channel) -> DongleState:
        num = channel_number(channel)
        existing = self.dongle(mac)
        if existing is not None:
            if existing.channel != num:
                raise ValueError(f"dongle for {mac} already exists on channel {existing.channel}")
            return existing
        dongle = DongleState(mac=mac, channel=num)
        self._dongles.append(dongle)
        return dongle

    def dongle(self, mac: MacAddress) -> DongleState | None:
        for d in self._dongles:
            if d.mac == mac:
                return d
        return None

    def add_typist(self, script: TypistScript) -> DongleState:
        """Schedule the script's whole key sequence; returns its dongle."""
        keymap = ms.default_keymap()
        keys = [keymap.key_for_char(c) for c in script.text]  # fails fast on unmapped chars
        dongle = self.add_dongle(script.mac, script.channel)
        sequence = 0
        for k, (hid, mods) in enumerate(keys):
            t_key = script.start_time_us + k * script.inter_key_delay_us
            if t_key < self.now:
                raise ValueError("typist script starts in the past")
            sequence += 1
            press = ms.encode_keystroke(
                ms.Keystroke(char=script.text[k], hid_code=hid, modifiers=mods,
                             pressed=True, t=t_key, mac=script.mac,
                             channel=script.channel),
                script.mac, sequence)
            self._schedule(t_key, self._make_tx(press, script.channel))
            sequence += 1
            idle = ms.encode_keystroke(
                ms.Keystroke(char=None, hid_code=0, modifiers=0, pressed=False,
                             t=t_key + IDLE_LAG_US, mac=script.mac,
                             channel=script.channel),
                script.mac, sequence)
            self._schedule(t_key + IDLE_LAG_US, self._make_tx(idle, script.channel))
        return dongle

    def attach_sniffer(self, channel: int | Channel,
                       config: SnifferConfig | None = None) -> SnifferHandle:
        handle = SnifferHandle(
            sniffer_id=self._next_sniffer_id,
            channel=channel_number(channel),
            config=config or sniffer_config(),
            attached_at=self.now,
        )
        self._next_sniffer_id += 1
        self._sniffers.append(handle)
        return handle

    def retune(self, sniffer: SnifferHandle, channel: int | Channel) -> None:
        sniffer.channel = channel_number(channel)
        sniffer.attached_at = self.now

    # -- event loop ---------------------------------------------------------

    def _schedule(self, t: int, action: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (t, self._insert_seq, action))
        self._insert_seq += 1

    def _make_tx(self, frame: EsbFrame, channel: int,
                 outcome: InjectionOutcome | None = None) -> Callable[[], None]:
        return lambda: self._transmit(frame, channel, outcome)

    def advance(self, until: int) -> list[str]:
        """Run all events scheduled in (now, until]; returns their trace lines."""
        if until < self.now:
            raise ValueError(f"cannot advance backwards: now={self.now}, until={until}")
        fired: list[str] = []
        while self._heap and self._heap[0][0] <= until:
            t, _, action = heapq.heappop(self._heap)
            self.now = t
            self._pending_events = []
            action()
            fired.extend(self._pending_events)
        self.now = until
        self.trace.extend(fired)
        return fired

    def inject(self, frame: EsbFrame, channel: int | Channel, t: int) -> InjectionOutcome:
        """Put a frame on the medium at time t.

        At the current instant the outcome is resolved synchronously;
        future times leave it pending until `advance` reaches them.
        """
        num = channel_number(channel)
        if t < self.now:
            raise ValueError(f"cannot inject in the past: now={self.now}, t={t}")
        outcome = InjectionOutcome()
        if t == self.now:
            self._pending_events = []
            self._transmit(frame, num, outcome)
            self.trace.extend(self._pending_events)
        else:
            self._schedule(t, self._make_tx(frame, num, outcome))
        return outcome

    # -- medium -------------------------------------------------------------

    def _transmit(self, frame: EsbFrame, channel: int,
                  outcome: InjectionOutcome | None = None) -> None:
        t = self.now
        self._pending_events.append(
            f"{t} tx ch={channel} addr={frame.address.hex} len={len(frame.payload)}"
        )
        lost_match = False
        reject_reason: str | None = None
        for dongle in self._dongles:
            if dongle.channel != channel:
                continue
            if self._lost():
                self._pending_events.append(f"{t} loss rx=dongle:{dongle.mac.hex}")
                lost_match = lost_match or dongle.mac == frame.address
                continue
            accepted, reason, char = self._dongle_receive(dongle, frame)
            if accepted:
                self._pending_events.append(
                    f"{t} dongle-accept mac={dongle.mac.hex} seq={dongle.last_sequence}"
                    + (f" char={char!r}" if char else "")
                )
                if outcome is not None:
                    outcome.status = "accepted"
                    outcome.reason = None
            else:
                self._pending_events.append(
                    f"{t} dongle-reject mac={dongle.mac.hex} reason={reason}"
                )
                if reason != "wrong-address" and reject_reason is None:
                    reject_reason = reason
        if outcome is not None and outcome.status == "pending":
            outcome.status = "rejected"
            outcome.reason = reject_reason or ("lost" if lost_match else "wrong-address")
        for sniffer in self._sniffers:
            if sniffer.channel != channel:
                continue
            if self._lost():
                self._pending_events.append(f"{t} loss rx=sniffer:{sniffer.sniffer_id}")
                continue
            if sniffer.promiscuous:
                capture = self._make_window(frame, channel, t)
                sniffer.windows.append(capture)
                self._pending_events.append(
                    f"{t} capture sniffer={sniffer.sniffer_id} raw={capture.raw.hex()}"
                )
            elif bytes(frame.address) == sniffer.config.address:
                sniffer.frames.append(frame)
                self._pending_events.append(
                    f"{t} frame sniffer={sniffer.sniffer_id} addr={frame.address.hex}"
                )

    def _lost(self) -> bool:
        if self.config.loss_probability <= 0.0:
            return False
        return self._rng.random() < self.config.loss_probability

    def _dongle_receive(self, dongle: DongleState,
                        frame: EsbFrame) -> tuple[bool, str | None, str | None]:
        if frame.address != dongle.mac:
            dongle.frames_rejected += 1
            return False, "wrong-address", None
        if not frame.crc_valid:
            dongle.frames_rejected += 1
            return False, "bad-crc", None
        pkt = ms.decode(frame)
        if pkt is None:
            dongle.frames_rejected += 1
            return False, "undecodable", None
        delta = (pkt.sequence - dongle.last_sequence) & 0xFFFF
        if not 1 <= delta <= SEQUENCE_WINDOW:
            dongle.frames_rejected += 1
            return False, "stale-sequence", None
        dongle.last_sequence = pkt.sequence
        dongle.frames_accepted += 1
        char = None
        if pkt.is_keystroke:
            char = ms.hid_to_char(pkt.hid_code, pkt.modifiers)
            if char:
                dongle.typed_output += char
        return True, None, char

    def _make_window(self, frame: EsbFrame, channel: int, t: int) -> AirCapture:
        """Wrap a frame's bits in a window with noise padding and bit offset."""
        rng = self._rng
        noise_total = self.config.noise_bytes_per_window
        pre = rng.randint(0, noise_total) if noise_total else 0
        post = noise_total - pre
        offset = (self.config.bit_offset if self.config.bit_offset is not None
                  else rng.randrange(8))
        window = Bitstream(origin_channel=channel)
        for _ in range(pre):
            window.append_byte(rng.randrange(256))
        if offset:
            window.append_bits(rng.getrandbits(offset), offset)
        bits = serialize_frame(frame)
        i = 0
        while i < bits.bit_len:
            take = min(8, bits.bit_len - i)
            window.append_bits(bits.read_uint(i, take), take)
            i += take
        pad = (-window.bit_len) % 8
        if pad:
            window.append_bits(rng.getrandbits(pad), pad)
        for _ in range(post):
            window.append_byte(rng.randrange(256))
        return AirCapture(raw=window.to_bytes(), channel=channel, t=t)


# ---------------------------------------------------------------------------
# Scenario files


@dataclass
class Scenario:
    config: SimConfig
    typists: list[TypistScript]


def parse_scenario(text: str) -> Scenario:
    """Parse the one-directive-per-line scenario format.

        config seed=42 loss=0.0 noise=4 offset=random
        typist mac=CD1122AA55 ch=25 start=0 delay=100000 text="hello world"
    """
    import shlex

    config = SimConfig()
    typists: list[TypistScript] = []
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            tokens = shlex.split(line)
        except ValueError as exc:
            raise ValueError(f"scenario line {lineno}: {exc}") from exc
        directive, *pairs = tokens
        fields: dict[str, str] = {}
        for token in pairs:
            key, sep, value = token.partition("=")
            if not sep:
                raise ValueError(f"scenario line {lineno}: expected key=value, got {token!r}")
            fields[key] = value
        try:
            if directive == "config":
                config = _parse_config(fields)
            elif directive == "typist":
                typists.append(_parse_typist(fields))
            else:
                raise ValueError(f"unknown directive {directive!r}")
        except ValueError as exc:
            raise ValueError(f"scenario line {lineno}: {exc}") from None
    return Scenario(config=config, typists=typists)


def _parse_config(fields: dict[str, str]) -> SimConfig:
    offset_text = fields.get("offset", "0")
    offset: int | None
    if offset_text == "random":
        offset = None
    else:
        offset = int(offset_text)
    return SimConfig(
        seed=int(fields.get("seed", "0")),
        loss_probability=float(fields.get("loss", "0.0")),
        noise_bytes_per_window=int(fields.get("noise", "0")),
        bit_offset=offset,
    )


def _parse_typist(fields: dict[str, str]) -> TypistScript:
    try:
        return TypistScript(
            text=fields["text"],
            inter_key_delay_us=int(fields.get("delay", "100000")),
            start_time_us=int(fields.get("start", "0")),
            mac=MacAddress.from_hex(fields["mac"]),
            channel=int(fields["ch"]),
        )
    except KeyError as exc:
        raise ValueError(f"typist directive missing field {exc}") from None
