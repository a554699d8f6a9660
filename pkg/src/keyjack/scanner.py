"""Channel-scanning state machine.

Sweeps the 2403..2480 MHz carriers dwelling briefly on each, recovers
frames from raw captures, and locks onto the first keyboard whose frames
pass the Microsoft detection rules.  While locked it emits decoded key
events in capture-time order; if the target stays quiet past the lock
timeout it resumes sweeping at the next planned channel.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from . import ms_protocol as ms
from .esb import MacAddress
from .promiscuous import AirCapture, recover_frames
from .rf_sim import Channel

SCAN_FIRST_CHANNEL = 3     # carrier 2403 MHz
SCAN_LAST_CHANNEL = 80     # carrier 2480 MHz
DEFAULT_DWELL_US = 200_000
DEFAULT_LOCK_TIMEOUT_US = 5_000_000


@dataclass(frozen=True)
class ScanPlan:
    channels: tuple[Channel, ...]
    dwell_us: int = DEFAULT_DWELL_US

    def __post_init__(self) -> None:
        if not self.channels:
            raise ValueError("scan plan needs at least one channel")
        if self.dwell_us <= 0:
            raise ValueError("dwell must be positive")


def channel_plan(dwell_us: int = DEFAULT_DWELL_US) -> ScanPlan:
    """The default 78-channel ascending sweep, carriers 2403 to 2480 MHz."""
    return ScanPlan(
        channels=tuple(Channel(n) for n in range(SCAN_FIRST_CHANNEL, SCAN_LAST_CHANNEL + 1)),
        dwell_us=dwell_us,
    )


@dataclass
class Discovery:
    """Registry entry for one keyboard seen on the air."""

    mac: MacAddress
    channel: int
    first_seen: int
    last_seen: int
    last_sequence: int = 0
    frames_seen: int = 0


@dataclass
class StepResult:
    discoveries: list[Discovery] = field(default_factory=list)   # new this step
    keystrokes: list[ms.Keystroke] = field(default_factory=list)
    retuned: bool = False


class Scanner:
    """Single-owner sweep/lock state machine driven by one polling loop."""

    def __init__(self, plan: ScanPlan | None = None,
                 lock_timeout_us: int = DEFAULT_LOCK_TIMEOUT_US):
        self.plan = plan or channel_plan()
        self.lock_timeout_us = lock_timeout_us
        self.mode = "sweeping"
        self._plan_index = 0
        self.channel_entered_at = 0
        self.discovered: dict[bytes, Discovery] = {}
        self.locked_mac: MacAddress | None = None
        self.last_target_seen_at = 0
        self.noise_frames = 0
        self.foreign_frames = 0

    @property
    def current_channel(self) -> Channel:
        return self.plan.channels[self._plan_index]

    def step(self, captures: list[AirCapture], now: int) -> StepResult:
        """Process one batch of captures from the current channel.

        Captures must come from the channel the scanner is tuned to; the
        caller retunes its radio whenever `retuned` comes back true.
        """
        result = StepResult()
        current = self.current_channel.number
        for capture in sorted(captures, key=lambda c: c.t):
            if capture.channel != current:
                continue
            for recovered in recover_frames(capture):
                self._ingest_frame(recovered.frame, capture, result)
        if self.mode == "sweeping":
            if self.locked_mac is None and now - self.channel_entered_at >= self.plan.dwell_us:
                self._hop(now)
                result.retuned = True
        elif now - self.last_target_seen_at >= self.lock_timeout_us:
            self.mode = "sweeping"
            self.locked_mac = None
            self._hop(now)
            result.retuned = True
        return result

    def _ingest_frame(self, frame, capture: AirCapture, result: StepResult) -> None:
        if not ms.is_ms_keyboard(frame):
            self.noise_frames += 1
            return
        mac = frame.address
        key = bytes(mac)
        pkt = ms.decode(frame)
        entry = self.discovered.get(key)
        if entry is None:
            entry = Discovery(mac=mac, channel=capture.channel,
                              first_seen=capture.t, last_seen=capture.t)
            self.discovered[key] = entry
            result.discoveries.append(entry)
        entry.last_seen = capture.t
        entry.channel = capture.channel
        entry.frames_seen += 1
        if pkt is not None:
            entry.last_sequence = pkt.sequence
        if self.mode == "sweeping":
            # first keyboard wins; others on the same channel are recorded only
            self.mode = "locked"
            self.locked_mac = mac
            self.last_target_seen_at = capture.t
        if self.mode == "locked" and mac == self.locked_mac:
            self.last_target_seen_at = capture.t
            if pkt is not None:
                result.keystrokes.append(
                    ms.packet_to_keystroke(pkt, mac, capture.channel, capture.t)
                )
            else:
                self.foreign_frames += 1
        elif mac != self.locked_mac:
            self.foreign_frames += 1

    def _hop(self, now: int) -> None:
        self._plan_index = (self._plan_index + 1) % len(self.plan.channels)
        self.channel_entered_at = now
