"""Desk-scale simulated 2.4 GHz wireless-keyboard eavesdropping testbed."""

from .esb import (
    Bitstream,
    EsbFrame,
    MacAddress,
    PacketControlField,
    crc16,
    format_frame,
    parse_frame_at,
    parse_frame_line,
    serialize_frame,
)
from .ms_protocol import (
    Keystroke,
    MsKbPacket,
    decode,
    descramble,
    encode_keystroke,
    hid_to_char,
    is_ms_keyboard,
)
from .promiscuous import AirCapture, RecoveredFrame, recover_frames, sniffer_config
from .rf_sim import Channel, SimConfig, Simulator, TypistScript, parse_scenario
from .scanner import ScanPlan, Scanner, channel_plan

__version__ = "0.1.0"

__all__ = [
    "AirCapture",
    "Bitstream",
    "Channel",
    "EsbFrame",
    "Keystroke",
    "MacAddress",
    "MsKbPacket",
    "PacketControlField",
    "RecoveredFrame",
    "ScanPlan",
    "Scanner",
    "SimConfig",
    "Simulator",
    "TypistScript",
    "channel_plan",
    "crc16",
    "decode",
    "descramble",
    "encode_keystroke",
    "format_frame",
    "hid_to_char",
    "is_ms_keyboard",
    "parse_frame_at",
    "parse_frame_line",
    "parse_scenario",
    "recover_frames",
    "serialize_frame",
    "sniffer_config",
]
