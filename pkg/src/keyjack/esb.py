"""Enhanced ShockBurst link-layer frames.

Bit-exact model of the nRF24L01 over-the-air format: preamble octet,
5-octet pipe address, 9-bit packet control field, 0..32 octet payload and
a 16-bit CRC.  Everything serializes MSB-first, matching the chip's
transmission order, so frames recovered from a misaligned airstream can be
parsed at arbitrary bit offsets.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

CRC_POLY = 0x1021
CRC_INIT = 0xFFFF
ADDRESS_LEN = 5
MAX_PAYLOAD = 32
PCF_BITS = 9
# address + PCF + CRC; the shortest parseable frame carries no payload
MIN_FRAME_BITS = 8 * ADDRESS_LEN + PCF_BITS + 16
PREAMBLE_HIGH = 0xAA
PREAMBLE_LOW = 0x55


def _build_crc_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ CRC_POLY) & 0xFFFF if crc & 0x8000 else (crc << 1) & 0xFFFF
        table.append(crc)
    return table


CRC_TABLE: list[int] = _build_crc_table()


def crc16_update_byte(crc: int, byte: int) -> int:
    """Advance the CRC state by 8 consecutive stream bits given as one octet."""
    return ((crc << 8) & 0xFFFF) ^ CRC_TABLE[((crc >> 8) ^ byte) & 0xFF]


def crc16_update_bit(crc: int, bit: int) -> int:
    feedback = ((crc >> 15) ^ bit) & 1
    crc = (crc << 1) & 0xFFFF
    return crc ^ CRC_POLY if feedback else crc


def crc16(bits: bytes | bytearray | Iterable[int]) -> int:
    """CRC-16/CCITT-FALSE over a bit sequence, MSB-first.

    Accepts raw octets (treated as 8 bits each, MSB-first) or any iterable
    of 0/1 values, which need not be a multiple of 8 bits long.  The empty
    sequence yields the initial register value 0xFFFF.
    """
    crc = CRC_INIT
    if isinstance(bits, (bytes, bytearray)):
        for byte in bits:
            crc = crc16_update_byte(crc, byte)
        return crc
    for bit in bits:
        crc = crc16_update_bit(crc, bit)
    return crc


@dataclass(frozen=True)
class MacAddress:
    """5-octet pipe address, first-transmitted octet first."""

    octets: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.octets, bytes):
            object.__setattr__(self, "octets", bytes(self.octets))
        if len(self.octets) != ADDRESS_LEN:
            raise ValueError(f"address must be exactly {ADDRESS_LEN} octets, got {len(self.octets)}")

    @classmethod
    def from_hex(cls, text: str) -> "MacAddress":
        cleaned = text.replace(":", "").replace("-", "").strip()
        return cls(bytes.fromhex(cleaned))

    @property
    def hex(self) -> str:
        return self.octets.hex().upper()

    def __getitem__(self, i: int) -> int:
        return self.octets[i]

    def __bytes__(self) -> bytes:
        return self.octets

    def __str__(self) -> str:
        return ":".join(f"{b:02X}" for b in self.octets)


@dataclass(frozen=True)
class PacketControlField:
    """9-bit header: 6-bit payload length, 2-bit packet id, no-ack flag."""

    payload_len: int
    pid: int = 0
    no_ack: bool = False

    def __post_init__(self) -> None:
        if not 0 <= self.payload_len <= MAX_PAYLOAD:
            raise ValueError(f"payload_len out of range: {self.payload_len}")
        if not 0 <= self.pid <= 3:
            raise ValueError(f"pid out of range: {self.pid}")

    def to_int(self) -> int:
        """The 9 PCF bits as an integer, transmission (MSB-first) order."""
        return (self.payload_len << 3) | (self.pid << 1) | int(self.no_ack)


class Bitstream:
    """A packed bit sequence addressable at arbitrary bit offsets.

    Bits are stored MSB-first within each backing octet, mirroring the
    order they leave the radio, so frames that lock mid-octet can still be
    read out.
    """

    __slots__ = ("_data", "bit_len", "origin_channel")

    def __init__(self, data: bytes | bytearray = b"", bit_len: int | None = None,
                 origin_channel: int | None = None):
        self._data = bytearray(data)
        self.bit_len = 8 * len(self._data) if bit_len is None else bit_len
        if self.bit_len > 8 * len(self._data):
            raise ValueError("bit_len exceeds backing storage")
        self.origin_channel = origin_channel

    @classmethod
    def from_bytes(cls, data: bytes, origin_channel: int | None = None) -> "Bitstream":
        return cls(data, origin_channel=origin_channel)

    def __len__(self) -> int:
        return self.bit_len

    def bit(self, i: int) -> int:
        if not 0 <= i < self.bit_len:
            raise IndexError(f"bit index {i} out of range")
        return (self._data[i >> 3] >> (7 - (i & 7))) & 1

    def bits(self, start: int = 0, count: int | None = None) -> Iterator[int]:
        end = self.bit_len if count is None else start + count
        for i in range(start, end):
            yield self.bit(i)

    def read_uint(self, start: int, width: int) -> int:
        """Big-endian integer from `width` bits starting at bit `start`."""
        if start < 0 or width < 0 or start + width > self.bit_len:
            raise IndexError("bit range out of bounds")
        value = 0
        i = start
        remaining = width
        while remaining > 0:
            byte_i, bit_i = divmod(i, 8)
            take = min(8 - bit_i, remaining)
            chunk = (self._data[byte_i] >> (8 - bit_i - take)) & ((1 << take) - 1)
            value = (value << take) | chunk
            i += take
            remaining -= take
        return value

    def append_bits(self, value: int, width: int) -> None:
        for shift in range(width - 1, -1, -1):
            bit = (value >> shift) & 1
            if self.bit_len & 7 == 0:
                self._data.append(0)
            if bit:
                self._data[self.bit_len >> 3] |= 1 << (7 - (self.bit_len & 7))
            self.bit_len += 1

    def append_byte(self, value: int) -> None:
        if self.bit_len & 7 == 0:
            self._data.append(value & 0xFF)
            self.bit_len += 8
        else:
            self.append_bits(value, 8)

    def append_bytes(self, data: bytes) -> None:
        for b in data:
            self.append_byte(b)

    def to_bytes(self) -> bytes:
        """Backing octets; trailing bits of a partial final octet are zero."""
        return bytes(self._data)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Bitstream):
            return NotImplemented
        return self.bit_len == other.bit_len and all(
            self.bit(i) == other.bit(i) for i in range(self.bit_len)
        )


@dataclass(frozen=True)
class EsbFrame:
    """One over-the-air frame: address, PCF, payload and stored CRC.

    The stored CRC is kept verbatim rather than recomputed so that
    corrupted frames, as seen on the air, stay representable; `crc_valid`
    tells whether it matches the content.  Frames returned by `build` or
    `parse_frame_at` always carry a valid CRC.
    """

    address: MacAddress
    pcf: PacketControlField
    payload: bytes
    crc: int

    def __post_init__(self) -> None:
        if len(self.payload) != self.pcf.payload_len:
            raise ValueError(
                f"payload length {len(self.payload)} does not match PCF {self.pcf.payload_len}"
            )
        if not 0 <= self.crc <= 0xFFFF:
            raise ValueError("crc out of range")

    @classmethod
    def build(cls, address: MacAddress, payload: bytes = b"", pid: int = 0,
              no_ack: bool = False) -> "EsbFrame":
        pcf = PacketControlField(payload_len=len(payload), pid=pid, no_ack=no_ack)
        return cls(address, pcf, bytes(payload), compute_crc(address, pcf, payload))

    @property
    def crc_valid(self) -> bool:
        return self.crc == compute_crc(self.address, self.pcf, self.payload)

    @property
    def bit_length(self) -> int:
        """On-air length including the preamble octet."""
        return 8 + MIN_FRAME_BITS + 8 * len(self.payload)


def compute_crc(address: MacAddress, pcf: PacketControlField, payload: bytes) -> int:
    crc = CRC_INIT
    for b in address.octets:
        crc = crc16_update_byte(crc, b)
    pcf_bits = pcf.to_int()
    # 9 PCF bits: one full octet worth of stream bits, then the no-ack bit
    crc = crc16_update_byte(crc, pcf_bits >> 1)
    crc = crc16_update_bit(crc, pcf_bits & 1)
    for b in payload:
        crc = crc16_update_byte(crc, b)
    return crc


def preamble_for(address: MacAddress) -> int:
    """0xAA when the first transmitted address bit is 1, else 0x55."""
    return PREAMBLE_HIGH if address[0] & 0x80 else PREAMBLE_LOW


def serialize_frame(frame: EsbFrame, origin_channel: int | None = None) -> Bitstream:
    """Emit the full on-air bit sequence: preamble, address, PCF, payload, CRC."""
    out = Bitstream(origin_channel=origin_channel)
    out.append_byte(preamble_for(frame.address))
    out.append_bytes(frame.address.octets)
    out.append_bits(frame.pcf.to_int(), PCF_BITS)
    out.append_bytes(frame.payload)
    out.append_bits(frame.crc, 16)
    return out


def parse_frame_at(bits: Bitstream, bit_offset: int) -> EsbFrame | None:
    """Try to read a frame whose address starts at `bit_offset`.

    Returns None when the stream runs out of bits for the declared payload
    length or the stored CRC does not match; both are routine outcomes
    while scanning raw captures, not errors.
    """
    if bit_offset < 0 or bit_offset + MIN_FRAME_BITS > bits.bit_len:
        return None
    address = MacAddress(bytes(
        bits.read_uint(bit_offset + 8 * i, 8) for i in range(ADDRESS_LEN)
    ))
    pcf_raw = bits.read_uint(bit_offset + 40, PCF_BITS)
    payload_len = pcf_raw >> 3
    if payload_len > MAX_PAYLOAD:
        return None
    if bit_offset + MIN_FRAME_BITS + 8 * payload_len > bits.bit_len:
        return None
    pcf = PacketControlField(payload_len=payload_len, pid=(pcf_raw >> 1) & 3,
                             no_ack=bool(pcf_raw & 1))
    payload_start = bit_offset + 40 + PCF_BITS
    payload = bytes(
        bits.read_uint(payload_start + 8 * i, 8) for i in range(payload_len)
    )
    stored_crc = bits.read_uint(payload_start + 8 * payload_len, 16)
    if stored_crc != compute_crc(address, pcf, payload):
        return None
    return EsbFrame(address, pcf, payload, stored_crc)


def format_frame(frame: EsbFrame) -> str:
    """One-line hex dump: `addr=CD1122AA55 pid=2 noack=0 payload=0A78...`"""
    return (
        f"addr={frame.address.hex} pid={frame.pcf.pid} "
        f"noack={int(frame.pcf.no_ack)} payload={frame.payload.hex().upper()}"
    )


def parse_frame_line(line: str) -> EsbFrame:
    """Inverse of `format_frame`; the CRC is recomputed from the fields."""
    fields: dict[str, str] = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ValueError(f"malformed frame line token: {token!r}")
        fields[key] = value
    try:
        address = MacAddress.from_hex(fields["addr"])
        pid = int(fields["pid"])
        no_ack = bool(int(fields["noack"]))
        payload = bytes.fromhex(fields["payload"]) if fields["payload"] else b""
    except KeyError as exc:
        raise ValueError(f"frame line missing field: {exc}") from exc
    return EsbFrame.build(address, payload, pid=pid, no_ack=no_ack)
