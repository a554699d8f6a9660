from __future__ import annotations

import random

import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from keyjack.esb import Bitstream, EsbFrame, MacAddress, serialize_frame

settings.register_profile(
    "ci",
    derandomize=True,
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")


# -- hypothesis strategies ----------------------------------------------------

macs = st.binary(min_size=5, max_size=5).map(MacAddress)
payloads = st.binary(min_size=0, max_size=32)


@st.composite
def frames(draw) -> EsbFrame:
    return EsbFrame.build(
        address=draw(macs),
        payload=draw(payloads),
        pid=draw(st.integers(0, 3)),
        no_ack=draw(st.booleans()),
    )


# -- deterministic helpers ----------------------------------------------------


def random_frame(rng: random.Random, max_payload: int = 32) -> EsbFrame:
    payload = bytes(rng.randrange(256) for _ in range(rng.randint(0, max_payload)))
    return EsbFrame.build(
        address=MacAddress(bytes(rng.randrange(256) for _ in range(5))),
        payload=payload,
        pid=rng.randrange(4),
        no_ack=rng.random() < 0.5,
    )


def append_stream(target: Bitstream, source: Bitstream) -> None:
    i = 0
    while i < source.bit_len:
        take = min(8, source.bit_len - i)
        target.append_bits(source.read_uint(i, take), take)
        i += take


def embed_frame(frame: EsbFrame, *, pre_bytes: bytes, bit_offset: int,
                post_bytes: bytes, filler_bits: int = 0) -> tuple[bytes, int, int]:
    """Window bytes with the serialized frame at (byte_pos, bit_offset).

    Returns (raw, byte_pos_of_address, bit_offset); noise/padding bits are
    taken from `filler_bits`'s low bits so callers control them exactly.
    """
    window = Bitstream()
    window.append_bytes(pre_bytes)
    if bit_offset:
        window.append_bits(filler_bits & ((1 << bit_offset) - 1), bit_offset)
    append_stream(window, serialize_frame(frame))
    pad = (-window.bit_len) % 8
    if pad:
        window.append_bits(filler_bits & ((1 << pad) - 1), pad)
    window.append_bytes(post_bytes)
    # the address begins after the preamble octet
    start_bit = 8 * len(pre_bytes) + bit_offset + 8
    return window.to_bytes(), start_bit // 8, start_bit % 8


@pytest.fixture
def rng() -> random.Random:
    return random.Random(0xC0FFEE)
