"""Recovery from misaligned windows, checked against a naive rescan."""
from __future__ import annotations

import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import embed_frame, frames, random_frame
from keyjack.esb import Bitstream, MIN_FRAME_BITS, parse_frame_at, serialize_frame
from keyjack.promiscuous import (
    AirCapture,
    analytic_false_accept_bound,
    format_recovered,
    recover_frames,
    recover_frames_batch,
    sniffer_config,
)


def naive_recover(raw: bytes) -> list[tuple[int, object]]:
    """Independent reference: brute-force every start bit via parse_frame_at,
    then the same greedy earliest-start dedup."""
    stream = Bitstream(raw)
    out: list[tuple[int, object]] = []
    next_free = 0
    for start in range(0, max(0, stream.bit_len - MIN_FRAME_BITS + 1)):
        if start < next_free:
            continue
        frame = parse_frame_at(stream, start)
        if frame is not None:
            out.append((start, frame))
            next_free = start + MIN_FRAME_BITS + 8 * len(frame.payload)
    return out


class TestConstruction:
    def test_frame_with_three_leading_noise_bits(self, rng):
        frame = random_frame(rng)
        raw, byte_pos, bit_offset = embed_frame(
            frame, pre_bytes=b"", bit_offset=3, post_bytes=b"", filler_bits=0b101)
        recovered = recover_frames(AirCapture(raw=raw, channel=25, t=7))
        assert len(recovered) == 1
        rec = recovered[0]
        assert rec.frame == frame
        assert (rec.byte_pos, rec.bit_offset) == (byte_pos, bit_offset) == (1, 3)
        assert rec.channel == 25 and rec.t == 7

    def test_two_back_to_back_frames_with_gap_byte(self, rng):
        f1, f2 = random_frame(rng, 8), random_frame(rng, 8)
        window = Bitstream()
        for piece in (serialize_frame(f1),):
            for i in range(0, piece.bit_len, 8):
                window.append_bits(piece.read_uint(i, min(8, piece.bit_len - i)),
                                   min(8, piece.bit_len - i))
        window.append_bits(0, (-window.bit_len) % 8)
        window.append_byte(rng.randrange(256))
        piece = serialize_frame(f2)
        for i in range(0, piece.bit_len, 8):
            window.append_bits(piece.read_uint(i, min(8, piece.bit_len - i)),
                               min(8, piece.bit_len - i))
        window.append_bits(0, (-window.bit_len) % 8)
        recovered = recover_frames(AirCapture(raw=window.to_bytes(), channel=1, t=0))
        assert [r.frame for r in recovered] == [f1, f2]

    def test_pure_noise_usually_yields_nothing(self):
        rng = random.Random(5)
        raw = bytes(rng.randrange(256) for _ in range(64))
        assert recover_frames(AirCapture(raw=raw, channel=0, t=0)) == []

    def test_window_below_minimum_footprint(self):
        assert recover_frames(AirCapture(raw=bytes(8), channel=0, t=0)) == []

    def test_exact_fit_at_window_end_every_offset(self, rng):
        # frame's final CRC bit lands exactly on the window's last usable bit
        for offset in range(8):
            for payload_len in (0, 1, 16, 32):
                frame = random_frame(rng, max_payload=payload_len)
                while len(frame.payload) != payload_len:
                    frame = random_frame(rng, max_payload=payload_len)
                raw, byte_pos, bit_off = embed_frame(
                    frame, pre_bytes=b"", bit_offset=offset, post_bytes=b"",
                    filler_bits=0)
                recovered = recover_frames(AirCapture(raw=raw, channel=0, t=0))
                assert any(
                    r.frame == frame and (r.byte_pos, r.bit_offset) == (byte_pos, bit_off)
                    for r in recovered
                ), (offset, payload_len)

    def test_overlay_invariant(self, rng):
        # re-serializing and overlaying at the lock position reproduces raw
        frame = random_frame(rng)
        raw, byte_pos, bit_offset = embed_frame(
            frame, pre_bytes=bytes(rng.randrange(256) for _ in range(4)),
            bit_offset=5, post_bytes=bytes(2), filler_bits=rng.getrandbits(8))
        rec = recover_frames(AirCapture(raw=raw, channel=0, t=0))[0]
        assert (rec.byte_pos, rec.bit_offset) == (byte_pos, bit_offset)
        stream = Bitstream(raw)
        bits = serialize_frame(rec.frame)
        start = rec.start_bit
        for i in range(8, bits.bit_len):  # skip the preamble octet
            assert bits.bit(i) == stream.bit(start - 8 + i)


class TestAgainstNaive:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=40)
    def test_matches_naive_on_noise(self, seed):
        rng = random.Random(seed)
        raw = bytes(rng.randrange(256) for _ in range(rng.randint(9, 48)))
        fast = [(r.start_bit, r.frame) for r in
                recover_frames(AirCapture(raw=raw, channel=0, t=0))]
        assert fast == naive_recover(raw)

    @given(frames(), st.integers(0, 7), st.integers(0, 2**32 - 1))
    @settings(max_examples=40)
    def test_matches_naive_with_embedded_frame(self, frame, offset, seed):
        rng = random.Random(seed)
        raw, _, _ = embed_frame(
            frame, pre_bytes=bytes(rng.randrange(256) for _ in range(rng.randint(0, 6))),
            bit_offset=offset,
            post_bytes=bytes(rng.randrange(256) for _ in range(rng.randint(0, 6))),
            filler_bits=rng.getrandbits(8))
        fast = [(r.start_bit, r.frame) for r in
                recover_frames(AirCapture(raw=raw, channel=0, t=0))]
        assert fast == naive_recover(raw)

    def test_batch_equals_per_window(self):
        rng = random.Random(77)
        windows = np.frombuffer(
            bytes(rng.randrange(256) for _ in range(200 * 24)), dtype=np.uint8
        ).reshape(200, 24)
        batch = recover_frames_batch(windows)
        for row, got in zip(windows, batch):
            expected = recover_frames(AirCapture(raw=row.tobytes(), channel=0, t=0))
            assert [(r.start_bit, r.frame) for r in got] == \
                   [(r.start_bit, r.frame) for r in expected]


class TestProperties:
    @given(frames(), st.integers(0, 7), st.integers(0, 2**32 - 1))
    def test_completeness_with_zero_flanks(self, frame, offset, seed):
        # zero flanking bytes cannot themselves form a CRC-valid frame, so
        # the embedded frame must always come back
        rng = random.Random(seed)
        raw, byte_pos, bit_offset = embed_frame(
            frame, pre_bytes=bytes(rng.randint(0, 6)), bit_offset=offset,
            post_bytes=bytes(rng.randint(0, 6)), filler_bits=0)
        recovered = recover_frames(AirCapture(raw=raw, channel=0, t=0))
        found = [r for r in recovered if r.frame == frame
                 and (r.byte_pos, r.bit_offset) == (byte_pos, bit_offset)]
        assert found, (recovered, byte_pos, bit_offset)

    @given(frames(), st.integers(0, 7), st.integers(0, 2**32 - 1))
    def test_completeness_with_random_flanks_modulo_preemption(self, frame, offset, seed):
        # random noise can, with probability ~2^-16 per candidate, fake a
        # frame that starts earlier and overlaps ours; greedy dedup then
        # legitimately eats the embedded frame, so allow exactly that case
        rng = random.Random(seed)
        raw, byte_pos, bit_offset = embed_frame(
            frame, pre_bytes=bytes(rng.randrange(256) for _ in range(rng.randint(0, 6))),
            bit_offset=offset,
            post_bytes=bytes(rng.randrange(256) for _ in range(rng.randint(0, 6))),
            filler_bits=rng.getrandbits(8))
        recovered = recover_frames(AirCapture(raw=raw, channel=0, t=0))
        start = 8 * byte_pos + bit_offset
        if any(r.frame == frame and r.start_bit == start for r in recovered):
            return
        preempting = [r for r in recovered
                      if r.start_bit < start and r.start_bit + r.extent_bits > start]
        assert preempting, f"frame lost without an overlapping earlier accept: {recovered}"

    def test_concatenation_is_union_when_no_straddle(self, rng):
        f1, f2 = random_frame(rng, 6), random_frame(rng, 6)
        raw1, _, _ = embed_frame(f1, pre_bytes=bytes(2), bit_offset=4,
                                 post_bytes=bytes(1), filler_bits=0)
        raw2, _, _ = embed_frame(f2, pre_bytes=bytes(1), bit_offset=2,
                                 post_bytes=bytes(2), filler_bits=0)
        separate = (
            [(r.start_bit, r.frame) for r in recover_frames(AirCapture(raw1, 0, 0))]
            + [(r.start_bit + 8 * len(raw1), r.frame)
               for r in recover_frames(AirCapture(raw2, 0, 0))]
        )
        joined = [(r.start_bit, r.frame)
                  for r in recover_frames(AirCapture(raw1 + raw2, 0, 0))]
        assert joined == separate


class TestNoiseStatistics:
    def test_false_accept_rate_within_bound(self):
        # scaled-down version of the acceptance monte carlo
        n_windows = 40_000
        gen = np.random.default_rng(2024)
        windows = gen.integers(0, 256, size=(n_windows, 64), dtype=np.uint8)
        results = recover_frames_batch(windows)
        accepts = sum(len(r) for r in results)
        bound = analytic_false_accept_bound(64) * n_windows
        assert accepts <= 3 * bound
        assert accepts >= bound / 3

    def test_analytic_bound_matches_direct_enumeration(self):
        # independent oracle: enumerate candidate geometry directly
        window = 16
        expected = 0.0
        for start in range(8 * window):
            if start % 8 >= 8 or start // 8 >= window - 8:
                continue
            for length in range(33):
                if start + MIN_FRAME_BITS + 8 * length <= 8 * window:
                    expected += 1 / 64
        assert analytic_false_accept_bound(window) == pytest.approx(expected / 65536)


def test_sniffer_config_matches_the_trick():
    config = sniffer_config()
    assert config.address_length == 2
    assert config.address == b"\x00\xaa"
    assert config.crc_check is False


def test_format_recovered_prefix(rng):
    frame = random_frame(rng, 4)
    raw, byte_pos, bit_offset = embed_frame(frame, pre_bytes=bytes(3), bit_offset=6,
                                            post_bytes=b"", filler_bits=0)
    rec = recover_frames(AirCapture(raw=raw, channel=9, t=1))[0]
    assert format_recovered(rec).startswith(f"offset={byte_pos}:{bit_offset} addr=")
