import os
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinemu.ddt import (COMPLEX, F32, I32, I64, SIMPLE, U8, Contiguous, DdtError, DdtOverflow,
                         DdtReceiver, Hvector, Primitive, UnpackCursor, Vector, flatten,
                         format_type, is_dense, pack, parse_type, type_extent, type_size, unpack)
from spinemu.harness import CLIENT, SERVER, scatter_oracle
from spinemu.hostif import SmartNic
from spinemu.netsim import SimLink
from spinemu.selftest import random_datatype
from spinemu.slmp import SenderConfig, SlmpSender


def byte_offsets(t):
    """Destination offset of every stream byte, one primitive element at a time."""
    if isinstance(t, Primitive):
        return list(range(t.size))
    child = byte_offsets(t.child)
    if isinstance(t, Contiguous):
        starts = [i * type_extent(t.child) for i in range(t.count)]
    else:
        unit = type_extent(t.child) if isinstance(t, Vector) else 1
        starts = [i * t.stride * unit + j * type_extent(t.child)
                  for i in range(t.count) for j in range(t.blocklen)]
    return [s + c for s in starts for c in child]


def runs_of(offsets):
    runs = []
    for o in offsets:
        if runs and runs[-1][0] + runs[-1][1] == o:
            runs[-1][1] += 1
        else:
            runs.append([o, 1])
    return [tuple(r) for r in runs]


def test_contiguous_sizes():
    t = Contiguous(2, I32)
    assert (type_size(t), type_extent(t)) == (8, 8)
    assert flatten(Contiguous(4, U8)) == [(0, 4)]
    assert is_dense(t)


def test_vector_sizes_and_flatten():
    t = Vector(3, 2, 4, F32)
    assert (type_size(t), type_extent(t)) == (24, 40)
    assert flatten(t) == [(0, 8), (16, 8), (32, 8)]
    assert not is_dense(t)


def test_hvector_overlapping_stride():
    t = Hvector(2, 1, 3, I32)
    assert (type_size(t), type_extent(t)) == (8, 7)
    src = bytes(range(16))
    assert pack(t, 1, src) == bytes([0, 1, 2, 3, 3, 4, 5, 6])


def test_bad_types():
    with pytest.raises(DdtError):
        Primitive(3)
    with pytest.raises(DdtError):
        Vector(0, 1, 1, I32)
    with pytest.raises(DdtError):
        Hvector(1, 1, -4, I32)
    with pytest.raises(DdtError):
        UnpackCursor(I32, 0)


@pytest.mark.parametrize("t", [SIMPLE, COMPLEX, Vector(3, 2, 4, F32), Hvector(2, 1, 3, I32),
                               Contiguous(3, Vector(2, 1, 3, I64))])
def test_flatten_against_element_oracle(t):
    offsets = byte_offsets(t)
    assert len(offsets) == type_size(t)
    assert flatten(t) == runs_of(offsets)


def test_pack_unpack_round_trip_without_overlap():
    src = os.urandom(type_extent(COMPLEX) * 5)
    stream = pack(COMPLEX, 5, src)
    dest = bytearray(len(src))
    unpack(COMPLEX, 5, stream, dest)
    for o, n in flatten(Contiguous(5, COMPLEX)):
        assert dest[o:o + n] == src[o:o + n]


def test_pack_rejects_short_source():
    with pytest.raises(DdtError):
        pack(SIMPLE, 2, bytes(10))


@pytest.mark.parametrize("chunk", range(1, 18))
def test_chunked_unpack_equals_whole(chunk):
    t, count = COMPLEX, 3
    stream = os.urandom(type_size(t) * count)
    whole = bytearray(type_extent(t) * count)
    UnpackCursor(t, count).feed(stream, whole)
    parts = bytearray(len(whole))
    c = UnpackCursor(t, count)
    for i in range(0, len(stream), chunk):
        c.feed(stream[i:i + chunk], parts)
    assert c.done and parts == whole == scatter_oracle(t, count, stream)


def test_zero_chunk_and_overrun():
    c = UnpackCursor(SIMPLE, 1)
    dest = bytearray(type_extent(SIMPLE))
    c.feed(b"", dest)
    assert c.consumed == 0 and not c.done
    c.feed(bytes(type_size(SIMPLE)), dest)
    assert c.done
    with pytest.raises(DdtOverflow):
        c.feed(b"x", dest)


def test_callable_destination_with_base():
    writes = []
    UnpackCursor(Vector(2, 1, 2, I32), 1, base=1000).feed(bytes(8), lambda o, d: writes.append(
        (o, len(d))))
    assert writes == [(1000, 4), (1008, 4)]


@pytest.mark.parametrize("text,t", [
    ("f32", F32),
    ("vec(8,2,4,f32)", SIMPLE),
    ("hvec(4, 1, 6, vec(2,3,4,i32))", COMPLEX),
    ("contig(3,hvec(2,1,3,u8))", Contiguous(3, Hvector(2, 1, 3, U8))),
])
def test_parse_and_format(text, t):
    assert parse_type(text) == t
    assert parse_type(format_type(t)) == t


@pytest.mark.parametrize("text", ["", "vec(1,2,f32)", "blob(1,f32)", "f32 f32", "vec(1,2,3,f32",
                                  "contig(-1,u8)", "contig(0,u8)"])
def test_parse_rejects(text):
    with pytest.raises(DdtError):
        parse_type(text)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 4), st.integers(1, 64))
def test_random_trees(seed, count, chunk):
    rng = random.Random(seed)
    t = random_datatype(rng)
    assert parse_type(format_type(t)) == t
    offsets = byte_offsets(t)
    assert flatten(t) == runs_of(offsets)
    assert max(offsets) < type_extent(t)
    stream = rng.randbytes(type_size(t) * count)
    dest = bytearray(type_extent(t) * count)
    c = UnpackCursor(t, count)
    for i in range(0, len(stream), chunk):
        c.feed(stream[i:i + chunk], dest)
    assert dest == scatter_oracle(t, count, stream)


def test_receiver_unpacks_over_the_wire():
    link, a, b = SimLink.pair()
    nic = SmartNic(b).start()
    rx = DdtReceiver()
    h = nic.ctx_init(rx.descriptor(host_bytes=1 << 20))
    try:
        with SlmpSender(a, CLIENT, SERVER) as tx:
            for mid, (t, count) in enumerate([(SIMPLE, 40), (COMPLEX, 30)]):
                base = mid * 65536
                stream = os.urandom(type_size(t) * count)
                rx.expect_type(mid, t, count, base)
                tx.send_message(SenderConfig(window=1), mid, stream)
                assert rx.wait_completion(nic, mid, 5) == len(stream)
                want = scatter_oracle(t, count, stream)
                got = nic.host_read(h, base, len(want))
                for o, n in flatten(Contiguous(count, t)):
                    assert got[o:o + n] == want[o:o + n]
    finally:
        nic.stop()
        link.close()
