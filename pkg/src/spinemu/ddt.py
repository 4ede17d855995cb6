"""MPI-style derived datatypes: construction, flattening, pack and streaming unpack.

Types are trees of :class:`Primitive`, :class:`Contiguous`, :class:`Vector`
(stride counted in child extents) and :class:`Hvector` (stride in bytes).
``size`` is the number of bytes a type contributes to a message; ``extent``
is the span it covers in memory. Strides shorter than a block make blocks
overlap: the message then carries the overlapping bytes more than once and
the receiver applies them in stream order.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Union

from .runtime import CommandStatus, Direction
from .slmp import ReceiverMsgState, SlmpHeader, SlmpReceiver


class DdtError(ValueError):
    pass


class DdtOverflow(DdtError):
    pass


@dataclass(frozen=True)
class Primitive:
    size: int
    name: str = ""

    def __post_init__(self):
        if self.size not in (1, 2, 4, 8):
            raise DdtError(f"primitive size {self.size} not in (1, 2, 4, 8)")


@dataclass(frozen=True)
class Contiguous:
    count: int
    child: "Datatype"

    def __post_init__(self):
        _check_counts(self.count, 1)


@dataclass(frozen=True)
class Vector:
    count: int
    blocklen: int
    stride: int  # in child extents
    child: "Datatype"

    def __post_init__(self):
        _check_counts(self.count, self.blocklen)
        if self.stride < 0:
            raise DdtError("negative strides are not supported")


@dataclass(frozen=True)
class Hvector:
    count: int
    blocklen: int
    stride: int  # in bytes
    child: "Datatype"

    def __post_init__(self):
        _check_counts(self.count, self.blocklen)
        if self.stride < 0:
            raise DdtError("negative strides are not supported")


Datatype = Union[Primitive, Contiguous, Vector, Hvector]


def _check_counts(count: int, blocklen: int) -> None:
    if count < 1 or blocklen < 1:
        raise DdtError("count and blocklen must be >= 1")


U8 = BYTE = Primitive(1, "u8")
I32 = Primitive(4, "i32")
F32 = FLOAT32 = Primitive(4, "f32")
I64 = Primitive(8, "i64")
INT32 = I32

# Representative stand-ins for the demonstration's simple and complex types.
SIMPLE = Vector(8, 2, 4, F32)
COMPLEX = Hvector(4, 1, 6, Vector(2, 3, 4, I32))


@lru_cache(maxsize=None)
def type_size(t: Datatype) -> int:
    if isinstance(t, Primitive):
        return t.size
    if isinstance(t, Contiguous):
        return t.count * type_size(t.child)
    return t.count * t.blocklen * type_size(t.child)


@lru_cache(maxsize=None)
def type_extent(t: Datatype) -> int:
    if isinstance(t, Primitive):
        return t.size
    ext = type_extent(t.child)
    if isinstance(t, Contiguous):
        return t.count * ext
    if isinstance(t, Vector):
        return ((t.count - 1) * t.stride + t.blocklen) * ext
    return (t.count - 1) * t.stride + t.blocklen * ext


def _layout(t: Datatype) -> tuple[int, int, int]:
    """(blocks, children per block, byte stride between blocks)."""
    ext = type_extent(t.child)
    if isinstance(t, Contiguous):
        return t.count, 1, ext
    if isinstance(t, Vector):
        return t.count, t.blocklen, t.stride * ext
    return t.count, t.blocklen, t.stride


@lru_cache(maxsize=None)
def is_dense(t: Datatype) -> bool:
    """True when the type is one gap-free, overlap-free run of bytes."""
    if isinstance(t, Primitive):
        return True
    if not is_dense(t.child):
        return False
    blocks, per_block, stride = _layout(t)
    return blocks == 1 or stride == per_block * type_extent(t.child)


def flatten(t: Datatype) -> list[tuple[int, int]]:
    """Destination (offset, length) runs in stream order, adjacent runs merged."""
    runs: list[list[int]] = []

    def walk(node: Datatype, base: int) -> None:
        if isinstance(node, Primitive):
            if runs and runs[-1][0] + runs[-1][1] == base:
                runs[-1][1] += node.size
            else:
                runs.append([base, node.size])
            return
        blocks, per_block, stride = _layout(node)
        ext = type_extent(node.child)
        for i in range(blocks):
            for j in range(per_block):
                walk(node.child, base + i * stride + j * ext)

    walk(t, 0)
    return [(o, n) for o, n in runs]


def pack(t: Datatype, count: int, src) -> bytes:
    """Serialize ``count`` consecutive instances of ``t`` read from ``src``."""
    segs = flatten(t)
    ext = type_extent(t)
    need = (count - 1) * ext + max(o + n for o, n in segs) if count else 0
    if len(src) < need:
        raise DdtError(f"source holds {len(src)} bytes, layout needs {need}")
    out = bytearray()
    for r in range(count):
        base = r * ext
        for off, n in segs:
            out += src[base + off:base + off + n]
    return bytes(out)


class _Frame:
    __slots__ = ("node", "base", "k", "blocks", "per_block", "stride", "ext", "child_dense",
                 "child_size")

    def __init__(self, node, base: int):
        self.node = node
        self.base = base
        self.k = 0
        self.blocks, self.per_block, self.stride = _layout(node)
        self.ext = type_extent(node.child)
        self.child_dense = is_dense(node.child)
        self.child_size = type_size(node.child)


class UnpackCursor:
    """Resumable scatter of a serialized stream into a destination layout.

    Walks the type tree with an explicit stack, so the stream may be fed in
    chunks of any size. ``dest`` is either a writable buffer or a callable
    ``write(offset, data)``; offsets are relative to ``base``.
    """

    def __init__(self, t: Datatype, count: int = 1, base: int = 0):
        if count < 1:
            raise DdtError("count must be >= 1")
        self.type = t
        self.count = count
        self.base = base
        self.total = count * type_size(t)
        self.consumed = 0
        root = t if count == 1 else Contiguous(count, t)
        self._stack: list = []
        self._seg: tuple[int, int] | None = None
        self._seg_done = 0
        self._push(root, 0)

    def _push(self, node, base: int) -> None:
        if is_dense(node):
            self._stack.append((base, type_size(node)))
        else:
            self._stack.append(_Frame(node, base))

    def _next_segment(self) -> tuple[int, int] | None:
        stack = self._stack
        while stack:
            top = stack[-1]
            if isinstance(top, tuple):
                stack.pop()
                return top
            if top.k >= top.blocks * top.per_block:
                stack.pop()
                continue
            i, j = divmod(top.k, top.per_block)
            pos = top.base + i * top.stride + j * top.ext
            if top.child_dense:
                # the rest of this block is one contiguous run
                n = top.per_block - j
                top.k += n
                return pos, n * top.child_size
            top.k += 1
            self._push(top.node.child, pos)
        return None

    @property
    def done(self) -> bool:
        return self.consumed == self.total

    def feed(self, chunk, dest) -> "UnpackCursor":
        write = dest if callable(dest) else _buffer_writer(dest)
        data = memoryview(bytes(chunk)) if not isinstance(chunk, memoryview) else chunk
        if self.consumed + len(data) > self.total:
            raise DdtOverflow(f"stream of {self.total} bytes overrun by "
                              f"{self.consumed + len(data) - self.total}")
        pos = 0
        while pos < len(data):
            if self._seg is None:
                self._seg = self._next_segment()
                self._seg_done = 0
            off, length = self._seg
            n = min(length - self._seg_done, len(data) - pos)
            write(self.base + off + self._seg_done, data[pos:pos + n])
            pos += n
            self._seg_done += n
            if self._seg_done == length:
                self._seg = None
        self.consumed += len(data)
        return self


def _buffer_writer(buf) -> Callable:
    def write(offset: int, data) -> None:
        buf[offset:offset + len(data)] = data
    return write


def unpack_chunk(cursor: UnpackCursor, chunk, dest) -> UnpackCursor:
    return cursor.feed(chunk, dest)


def unpack(t: Datatype, count: int, stream, dest, base: int = 0):
    UnpackCursor(t, count, base).feed(stream, dest)
    return dest


# descriptor text: contig(n,T) | vec(n,bl,st,T) | hvec(n,bl,stB,T) | f32|i32|i64|u8

_PRIMS = {"f32": F32, "i32": I32, "i64": I64, "u8": U8}
_TOKEN = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*|\d+|[(),])")


def parse_type(text: str) -> Datatype:
    tokens = _tokenize(text)
    pos = 0

    def take(expected: str | None = None) -> str:
        nonlocal pos
        if pos >= len(tokens):
            raise DdtError(f"unexpected end of type descriptor {text!r}")
        tok = tokens[pos]
        if expected is not None and tok != expected:
            raise DdtError(f"expected {expected!r} at {tok!r} in {text!r}")
        pos += 1
        return tok

    def number() -> int:
        tok = take()
        if not tok.isdigit():
            raise DdtError(f"expected a number, got {tok!r}")
        return int(tok)

    def node() -> Datatype:
        name = take().lower()
        if name in _PRIMS:
            return _PRIMS[name]
        arity = {"contig": 1, "vec": 3, "hvec": 3}.get(name)
        if arity is None:
            raise DdtError(f"unknown type constructor {name!r}")
        take("(")
        nums = []
        for _ in range(arity):
            nums.append(number())
            take(",")
        child = node()
        take(")")
        if name == "contig":
            return Contiguous(nums[0], child)
        return (Vector if name == "vec" else Hvector)(*nums, child)

    t = node()
    if pos != len(tokens):
        raise DdtError(f"trailing input in type descriptor {text!r}")
    return t


def _tokenize(text: str) -> list[str]:
    tokens, pos = [], 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise DdtError(f"bad character in type descriptor at {text[pos:]!r}")
        tokens.append(m.group(1))
        pos = m.end()
    return tokens


def format_type(t: Datatype) -> str:
    if isinstance(t, Primitive):
        return t.name or {1: "u8", 4: "i32", 8: "i64"}.get(t.size, f"p{t.size}")
    if isinstance(t, Contiguous):
        return f"contig({t.count},{format_type(t.child)})"
    kind = "vec" if isinstance(t, Vector) else "hvec"
    return f"{kind}({t.count},{t.blocklen},{t.stride},{format_type(t.child)})"


class DdtReceiver(SlmpReceiver):
    """SLMP receiver that unpacks each message through a datatype into host memory.

    Messages must be processed in stream order, which the sender guarantees
    with a window of one; segments ahead of the cursor are not accepted.
    """

    def __init__(self, completion_queue: int = 1, remember: int = 4096):
        super().__init__(completion_queue, remember)
        self._types: dict[int, tuple] = {}

    def expect_type(self, msg_id: int, t: Datatype, count: int, base: int) -> None:
        with self._lock:
            self._types[msg_id] = (t, count)
        # capacity bounds stream offsets; destination writes are bounded by DMA checks
        self.expect(msg_id, base, count * type_size(t))

    def forget(self, msg_id: int) -> None:
        super().forget(msg_id)
        with self._lock:
            self._types.pop(msg_id, None)

    def _setup(self, st: ReceiverMsgState) -> None:
        t, count = self._types.get(st.msg_id, (U8, max(1, st.capacity)))
        st.extra = UnpackCursor(t, count, st.base)

    def _deliver(self, spin, st: ReceiverMsgState, hdr: SlmpHeader, payload) -> bool:
        cursor: UnpackCursor = st.extra
        with st.lock:
            if hdr.offset < cursor.consumed:
                return hdr.offset + len(payload) <= cursor.consumed  # duplicate
            if hdr.offset > cursor.consumed:
                return False
            failed = []

            def write(offset: int, data) -> None:
                cmd = spin.dma(data, offset, len(data), Direction.TO_HOST)
                if cmd.status is CommandStatus.FAILED:
                    failed.append(cmd)

            try:
                cursor.feed(payload, write)
            except DdtOverflow as exc:
                spin.log(f"ddt: msg {st.msg_id}: {exc}")
                return False
            return not failed

