"""Two-class fixed-slot allocator over the emulated L2 packet memory.

Half of packet memory is cut into 128-byte slots, the other half into
1536-byte slots. Each class keeps its free slots in a FIFO, so frees may
come back in any order.
"""
from __future__ import annotations

import enum
import threading
from collections import deque
from dataclasses import dataclass


class SlotClass(enum.Enum):
    SMALL = "small"
    LARGE = "large"


@dataclass(frozen=True)
class BufferSlot:
    offset: int
    capacity: int
    cls: SlotClass
    index: int


@dataclass(frozen=True)
class AllocatorConfig:
    packet_memory_bytes: int = 512 * 1024
    small_slot: int = 128
    large_slot: int = 1536


class AllocError(Exception):
    """Packet could not be buffered and is dropped."""


class TooLarge(AllocError):
    pass


class OutOfSlots(AllocError):
    pass


class DoubleFree(RuntimeError):
    pass


@dataclass
class ClassStats:
    capacity: int
    in_use: int = 0
    high_watermark: int = 0
    drops: int = 0


class PacketAllocator:
    def __init__(self, config: AllocatorConfig | None = None):
        self.config = config = config or AllocatorConfig()
        if config.small_slot < 1 or config.large_slot < config.small_slot:
            raise ValueError("slot sizes must satisfy 1 <= small <= large")
        half = config.packet_memory_bytes // 2
        n_small = half // config.small_slot
        n_large = half // config.large_slot
        self.memory = bytearray(config.packet_memory_bytes)

        self._slots = [BufferSlot(i * config.small_slot, config.small_slot, SlotClass.SMALL, i)
                       for i in range(n_small)]
        self._slots += [BufferSlot(half + i * config.large_slot, config.large_slot,
                                   SlotClass.LARGE, n_small + i)
                        for i in range(n_large)]
        self._free = {
            SlotClass.SMALL: deque(self._slots[:n_small]),
            SlotClass.LARGE: deque(self._slots[n_small:]),
        }
        self._allocated = [False] * len(self._slots)
        self._generation = [0] * len(self._slots)
        self._stats = {SlotClass.SMALL: ClassStats(n_small), SlotClass.LARGE: ClassStats(n_large)}
        self.too_large = 0
        self._lock = threading.Lock()

    def class_for(self, length: int) -> SlotClass:
        if length <= self.config.small_slot:
            return SlotClass.SMALL
        if length <= self.config.large_slot:
            return SlotClass.LARGE
        raise TooLarge(f"{length} bytes exceeds the {self.config.large_slot}-byte slot class")

    def alloc(self, length: int) -> BufferSlot:
        if length < 1:
            raise ValueError("cannot buffer an empty packet")
        with self._lock:
            try:
                cls = self.class_for(length)
            except TooLarge:
                self.too_large += 1
                raise
            free = self._free[cls]
            st = self._stats[cls]
            if not free:
                st.drops += 1
                raise OutOfSlots(f"no free {cls.value} slot")
            slot = free.popleft()
            self._allocated[slot.index] = True
            st.in_use += 1
            st.high_watermark = max(st.high_watermark, st.in_use)
            return slot

    def free(self, slot: BufferSlot) -> None:
        with self._lock:
            if not self._allocated[slot.index] or self._slots[slot.index] != slot:
                raise DoubleFree(f"slot {slot.index} is not allocated")
            self._allocated[slot.index] = False
            self._generation[slot.index] += 1
            self._free[slot.cls].append(slot)
            self._stats[slot.cls].in_use -= 1

    def store(self, data) -> BufferSlot:
        """Allocate a slot and copy ``data`` into it (the ingress DMA)."""
        slot = self.alloc(len(data))
        self.memory[slot.offset:slot.offset + len(data)] = data
        return slot

    def view(self, slot: BufferSlot, length: int) -> memoryview:
        return memoryview(self.memory)[slot.offset:slot.offset + length]

    def generation(self, slot: BufferSlot) -> int:
        return self._generation[slot.index]

    def is_allocated(self, slot: BufferSlot) -> bool:
        return self._allocated[slot.index]

    def free_count(self, cls: SlotClass) -> int:
        return len(self._free[cls])

    def allocated_slots(self) -> list[BufferSlot]:
        with self._lock:
            return [s for s in self._slots if self._allocated[s.index]]

    def stats(self) -> dict[SlotClass, ClassStats]:
        with self._lock:
            return {cls: ClassStats(st.capacity, st.in_use, st.high_watermark, st.drops)
                    for cls, st in self._stats.items()}
