"""Packet classification with U32-style masked range rules.

A rule selects the big-endian 32-bit word at byte offset ``4 * word_index``,
masks it and accepts the packet when the result lies in ``[start, end]``.
A ruleset combines three such rules with AND or OR; a fourth rule flags
end-of-message packets for the context that matched.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Iterable, Optional

MASK32 = 0xFFFFFFFF


class InvalidRuleset(ValueError):
    pass


class Mode(enum.Enum):
    AND = "and"
    OR = "or"


@dataclass(frozen=True)
class MatchRule:
    word_index: int
    mask: int
    start: int
    end: int

    def validate(self) -> None:
        if self.word_index < 0:
            raise InvalidRuleset(f"negative word index {self.word_index}")
        for name in ("mask", "start", "end"):
            value = getattr(self, name)
            if not 0 <= value <= MASK32:
                raise InvalidRuleset(f"{name}={value:#x} is not a 32-bit word")
        if self.start > self.end:
            raise InvalidRuleset(f"start {self.start:#x} > end {self.end:#x}")

    def matches(self, packet) -> bool:
        off = 4 * self.word_index
        if len(packet) < off + 4:
            return False
        word = int.from_bytes(packet[off:off + 4], "big")
        return self.start <= (word & self.mask) <= self.end

    def to_text(self) -> str:
        return f"{self.word_index}:{self.mask:08x}:{self.start:08x}:{self.end:08x}"

    @classmethod
    def from_text(cls, text: str) -> "MatchRule":
        parts = text.strip().split(":")
        if len(parts) != 4:
            raise InvalidRuleset(f"rule {text!r} needs idx:mask:start:end")
        try:
            idx = int(parts[0], 10)
            mask, start, end = (int(p, 16) for p in parts[1:])
        except ValueError as exc:
            raise InvalidRuleset(f"bad rule {text!r}: {exc}") from None
        return cls(idx, mask, start, end)


def eval_rule(rule: MatchRule, packet) -> bool:
    return rule.matches(packet)


@dataclass(frozen=True)
class Ruleset:
    mode: Mode
    rules: tuple
    eom: MatchRule

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        if len(self.rules) != 3:
            raise InvalidRuleset(f"a ruleset combines exactly 3 rules, got {len(self.rules)}")

    def validate(self) -> None:
        if not isinstance(self.mode, Mode):
            raise InvalidRuleset(f"unknown mode {self.mode!r}")
        for rule in (*self.rules, self.eom):
            rule.validate()

    def matches(self, packet) -> bool:
        r0, r1, r2 = self.rules
        if self.mode is Mode.AND:
            return r0.matches(packet) and r1.matches(packet) and r2.matches(packet)
        return r0.matches(packet) or r1.matches(packet) or r2.matches(packet)

    def is_eom(self, packet) -> bool:
        return self.eom.matches(packet)

    def to_text(self) -> str:
        rules = ",".join(r.to_text() for r in self.rules)
        return f"mode={self.mode.value} {rules} eom={self.eom.to_text()}"

    @classmethod
    def from_text(cls, text: str) -> "Ruleset":
        """Parse ``mode=and i:m:s:e,i:m:s:e,i:m:s:e eom=i:m:s:e``."""
        m = re.fullmatch(r"\s*mode=(\w+)\s+(\S+)\s+eom=(\S+)\s*", text)
        if m is None:
            raise InvalidRuleset(f"cannot parse ruleset {text!r}")
        try:
            mode = Mode(m.group(1).lower())
        except ValueError:
            raise InvalidRuleset(f"unknown mode {m.group(1)!r}") from None
        rules = tuple(MatchRule.from_text(r) for r in m.group(2).split(","))
        return cls(mode, rules, MatchRule.from_text(m.group(3)))


@dataclass(frozen=True)
class MatchVerdict:
    matched_context: Optional[int] = None
    is_eom: bool = False

    @property
    def handled(self) -> bool:
        return self.matched_context is not None


NO_MATCH = MatchVerdict()


def match_packet(contexts: Iterable[tuple[int, Ruleset]], packet) -> MatchVerdict:
    """First context (in the given order) whose ruleset accepts ``packet``."""
    for ctx_id, ruleset in contexts:
        if ruleset.matches(packet):
            return MatchVerdict(ctx_id, ruleset.is_eom(packet))
    return NO_MATCH


# Ethernet II + IPv4 without options: EtherType at bytes 12-13, protocol at
# byte 23, UDP destination port at bytes 36-37, UDP payload from byte 42.
RULE_IP = MatchRule(3, 0xFFFF0000, 0x08000000, 0x08000000)
RULE_TRUE = MatchRule(0, 0, 0, 0)
RULE_FALSE = MatchRule(0, 0, 1, 1)


def RULE_IP_PROTO(proto: int) -> MatchRule:
    return MatchRule(5, 0x000000FF, proto & 0xFF, proto & 0xFF)


def RULE_UDP_DST_PORT(port: int) -> MatchRule:
    value = (port & 0xFFFF) << 16
    return MatchRule(9, 0xFFFF0000, value, value)


def builtin_rules() -> dict:
    return {
        "RULE_IP": RULE_IP,
        "RULE_IP_PROTO": RULE_IP_PROTO,
        "RULE_UDP_DST_PORT": RULE_UDP_DST_PORT,
        "RULE_TRUE": RULE_TRUE,
        "RULE_FALSE": RULE_FALSE,
    }


def never_match_ruleset() -> Ruleset:
    return Ruleset(Mode.AND, (RULE_FALSE, RULE_FALSE, RULE_FALSE), RULE_FALSE)
