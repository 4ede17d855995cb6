import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinemu.apps import icmp_echo_ruleset
from spinemu.match import (RULE_FALSE, RULE_IP, RULE_IP_PROTO, RULE_TRUE, RULE_UDP_DST_PORT,
                           InvalidRuleset, MatchRule, MatchVerdict, Mode, Ruleset, builtin_rules,
                           eval_rule, match_packet, never_match_ruleset)
from spinemu.packets import build_arp_request, build_icmp_echo, build_udp_frame, ip, mac
from spinemu.selftest import oracle_rule, oracle_ruleset

A, B = mac("02:00:00:00:00:01"), mac("02:00:00:00:00:02")
IA, IB = ip("10.0.0.1"), ip("10.0.0.2")


def echo_request(payload=b""):
    return build_icmp_echo(A, B, IA, IB, 1, 1, payload)


def echo_reply():
    return build_icmp_echo(A, B, IA, IB, 1, 1, b"", icmp_type=0)


def udp(dport=9330, payload=b"hello"):
    return build_udp_frame(A, B, IA, IB, 4000, dport, payload)


# header-offset oracle: fields read at their documented Ethernet/IPv4 positions

def ethertype(frame):
    return struct.unpack_from("!H", frame, 12)[0]


def ip_proto(frame):
    return frame[23]


def udp_dport(frame):
    return struct.unpack_from("!H", frame, 36)[0]


def test_icmp_type_rule_on_echo_request():
    rule = MatchRule(8, 0xFF00, 0x0800, 0x0800)
    frame = echo_request()
    assert len(frame) == 42 and frame[34] == 8
    assert eval_rule(rule, frame)


def test_true_rule_needs_four_bytes():
    assert eval_rule(RULE_TRUE, b"\x00" * 4)
    assert not eval_rule(RULE_TRUE, b"\x00" * 3)


def test_short_packet_fails_rule():
    assert not eval_rule(MatchRule(8, 0xFF00, 0x0800, 0x0800), echo_request()[:20])
    assert not eval_rule(MatchRule(8, 0, 0, 0), bytes(35))


def test_icmp_ruleset_verdicts():
    contexts = [(0, icmp_echo_ruleset())]
    assert match_packet(contexts, echo_request()) == MatchVerdict(0, False)
    assert match_packet(contexts, build_arp_request(A, IA, IB)) == MatchVerdict()
    assert match_packet(contexts, echo_reply()) == MatchVerdict()
    assert match_packet(contexts, udp(payload=b"\x08\x00" * 4)) == MatchVerdict()


def test_builtin_rules_against_offset_oracle():
    frames = [echo_request(), echo_reply(), udp(), build_arp_request(A, IA, IB), udp(53)]
    for f in frames:
        assert eval_rule(RULE_IP, f) == (ethertype(f) == 0x0800)
        assert eval_rule(RULE_IP_PROTO(17), f) == (ethertype(f) == 0x0800 and ip_proto(f) == 17)
        assert eval_rule(RULE_IP_PROTO(1), f) == (ethertype(f) == 0x0800 and ip_proto(f) == 1)
        assert not eval_rule(RULE_FALSE, f)
        assert eval_rule(RULE_TRUE, f)
    assert eval_rule(RULE_UDP_DST_PORT(9330), udp(9330))
    assert not eval_rule(RULE_UDP_DST_PORT(9330), udp(9331))
    assert udp_dport(udp(9330)) == 9330
    names = builtin_rules()
    assert {"RULE_IP", "RULE_IP_PROTO", "RULE_TRUE", "RULE_FALSE"} <= set(names)


def test_ip_proto_matches_ip_only_by_byte_23():
    # protocol byte alone; the ethertype check is a separate rule
    f = bytearray(build_arp_request(A, IA, IB))
    f[23] = 17
    assert ethertype(f) != 0x0800
    assert eval_rule(RULE_IP_PROTO(17), bytes(f))
    assert not Ruleset(Mode.AND, (RULE_IP, RULE_IP_PROTO(17), RULE_TRUE), RULE_FALSE).matches(f)


def test_first_installed_wins():
    everything = Ruleset(Mode.AND, (RULE_TRUE,) * 3, RULE_FALSE)
    contexts = [(3, icmp_echo_ruleset()), (1, everything)]
    assert match_packet(contexts, echo_request()).matched_context == 3
    assert match_packet(contexts, udp()).matched_context == 1
    assert match_packet(list(reversed(contexts)), echo_request()).matched_context == 1


def test_eom_only_reported_for_match():
    rs = Ruleset(Mode.AND, (RULE_FALSE,) * 3, RULE_TRUE)
    v = match_packet([(0, rs)], udp())
    assert v.matched_context is None and not v.is_eom
    rs = Ruleset(Mode.OR, (RULE_FALSE, RULE_FALSE, RULE_TRUE), RULE_TRUE)
    assert match_packet([(0, rs)], udp()) == MatchVerdict(0, True)


def test_never_match_ruleset():
    rs = never_match_ruleset()
    for f in (echo_request(), udp(), build_arp_request(A, IA, IB), bytes(64)):
        assert not rs.matches(f)


@pytest.mark.parametrize("rule", [
    MatchRule(0, 0, 2, 1),
    MatchRule(-1, 0, 0, 0),
    MatchRule(0, 1 << 32, 0, 0),
    MatchRule(0, 0, 0, 1 << 32),
])
def test_invalid_rules(rule):
    with pytest.raises(InvalidRuleset):
        rule.validate()


def test_ruleset_needs_three_rules():
    with pytest.raises(InvalidRuleset):
        Ruleset(Mode.AND, (RULE_TRUE,), RULE_FALSE)


def test_text_round_trip():
    rs = icmp_echo_ruleset()
    text = rs.to_text()
    assert text == ("mode=and 3:ffff0000:08000000:08000000,5:000000ff:00000001:00000001,"
                    "8:0000ff00:00000800:00000800 eom=0:00000000:00000001:00000001")
    assert Ruleset.from_text(text) == rs
    assert Ruleset.from_text(text.replace("and", "OR")).mode is Mode.OR


@pytest.mark.parametrize("text", [
    "mode=xor 0:0:0:0,0:0:0:0,0:0:0:0 eom=0:0:0:0",
    "mode=and 0:0:0:0,0:0:0:0 eom=0:0:0:0",
    "mode=and 0:0:0,0:0:0:0,0:0:0:0 eom=0:0:0:0",
    "mode=and 0:zz:0:0,0:0:0:0,0:0:0:0 eom=0:0:0:0",
    "garbage",
])
def test_text_rejects(text):
    with pytest.raises(InvalidRuleset):
        Ruleset.from_text(text)


def test_random_rules_agree_with_bit_oracle():
    rng = random.Random(1234)
    for _ in range(1000):
        packet = rng.randbytes(rng.randrange(0, 65))
        rules = []
        for _ in range(4):
            idx = rng.randrange(17)
            mask = rng.getrandbits(32)
            lo = rng.getrandbits(32) & mask if rng.random() < 0.7 else 0
            hi = min(0xFFFFFFFF, lo + rng.getrandbits(rng.choice([0, 8, 32])))
            rules.append(MatchRule(idx, mask, lo, hi))
        rs = Ruleset(rng.choice(list(Mode)), tuple(rules[:3]), rules[3])
        v = match_packet([(5, rs)], packet)
        want, eom = oracle_ruleset(rs, packet)
        assert v.handled == want
        assert v.is_eom == (want and eom)
        for r in rules:
            assert eval_rule(r, packet) == oracle_rule(r, packet)


rules_st = st.builds(MatchRule, st.integers(0, 16), st.integers(0, 2**32 - 1),
                     st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1)).filter(
    lambda r: r.start <= r.end)


@settings(max_examples=200, deadline=None)
@given(rules_st, st.binary(max_size=64))
def test_or_of_copies_equals_single_rule(rule, packet):
    single = eval_rule(rule, packet)
    assert Ruleset(Mode.OR, (rule,) * 3, RULE_FALSE).matches(packet) == single
    assert Ruleset(Mode.AND, (rule,) * 3, RULE_FALSE).matches(packet) == single


@settings(max_examples=200, deadline=None)
@given(st.binary(min_size=4, max_size=64))
def test_all_true_matches_everything(packet):
    assert Ruleset(Mode.AND, (RULE_TRUE,) * 3, RULE_FALSE).matches(packet)


@settings(max_examples=200, deadline=None)
@given(rules_st, st.binary(max_size=64))
def test_rule_matches_oracle(rule, packet):
    assert eval_rule(rule, packet) == oracle_rule(rule, packet)
    assert eval_rule(rule, packet) == eval_rule(rule, packet)
