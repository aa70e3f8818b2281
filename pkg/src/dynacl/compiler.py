"""Compile access-list conditions and rule lists into BDDs, and back into tables."""

from __future__ import annotations

import re
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .bdd import BDD, BoolFn, FALSE_ID, TRUE_ID
from .model import (
    ADDR_MASK, ANY_PORT, PORTED_PROTOCOLS, PROTOCOL_NAMES, PROTOCOLS, Action,
    AddrPattern, BaseList, Condition, GroupHierarchy, PacketKey, PortConstraint,
    PortEq, PortGe, PortLt, PortRange, Rule, format_addr, parse_addr,
)

FIELD_WIDTHS = {"protocol": 8, "src_addr": 32, "dst_addr": 32, "src_port": 16, "dst_port": 16}
DEFAULT_ORDER = ("protocol", "dst_addr", "dst_port", "src_addr", "src_port")


@dataclass(frozen=True)
class BitLayout:
    """Assignment of header bits to BDD variables, MSB first within each field."""

    order: tuple[str, ...] = DEFAULT_ORDER

    def __post_init__(self):
        if sorted(self.order) != sorted(FIELD_WIDTHS):
            raise ValueError(f"layout must order exactly the fields {sorted(FIELD_WIDTHS)}")

    @property
    def nvars(self) -> int:
        return sum(FIELD_WIDTHS.values())

    @cached_property
    def offsets(self) -> dict[str, int]:
        off, pos = {}, 0
        for name in self.order:
            off[name] = pos
            pos += FIELD_WIDTHS[name]
        return off

    def var(self, name: str, k: int) -> int:
        """Variable index of bit ``k`` (0 = most significant) of field ``name``."""
        if not 0 <= k < FIELD_WIDTHS[name]:
            raise IndexError(k)
        return self.offsets[name] + k

    def field_of(self, v: int) -> tuple[str, int]:
        for name, off in self.offsets.items():
            if off <= v < off + FIELD_WIDTHS[name]:
                return name, v - off
        raise IndexError(v)

    def var_names(self) -> list[str]:
        return [f"{name}[{k}]" for name in self.order for k in range(FIELD_WIDTHS[name])]

    def bits_of(self, p: PacketKey) -> int:
        """Packet as an int whose bit i is the value of variable i."""
        values = {"protocol": p.protocol, "src_addr": p.src_addr, "dst_addr": p.dst_addr,
                  "src_port": p.src_port, "dst_port": p.dst_port}
        out = 0
        for name, off in self.offsets.items():
            w = FIELD_WIDTHS[name]
            x = values[name]
            for k in range(w):
                if (x >> (w - 1 - k)) & 1:
                    out |= 1 << (off + k)
        return out

    def bit_matrix(self, protocol, src_addr, dst_addr, src_port, dst_port) -> np.ndarray:
        """(N, 104) uint8 matrix for column arrays of header fields."""
        values = {"protocol": protocol, "src_addr": src_addr, "dst_addr": dst_addr,
                  "src_port": src_port, "dst_port": dst_port}
        n = len(np.asarray(protocol))
        out = np.empty((n, self.nvars), dtype=np.uint8)
        for name, off in self.offsets.items():
            w = FIELD_WIDTHS[name]
            x = np.asarray(values[name], dtype=np.int64)
            for k in range(w):
                out[:, off + k] = (x >> (w - 1 - k)) & 1
        return out


DEFAULT_LAYOUT = BitLayout()


def _cube_for(layout: BitLayout, nvars: int, fixed: dict[str, tuple[int, int]]) -> list[str]:
    """Ternary cube fixing the unmasked bits of each field; ``fixed`` maps field -> (value, dontcare)."""
    cube = ["-"] * nvars
    for name, (value, dc) in fixed.items():
        w = FIELD_WIDTHS[name]
        off = layout.offsets[name]
        for k in range(w):
            shift = w - 1 - k
            if not (dc >> shift) & 1:
                cube[off + k] = "1" if (value >> shift) & 1 else "0"
    return cube


def _ge(bdd: BDD, layout: BitLayout, name: str, c: int) -> int:
    w = FIELD_WIDTHS[name]
    off = layout.offsets[name]
    r = TRUE_ID
    for k in range(w - 1, -1, -1):
        v = off + k
        if (c >> (w - 1 - k)) & 1:
            r = bdd._mk(v, FALSE_ID, r)
        else:
            r = bdd._mk(v, r, TRUE_ID)
    return r


def _le(bdd: BDD, layout: BitLayout, name: str, c: int) -> int:
    w = FIELD_WIDTHS[name]
    off = layout.offsets[name]
    r = TRUE_ID
    for k in range(w - 1, -1, -1):
        v = off + k
        if (c >> (w - 1 - k)) & 1:
            r = bdd._mk(v, TRUE_ID, r)
        else:
            r = bdd._mk(v, r, FALSE_ID)
    return r


def compile_interval(bdd: BDD, layout: BitLayout, name: str, lo: int, hi: int) -> BoolFn:
    """lo <= field <= hi, built by MSB recursion (O(width) nodes per bound)."""
    if lo > hi:
        return bdd.false
    top = (1 << FIELD_WIDTHS[name]) - 1
    parts = []
    if lo > 0:
        parts.append(bdd.from_node(_ge(bdd, layout, name, lo)))
    if hi < top:
        parts.append(bdd.from_node(_le(bdd, layout, name, hi)))
    return bdd.conjoin(parts)


def compile_ports(bdd: BDD, layout: BitLayout, name: str, pc: PortConstraint) -> BoolFn:
    if pc.is_any:
        return bdd.true
    iv = pc.interval
    if iv is None:
        return bdd.false
    return compile_interval(bdd, layout, name, *iv)


def compile_condition(bdd: BDD, layout: BitLayout, c: Condition) -> BoolFn:
    fixed = {}
    if c.protocol is not None:
        fixed["protocol"] = (c.protocol, 0)
    fixed["src_addr"] = (c.src.value, c.src.wildcard)
    fixed["dst_addr"] = (c.dst.value, c.dst.wildcard)
    f = bdd.from_cube(_cube_for(layout, bdd.nvars, fixed))
    if c.protocol in PORTED_PROTOCOLS:
        f = f & compile_ports(bdd, layout, "src_port", c.src_ports)
        f = f & compile_ports(bdd, layout, "dst_port", c.dst_ports)
    return f


def compile_list(bdd: BDD, layout: BitLayout, rules: Iterable[Rule]) -> BoolFn:
    """First-match semantics as a right fold of if-then-else; empty list is FALSE."""
    r = bdd.false
    for rule in reversed(list(rules)):
        cond = compile_condition(bdd, layout, rule.condition)
        if rule.is_accept:
            r = cond | r
        else:
            r = ~cond & r
    return r


def blocks_group(rule: Rule, supers: frozenset[int]) -> bool:
    """True when ``rule`` is a deny that the group owning ``supers`` cannot override."""
    return not rule.is_accept and not (rule.groups & supers)


def compile_deny_mask(bdd: BDD, layout: BitLayout, rules: BaseList | Sequence[Rule],
                      j: int, h: GroupHierarchy) -> BoolFn:
    """OR of every deny condition that group ``j`` may not override.  Order-free."""
    supers = h.supergroups(j)
    return bdd.disjoin(compile_condition(bdd, layout, r.condition)
                       for r in rules if blocks_group(r, supers))


# --------------------------------------------------------------------------
# grant tables

@dataclass(frozen=True)
class GrantRow:
    """One row of a grant table.

    ``protocol`` is an 8-character ternary pattern.  Port sets are either an
    inclusive (lo, hi) interval or a 16-character ternary pattern when the
    cube's don't-care bits are not contiguous.
    """

    protocol: str
    src: AddrPattern
    dst: AddrPattern
    src_ports: tuple[int, int] | str = (0, 0xFFFF)
    dst_ports: tuple[int, int] | str = (0, 0xFFFF)

    def __str__(self):
        return (f"proto={_fmt_proto(self.protocol)} "
                f"src={format_addr(self.src.value)}/{format_addr(self.src.wildcard)} "
                f"dst={format_addr(self.dst.value)}/{format_addr(self.dst.wildcard)} "
                f"sport={_fmt_ports(self.src_ports)} dport={_fmt_ports(self.dst_ports)}")

    @classmethod
    def parse(cls, text: str) -> GrantRow:
        fields = dict(item.split("=", 1) for item in text.split())
        if set(fields) != {"proto", "src", "dst", "sport", "dport"}:
            raise ValueError(f"malformed grant row: {text!r}")
        return cls(_parse_proto(fields["proto"]), _parse_pattern(fields["src"]),
                   _parse_pattern(fields["dst"]), _parse_ports(fields["sport"]),
                   _parse_ports(fields["dport"]))

    def to_rule(self) -> Rule | None:
        """The equivalent accept rule, or None when the row is not expressible as one."""
        if self.protocol == "-" * 8:
            proto = None
        elif "-" in self.protocol or int(self.protocol, 2) not in PROTOCOL_NAMES:
            return None
        else:
            proto = int(self.protocol, 2)

        def pc(ports):
            if isinstance(ports, str):
                return None
            lo, hi = ports
            if (lo, hi) == (0, 0xFFFF):
                return ANY_PORT
            if lo == hi:
                return PortEq(lo)
            if hi == 0xFFFF:
                return PortGe(lo)
            if lo == 0:
                return PortLt(hi + 1)
            return PortRange(lo, hi)

        sp, dp = pc(self.src_ports), pc(self.dst_ports)
        if sp is None or dp is None:
            return None
        if proto not in PORTED_PROTOCOLS and not (sp.is_any and dp.is_any):
            return None
        return Rule(Action.ACCEPT, Condition(proto, self.src, self.dst, sp, dp))


def _fmt_proto(t: str) -> str:
    if t == "-" * 8:
        return "any"
    if "-" not in t:
        v = int(t, 2)
        return PROTOCOL_NAMES.get(v, str(v))
    return "b" + t


def _parse_proto(s: str) -> str:
    if s == "any":
        return "-" * 8
    if s.startswith("b"):
        t = s[1:]
        if len(t) != 8 or set(t) - set("01-"):
            raise ValueError(f"bad protocol pattern {s!r}")
        return t
    v = PROTOCOLS[s] if s in PROTOCOLS else int(s)
    if not 0 <= v <= 255:
        raise ValueError(f"bad protocol {s!r}")
    return format(v, "08b")


def _fmt_ports(p) -> str:
    if isinstance(p, str):
        return "b" + p
    lo, hi = p
    if (lo, hi) == (0, 0xFFFF):
        return "any"
    return str(lo) if lo == hi else f"{lo}-{hi}"


def _parse_ports(s: str):
    if s == "any":
        return (0, 0xFFFF)
    if s.startswith("b"):
        t = s[1:]
        if len(t) != 16 or set(t) - set("01-"):
            raise ValueError(f"bad port pattern {s!r}")
        return t
    m = re.fullmatch(r"(\d+)(?:-(\d+))?", s)
    if not m:
        raise ValueError(f"bad port set {s!r}")
    lo = int(m.group(1))
    hi = int(m.group(2) or lo)
    if not lo <= hi <= 0xFFFF:
        raise ValueError(f"bad port set {s!r}")
    return (lo, hi)


def _parse_pattern(s: str) -> AddrPattern:
    v, _, w = s.partition("/")
    return AddrPattern(parse_addr(v), parse_addr(w))


def _ternary_value(t: str) -> tuple[int, int]:
    value = dc = 0
    for ch in t:
        value <<= 1
        dc <<= 1
        if ch == "1":
            value |= 1
        elif ch == "-":
            dc |= 1
    return value, dc


def _ports_from_ternary(t: str):
    value, dc = _ternary_value(t)
    # don't-care bits form a suffix exactly when dc + 1 is a power of two
    if dc & (dc + 1) == 0:
        return (value, value | dc)
    return t


def _merge_intervals(rows: list[GrantRow], attr: str) -> list[GrantRow]:
    groups: dict[tuple, list] = {}
    other = []
    for r in rows:
        ports = getattr(r, attr)
        if isinstance(ports, str):
            other.append(r)
            continue
        key = tuple(getattr(r, a) for a in ("protocol", "src", "dst", "src_ports", "dst_ports")
                    if a != attr)
        groups.setdefault(key, []).append(r)
    out = []
    for members in groups.values():
        members.sort(key=lambda r: getattr(r, attr))
        cur = members[0]
        for r in members[1:]:
            clo, chi = getattr(cur, attr)
            lo, hi = getattr(r, attr)
            if lo <= chi + 1:
                cur = _replace(cur, attr, (clo, max(chi, hi)))
            else:
                out.append(cur)
                cur = r
        out.append(cur)
    return out + other


def _replace(row: GrantRow, attr: str, value) -> GrantRow:
    return replace(row, **{attr: value})


def tabulate_grant(bdd: BDD, layout: BitLayout, f: BoolFn) -> list[GrantRow]:
    """Lossless table of rows whose union is ``f``.

    Rows come from the diagram's paths; rows that differ only by adjacent
    port intervals are merged.
    """
    off = layout.offsets
    rows = []
    for cube in bdd.enumerate_cubes(f):
        def field(name):
            return cube[off[name]:off[name] + FIELD_WIDTHS[name]]

        sv, sdc = _ternary_value(field("src_addr"))
        dv, ddc = _ternary_value(field("dst_addr"))
        rows.append(GrantRow(
            protocol=field("protocol"),
            src=AddrPattern(sv, sdc),
            dst=AddrPattern(dv, ddc),
            src_ports=_ports_from_ternary(field("src_port")),
            dst_ports=_ports_from_ternary(field("dst_port")),
        ))
    rows = _merge_intervals(rows, "dst_ports")
    rows = _merge_intervals(rows, "src_ports")
    rows.sort(key=str)
    return rows


def compile_row(bdd: BDD, layout: BitLayout, row: GrantRow) -> BoolFn:
    fixed = {
        "protocol": _ternary_value(row.protocol),
        "src_addr": (row.src.value, row.src.wildcard & ADDR_MASK),
        "dst_addr": (row.dst.value, row.dst.wildcard & ADDR_MASK),
    }
    ports = {}
    for name, p in (("src_port", row.src_ports), ("dst_port", row.dst_ports)):
        if isinstance(p, str):
            fixed[name] = _ternary_value(p)
        else:
            ports[name] = p
    f = bdd.from_cube(_cube_for(layout, bdd.nvars, fixed))
    for name, (lo, hi) in ports.items():
        f = f & compile_interval(bdd, layout, name, lo, hi)
    return f


def compile_table(bdd: BDD, layout: BitLayout, rows: Iterable[GrantRow]) -> BoolFn:
    return bdd.disjoin(compile_row(bdd, layout, r) for r in rows)


def render_table(rows: Sequence[GrantRow]) -> str:
    return "".join(f"{r}\n" for r in rows)
