"""Naive linear-scan implementation of the group-based exception semantics.

This is the ground truth the BDD engine is tested against.  It shares only
the domain types with the rest of the package: matching is reimplemented
here on purpose.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .model import (
    BaseList, GroupHierarchy, PacketKey, PortAny, PortConstraint, PortEq, PortGe,
    PortLt, PortRange, Rule,
)


@dataclass
class OracleConfig:
    base: BaseList
    hierarchy: GroupHierarchy
    exceptions: Mapping[int, Sequence[Rule]] = field(default_factory=dict)


def _octets(a: int) -> tuple[int, int, int, int]:
    return (a >> 24) & 255, (a >> 16) & 255, (a >> 8) & 255, a & 255


def _addr_ok(pattern, addr: int) -> bool:
    for v, w, a in zip(_octets(pattern.value), _octets(pattern.wildcard), _octets(addr)):
        for bit in range(8):
            if (w >> bit) & 1:
                continue
            if ((v >> bit) & 1) != ((a >> bit) & 1):
                return False
    return True


def _port_ok(pc: PortConstraint, port: int) -> bool:
    if isinstance(pc, PortAny):
        return True
    if isinstance(pc, PortEq):
        return port == pc.port
    if isinstance(pc, PortRange):
        return pc.lo <= port <= pc.hi
    if isinstance(pc, PortGe):
        return port >= pc.port
    if isinstance(pc, PortLt):
        return port < pc.port
    raise TypeError(pc)


def rule_matches(rule: Rule, p: PacketKey) -> bool:
    c = rule.condition
    if c.protocol is not None and c.protocol != p.protocol:
        return False
    if not _addr_ok(c.src, p.src_addr) or not _addr_ok(c.dst, p.dst_addr):
        return False
    if c.protocol in (6, 17):
        return _port_ok(c.src_ports, p.src_port) and _port_ok(c.dst_ports, p.dst_port)
    return True


def first_match(base: BaseList | Sequence[Rule], p: PacketKey) -> int | None:
    """Index of the first rule matching ``p``, or None."""
    for i, rule in enumerate(base):
        if rule_matches(rule, p):
            return i
    return None


def oracle_base_accept(base: BaseList | Sequence[Rule], p: PacketKey) -> bool:
    i = first_match(base, p)
    return i is not None and base[i].is_accept


def _ancestors(h: GroupHierarchy, j: int) -> set[int]:
    # independent of GroupHierarchy.supergroups: fixpoint over the edge list
    up = {j}
    changed = True
    while changed:
        changed = False
        for parent, children in h.contains.items():
            if parent not in up and up & set(children):
                up.add(parent)
                changed = True
    return up


def blocking_denies(cfg: OracleConfig, j: int, p: PacketKey) -> list[int]:
    """Indexes of base deny rules matching ``p`` that group ``j`` cannot override."""
    ups = _ancestors(cfg.hierarchy, j)
    return [i for i, r in enumerate(cfg.base)
            if not r.is_accept and rule_matches(r, p) and not (set(r.groups) & ups)]


def granting_exception(cfg: OracleConfig, p: PacketKey) -> tuple[int, int] | None:
    """(group, index) of the first exception rule that lets ``p`` through, if any."""
    for j in sorted(cfg.exceptions):
        for k, rule in enumerate(cfg.exceptions[j]):
            if rule_matches(rule, p) and not blocking_denies(cfg, j, p):
                return j, k
    return None


def oracle_accept(cfg: OracleConfig, p: PacketKey) -> bool:
    return oracle_base_accept(cfg.base, p) or granting_exception(cfg, p) is not None


# --------------------------------------------------------------------------
# vectorized form for bulk equivalence runs

def _addr_mask(pattern, addrs: np.ndarray) -> np.ndarray:
    care = np.uint32(~pattern.wildcard & 0xFFFFFFFF)
    return (addrs & care) == np.uint32(pattern.value & care)


def _port_mask(pc: PortConstraint, ports: np.ndarray) -> np.ndarray:
    if isinstance(pc, PortAny):
        return np.ones(len(ports), dtype=bool)
    if isinstance(pc, PortEq):
        return ports == pc.port
    if isinstance(pc, PortRange):
        return (ports >= pc.lo) & (ports <= pc.hi)
    if isinstance(pc, PortGe):
        return ports >= pc.port
    if isinstance(pc, PortLt):
        return ports < pc.port
    raise TypeError(pc)


@dataclass
class PacketBatch:
    """Column arrays of header fields."""

    protocol: np.ndarray
    src_addr: np.ndarray
    dst_addr: np.ndarray
    src_port: np.ndarray
    dst_port: np.ndarray

    def __post_init__(self):
        self.protocol = np.asarray(self.protocol, dtype=np.int64)
        self.src_addr = np.asarray(self.src_addr, dtype=np.uint32)
        self.dst_addr = np.asarray(self.dst_addr, dtype=np.uint32)
        self.src_port = np.asarray(self.src_port, dtype=np.int64)
        self.dst_port = np.asarray(self.dst_port, dtype=np.int64)

    def __len__(self):
        return len(self.protocol)

    def __getitem__(self, i) -> PacketKey:
        return PacketKey(int(self.protocol[i]), int(self.src_addr[i]), int(self.dst_addr[i]),
                         int(self.src_port[i]), int(self.dst_port[i]))

    @classmethod
    def from_packets(cls, packets: Sequence[PacketKey]) -> PacketBatch:
        return cls([p.protocol for p in packets], [p.src_addr for p in packets],
                   [p.dst_addr for p in packets], [p.src_port for p in packets],
                   [p.dst_port for p in packets])

    def columns(self):
        return self.protocol, self.src_addr, self.dst_addr, self.src_port, self.dst_port


def rule_mask(rule: Rule, b: PacketBatch) -> np.ndarray:
    c = rule.condition
    m = _addr_mask(c.src, b.src_addr) & _addr_mask(c.dst, b.dst_addr)
    if c.protocol is not None:
        m &= b.protocol == c.protocol
        if c.protocol in (6, 17):
            m &= _port_mask(c.src_ports, b.src_port) & _port_mask(c.dst_ports, b.dst_port)
    return m


def oracle_base_accept_many(base: BaseList | Sequence[Rule], b: PacketBatch) -> np.ndarray:
    decided = np.zeros(len(b), dtype=bool)
    accept = np.zeros(len(b), dtype=bool)
    for rule in base:
        hit = rule_mask(rule, b) & ~decided
        if rule.is_accept:
            accept |= hit
        decided |= hit
    return accept


def oracle_accept_many(cfg: OracleConfig, b: PacketBatch) -> np.ndarray:
    accept = oracle_base_accept_many(cfg.base, b)
    deny_masks = [(set(r.groups), rule_mask(r, b)) for r in cfg.base if not r.is_accept]
    for j, rules in cfg.exceptions.items():
        if not rules:
            continue
        ups = _ancestors(cfg.hierarchy, j)
        wanted = np.zeros(len(b), dtype=bool)
        for r in rules:
            wanted |= rule_mask(r, b)
        blocked = np.zeros(len(b), dtype=bool)
        for labels, m in deny_masks:
            if not labels & ups:
                blocked |= m
        accept |= wanted & ~blocked
    return accept
