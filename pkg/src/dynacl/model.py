"""Access-list domain types and the textual rule parser.

Rules follow the Cisco extended access-list layout::

    accept tcp 0.0.0.0 255.255.255.255 128.128.128.15 0.0.0.0 eq 88
    deny 0 1 tcp 0.0.0.0 255.255.255.255 10.0.0.0 0.255.255.255
    deny 2 everything

Deny rules may list group ids before the protocol token.  A deny with no
group ids is mandatory and can never be overridden by an exception.
"""

from __future__ import annotations

import enum
import ipaddress
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Mapping

PROTOCOLS = {"icmp": 1, "tcp": 6, "udp": 17}
PROTOCOL_NAMES = {v: k for k, v in PROTOCOLS.items()}
PORTED_PROTOCOLS = frozenset({6, 17})

MAX_PORT = 0xFFFF
ADDR_MASK = 0xFFFFFFFF


class AclSyntaxError(ValueError):
    """Raised for malformed rule, group or user-directory text."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.message = message
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", col {column}"
            where += ": "
        super().__init__(where + message)


def format_addr(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


def parse_addr(text: str) -> int:
    parts = text.split(".")
    if len(parts) != 4 or not all(p.isdigit() and len(p) <= 3 for p in parts):
        raise ValueError(f"not a dotted quad: {text!r}")
    octets = [int(p) for p in parts]
    if any(o > 255 for o in octets):
        raise ValueError(f"octet out of range in {text!r}")
    return (octets[0] << 24) | (octets[1] << 16) | (octets[2] << 8) | octets[3]


@dataclass(frozen=True)
class PacketKey:
    """The header fields a filtering decision depends on (104 bits)."""

    protocol: int
    src_addr: int
    dst_addr: int
    src_port: int = 0
    dst_port: int = 0

    def __post_init__(self):
        for name, width in (("protocol", 8), ("src_addr", 32), ("dst_addr", 32),
                            ("src_port", 16), ("dst_port", 16)):
            v = getattr(self, name)
            if not 0 <= v < (1 << width):
                raise ValueError(f"{name}={v} does not fit in {width} bits")

    @classmethod
    def of(cls, protocol: str | int, src: str, dst: str, sport: int = 0, dport: int = 0) -> PacketKey:
        """Convenience constructor taking names and dotted quads."""
        if isinstance(protocol, str):
            protocol = PROTOCOLS[protocol]
        return cls(protocol, parse_addr(src), parse_addr(dst), sport, dport)

    def __str__(self):
        proto = PROTOCOL_NAMES.get(self.protocol, str(self.protocol))
        return (f"{proto} {format_addr(self.src_addr)}:{self.src_port} -> "
                f"{format_addr(self.dst_addr)}:{self.dst_port}")


@dataclass(frozen=True)
class AddrPattern:
    """Address value plus Cisco wildcard mask (a 1 bit is ignored)."""

    value: int
    wildcard: int = 0

    def matches(self, addr: int) -> bool:
        return ((addr ^ self.value) & ~self.wildcard & ADDR_MASK) == 0

    @property
    def is_any(self) -> bool:
        return self.wildcard == ADDR_MASK

    def __str__(self):
        return f"{format_addr(self.value)} {format_addr(self.wildcard)}"


ANY_ADDR = AddrPattern(0, ADDR_MASK)


class PortConstraint:
    """Base for port predicates; ``interval`` is the inclusive (lo, hi) or None."""

    interval: tuple[int, int] | None = (0, MAX_PORT)

    def contains(self, port: int) -> bool:
        if self.interval is None:
            return False
        lo, hi = self.interval
        return lo <= port <= hi

    @property
    def is_any(self) -> bool:
        return False


@dataclass(frozen=True)
class PortAny(PortConstraint):
    @property
    def interval(self):
        return (0, MAX_PORT)

    @property
    def is_any(self) -> bool:
        return True

    def __str__(self):
        return ""


@dataclass(frozen=True)
class PortEq(PortConstraint):
    port: int

    @property
    def interval(self):
        return (self.port, self.port)

    def __str__(self):
        return f"eq {self.port}"


@dataclass(frozen=True)
class PortRange(PortConstraint):
    lo: int
    hi: int

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"port range {self.lo} {self.hi} is reversed")

    @property
    def interval(self):
        return (self.lo, self.hi)

    def __str__(self):
        return f"range {self.lo} {self.hi}"


@dataclass(frozen=True)
class PortGe(PortConstraint):
    port: int

    @property
    def interval(self):
        return (self.port, MAX_PORT)

    def __str__(self):
        return f"ge {self.port}"


@dataclass(frozen=True)
class PortLt(PortConstraint):
    port: int

    @property
    def interval(self):
        # lt 0 matches nothing
        return (0, self.port - 1) if self.port > 0 else None

    def __str__(self):
        return f"lt {self.port}"


ANY_PORT = PortAny()


@dataclass(frozen=True)
class Condition:
    """Match condition of one rule.  ``protocol`` None means any protocol."""

    protocol: int | None = None
    src: AddrPattern = ANY_ADDR
    dst: AddrPattern = ANY_ADDR
    src_ports: PortConstraint = ANY_PORT
    dst_ports: PortConstraint = ANY_PORT

    def __post_init__(self):
        if self.protocol not in PORTED_PROTOCOLS:
            if not (self.src_ports.is_any and self.dst_ports.is_any):
                raise ValueError("port constraints need tcp or udp")

    @property
    def is_everything(self) -> bool:
        return (self.protocol is None and self.src.is_any and self.dst.is_any)


EVERYTHING = Condition()


class Action(enum.Enum):
    ACCEPT = "accept"
    DENY = "deny"


@dataclass(frozen=True)
class Rule:
    action: Action
    condition: Condition
    groups: frozenset[int] = frozenset()

    def __post_init__(self):
        if self.action is Action.ACCEPT and self.groups:
            raise ValueError("accept rules carry no group labels")

    @property
    def is_accept(self) -> bool:
        return self.action is Action.ACCEPT

    @property
    def is_mandatory(self) -> bool:
        return self.action is Action.DENY and not self.groups

    def __str__(self):
        return serialize_rule(self)


@dataclass(frozen=True)
class BaseList:
    """Ordered rule list; the first matching rule decides."""

    rules: tuple[Rule, ...] = ()

    def __len__(self):
        return len(self.rules)

    def __iter__(self) -> Iterator[Rule]:
        return iter(self.rules)

    def __getitem__(self, i):
        return self.rules[i]


@dataclass(frozen=True)
class GroupHierarchy:
    """Group containment DAG.  ``contains[p]`` are the groups directly inside p."""

    n: int
    contains: Mapping[int, frozenset[int]] = field(default_factory=dict)
    names: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self):
        for parent, children in self.contains.items():
            for g in (parent, *children):
                if not 0 <= g < self.n:
                    raise ValueError(f"group id {g} out of range")
        # DFS cycle check
        state = {}

        def visit(g, path):
            state[g] = 1
            for c in self.contains.get(g, ()):
                if state.get(c) == 1:
                    raise ValueError(f"containment cycle through groups {path + [c]}")
                if c not in state:
                    visit(c, path + [c])
            state[g] = 2

        for g in range(self.n):
            if g not in state:
                visit(g, [g])

    @cached_property
    def _parents(self) -> dict[int, set[int]]:
        parents: dict[int, set[int]] = {g: set() for g in range(self.n)}
        for p, children in self.contains.items():
            for c in children:
                parents[c].add(p)
        return parents

    def supergroups(self, j: int) -> frozenset[int]:
        """``j`` together with every group that contains it, directly or not."""
        if not 0 <= j < self.n:
            raise ValueError(f"group id {j} out of range (n={self.n})")
        seen = {j}
        stack = [j]
        while stack:
            for p in self._parents[stack.pop()]:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return frozenset(seen)

    @classmethod
    def flat(cls, n: int) -> GroupHierarchy:
        return cls(n)


def supergroups(h: GroupHierarchy, j: int) -> frozenset[int]:
    return h.supergroups(j)


def match_condition(c: Condition, p: PacketKey) -> bool:
    if c.protocol is not None and c.protocol != p.protocol:
        return False
    if not (c.src.matches(p.src_addr) and c.dst.matches(p.dst_addr)):
        return False
    if c.protocol in PORTED_PROTOCOLS:
        return c.src_ports.contains(p.src_port) and c.dst_ports.contains(p.dst_port)
    return True


# --------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(r"\S+")
_LABEL = re.compile(r"^\d+(\.\d+)*:?$")
_ACTIONS = {"accept": Action.ACCEPT, "permit": Action.ACCEPT, "deny": Action.DENY}


class _Tokens:
    def __init__(self, text: str, lineno: int):
        self.toks = [(m.group(), m.start() + 1) for m in _TOKEN.finditer(text)]
        self.i = 0
        self.lineno = lineno
        self.eol_col = len(text) + 1

    def peek(self) -> str | None:
        return self.toks[self.i][0] if self.i < len(self.toks) else None

    def col(self) -> int:
        return self.toks[self.i][1] if self.i < len(self.toks) else self.eol_col

    def next(self, what: str) -> str:
        if self.i >= len(self.toks):
            self.error(f"expected {what}, found end of line")
        tok = self.toks[self.i][0]
        self.i += 1
        return tok

    def error(self, msg: str, back: int = 0):
        i = self.i - back
        col = self.toks[i][1] if 0 <= i < len(self.toks) else self.eol_col
        raise AclSyntaxError(msg, self.lineno, col)


def _parse_port(toks: _Tokens) -> int:
    tok = toks.next("port number")
    if not tok.isdigit() or int(tok) > MAX_PORT:
        toks.error(f"port {tok!r} out of range 0..65535", back=1)
    return int(tok)


def _parse_port_constraint(toks: _Tokens) -> PortConstraint:
    op = toks.next("port operator")
    if op == "eq":
        return PortEq(_parse_port(toks))
    if op == "ge":
        return PortGe(_parse_port(toks))
    if op == "lt":
        return PortLt(_parse_port(toks))
    if op == "range":
        lo = _parse_port(toks)
        hi = _parse_port(toks)
        if lo > hi:
            toks.error(f"port range {lo} {hi} is reversed", back=1)
        return PortRange(lo, hi)
    toks.error(f"unknown port operator {op!r}", back=1)


def _parse_addr_pattern(toks: _Tokens) -> AddrPattern:
    tok = toks.next("address")
    if tok == "any":
        return ANY_ADDR
    if tok == "host":
        tok = toks.next("host address")
        try:
            return AddrPattern(parse_addr(tok), 0)
        except ValueError as e:
            toks.error(str(e), back=1)
    try:
        value = parse_addr(tok)
    except ValueError as e:
        toks.error(str(e), back=1)
    wtok = toks.next("wildcard mask")
    try:
        wildcard = parse_addr(wtok)
    except ValueError as e:
        toks.error(str(e), back=1)
    return AddrPattern(value, wildcard)


def _parse_line(text: str, lineno: int, n_groups: int | None) -> Rule | None:
    toks = _Tokens(text, lineno)
    if toks.peek() is None:
        return None
    if toks.peek() not in _ACTIONS and _LABEL.match(toks.peek()):
        toks.next("label")  # reference number, as in "1:" or "0.2"
    action_tok = toks.next("action")
    if action_tok not in _ACTIONS:
        toks.error(f"expected accept or deny, found {action_tok!r}", back=1)
    action = _ACTIONS[action_tok]

    groups = set()
    while toks.peek() is not None and toks.peek().isdigit():
        gcol = toks.col()
        g = int(toks.next("group id"))
        if action is Action.ACCEPT:
            raise AclSyntaxError("accept rules carry no group labels", lineno, gcol)
        if n_groups is not None and g >= n_groups:
            raise AclSyntaxError(f"group id {g} out of range", lineno, gcol)
        groups.add(g)

    proto_tok = toks.next("protocol")
    if proto_tok == "everything":
        cond = EVERYTHING
    else:
        if proto_tok == "ip":
            proto = None
        elif proto_tok in PROTOCOLS:
            proto = PROTOCOLS[proto_tok]
        else:
            toks.error(f"unknown protocol {proto_tok!r}", back=1)
        ported = proto in PORTED_PROTOCOLS
        src = _parse_addr_pattern(toks)
        sports: PortConstraint = ANY_PORT
        if toks.peek() == "sport":
            if not ported:
                toks.error(f"{proto_tok} has no ports")
            toks.next("sport")
            sports = _parse_port_constraint(toks)
        dst = _parse_addr_pattern(toks)
        dports: PortConstraint = ANY_PORT
        if toks.peek() is not None:
            if not ported:
                toks.error(f"{proto_tok} has no ports")
            if toks.peek() == "dport":
                toks.next("dport")
            dports = _parse_port_constraint(toks)
        cond = Condition(proto, src, dst, sports, dports)
    if toks.peek() is not None:
        toks.error(f"unexpected trailing token {toks.peek()!r}")
    return Rule(action, cond, frozenset(groups))


def _strip_comment(line: str) -> str:
    i = line.find("#")
    return line if i < 0 else line[:i]


def parse_rules(text: str, n_groups: int | None = None) -> list[Rule]:
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        rule = _parse_line(_strip_comment(line), lineno, n_groups)
        if rule is not None:
            rules.append(rule)
    return rules


def parse_acl(text: str, n_groups: int | None = None) -> BaseList:
    """Parse a base access list.

    ``n_groups`` bounds the group ids deny rules may carry; None skips the check.
    """
    return BaseList(tuple(parse_rules(text, n_groups)))


def parse_exception_list(text: str) -> list[Rule]:
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        rule = _parse_line(_strip_comment(line), lineno, None)
        if rule is None:
            continue
        if not rule.is_accept:
            raise AclSyntaxError("exception lists contain only accept rules", lineno, 1)
        rules.append(rule)
    return rules


def serialize_condition(c: Condition) -> str:
    if c == EVERYTHING:
        return "everything"
    proto = "ip" if c.protocol is None else PROTOCOL_NAMES[c.protocol]
    parts = [proto, str(c.src)]
    if not c.src_ports.is_any:
        parts += ["sport", str(c.src_ports)]
    parts.append(str(c.dst))
    if not c.dst_ports.is_any:
        parts.append(str(c.dst_ports))
    return " ".join(parts)


def serialize_rule(r: Rule) -> str:
    head = [r.action.value] + [str(g) for g in sorted(r.groups)]
    return " ".join(head + [serialize_condition(r.condition)])


def serialize_acl(rules: Iterable[Rule]) -> str:
    return "".join(serialize_rule(r) + "\n" for r in rules)


def parse_hierarchy(text: str) -> GroupHierarchy:
    """Parse ``group <name> <id>`` / ``contains <parent> <child>...`` lines."""
    names: dict[int, str] = {}
    edges: dict[int, set[int]] = {}
    pending = []
    for lineno, line in enumerate(text.splitlines(), 1):
        toks = _Tokens(_strip_comment(line), lineno)
        kw = toks.peek()
        if kw is None:
            continue
        toks.next("keyword")
        if kw == "group":
            name = toks.next("group name")
            gtok = toks.next("group id")
            if not gtok.isdigit():
                toks.error(f"bad group id {gtok!r}", back=1)
            gid = int(gtok)
            if gid in names:
                toks.error(f"group id {gid} declared twice", back=1)
            names[gid] = name
        elif kw == "contains":
            ids = []
            while toks.peek() is not None:
                gtok = toks.next("group id")
                if not gtok.isdigit():
                    toks.error(f"bad group id {gtok!r}", back=1)
                ids.append((int(gtok), toks.toks[toks.i - 1][1]))
            if len(ids) < 2:
                toks.error("contains needs a parent and at least one child")
            pending.append((lineno, ids))
            edges.setdefault(ids[0][0], set()).update(g for g, _ in ids[1:])
        else:
            toks.error(f"unknown keyword {kw!r}", back=1)
    n = len(names)
    if sorted(names) != list(range(n)):
        raise AclSyntaxError(f"group ids must be 0..{n - 1} without gaps")
    for lineno, ids in pending:
        for g, col in ids:
            if g >= n:
                raise AclSyntaxError(f"group id {g} out of range", lineno, col)
    try:
        return GroupHierarchy(n, {p: frozenset(c) for p, c in edges.items()}, names)
    except ValueError as e:
        raise AclSyntaxError(str(e)) from None


def serialize_hierarchy(h: GroupHierarchy) -> str:
    lines = [f"group {h.names.get(g, f'g{g}')} {g}" for g in range(h.n)]
    for p in sorted(h.contains):
        if h.contains[p]:
            lines.append("contains " + " ".join(map(str, [p, *sorted(h.contains[p])])))
    return "\n".join(lines) + "\n"
