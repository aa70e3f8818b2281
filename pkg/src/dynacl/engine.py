"""Filtering state under the group-based exception semantics.

The accept function is kept as a single BDD::

    phi_A = phi_B | OR_i (~D_i & E_i)

where phi_B is the base list, D_i the denies group i may not override and
E_i the granted exceptions of group i.  Mutations run under one writer lock
and publish a new :class:`Snapshot`; lookups read whichever snapshot is
current without locking.
"""

from __future__ import annotations

import collections
import enum
import heapq
import json
import logging
import secrets
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, TextIO

import numpy as np

from .bdd import BDD, BoolFn
from .compiler import (
    DEFAULT_LAYOUT, BitLayout, GrantRow, compile_condition, compile_deny_mask,
    compile_list, tabulate_grant,
)
from .model import (
    BaseList, GroupHierarchy, PacketKey, Rule, parse_acl, parse_exception_list,
    parse_hierarchy, serialize_rule,
)
from .oracle import PacketBatch

logger = logging.getLogger(__name__)

DEFAULT_CONFIRM_WINDOW = 30.0
_MASK64 = (1 << 64) - 1


class Decision(enum.Enum):
    ACCEPT = "Accept"
    REJECT = "Reject"


class Outcome(enum.Enum):
    FULL = "Full"
    PARTIAL = "Partial"
    REJECT_ALL = "RejectAll"


class Status(enum.Enum):
    OK = "Ok"
    UNKNOWN_ID = "UnknownId"
    EXPIRED = "Expired"


class RecordState(enum.Enum):
    PENDING = "Pending"
    ACTIVE = "Active"


@dataclass(eq=False)
class UpdateRecord:
    id: int
    group: int
    requested: BoolFn
    granted: BoolFn
    rules: tuple[Rule, ...]
    expiry: float
    enqueued_at: float
    user_id: int | None = None
    created_at: float | None = None
    deadline: float | None = None
    state: RecordState = RecordState.PENDING

    @property
    def rules_text(self) -> list[str]:
        return [serialize_rule(r) for r in self.rules]


@dataclass
class Classification:
    outcome: Outcome
    record: UpdateRecord | None = None
    table: list[GrantRow] = field(default_factory=list)

    @property
    def update_id(self) -> int:
        return self.record.id if self.record else 0


@dataclass(frozen=True)
class Snapshot:
    """Immutable published view used by lookups."""

    phi_A: BoolFn
    epoch: int


class EventLog:
    """Append-only structured log; one JSON object per event."""

    def __init__(self, stream: TextIO | None = None, keep: int = 10000,
                 wallclock: Callable[[], float] = time.time):
        self.stream = stream
        self.records: collections.deque[dict] = collections.deque(maxlen=keep)
        self.wallclock = wallclock
        self._lock = threading.Lock()

    def append(self, event: str, **fields):
        rec = {"ts": self.wallclock(), "event": event, **fields}
        with self._lock:
            self.records.append(rec)
            if self.stream is not None:
                self.stream.write(json.dumps(rec, sort_keys=True) + "\n")
                self.stream.flush()
        logger.info("%s %s", event, fields)


class _IdSource:
    """Unique non-zero 64-bit ids: a counter pushed through a salted bijection."""

    def __init__(self, salt: int | None = None):
        self.salt = secrets.randbits(64) if salt is None else salt & _MASK64
        self.counter = 0

    def next(self) -> int:
        while True:
            self.counter += 1
            v = ((self.counter * 0x9E3779B97F4A7C15) & _MASK64) ^ self.salt
            if v:
                return v


class Engine:
    """Owner of the mutable filtering state."""

    def __init__(self, base: BaseList, hierarchy: GroupHierarchy, *,
                 confirm_window: float = DEFAULT_CONFIRM_WINDOW,
                 clock: Callable[[], float] = time.monotonic,
                 layout: BitLayout = DEFAULT_LAYOUT,
                 log: EventLog | None = None,
                 id_salt: int | None = None,
                 gc_min_nodes: int = 100_000):
        for r in base:
            for g in r.groups:
                if g >= hierarchy.n:
                    raise ValueError(f"group id {g} out of range (n={hierarchy.n})")
        self.base = base
        self.hierarchy = hierarchy
        self.layout = layout
        self.confirm_window = confirm_window
        self.clock = clock
        self.log = log or EventLog()
        self.bdd = BDD(layout.nvars)
        self.gc_min_nodes = gc_min_nodes
        self._gc_mark = 0
        self._ids = _IdSource(id_salt)
        self._lock = threading.RLock()
        self.recompute_count = 0

        self.phi_B = compile_list(self.bdd, layout, base)
        self.deny_mask = [compile_deny_mask(self.bdd, layout, base, j, hierarchy)
                          for j in range(hierarchy.n)]
        self._not_deny = [~d for d in self.deny_mask]
        self.exception = [self.bdd.false] * hierarchy.n

        self.active: dict[int, UpdateRecord] = {}
        self.pending: collections.OrderedDict[int, UpdateRecord] = collections.OrderedDict()
        self._by_group: dict[int, set[int]] = {j: set() for j in range(hierarchy.n)}
        self._deadlines: list[tuple[float, int]] = []
        self._expired_ids: collections.OrderedDict[int, None] = collections.OrderedDict()

        self._snapshot = Snapshot(self.phi_B, 0)
        self.log.append("load", rules=len(base), groups=hierarchy.n)

    @classmethod
    def load(cls, base_text: str, hierarchy_text: str, **kw) -> Engine:
        h = parse_hierarchy(hierarchy_text)
        base = parse_acl(base_text, h.n)
        return cls(base, h, **kw)

    # -- reading ------------------------------------------------------------

    @property
    def snapshot(self) -> Snapshot:
        return self._snapshot

    @property
    def phi_A(self) -> BoolFn:
        return self._snapshot.phi_A

    def match(self, p: PacketKey) -> Decision:
        snap = self._snapshot
        ok = self.bdd.evaluate(snap.phi_A, self.layout.bits_of(p))
        return Decision.ACCEPT if ok else Decision.REJECT

    def lookup_depth(self, p: PacketKey) -> int:
        """Internal nodes visited when matching ``p``."""
        return self.bdd.lookup(self._snapshot.phi_A, self.layout.bits_of(p))[1]

    def match_many(self, batch: PacketBatch, *, with_depth: bool = False):
        """Vectorized :meth:`match`; returns a bool array (and visit counts)."""
        snap = self._snapshot
        bits = self.layout.bit_matrix(*batch.columns())
        values, visits = self.bdd.evaluate_many(snap.phi_A, bits)
        return (values, visits) if with_depth else values

    def get_record(self, update_id: int) -> UpdateRecord | None:
        return self.active.get(update_id) or self.pending.get(update_id)

    def records_for_group(self, j: int) -> list[UpdateRecord]:
        return [self.active[i] for i in sorted(self._by_group[j])]

    # -- mutation helpers -----------------------------------------------------

    def _compose(self) -> BoolFn:
        f = self.phi_B
        for nd, e in zip(self._not_deny, self.exception):
            if not e.is_false:
                f = f | (nd & e)
        return f

    def _recompute(self):
        phi_A = self._compose()
        self.recompute_count += 1
        self._snapshot = Snapshot(phi_A, self._snapshot.epoch + 1)
        live = len(self.bdd)
        if live > max(self.gc_min_nodes, 2 * self._gc_mark):
            self.bdd.collect()
            self._gc_mark = len(self.bdd)

    def _rebuild_exception(self, j: int):
        self.exception[j] = self.bdd.disjoin(self.active[i].granted for i in self._by_group[j])

    def _drop_active(self, rec: UpdateRecord):
        del self.active[rec.id]
        self._by_group[rec.group].discard(rec.id)

    def _remember_expired(self, update_id: int):
        self._expired_ids[update_id] = None
        while len(self._expired_ids) > 4096:
            self._expired_ids.popitem(last=False)

    def eq1_holds(self) -> bool:
        """Recompute phi_A from scratch and compare with the published handle."""
        with self._lock:
            es = [self.bdd.disjoin(self.active[i].granted for i in self._by_group[j])
                  for j in range(self.hierarchy.n)]
            f = self.phi_B
            for j in range(self.hierarchy.n):
                f = f | (~self.deny_mask[j] & es[j])
            return f == self._snapshot.phi_A and es == self.exception

    # -- protocol operations --------------------------------------------------

    def classify_request(self, rules: Sequence[Rule] | str, group: int, *,
                         expiry: float = 600, user_id: int | None = None) -> Classification:
        """Work out how much of an exception request group ``group`` may have.

        Full and Partial results put a pending record in the queue; it takes
        effect only when confirmed.
        """
        if isinstance(rules, str):
            rules = parse_exception_list(rules)
        rules = tuple(rules)
        if any(not r.is_accept for r in rules):
            raise ValueError("exception lists contain only accept rules")
        if not 0 <= group < self.hierarchy.n:
            raise ValueError(f"group id {group} out of range (n={self.hierarchy.n})")
        with self._lock:
            bdd = self.bdd
            phi_u = bdd.disjoin(compile_condition(bdd, self.layout, r.condition) for r in rules)
            granted = phi_u & self._not_deny[group]
            if granted.is_false:
                self.log.append("request", group=group, user=user_id, outcome="RejectAll")
                return Classification(Outcome.REJECT_ALL)
            outcome = Outcome.FULL if granted == phi_u else Outcome.PARTIAL
            now = self.clock()
            rec = UpdateRecord(self._ids.next(), group, phi_u, granted, rules, expiry, now, user_id)
            self.pending[rec.id] = rec
            table = tabulate_grant(bdd, self.layout, granted) if outcome is Outcome.PARTIAL else []
            self.log.append("request", id=rec.id, group=group, user=user_id,
                            outcome=outcome.value, expiry=expiry)
            return Classification(outcome, rec, table)

    def confirm(self, update_id: int) -> Status:
        with self._lock:
            now = self.clock()
            if update_id in self.active:
                # duplicate datagram; already in force
                self.log.append("confirm", id=update_id, outcome="Ok", duplicate=True)
                return Status.OK
            rec = self.pending.get(update_id)
            if rec is None:
                status = Status.EXPIRED if update_id in self._expired_ids else Status.UNKNOWN_ID
                self.log.append("confirm", id=update_id, outcome=status.value)
                return status
            del self.pending[update_id]
            if now - rec.enqueued_at > self.confirm_window:
                self._remember_expired(update_id)
                self.log.append("confirm", id=update_id, outcome="Expired")
                return Status.EXPIRED
            rec.state = RecordState.ACTIVE
            rec.created_at = now
            rec.deadline = now + rec.expiry
            self.active[rec.id] = rec
            self._by_group[rec.group].add(rec.id)
            heapq.heappush(self._deadlines, (rec.deadline, rec.id))
            self.exception[rec.group] = self.exception[rec.group] | rec.granted
            self._recompute()
            self.log.append("confirm", id=update_id, group=rec.group, outcome="Ok")
            return Status.OK

    def delete(self, update_id: int) -> Status:
        with self._lock:
            rec = self.active.get(update_id)
            if rec is None:
                self.log.append("delete", id=update_id, outcome="UnknownId")
                return Status.UNKNOWN_ID
            self._drop_active(rec)
            self._rebuild_exception(rec.group)
            self._recompute()
            self.log.append("delete", id=update_id, group=rec.group, outcome="Ok")
            return Status.OK

    def renew(self, update_id: int, new_expiry: float) -> Status:
        with self._lock:
            rec = self.active.get(update_id)
            if rec is None:
                self.log.append("renew", id=update_id, outcome="UnknownId")
                return Status.UNKNOWN_ID
            rec.expiry = new_expiry
            rec.deadline = self.clock() + new_expiry
            heapq.heappush(self._deadlines, (rec.deadline, rec.id))
            self.log.append("renew", id=update_id, expiry=new_expiry, outcome="Ok")
            return Status.OK

    def purge_expired(self, now: float | None = None) -> int:
        """Delete active records past their deadline and stale pending requests.

        All expired actives are removed with a single phi_A recompute.
        """
        with self._lock:
            if now is None:
                now = self.clock()
            touched = set()
            removed = 0
            while self._deadlines and self._deadlines[0][0] <= now:
                deadline, i = heapq.heappop(self._deadlines)
                rec = self.active.get(i)
                if rec is None or rec.deadline != deadline:
                    continue  # stale heap entry from delete or renew
                self._drop_active(rec)
                touched.add(rec.group)
                removed += 1
            while self.pending:
                i, rec = next(iter(self.pending.items()))
                if now - rec.enqueued_at <= self.confirm_window:
                    break
                del self.pending[i]
                self._remember_expired(i)
                removed += 1
            for j in touched:
                self._rebuild_exception(j)
            if touched:
                self._recompute()
            if removed:
                self.log.append("purge", removed=removed, groups=sorted(touched))
            return removed

    # -- inspection -----------------------------------------------------------

    def dump(self) -> dict:
        with self._lock:
            return {
                "rules": len(self.base),
                "groups": self.hierarchy.n,
                "phi_B_nodes": self.bdd.node_count(self.phi_B),
                "phi_A_nodes": self.bdd.node_count(self.phi_A),
                "deny_mask_nodes": [self.bdd.node_count(d) for d in self.deny_mask],
                "exception_nodes": [self.bdd.node_count(e) for e in self.exception],
                "store_nodes": len(self.bdd),
                "recomputes": self.recompute_count,
                "cache_hits": self.bdd.cache_hits,
                "pending": len(self.pending),
                "active": [
                    {"id": r.id, "group": r.group, "user": r.user_id, "expiry": r.expiry,
                     "deadline": r.deadline, "rules": r.rules_text}
                    for r in self.active.values()
                ],
            }


def load(base_text: str, hierarchy_text: str, **kw) -> Engine:
    return Engine.load(base_text, hierarchy_text, **kw)


def apply_exceptions(engine: Engine, lists: Iterable[tuple[int, Sequence[Rule]]],
                     expiry: float = 3600) -> list[int]:
    """Request and immediately confirm each (group, rules) pair; returns the ids granted."""
    ids = []
    for group, rules in lists:
        c = engine.classify_request(rules, group, expiry=expiry)
        if c.record is not None and engine.confirm(c.record.id) is Status.OK:
            ids.append(c.record.id)
    return ids
