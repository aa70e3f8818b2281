"""UDP wire protocol for requesting, confirming, renewing and deleting exceptions.

Every datagram starts with the 4-byte magic ``DFW1``, a version byte (1)
and a kind byte.  All integers are big-endian.
"""

from __future__ import annotations

import enum
import ipaddress
import logging
import os
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Iterable, Mapping

from .engine import Engine, Outcome, Status
from .model import AclSyntaxError, parse_exception_list

logger = logging.getLogger(__name__)

MAGIC = b"DFW1"
VERSION = 1
DEFAULT_PORT = 7997
MAX_DATAGRAM = 8192
MAX_UDP_PAYLOAD = 65507

_HEADER = struct.Struct(">4sBB")


class Kind(enum.IntEnum):
    REQUEST = 1
    ALLOW_FULL = 2
    ALLOW_PARTIAL = 3
    REJECT = 4
    CONFIRM = 5
    DELETE = 6
    RENEW = 7
    ACK = 8
    ERROR = 9


class ProtocolError(ValueError):
    """A datagram that cannot be decoded."""


@dataclass(frozen=True)
class Request:
    user_id: int
    expiry_seconds: int
    rules: tuple[str, ...]
    kind = Kind.REQUEST


@dataclass(frozen=True)
class AllowFull:
    update_id: int
    kind = Kind.ALLOW_FULL


@dataclass(frozen=True)
class AllowPartial:
    update_id: int
    rows: tuple[str, ...]
    kind = Kind.ALLOW_PARTIAL


@dataclass(frozen=True)
class Reject:
    update_id: int
    reason: str
    kind = Kind.REJECT


@dataclass(frozen=True)
class Ack:
    update_id: int
    reason: str = ""
    kind = Kind.ACK


@dataclass(frozen=True)
class Error:
    update_id: int
    reason: str
    kind = Kind.ERROR


@dataclass(frozen=True)
class Confirm:
    user_id: int
    update_id: int
    kind = Kind.CONFIRM


@dataclass(frozen=True)
class Delete:
    user_id: int
    update_id: int
    kind = Kind.DELETE


@dataclass(frozen=True)
class Renew:
    user_id: int
    update_id: int
    expiry_seconds: int
    kind = Kind.RENEW


Message = Request | AllowFull | AllowPartial | Reject | Ack | Error | Confirm | Delete | Renew

_REASONED = {Kind.REJECT: Reject, Kind.ACK: Ack, Kind.ERROR: Error}
_OWNED = {Kind.CONFIRM: Confirm, Kind.DELETE: Delete}


def _strings(items: Iterable[str]) -> bytes:
    items = list(items)
    if len(items) > 0xFFFF:
        raise ValueError("too many strings for a 2-byte count")
    out = [struct.pack(">H", len(items))]
    for s in items:
        raw = s.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError("string longer than 65535 bytes")
        out.append(struct.pack(">H", len(raw)) + raw)
    return b"".join(out)


def _reason(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("reason longer than 65535 bytes")
    return struct.pack(">H", len(raw)) + raw


def encode(m: Message) -> bytes:
    try:
        if isinstance(m, Request):
            body = struct.pack(">II", m.user_id, m.expiry_seconds) + _strings(m.rules)
        elif isinstance(m, AllowFull):
            body = struct.pack(">Q", m.update_id)
        elif isinstance(m, AllowPartial):
            body = struct.pack(">Q", m.update_id) + _strings(m.rows)
        elif isinstance(m, (Reject, Ack, Error)):
            body = struct.pack(">Q", m.update_id) + _reason(m.reason)
        elif isinstance(m, (Confirm, Delete)):
            body = struct.pack(">IQ", m.user_id, m.update_id)
        elif isinstance(m, Renew):
            body = struct.pack(">IQI", m.user_id, m.update_id, m.expiry_seconds)
        else:
            raise TypeError(f"not a message: {m!r}")
    except struct.error as e:
        raise ValueError(f"field out of range in {m!r}: {e}") from None
    return _HEADER.pack(MAGIC, VERSION, int(m.kind)) + body


class _Reader:
    def __init__(self, data: bytes, pos: int):
        self.data = data
        self.pos = pos

    def take(self, fmt: str):
        s = struct.Struct(fmt)
        if self.pos + s.size > len(self.data):
            raise ProtocolError("truncated body")
        vals = s.unpack_from(self.data, self.pos)
        self.pos += s.size
        return vals

    def text(self) -> str:
        (n,) = self.take(">H")
        if self.pos + n > len(self.data):
            raise ProtocolError("string runs past end of datagram")
        raw = self.data[self.pos:self.pos + n]
        self.pos += n
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("invalid UTF-8") from None

    def strings(self) -> tuple[str, ...]:
        (count,) = self.take(">H")
        return tuple(self.text() for _ in range(count))

    def done(self):
        if self.pos != len(self.data):
            raise ProtocolError(f"{len(self.data) - self.pos} trailing bytes")


def decode(data: bytes, max_size: int = MAX_DATAGRAM) -> Message:
    if len(data) > max_size:
        raise ProtocolError(f"datagram of {len(data)} bytes exceeds {max_size}")
    if len(data) < _HEADER.size:
        raise ProtocolError("truncated header")
    magic, version, kind = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError("bad magic")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise ProtocolError(f"unknown message kind {kind}") from None
    r = _Reader(data, _HEADER.size)
    if kind is Kind.REQUEST:
        user, expiry = r.take(">II")
        m = Request(user, expiry, r.strings())
    elif kind is Kind.ALLOW_FULL:
        m = AllowFull(*r.take(">Q"))
    elif kind is Kind.ALLOW_PARTIAL:
        (uid,) = r.take(">Q")
        m = AllowPartial(uid, r.strings())
    elif kind in _REASONED:
        (uid,) = r.take(">Q")
        m = _REASONED[kind](uid, r.text())
    elif kind in _OWNED:
        m = _OWNED[kind](*r.take(">IQ"))
    else:
        m = Renew(*r.take(">IQI"))
    r.done()
    return m


def header_ok(data: bytes) -> bool:
    return len(data) >= _HEADER.size and data[:4] == MAGIC and data[4] == VERSION


# --------------------------------------------------------------------------
# server

class UserDirectory(dict):
    """user id -> group id."""

    @classmethod
    def parse(cls, text: str, n_groups: int | None = None) -> UserDirectory:
        d = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            toks = line.split("#", 1)[0].split()
            if not toks:
                continue
            if len(toks) != 3 or toks[0] != "user" or not (toks[1].isdigit() and toks[2].isdigit()):
                raise AclSyntaxError("expected 'user <id> <group-id>'", lineno)
            uid, gid = int(toks[1]), int(toks[2])
            if n_groups is not None and gid >= n_groups:
                raise AclSyntaxError(f"group id {gid} out of range", lineno)
            if uid > 0xFFFFFFFF:
                raise AclSyntaxError(f"user id {uid} does not fit in 32 bits", lineno)
            d[uid] = gid
        return d


REJECT_REASON = "request conflicts with policy"


class FilterServer:
    """Datagram server binding the request/confirm exchange to an :class:`Engine`.

    Datagrams are handled one at a time on the serving thread; a second
    thread runs :meth:`Engine.purge_expired` every ``purge_interval`` seconds.
    """

    def __init__(self, engine: Engine, directory: Mapping[int, int], *,
                 host: str = "0.0.0.0", port: int = DEFAULT_PORT,
                 purge_interval: float = 1.0,
                 allowed_sources: Iterable[str] | None = None):
        for uid, gid in directory.items():
            if not 0 <= gid < engine.hierarchy.n:
                raise ValueError(f"user {uid} mapped to unknown group {gid}")
        self.engine = engine
        self.directory = dict(directory)
        self.purge_interval = purge_interval
        self.allowed = ([ipaddress.ip_network(p, strict=False) for p in allowed_sources]
                        if allowed_sources else None)
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, port))
        self.sock.settimeout(0.2)
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    def _source_allowed(self, addr) -> bool:
        if self.allowed is None:
            return True
        ip = ipaddress.ip_address(addr[0])
        return any(ip in net for net in self.allowed)

    def handle(self, data: bytes, addr) -> bytes | None:
        """Process one datagram; returns the encoded reply or None to drop."""
        log = self.engine.log
        if not self._source_allowed(addr):
            log.append("drop", source=str(addr[0]), reason="source not allowed")
            return None
        try:
            msg = decode(data)
        except ProtocolError as e:
            log.append("malformed", source=str(addr[0]), reason=str(e))
            return encode(Error(0, str(e))) if header_ok(data) else None
        reply = self._dispatch(msg)
        out = encode(reply)
        if len(out) > MAX_UDP_PAYLOAD and isinstance(reply, AllowPartial):
            # keep the longest prefix of rows that fits in one datagram
            size = len(encode(AllowPartial(reply.update_id, ())))
            keep = 0
            for row in reply.rows:
                size += 2 + len(row.encode("utf-8"))
                if size > MAX_UDP_PAYLOAD:
                    break
                keep += 1
            out = encode(AllowPartial(reply.update_id, reply.rows[:keep]))
            self.engine.log.append("truncated", id=reply.update_id, rows=len(reply.rows), sent=keep)
        return out

    def _dispatch(self, msg: Message) -> Message:
        eng = self.engine
        if isinstance(msg, (AllowFull, AllowPartial, Reject, Ack, Error)):
            return Error(getattr(msg, "update_id", 0), "unexpected message kind")
        uid = getattr(msg, "update_id", 0)
        group = self.directory.get(msg.user_id)
        if group is None:
            return Error(uid, "unknown user")
        if isinstance(msg, Request):
            try:
                rules = parse_exception_list("\n".join(msg.rules))
            except AclSyntaxError as e:
                return Error(0, f"bad rule: {e}")
            if not rules:
                return Error(0, "empty request")
            c = eng.classify_request(rules, group, expiry=msg.expiry_seconds, user_id=msg.user_id)
            if c.outcome is Outcome.REJECT_ALL:
                return Reject(0, REJECT_REASON)
            if c.outcome is Outcome.FULL:
                return AllowFull(c.update_id)
            return AllowPartial(c.update_id, tuple(str(r) for r in c.table))

        rec = eng.get_record(msg.update_id)
        if rec is not None and rec.user_id != msg.user_id:
            return Error(uid, "not owner")
        if isinstance(msg, Confirm):
            status = eng.confirm(msg.update_id)
        elif isinstance(msg, Delete):
            status = eng.delete(msg.update_id)
        else:
            status = eng.renew(msg.update_id, msg.expiry_seconds)
        if status is Status.OK:
            return Ack(uid, "ok")
        return Error(uid, status.value)

    def serve_forever(self):
        purger = threading.Thread(target=self._purge_loop, name="dfw-purge", daemon=True)
        purger.start()
        self._threads.append(purger)
        while not self._stop.is_set():
            try:
                data, addr = self.sock.recvfrom(MAX_UDP_PAYLOAD + 1)
            except socket.timeout:
                continue
            except OSError:
                if self._stop.is_set():
                    break
                raise
            try:
                reply = self.handle(data, addr)
            except Exception:  # keep serving; one bad datagram must not stop the firewall
                logger.exception("error handling datagram from %s", addr)
                continue
            if reply is not None:
                self.sock.sendto(reply, addr)

    def _purge_loop(self):
        while not self._stop.wait(self.purge_interval):
            try:
                self.engine.purge_expired()
            except Exception:
                logger.exception("purge failed")

    def start(self) -> FilterServer:
        t = threading.Thread(target=self.serve_forever, name="dfw-serve", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def stop(self):
        self._stop.set()
        for t in self._threads:
            t.join(timeout=2)
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def settings_from_env(env: Mapping[str, str] = os.environ) -> dict:
    """Server settings overridable through ``DFW_*`` environment variables."""
    out = {}
    if "DFW_BIND" in env:
        out["host"] = env["DFW_BIND"]
    if "DFW_PORT" in env:
        out["port"] = int(env["DFW_PORT"])
    if "DFW_CONFIRM_WINDOW" in env:
        out["confirm_window"] = float(env["DFW_CONFIRM_WINDOW"])
    if "DFW_PURGE_INTERVAL" in env:
        out["purge_interval"] = float(env["DFW_PURGE_INTERVAL"])
    if "DFW_USERS" in env:
        out["users"] = env["DFW_USERS"]
    if "DFW_ALLOW_FROM" in env:
        out["allowed_sources"] = env["DFW_ALLOW_FROM"].split(",")
    return out


# --------------------------------------------------------------------------
# client

class ClientTimeout(TimeoutError):
    pass


class Client:
    """Blocking client.  CONFIRM, DELETE and RENEW are retried on timeout; REQUEST is not."""

    def __init__(self, server: tuple[str, int], timeout: float = 2.0, retries: int = 3):
        self.server = server
        self.timeout = timeout
        self.retries = retries

    def _exchange(self, msg: Message, retry: bool) -> Message:
        attempts = 1 + (self.retries if retry else 0)
        want = getattr(msg, "update_id", None)
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
            sock.settimeout(self.timeout)
            payload = encode(msg)
            for attempt in range(attempts):
                sock.sendto(payload, self.server)
                try:
                    while True:
                        data, _ = sock.recvfrom(MAX_UDP_PAYLOAD + 1)
                        try:
                            reply = decode(data, max_size=MAX_UDP_PAYLOAD + 1)
                        except ProtocolError:
                            continue
                        rid = getattr(reply, "update_id", 0)
                        if want is None or rid in (want, 0):
                            return reply
                except socket.timeout:
                    logger.debug("timeout on attempt %d for %s", attempt + 1, msg.kind.name)
        raise ClientTimeout(f"no reply from {self.server[0]}:{self.server[1]}")

    def request(self, user_id: int, expiry_seconds: int, rules: Iterable[str]) -> Message:
        return self._exchange(Request(user_id, expiry_seconds, tuple(rules)), retry=False)

    def confirm(self, user_id: int, update_id: int) -> Message:
        return self._exchange(Confirm(user_id, update_id), retry=True)

    def delete(self, user_id: int, update_id: int) -> Message:
        return self._exchange(Delete(user_id, update_id), retry=True)

    def renew(self, user_id: int, update_id: int, expiry_seconds: int) -> Message:
        return self._exchange(Renew(user_id, update_id, expiry_seconds), retry=True)


def client_request(server, user_id, expiry_seconds, rules, **kw) -> Message:
    return Client(server, **kw).request(user_id, expiry_seconds, rules)


def client_confirm(server, user_id, update_id, **kw) -> Message:
    return Client(server, **kw).confirm(user_id, update_id)


def client_delete(server, user_id, update_id, **kw) -> Message:
    return Client(server, **kw).delete(user_id, update_id)


def client_renew(server, user_id, update_id, expiry_seconds, **kw) -> Message:
    return Client(server, **kw).renew(user_id, update_id, expiry_seconds)
