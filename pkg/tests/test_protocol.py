import socket
import struct
import threading

import numpy as np
import pytest

from dynacl.engine import Decision, Engine
from dynacl.model import PacketKey
from dynacl.protocol import (
    MAGIC, MAX_UDP_PAYLOAD, Ack, AllowFull, AllowPartial, Client, ClientTimeout, Confirm,
    Delete, Error, FilterServer, Kind, ProtocolError, Reject, Renew, Request, UserDirectory,
    client_confirm, client_request, decode, encode, header_ok, settings_from_env,
)

from conftest import DATA

USERS = {100: 0, 200: 1, 300: 2}
ADDR = ("127.0.0.1", 5555)

R_00 = "accept tcp 0.0.0.0 255.255.255.255 128.128.128.1 0.0.0.0 eq 100"
R_01 = "accept tcp 0.0.0.0 255.255.255.255 128.128.128.1 0.0.0.0 range 0 90"
R_10 = "accept tcp 0.0.0.0 255.255.255.255 128.128.128.2 0.0.0.0 eq 100"


@pytest.fixture
def server(worked_engine):
    srv = FilterServer(worked_engine, USERS, host="127.0.0.1", port=0)
    yield srv
    srv.sock.close()


def reply(srv, msg, addr=ADDR):
    out = srv.handle(encode(msg), addr)
    return None if out is None else decode(out, max_size=MAX_UDP_PAYLOAD)


# -- codec -------------------------------------------------------------------------

SAMPLES = [
    Request(100, 600, (R_00, R_01)), Request(0, 0, ()), AllowFull(2**64 - 1),
    AllowPartial(7, ("proto=tcp src=0.0.0.0/255.255.255.255 dst=1.2.3.4/0.0.0.0 sport=any dport=88-90",)),
    Reject(0, "request conflicts with policy"), Ack(5, "ok"), Ack(5), Error(0, "unknown user"),
    Confirm(1, 2), Delete(2**32 - 1, 3), Renew(4, 5, 6),
]


@pytest.mark.parametrize("m", SAMPLES, ids=lambda m: type(m).__name__)
def test_round_trip(m):
    data = encode(m)
    assert data[:4] == MAGIC and data[4] == 1 and data[5] == int(m.kind)
    assert decode(data) == m


def test_request_layout():
    data = encode(Request(1, 2, ("ab",)))
    assert data == b"DFW1\x01\x01" + struct.pack(">IIHH", 1, 2, 1, 2) + b"ab"


def test_field_out_of_range():
    with pytest.raises(ValueError):
        encode(Confirm(2**32, 1))
    with pytest.raises(ValueError):
        encode(AllowFull(-1))


@pytest.mark.parametrize("data, msg", [
    (b"", "truncated header"),
    (b"DFW2\x01\x05" + bytes(12), "bad magic"),
    (b"DFW1\x02\x05" + bytes(12), "unsupported version"),
    (b"DFW1\x01\x63", "unknown message kind"),
    (b"DFW1\x01\x05" + bytes(11), "truncated"),
    (b"DFW1\x01\x05" + bytes(13), "trailing"),
    (b"DFW1\x01\x08" + bytes(8) + b"\x00\x05ab", "past end"),
    (b"DFW1\x01\x08" + bytes(8) + b"\x00\x02\xff\xfe", "UTF-8"),
    (b"DFW1\x01\x05" + bytes(9000), "exceeds"),
])
def test_decode_errors(data, msg):
    with pytest.raises(ProtocolError, match=msg):
        decode(data)


def test_header_ok():
    assert header_ok(b"DFW1\x01\x00")
    assert not header_ok(b"DFW1\x02\x00")
    assert not header_ok(b"DFW")


# -- dispatch ------------------------------------------------------------------------

def test_request_outcomes(server):
    full = reply(server, Request(100, 600, (R_00,)))
    assert isinstance(full, AllowFull) and full.update_id
    part = reply(server, Request(100, 600, (R_01,)))
    assert isinstance(part, AllowPartial)
    assert part.rows == ("proto=tcp src=0.0.0.0/255.255.255.255 dst=128.128.128.1/0.0.0.0 sport=any dport=88-90",)
    rej = reply(server, Request(200, 600, (R_10,)))
    assert rej == Reject(0, "request conflicts with policy")


def test_confirm_flow_and_ownership(server):
    e = server.engine
    uid = reply(server, Request(100, 600, (R_00,))).update_id
    assert reply(server, Confirm(200, uid)) == Error(uid, "not owner")
    assert e.match(PacketKey.of("tcp", "1.1.1.1", "128.128.128.1", 5, 100)) is Decision.REJECT
    assert reply(server, Confirm(100, uid)) == Ack(uid, "ok")
    assert e.match(PacketKey.of("tcp", "1.1.1.1", "128.128.128.1", 5, 100)) is Decision.ACCEPT
    assert reply(server, Confirm(100, uid)) == Ack(uid, "ok")
    assert reply(server, Renew(100, uid, 60)) == Ack(uid, "ok")
    assert reply(server, Delete(300, uid)) == Error(uid, "not owner")
    assert reply(server, Delete(100, uid)) == Ack(uid, "ok")
    assert reply(server, Delete(100, uid)) == Error(uid, "UnknownId")


def test_confirm_expired(server, clock):
    uid = reply(server, Request(100, 600, (R_00,))).update_id
    clock.advance(server.engine.confirm_window + 1)
    assert reply(server, Confirm(100, uid)) == Error(uid, "Expired")


def test_unknown_user_and_bad_rules(server):
    assert reply(server, Request(999, 600, (R_00,))) == Error(0, "unknown user")
    assert reply(server, Confirm(999, 5)) == Error(5, "unknown user")
    bad = reply(server, Request(100, 600, ("accept tcp nonsense",)))
    assert isinstance(bad, Error) and bad.reason.startswith("bad rule")
    deny = reply(server, Request(100, 600, ("deny tcp any any",)))
    assert "only accept rules" in deny.reason
    assert reply(server, Request(100, 600, ())) == Error(0, "empty request")


def test_unexpected_kind(server):
    assert reply(server, AllowFull(3)) == Error(3, "unexpected message kind")


def test_malformed_datagrams(server):
    out = server.handle(b"DFW1\x01\x05\x00", ADDR)
    assert isinstance(decode(out), Error)
    assert server.handle(b"garbage", ADDR) is None


def test_allowed_sources(worked_engine):
    srv = FilterServer(worked_engine, USERS, host="127.0.0.1", port=0, allowed_sources=["10.0.0.0/8"])
    try:
        assert srv.handle(encode(Request(100, 6, (R_00,))), ("127.0.0.1", 1)) is None
        assert srv.handle(encode(Request(100, 6, (R_00,))), ("10.1.2.3", 1)) is not None
    finally:
        srv.sock.close()


def test_directory_must_match_groups(worked_engine):
    with pytest.raises(ValueError):
        FilterServer(worked_engine, {1: 9}, host="127.0.0.1", port=0)


def test_user_directory_parse():
    d = UserDirectory.parse((DATA / "worked_users.conf").read_text(), 3)
    assert d == USERS
    with pytest.raises(Exception, match="out of range"):
        UserDirectory.parse("user 1 7", 3)
    with pytest.raises(Exception, match="expected"):
        UserDirectory.parse("usr 1 1")


def test_partial_reply_truncated_to_udp_limit():
    # many scattered mandatory denies fragment the grant into thousands of rows
    rng = np.random.default_rng(4)
    hosts = sorted({int(x) for x in rng.integers(0, 1 << 16, size=300)})
    base = "\n".join(f"deny tcp host 10.0.{h >> 8}.{h & 255} any" for h in hosts)
    e = Engine.load(base, "group g 0\n")
    srv = FilterServer(e, {1: 0}, host="127.0.0.1", port=0)
    try:
        out = srv.handle(encode(Request(1, 60, ("accept tcp 10.0.0.0 0.0.255.255 any",))), ADDR)
        assert len(out) <= MAX_UDP_PAYLOAD
        m = decode(out, max_size=MAX_UDP_PAYLOAD)
        assert isinstance(m, AllowPartial) and len(m.rows) > 100
        assert len(encode(AllowPartial(m.update_id, m.rows + m.rows[:1]))) > MAX_UDP_PAYLOAD - 200
    finally:
        srv.sock.close()


def test_settings_from_env():
    s = settings_from_env({"DFW_PORT": "9000", "DFW_BIND": "127.0.0.1", "DFW_CONFIRM_WINDOW": "5",
                           "DFW_PURGE_INTERVAL": "0.5", "DFW_ALLOW_FROM": "10.0.0.0/8,127.0.0.1"})
    assert s == {"port": 9000, "host": "127.0.0.1", "confirm_window": 5.0, "purge_interval": 0.5,
                 "allowed_sources": ["10.0.0.0/8", "127.0.0.1"]}
    assert settings_from_env({}) == {}


# -- fuzz: no crash, no state change ---------------------------------------------------------

def test_fuzzed_datagrams_do_not_mutate(server):
    rng = np.random.default_rng(99)
    e = server.engine
    before = (e.phi_A, len(e.pending), len(e.active))
    valid = [encode(m) for m in SAMPLES if not isinstance(m, Request)]
    for _ in range(2000):
        base = bytearray(valid[int(rng.integers(len(valid)))])
        n = len(base)
        op = rng.integers(3)
        if op == 0:
            base = base[:int(rng.integers(0, n))]
        elif op == 1:
            base.extend(rng.integers(0, 256, size=int(rng.integers(1, 8))).astype(np.uint8).tobytes())
        else:
            base[int(rng.integers(6, n))] ^= 0xFF
        data = bytes(base)
        try:
            decode(data)
            continue  # still well-formed; not a fuzz case
        except ProtocolError:
            pass
        out = server.handle(data, ADDR)
        assert out is None or isinstance(decode(out), Error)
    assert (e.phi_A, len(e.pending), len(e.active)) == before


# -- sockets ------------------------------------------------------------------------

def test_loopback_request_confirm(worked_engine):
    with FilterServer(worked_engine, USERS, host="127.0.0.1", port=0, purge_interval=0.05).start() as srv:
        r = client_request(srv.address, 100, 60, [R_00], timeout=2)
        assert isinstance(r, AllowFull)
        assert client_confirm(srv.address, 100, r.update_id, timeout=2) == Ack(r.update_id, "ok")
        assert worked_engine.match(PacketKey.of("tcp", "1.1.1.1", "128.128.128.1", 5, 100)) is Decision.ACCEPT


def test_client_timeout():
    sink = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sink.bind(("127.0.0.1", 0))
    try:
        with pytest.raises(ClientTimeout):
            Client(sink.getsockname(), timeout=0.05, retries=1).confirm(1, 2)
    finally:
        sink.close()


class LossyProxy:
    """Forwards datagrams to ``target``, dropping the first ``drop`` client packets."""

    def __init__(self, target, drop=1):
        self.target = target
        self.drop = drop
        self.seen = 0
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(("127.0.0.1", 0))
        self.sock.settimeout(0.1)
        self.up = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.up.settimeout(1.0)
        self._stop = threading.Event()
        self.thread = threading.Thread(target=self.run, daemon=True)
        self.thread.start()

    @property
    def address(self):
        return self.sock.getsockname()

    def run(self):
        while not self._stop.is_set():
            try:
                data, client = self.sock.recvfrom(70000)
            except socket.timeout:
                continue
            except OSError:
                return
            self.seen += 1
            if self.seen <= self.drop:
                continue
            self.up.sendto(data, self.target)
            try:
                resp, _ = self.up.recvfrom(70000)
            except socket.timeout:
                continue
            self.sock.sendto(resp, client)

    def close(self):
        self._stop.set()
        self.thread.join()
        self.sock.close()
        self.up.close()


def test_confirm_retried_through_loss(worked_engine):
    with FilterServer(worked_engine, USERS, host="127.0.0.1", port=0).start() as srv:
        r = client_request(srv.address, 100, 60, [R_00])
        proxy = LossyProxy(srv.address, drop=1)
        try:
            ack = Client(proxy.address, timeout=0.3, retries=3).confirm(100, r.update_id)
        finally:
            proxy.close()
        assert ack == Ack(r.update_id, "ok")
        assert proxy.seen == 2
