import re
import subprocess
import sys

import pytest

from dynacl.cli import main
from dynacl.engine import Engine
from dynacl.protocol import FilterServer

from conftest import DATA

ACL = str(DATA / "worked_base.acl")
GROUPS = str(DATA / "worked_groups.conf")
USERS = str(DATA / "worked_users.conf")


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_check(capsys):
    code, out, _ = run(capsys, "check", "--acl", ACL, "--groups", GROUPS)
    assert code == 0
    assert "9 rules (3 accept, 3 mandatory deny, 3 flexible deny)" in out
    assert "group 0 (staff): 2 overridable deny rules" in out


def test_check_reports_location(capsys, tmp_path):
    bad = tmp_path / "bad.acl"
    bad.write_text("accept tcp any any\naccept tcp 1.2.3 0.0.0.0 any\n")
    code, _, err = run(capsys, "check", "--acl", str(bad))
    assert code == 2
    assert re.search(r"bad\.acl:2:12: .*dotted quad", err)


def test_missing_file(capsys, tmp_path):
    code, _, err = run(capsys, "check", "--acl", str(tmp_path / "nope"))
    assert code == 2 and "nope" in err


def test_usage_error(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["query", "--acl", ACL])
    assert ei.value.code == 1
    with pytest.raises(SystemExit) as ei:
        main([])
    assert ei.value.code == 1


def test_query_mandatory_reject(capsys):
    code, out, _ = run(capsys, "query", "--acl", ACL, "--groups", GROUPS,
                       "--proto", "tcp", "--dst", "128.128.128.128", "--dport", "9")
    assert code == 0
    assert out.startswith("Reject")
    assert "via base rule 5 (mandatory)" in out


def test_query_base_accept(capsys):
    code, out, _ = run(capsys, "query", "--acl", ACL, "--groups", GROUPS,
                       "--proto", "tcp", "--dst", "128.128.128.15", "--dport", "88")
    assert out.startswith("Accept") and "via base rule 1" in out


def test_query_labelled_deny(capsys):
    code, out, _ = run(capsys, "query", "--acl", ACL, "--groups", GROUPS, "--proto", "udp",
                       "--dst", "10.0.0.1")
    assert out.startswith("Reject") and "via base rule 9 (labelled [2])" in out


def test_query_default_reject(capsys, tmp_path):
    acl = tmp_path / "one.acl"
    acl.write_text("accept tcp any any\n")
    code, out, _ = run(capsys, "query", "--acl", str(acl), "--proto", "udp", "--dst", "10.0.0.1")
    assert out.startswith("Reject") and "no rule matched" in out


def test_query_with_exceptions(capsys):
    exc = str(DATA / "worked_exceptions.acl")
    code, out, _ = run(capsys, "query", "--acl", ACL, "--groups", GROUPS, "--exceptions", f"0={exc}",
                       "--proto", "tcp", "--dst", "128.128.128.1", "--dport", "100")
    assert code == 0
    assert out.startswith("Accept")
    assert "via exception of group 0" in out
    assert "overrides deny rule 6 labelled [0]" in out
    assert "overrides deny rule 9 labelled [2]" in out


def test_query_bad_exceptions_spec(capsys):
    code, _, err = run(capsys, "query", "--acl", ACL, "--groups", GROUPS, "--exceptions", "x",
                       "--proto", "tcp", "--dst", "1.1.1.1")
    assert code == 2 and "GROUP=FILE" in err
    code, _, err = run(capsys, "query", "--acl", ACL, "--groups", GROUPS, "--proto", "gre", "--dst", "1.1.1.1")
    assert code == 2 and "unknown protocol" in err


def test_dump(capsys, tmp_path):
    dot = tmp_path / "phi.dot"
    code, out, _ = run(capsys, "dump", "--acl", ACL, "--groups", GROUPS, "--dot", str(dot))
    assert code == 0 and '"rules": 9' in out
    assert dot.read_text().startswith("digraph")


@pytest.fixture
def live_server(worked_base_text, worked_groups_text):
    e = Engine.load(worked_base_text, worked_groups_text)
    with FilterServer(e, {100: 0, 200: 1, 300: 2}, host="127.0.0.1", port=0).start() as srv:
        host, port = srv.address
        yield e, f"{host}:{port}"


def test_request_confirm_delete(capsys, live_server):
    engine, addr = live_server
    rule = "accept tcp any host 128.128.128.1 eq 100"
    code, out, _ = run(capsys, "request", "--server", addr, "--user", "100", "--rule", rule)
    assert code == 0 and out.startswith("ALLOW_FULL")
    uid = out.split()[-1]
    code, out, _ = run(capsys, "confirm", "--server", addr, "--user", "100", "--id", uid)
    assert code == 0 and out.startswith("ACK")
    assert len(engine.active) == 1
    code, out, _ = run(capsys, "renew", "--server", addr, "--user", "100", "--id", uid, "--expiry", "60")
    assert code == 0
    code, out, _ = run(capsys, "delete", "--server", addr, "--user", "100", "--id", uid)
    assert code == 0 and not engine.active
    code, out, _ = run(capsys, "delete", "--server", addr, "--user", "100", "--id", uid)
    assert code == 4 and "UnknownId" in out


def test_request_partial_and_reject(capsys, live_server):
    _, addr = live_server
    exc = str(DATA / "worked_exceptions.acl")
    code, out, _ = run(capsys, "request", "--server", addr, "--user", "100",
                       "--rule", "accept tcp any host 128.128.128.1 range 0 90")
    assert code == 0 and "ALLOW_PARTIAL" in out and "dport=88-90" in out
    code, out, _ = run(capsys, "request", "--server", addr, "--user", "200",
                       "--rule", "accept tcp any host 128.128.128.2 eq 100")
    assert code == 0 and out.startswith("REJECT")
    code, out, _ = run(capsys, "request", "--server", addr, "--user", "300", "--rules-file", exc,
                       "--confirm")
    assert code == 0


def test_request_needs_rules(capsys):
    code, _, err = run(capsys, "request", "--user", "1")
    assert code == 2


def test_timeout_exit_code(capsys):
    import socket
    s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    s.bind(("127.0.0.1", 0))
    try:
        host, port = s.getsockname()
        code, _, err = run(capsys, "confirm", "--server", f"{host}:{port}", "--user", "1",
                           "--id", "5", "--timeout", "0.05")
    finally:
        s.close()
    assert code == 3 and "timeout" in err


def test_serve_subprocess(tmp_path):
    log = tmp_path / "events.jsonl"
    proc = subprocess.Popen(
        [sys.executable, "-m", "dynacl", "serve", "--acl", ACL, "--groups", GROUPS, "--users", USERS,
         "--bind", "127.0.0.1", "--port", "0", "--log", str(log)],
        stdout=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline()
        m = re.search(r"on 127\.0\.0\.1:(\d+)", line)
        assert m, line
        code = main(["request", "--server", f"127.0.0.1:{m.group(1)}", "--user", "300",
                     "--rule", "accept icmp any host 128.128.128.130", "--confirm"])
        assert code == 0
    finally:
        proc.terminate()
        proc.wait(timeout=5)
    assert '"event": "confirm"' in log.read_text()


def test_confirm_stale_id_prints_expired(capsys, worked_base_text, worked_groups_text):
    from conftest import FakeClock
    clock = FakeClock()
    e = Engine.load(worked_base_text, worked_groups_text, clock=clock)
    with FilterServer(e, {100: 0}, host="127.0.0.1", port=0, purge_interval=0.02).start() as srv:
        addr = "%s:%d" % srv.address
        code, out, _ = run(capsys, "request", "--server", addr, "--user", "100",
                           "--rule", "accept tcp any host 128.128.128.1 eq 100")
        uid = out.split()[-1]
        clock.advance(e.confirm_window + 1)
        code, out, _ = run(capsys, "confirm", "--server", addr, "--user", "100", "--id", uid)
    assert code == 4
    assert out.strip() == "ERROR Expired"
