"""Command line entry point: ``dynacl <subcommand> ...``.

Exit codes: 0 success, 1 usage, 2 parse/config error, 3 network timeout,
4 the server answered with ERROR.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import oracle
from .engine import Decision, Engine, EventLog, apply_exceptions
from .model import (
    PROTOCOLS, AclSyntaxError, GroupHierarchy, PacketKey, parse_acl, parse_addr,
    parse_exception_list, parse_hierarchy, serialize_rule,
)
from .protocol import (
    DEFAULT_PORT, Ack, AllowFull, AllowPartial, Client, ClientTimeout, Error,
    FilterServer, Reject, UserDirectory, settings_from_env,
)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_TIMEOUT, EXIT_SERVER_ERROR = range(5)


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read(path: str) -> str:
    try:
        return Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror or e}") from None


def _located(path: str, e: AclSyntaxError) -> ConfigError:
    where = path
    if e.line is not None:
        where += f":{e.line}"
        if e.column is not None:
            where += f":{e.column}"
    return ConfigError(f"{where}: {e.message}")


def _load_hierarchy(path: str | None) -> GroupHierarchy:
    if path is None:
        return GroupHierarchy(0)
    try:
        return parse_hierarchy(_read(path))
    except AclSyntaxError as e:
        raise _located(path, e) from None


def _load_base(path: str, h: GroupHierarchy):
    try:
        return parse_acl(_read(path), h.n)
    except AclSyntaxError as e:
        raise _located(path, e) from None


def _load_exceptions(specs: list[str], h: GroupHierarchy):
    lists = []
    for item in specs or []:
        group, sep, path = item.partition("=")
        if not sep or not group.isdigit():
            raise ConfigError(f"--exceptions expects GROUP=FILE, got {item!r}")
        if int(group) >= h.n:
            raise ConfigError(f"group id {group} out of range")
        try:
            lists.append((int(group), parse_exception_list(_read(path))))
        except AclSyntaxError as e:
            raise _located(path, e) from None
    return lists


def _offline_engine(args) -> tuple[Engine, list]:
    h = _load_hierarchy(args.groups)
    base = _load_base(args.acl, h) if args.acl else parse_acl("")
    lists = _load_exceptions(args.exceptions, h)
    engine = Engine(base, h, clock=lambda: 0.0, id_salt=0)
    ids = []
    for group, rules in lists:
        # each rule is its own update so explanations can name it
        for rule in rules:
            got = apply_exceptions(engine, [(group, [rule])])
            ids.append((group, rule, got[0] if got else None))
    return engine, ids


def _server_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        return text, DEFAULT_PORT
    return host, int(port)


# -- subcommands ---------------------------------------------------------------

def cmd_check(args) -> int:
    h = _load_hierarchy(args.groups)
    base = _load_base(args.acl, h)
    print(f"{args.acl}: {len(base)} rules "
          f"({sum(r.is_accept for r in base)} accept, "
          f"{sum(r.is_mandatory for r in base)} mandatory deny, "
          f"{sum(not r.is_accept and not r.is_mandatory for r in base)} flexible deny)")
    for j in range(h.n):
        ups = h.supergroups(j)
        n = sum(1 for r in base if not r.is_accept and r.groups & ups)
        print(f"  group {j} ({h.names.get(j, '?')}): {n} overridable deny rules")
    return EXIT_OK


def _packet(args) -> PacketKey:
    proto = args.proto
    if proto in PROTOCOLS:
        proto = PROTOCOLS[proto]
    elif proto.isdigit() and int(proto) <= 255:
        proto = int(proto)
    else:
        raise ConfigError(f"unknown protocol {args.proto!r}")
    try:
        return PacketKey(proto, parse_addr(args.src), parse_addr(args.dst), args.sport, args.dport)
    except ValueError as e:
        raise ConfigError(f"malformed packet: {e}") from None


def cmd_query(args) -> int:
    engine, granted = _offline_engine(args)
    p = _packet(args)
    decision = engine.match(p)
    cfg = oracle.OracleConfig(engine.base, engine.hierarchy, {})
    for group, rule, uid in granted:
        if uid is not None:
            cfg.exceptions.setdefault(group, []).append(rule)
    expected = oracle.oracle_accept(cfg, p)
    if expected != (decision is Decision.ACCEPT):
        print(f"internal error: diagram and scan disagree on {p}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{decision.value}  {p}")
    i = oracle.first_match(engine.base, p)
    if i is not None and engine.base[i].is_accept:
        print(f"  via base rule {i + 1}: {serialize_rule(engine.base[i])}")
        return EXIT_OK
    hit = oracle.granting_exception(cfg, p)
    if decision is Decision.ACCEPT and hit is not None:
        group, k = hit
        rule = cfg.exceptions[group][k]
        uid = next(u for g, r, u in granted if g == group and r == rule and u is not None)
        print(f"  via exception of group {group}, update id {uid:#018x}: {serialize_rule(rule)}")
        overridden = [(n + 1, sorted(engine.base[n].groups)) for n in range(len(engine.base))
                      if not engine.base[n].is_accept and oracle.rule_matches(engine.base[n], p)]
        for n, labels in overridden:
            print(f"  overrides deny rule {n} labelled {labels}")
        return EXIT_OK
    if i is None:
        print("  no rule matched (default reject)")
    else:
        rule = engine.base[i]
        kind = "mandatory" if rule.is_mandatory else f"labelled {sorted(rule.groups)}"
        print(f"  via base rule {i + 1} ({kind}): {serialize_rule(rule)}")
    return EXIT_OK


def cmd_dump(args) -> int:
    engine, _ = _offline_engine(args)
    print(json.dumps(engine.dump(), indent=2, sort_keys=True))
    if args.dot:
        Path(args.dot).write_text(engine.bdd.to_dot(engine.phi_A, engine.layout.var_names()))
    return EXIT_OK


def cmd_serve(args) -> int:
    env = settings_from_env()
    h = _load_hierarchy(args.groups)
    base = _load_base(args.acl, h)
    users_path = args.users or env.get("users")
    if users_path is None:
        raise ConfigError("--users is required (or set DFW_USERS)")
    try:
        users = UserDirectory.parse(_read(users_path), h.n)
    except AclSyntaxError as e:
        raise _located(users_path, e) from None
    log_stream = open(args.log, "a", encoding="utf-8") if args.log else None
    engine = Engine(base, h, log=EventLog(log_stream),
                    confirm_window=args.confirm_window or env.get("confirm_window", 30.0))
    server = FilterServer(
        engine, users,
        host=args.bind or env.get("host", "0.0.0.0"),
        port=args.port if args.port is not None else env.get("port", DEFAULT_PORT),
        purge_interval=args.purge_interval or env.get("purge_interval", 1.0),
        allowed_sources=args.allow_from or env.get("allowed_sources"),
    )
    host, port = server.address
    print(f"serving {len(base)} rules, {h.n} groups, {len(users)} users on {host}:{port}",
          flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        if log_stream:
            log_stream.close()
    return EXIT_OK


def _render(reply) -> int:
    if isinstance(reply, AllowFull):
        print(f"ALLOW_FULL update id {reply.update_id:#018x}")
    elif isinstance(reply, AllowPartial):
        print(f"ALLOW_PARTIAL update id {reply.update_id:#018x}; grantable:")
        for row in reply.rows:
            print(f"  {row}")
    elif isinstance(reply, Reject):
        print(f"REJECT {reply.reason}")
    elif isinstance(reply, Ack):
        print(f"ACK {reply.update_id:#018x}")
    elif isinstance(reply, Error):
        print(f"ERROR {reply.reason}")
        return EXIT_SERVER_ERROR
    return EXIT_OK


def _client(args) -> Client:
    return Client(_server_addr(args.server), timeout=args.timeout)


def cmd_request(args) -> int:
    rules = list(args.rule or [])
    if args.rules_file:
        try:
            parsed = parse_exception_list(_read(args.rules_file))
        except AclSyntaxError as e:
            raise _located(args.rules_file, e) from None
        rules += [serialize_rule(r) for r in parsed]
    if not rules:
        raise ConfigError("no rules given (use --rule or --rules-file)")
    client = _client(args)
    reply = client.request(args.user, args.expiry, rules)
    status = _render(reply)
    if args.confirm and isinstance(reply, AllowFull):
        status = _render(client.confirm(args.user, reply.update_id))
    return status


def cmd_confirm(args) -> int:
    return _render(_client(args).confirm(args.user, args.id))


def cmd_delete(args) -> int:
    return _render(_client(args).delete(args.user, args.id))


def cmd_renew(args) -> int:
    return _render(_client(args).renew(args.user, args.id, args.expiry))


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dynacl", description="Dynamic access-list filter and client.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def state_args(sp, acl_required):
        sp.add_argument("--acl", required=acl_required, help="base access list file")
        sp.add_argument("--groups", help="group hierarchy file (default: no groups)")

    sp = sub.add_parser("check", help="validate a base list and group hierarchy")
    state_args(sp, True)
    sp.set_defaults(func=cmd_check)

    for name, func, helptext in (("query", cmd_query, "decide one packet offline"),
                                 ("dump", cmd_dump, "print state statistics")):
        sp = sub.add_parser(name, help=helptext)
        state_args(sp, False)
        sp.add_argument("--exceptions", action="append", metavar="GROUP=FILE",
                        help="confirmed exception list for a group (repeatable)")
        sp.set_defaults(func=func)
        if name == "query":
            sp.add_argument("--proto", required=True)
            sp.add_argument("--src", default="0.0.0.0")
            sp.add_argument("--dst", required=True)
            sp.add_argument("--sport", type=int, default=0)
            sp.add_argument("--dport", type=int, default=0)
        else:
            sp.add_argument("--dot", help="write phi_A as a DOT graph to this file")

    sp = sub.add_parser("serve", help="run the UDP update server")
    state_args(sp, True)
    sp.add_argument("--users", help="user directory file (env DFW_USERS)")
    sp.add_argument("--bind", help="bind address (env DFW_BIND, default 0.0.0.0)")
    sp.add_argument("--port", type=int, help=f"UDP port (env DFW_PORT, default {DEFAULT_PORT})")
    sp.add_argument("--confirm-window", type=float,
                    help="seconds to wait for CONFIRM (env DFW_CONFIRM_WINDOW, default 30)")
    sp.add_argument("--purge-interval", type=float,
                    help="seconds between expiry sweeps (env DFW_PURGE_INTERVAL, default 1)")
    sp.add_argument("--allow-from", action="append", metavar="PREFIX",
                    help="only accept datagrams from this prefix (repeatable; env DFW_ALLOW_FROM)")
    sp.add_argument("--log", help="append JSON event records to this file")
    sp.set_defaults(func=cmd_serve)

    def client_args(sp):
        sp.add_argument("--server", default=f"127.0.0.1:{DEFAULT_PORT}", help="HOST:PORT")
        sp.add_argument("--user", type=int, required=True)
        sp.add_argument("--timeout", type=float, default=2.0)

    def update_id(text):
        return int(text, 0)

    sp = sub.add_parser("request", help="ask for an exception")
    client_args(sp)
    sp.add_argument("--rule", action="append", help="accept rule text (repeatable)")
    sp.add_argument("--rules-file")
    sp.add_argument("--expiry", type=int, default=600, help="seconds (default 600)")
    sp.add_argument("--confirm", action="store_true", help="confirm automatically on ALLOW_FULL")
    sp.set_defaults(func=cmd_request)

    for name, func in (("confirm", cmd_confirm), ("delete", cmd_delete), ("renew", cmd_renew)):
        sp = sub.add_parser(name, help=f"{name} an exception by update id")
        client_args(sp)
        sp.add_argument("--id", type=update_id, required=True)
        if name == "renew":
            sp.add_argument("--expiry", type=int, required=True)
        sp.set_defaults(func=func)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ClientTimeout as e:
        print(f"timeout: {e}", file=sys.stderr)
        return EXIT_TIMEOUT
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_TIMEOUT if isinstance(e, TimeoutError) else EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
