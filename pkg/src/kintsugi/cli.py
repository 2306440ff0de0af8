"""``kintsugi`` command line: node daemon, client verbs, simulator and attack replay.

Exit codes: 0 success, 1 protocol failure, 2 usage error. Passwords are read
from files (``-`` for stdin), never from argv.
"""

from __future__ import annotations

import argparse
import asyncio
import logging
import os
import signal
import sys
from pathlib import Path

from nacl.signing import SigningKey

from .client import (
    DEFAULT_THRESHOLD,
    RecoverySession,
    RegistrationPlan,
    RegistrationSession,
    RotationSession,
    assign_committee,
)
from .errors import DecryptionFailed, KintsugiError, ScenarioError
from .group import group_by_name
from .netsim import collusion_oracle, load_scenario, run_simulation
from .node import NodeConfig, RecoveryNode
from .wire import NodeServer, drive_session, fetch_contacts

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

BOOTSTRAP_ENV = "KINTSUGI_BOOTSTRAP"

log = logging.getLogger("kintsugi")


class UsageError(Exception):
    pass


def _read_secret(path: str) -> bytes:
    data = sys.stdin.buffer.read() if path == "-" else _read_file(path)
    data = data.rstrip(b"\r\n")
    if not data:
        raise UsageError(f"{path}: empty password")
    return data


def _read_file(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _addresses(value: str | None, what: str) -> list[str]:
    items = [a.strip() for a in (value or "").split(",") if a.strip()]
    if not items:
        raise UsageError(f"no {what} given")
    return items


def _bootstrap(args) -> list[str]:
    return _addresses(args.bootstrap or os.environ.get(BOOTSTRAP_ENV), f"bootstrap nodes (--bootstrap or ${BOOTSTRAP_ENV})")


def _load_key(path: str) -> SigningKey:
    raw = _read_file(path).strip()
    try:
        seed = bytes.fromhex(raw.decode()) if len(raw) == 64 else raw
    except (UnicodeDecodeError, ValueError):
        seed = raw
    if len(seed) != 32:
        raise UsageError(f"{path}: expected a 32-byte signing key seed (raw or hex)")
    return SigningKey(seed)


def _write_key(path: str, key: SigningKey) -> None:
    p = Path(path)
    p.write_text(bytes(key).hex() + "\n")
    p.chmod(0o600)


# -- verbs --------------------------------------------------------------------


def cmd_node_run(args) -> int:
    try:
        config = NodeConfig.from_file(args.config, listen=args.listen, storage_path=args.storage)
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"bad config {args.config}: {exc}") from None
    node = RecoveryNode.from_config(config)
    server = NodeServer(node, config.listen)

    async def main() -> None:
        await server.start()
        print(f"{config.node_id} listening on {server.address}", flush=True)
        loop = asyncio.get_running_loop()
        stop = asyncio.Event()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, stop.set)
        serving = asyncio.ensure_future(server.serve_forever())
        await stop.wait()
        serving.cancel()
        await server.close()

    asyncio.run(main())
    return EXIT_OK


def cmd_register(args) -> int:
    group = group_by_name(args.group)
    password = _read_secret(args.password_file)
    payload = _read_file(args.payload_file)
    addresses = _addresses(args.nodes, "nodes")

    async def run():
        roster = await fetch_contacts(addresses, group, args.timeout)
        ids = list(roster)
        plan = RegistrationPlan(args.user, password, payload, assign_committee(roster, ids), args.threshold)
        session = RegistrationSession(group, plan, roster)
        await drive_session(session, group, {c.node_id: c.address for c in roster.values()}, args.timeout)
        return session

    try:
        session = asyncio.run(run())
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = session.unwrap()
    if args.key_out:
        _write_key(args.key_out, session.signing_key)
    print(f"registered {report.username}: n={len(report.committee)} t={report.threshold} version={report.version}")
    return EXIT_OK


def cmd_recover(args) -> int:
    group = group_by_name(args.group)
    password = _read_secret(args.password_file)
    bootstrap = _bootstrap(args)

    async def run():
        contacts = await fetch_contacts(bootstrap, group, args.timeout)
        session = RecoverySession(group, args.user, password, list(contacts), exclude=args.exclude or ())
        await drive_session(session, group, {c.node_id: c.address for c in contacts.values()}, args.timeout)
        return session

    recovered = asyncio.run(run()).unwrap()
    Path(args.out).write_bytes(recovered.data)
    if args.key_out:
        _write_key(args.key_out, recovered.signing_key)
    print(f"recovered {len(recovered.data)} bytes for {args.user}")
    return EXIT_OK


def cmd_rotate(args) -> int:
    group = group_by_name(args.group)
    key = _load_key(args.key_file)
    new_nodes = _addresses(args.new_nodes, "new nodes")
    bootstrap = _bootstrap(args) if (args.bootstrap or os.environ.get(BOOTSTRAP_ENV)) else new_nodes

    async def run():
        roster = await fetch_contacts(list(dict.fromkeys(new_nodes + bootstrap)), group, args.timeout)
        by_addr = {c.address: c.node_id for c in roster.values()}
        session = RotationSession(
            group,
            args.user,
            key,
            [by_addr[a] for a in new_nodes],
            args.new_threshold,
            roster,
            [by_addr[a] for a in bootstrap],
        )
        await drive_session(session, group, {c.node_id: c.address for c in roster.values()}, args.timeout)
        return session

    try:
        report = asyncio.run(run()).unwrap()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(
        f"rotated {report.username}: version={report.version} epoch={report.epoch} "
        f"n={len(report.committee)} t={report.threshold} deleted={','.join(report.deleted) or '-'}"
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    config, scenario = load_scenario(args.scenario, seed=args.seed)
    result = run_simulation(config, scenario)
    if args.transcript:
        Path(args.transcript).write_text(result.transcript)
    else:
        sys.stdout.write(result.transcript)
    for outcome in result.outcomes:
        print(outcome.line(), file=sys.stderr)
    return EXIT_OK


def cmd_attack(args) -> int:
    config, scenario = load_scenario(args.scenario, seed=args.seed)
    curious = [c.strip() for c in args.curious.split(",") if c.strip()]
    unknown = set(curious) - set(scenario.nodes)
    if unknown:
        raise UsageError(f"unknown node(s) {sorted(unknown)}")
    dictionary = [line for line in _read_file(args.dict).splitlines() if line]
    config = type(config)(**{**vars(config), "curious": frozenset(curious)})
    result = run_simulation(config, scenario)
    attack = collusion_oracle(result, curious, dictionary, args.user)
    print(f"curious={','.join(curious) or '-'} shares={attack.shares_used} threshold={attack.threshold}")
    print(f"consistent_passwords={len(attack.consistent)}/{len(dictionary)} exhaustive={attack.exhaustive}")
    if attack.success:
        print(f"attack succeeded: password={attack.password.decode(errors='replace')} secret={attack.secret}")
    else:
        print("attack failed")
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kintsugi", description="Decentralized password-based key recovery.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    node = sub.add_parser("node", help="run a recovery node")
    node_sub = node.add_subparsers(dest="node_verb", required=True, parser_class=_Parser)
    run = node_sub.add_parser("run")
    run.add_argument("--config", required=True)
    run.add_argument("--listen", help="override host:port from the config")
    run.add_argument("--storage", help="override the snapshot path from the config")
    run.set_defaults(func=cmd_node_run)

    def client_opts(sp):
        sp.add_argument("--group", default="ristretto255", choices=("ristretto255", "toy"))
        sp.add_argument("--timeout", type=float, default=10.0, help="per-request seconds")

    reg = sub.add_parser("register")
    reg.add_argument("--user", required=True)
    reg.add_argument("--password-file", required=True)
    reg.add_argument("--payload-file", required=True)
    reg.add_argument("--nodes", required=True, help="comma-separated host:port list; order assigns indices")
    reg.add_argument("--threshold", type=int, default=DEFAULT_THRESHOLD)
    reg.add_argument("--key-out", help="write the signing key seed here (needed for rotate)")
    client_opts(reg)
    reg.set_defaults(func=cmd_register)

    rec = sub.add_parser("recover")
    rec.add_argument("--user", required=True)
    rec.add_argument("--password-file", required=True)
    rec.add_argument("--out", required=True)
    rec.add_argument("--bootstrap", help=f"directory contact nodes; defaults to ${BOOTSTRAP_ENV}")
    rec.add_argument("--exclude", type=lambda s: [x for x in s.split(",") if x], help="node ids to skip")
    rec.add_argument("--key-out", help="also write the recovered signing key seed")
    client_opts(rec)
    rec.set_defaults(func=cmd_recover)

    rot = sub.add_parser("rotate")
    rot.add_argument("--user", required=True)
    rot.add_argument("--key-file", required=True)
    rot.add_argument("--new-nodes", required=True)
    rot.add_argument("--new-threshold", type=int, required=True)
    rot.add_argument("--bootstrap", help="nodes holding the current directory entry")
    client_opts(rot)
    rot.set_defaults(func=cmd_rotate)

    sim = sub.add_parser("simulate")
    sim.add_argument("--scenario", required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--transcript", help="write the transcript here instead of stdout")
    sim.set_defaults(func=cmd_simulate)

    att = sub.add_parser("attack")
    att.add_argument("--scenario", required=True)
    att.add_argument("--curious", required=True, help="comma-separated node ids")
    att.add_argument("--dict", required=True, help="password dictionary, one per line")
    att.add_argument("--seed", type=int)
    att.add_argument("--user")
    att.set_defaults(func=cmd_attack)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"kintsugi: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ScenarioError) as exc:
        print(f"kintsugi: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DecryptionFailed:
        print("kintsugi: decryption failed (wrong password or corrupted response)", file=sys.stderr)
        return EXIT_FAILURE
    except KintsugiError as exc:
        print(f"kintsugi: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, asyncio.TimeoutError) as exc:
        print(f"kintsugi: network error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
