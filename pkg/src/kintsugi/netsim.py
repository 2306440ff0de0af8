"""Deterministic discrete-event network simulator with fault injection.

Every principal (nodes and client sessions) runs on one virtual-time event
heap ordered by ``(tick, counter)``. Randomness (delays, duplication, all
protocol RNG) is drawn from streams seeded by the config, so a run's
transcript is a pure function of ``(seed, scenario)``.

Fault model:

* arbitrary delay and reordering (uniform or heavy-tailed delays)
* message duplication
* offline nodes (messages to them are dropped; the set can change mid-run)
* honest-but-curious nodes (follow the protocol, record everything)
* tamper rules that rewrite matching messages in flight
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from nacl.signing import SigningKey

from . import seal
from .client import (
    NodeContact,
    Outgoing,
    RecoverySession,
    RegistrationPlan,
    RegistrationSession,
    RotationSession,
    Session,
    assign_committee,
)
from .errors import DecryptionFailed, InsufficientResponses, KintsugiError, MalformedMessage, ScenarioError, error_from_code
from .group import Group, group_by_name
from .messages import (
    MESSAGE_TYPES,
    SESSION_ID_SIZE,
    ErrorReply,
    Message,
    RecoveryRequest,
    RecoveryResponse,
    RefreshInstall,
    RegisterRequest,
    decode_header,
    decode_message,
    decode_share,
    decode_subshare,
    encode_message,
    share_aad,
    subshare_aad,
)
from .node import RecoveryNode, UserRecord
from .oprf import EncryptedBackup, derive_backup_key, open_backup
from .sharing import Share, combine_subshares, interpolate_at_zero, reconstruct_secret

TAMPER_ACTIONS = ("noop", "flip_byte", "perturb_element")


@dataclass(frozen=True)
class DelayModel:
    kind: str = "uniform"
    low: int = 1
    high: int = 10
    alpha: float = 1.2  # heavy-tail shape
    cap: int = 10_000

    def __post_init__(self):
        if self.kind not in ("uniform", "heavy_tail"):
            raise ScenarioError(f"unknown delay model {self.kind!r}")
        if not 0 <= self.low <= self.high:
            raise ScenarioError("delay bounds must satisfy 0 <= low <= high")

    def sample(self, rng: random.Random) -> int:
        if self.kind == "uniform":
            return rng.randint(self.low, self.high)
        return min(self.cap, self.low + int(self.high * (rng.paretovariate(self.alpha) - 1)))


@dataclass(frozen=True)
class TamperRule:
    """Rewrite in-flight messages matching type/source/destination.

    ``nth`` restricts the rule to the n-th match (0-based); ``None`` hits all.
    """

    action: str = "noop"
    type: str | None = None
    src: str | None = None
    dst: str | None = None
    nth: int | None = None
    offset: int | None = None
    mask: int = 0x01

    def __post_init__(self):
        if self.action not in TAMPER_ACTIONS:
            raise ScenarioError(f"unknown tamper action {self.action!r}")
        if self.type is not None and self.type not in {c.__name__ for c in MESSAGE_TYPES.values()}:
            raise ScenarioError(f"unknown message type {self.type!r}")
        if not 1 <= self.mask <= 0xFF:
            raise ScenarioError("mask must be a nonzero byte")

    def matches(self, src: str, dst: str, data: bytes) -> bool:
        if self.src is not None and src != self.src:
            return False
        if self.dst is not None and dst != self.dst:
            return False
        if self.type is not None:
            cls = MESSAGE_TYPES.get(data[1]) if len(data) > 1 else None
            return cls is not None and cls.__name__ == self.type
        return True

    def apply(self, data: bytes, group: Group) -> bytes:
        if self.action == "noop":
            return data
        if self.action == "flip_byte":
            offset = self.offset if self.offset is not None else _element_offset(data, group)
            buf = bytearray(data)
            buf[offset] ^= self.mask
            return bytes(buf)
        # perturb_element: keep the encoding valid but move the element
        env = decode_message(data, group)
        name = _element_field(env.message)
        if name is None:
            return data
        elem = getattr(env.message, name)
        moved = type(env.message)(**{**vars(env.message), name: elem + group.generator()})
        return encode_message(moved, group, env.session_id)


def _element_field(msg: Message) -> str | None:
    return next((name for name, kind in msg.FIELDS if kind == "elem"), None)


def _element_offset(data: bytes, group: Group) -> int:
    """Offset of the first byte of the message's group element, else the last byte."""
    try:
        env = decode_message(data, group)
    except KintsugiError:
        return len(data) - 1
    name = _element_field(env.message)
    if name is None:
        return len(data) - 1
    return data.index(getattr(env.message, name).to_bytes(), 2 + SESSION_ID_SIZE)


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    group: str = "toy"
    delay: DelayModel = DelayModel()
    duplicate_prob: float = 0.0
    offline: frozenset[str] = frozenset()
    curious: frozenset[str] = frozenset()
    tamper: tuple[TamperRule, ...] = ()
    max_ticks: int = 1_000_000
    tick_seconds: float = 1.0
    rate_capacity: int = 5
    rate_refill_per_hour: float = 5.0

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ScenarioError("seed must be a 64-bit unsigned integer")
        if not 0.0 <= self.duplicate_prob < 1.0:
            raise ScenarioError("duplicate_prob must be in [0, 1)")

    @classmethod
    def from_dict(cls, data: dict[str, Any], **overrides) -> SimConfig:
        try:
            delay = data.get("delay", {})
            rate = data.get("rate_limit", {})
            cfg = cls(
                seed=int(data.get("seed", 0)),
                group=data.get("group", "toy"),
                delay=DelayModel(**delay),
                duplicate_prob=float(data.get("duplicate_prob", 0.0)),
                offline=frozenset(data.get("offline", ())),
                curious=frozenset(data.get("curious", ())),
                tamper=tuple(TamperRule(**r) for r in data.get("tamper", ())),
                max_ticks=int(data.get("max_ticks", 1_000_000)),
                tick_seconds=float(data.get("tick_seconds", 1.0)),
                rate_capacity=int(rate.get("capacity", 5)),
                rate_refill_per_hour=float(rate.get("refill_per_hour", 5.0)),
            )
        except TypeError as exc:
            raise ScenarioError(f"bad config: {exc}") from None
        return cls(**{**vars(cfg), **{k: v for k, v in overrides.items() if v is not None}})


STEP_OPS = ("register", "recover", "rotate", "query", "set_offline", "set_online", "advance", "parallel")


@dataclass(frozen=True)
class Scenario:
    nodes: tuple[str, ...]
    steps: tuple[dict[str, Any], ...]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Scenario:
        nodes = data.get("nodes")
        if isinstance(nodes, int):
            nodes = [f"n{i}" for i in range(1, nodes + 1)]
        if not nodes or len(set(nodes)) != len(nodes):
            raise ScenarioError("scenario needs a list of distinct node ids")
        steps = data.get("steps", [])
        if not isinstance(steps, list):
            raise ScenarioError("steps must be a list")
        scenario = cls(tuple(nodes), tuple(steps))
        scenario._validate(scenario.steps)
        return scenario

    def _validate(self, steps: Iterable[dict]) -> None:
        for step in steps:
            if not isinstance(step, dict) or step.get("op") not in STEP_OPS:
                raise ScenarioError(f"malformed step {step!r}")
            if step["op"] == "parallel":
                self._validate(step.get("steps", []))
            for key in ("nodes", "exclude", "bootstrap"):
                unknown = set(step.get(key, ())) - set(self.nodes)
                if unknown:
                    raise ScenarioError(f"unknown principal(s) {sorted(unknown)}")
            if "node" in step and step["node"] not in self.nodes:
                raise ScenarioError(f"unknown principal {step['node']!r}")


def load_scenario(path: str | Path, seed: int | None = None) -> tuple[SimConfig, Scenario]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror}") from None
    if not isinstance(data, dict):
        raise ScenarioError("scenario file must hold a JSON object")
    return SimConfig.from_dict(data, seed=seed), Scenario.from_dict(data)


@dataclass(frozen=True)
class Outcome:
    step: int
    op: str
    user: str
    status: str  # correct | wrong | decryption_failed | no_termination | ok | error
    detail: str = ""

    def line(self) -> str:
        return f"outcome step={self.step} op={self.op} user={self.user} status={self.status} {self.detail}".rstrip()


@dataclass
class _User:
    password: bytes
    payload: bytes
    signing_key: SigningKey
    indices: dict[str, int] = field(default_factory=dict)  # every index a node ever held


@dataclass
class SimResult:
    config: SimConfig
    transcript: str
    outcomes: list[Outcome]
    nodes: dict[str, RecoveryNode]
    recordings: dict[str, list[tuple[str, str, bytes]]]
    group: Group

    @property
    def transcript_bytes(self) -> bytes:
        return self.transcript.encode()


class _QuerySession(Session):
    """Probe one node with a throwaway evaluation request."""

    def __init__(self, group, rng, username, node_id, index):
        super().__init__(group, rng)
        self.username, self.node_id, self.index = username, node_id, index

    def start(self):
        elem = self.group.random_scalar(self.rng, nonzero=True) * self.group.generator()
        return [Outgoing(self.node_id, RecoveryRequest(self.username, self.index, elem))]

    def _on_reply(self, node_id, reply):
        if node_id != self.node_id:
            return []
        if isinstance(reply, RecoveryResponse):
            return self._finish(f"epoch={reply.epoch}")
        if isinstance(reply, ErrorReply):
            return self._finish(error=error_from_code(reply.code, reply.detail))
        return self._finish(error=reply if isinstance(reply, KintsugiError) else MalformedMessage("?", 0))


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


class Simulation:
    def __init__(self, config: SimConfig, node_ids: Iterable[str]):
        self.config = config
        self.group = group_by_name(config.group)
        master = random.Random(config.seed)
        self.net_rng = random.Random(master.getrandbits(64))
        self.client_rng = random.Random(master.getrandbits(64))
        self.tick = 0
        self.offline = set(config.offline)
        self.nodes: dict[str, RecoveryNode] = {}
        for nid in node_ids:
            self.nodes[nid] = RecoveryNode(
                nid,
                self.group,
                rng=random.Random(master.getrandbits(64)),
                clock=self.now,
                rate_capacity=config.rate_capacity,
                rate_refill_per_second=config.rate_refill_per_hour / 3600,
            )
        unknown = (self.offline | set(config.curious)) - set(self.nodes)
        unknown |= {r.src for r in config.tamper if r.src} - set(self.nodes) - {"client"}
        if unknown - {None}:
            raise ScenarioError(f"unknown principal(s) {sorted(unknown - {None})}")
        self.roster = {nid: NodeContact(nid, f"sim://{nid}", n.transport_pubkey) for nid, n in self.nodes.items()}
        self.recordings: dict[str, list[tuple[str, str, bytes]]] = {nid: [] for nid in sorted(config.curious)}
        self.users: dict[str, _User] = {}
        self.sessions: dict[bytes, tuple[str, Session]] = {}
        self.sent_types: list[str] = []
        self.lines: list[str] = [f"config seed={config.seed} group={self.group.name} nodes={','.join(self.nodes)}"]
        self.outcomes: list[Outcome] = []
        self._heap: list[tuple[int, int, str, str, str, bytes]] = []
        self._counter = 0
        self._tamper_hits = [0] * len(config.tamper)
        self._step = 0

    # -- clock & logging -----------------------------------------------------

    def now(self) -> float:
        return self.tick * self.config.tick_seconds

    def _log(self, kind: str, src: str, dst: str, data: bytes) -> None:
        cls = MESSAGE_TYPES.get(data[1]) if len(data) > 1 else None
        name = cls.__name__ if cls else "?"
        self.lines.append(f"{self.tick:08d} {kind} {src}->{dst} {name} {_digest(data)}")

    # -- event loop ----------------------------------------------------------

    def _push(self, at: int, kind: str, src: str, dst: str, data: bytes) -> None:
        heapq.heappush(self._heap, (at, self._counter, kind, src, dst, data))
        self._counter += 1

    def send(self, src: str, dst: str, data: bytes) -> None:
        self._log("send", src, dst, data)
        self._push(self.tick + self.config.delay.sample(self.net_rng), "deliver", src, dst, data)
        if self.config.duplicate_prob and self.net_rng.random() < self.config.duplicate_prob:
            self._push(self.tick + self.config.delay.sample(self.net_rng), "duplicate", src, dst, data)

    def _tamper(self, src: str, dst: str, data: bytes) -> bytes:
        for k, rule in enumerate(self.config.tamper):
            if not rule.matches(src, dst, data):
                continue
            hit = self._tamper_hits[k]
            self._tamper_hits[k] += 1
            if rule.nth is not None and hit != rule.nth:
                continue
            mutated = rule.apply(data, self.group)
            if mutated != data:
                self._log("tamper", src, dst, mutated)
            data = mutated
        return data

    def _record(self, node_id: str, direction: str, peer: str, data: bytes) -> None:
        if node_id in self.recordings:
            self.recordings[node_id].append((direction, peer, data))

    def _deliver(self, src: str, dst: str, data: bytes, kind: str) -> None:
        if dst in self.nodes:
            if dst in self.offline:
                self._log("drop", src, dst, data)
                return
            data = self._tamper(src, dst, data)
            self._log(kind, src, dst, data)
            self._record(dst, "in", src, data)
            for reply in self.nodes[dst].handle(src, data):
                self._record(dst, "out", src, reply)
                self.send(dst, src, reply)
            return
        data = self._tamper(src, dst, data)
        self._log(kind, src, dst, data)
        try:
            _, sid = decode_header(data)
        except MalformedMessage:
            return
        owner = self.sessions.get(sid)
        if owner is None or owner[0] != dst:
            return
        try:
            reply: Message | KintsugiError = decode_message(data, self.group).message
        except MalformedMessage as exc:
            reply = exc
        self._dispatch(dst, owner[1], owner[1].on_reply(src, reply))

    def _dispatch(self, principal: str, session: Session, outgoing) -> None:
        for out in outgoing:
            if out.node_id not in self.nodes:
                raise ScenarioError(f"session addressed unknown node {out.node_id!r}")
            self.sent_types.append(out.message.type_name)
            self.send(principal, out.node_id, encode_message(out.message, self.group, session.session_id))

    def run_until_quiet(self) -> None:
        while self._heap and self._heap[0][0] <= self.config.max_ticks:
            at, _, kind, src, dst, data = heapq.heappop(self._heap)
            self.tick = max(self.tick, at)
            self._deliver(src, dst, data, kind)

    def launch(self, principal: str, session: Session) -> Session:
        self.sessions[session.session_id] = (principal, session)
        self._dispatch(principal, session, session.start())
        return session

    # -- protocol operations -------------------------------------------------

    def _principal(self, step: dict, user: str) -> str:
        return step.get("source", f"client:{user}")

    def start_register(self, step: dict) -> tuple[str, Session]:
        user = step["user"]
        nodes = list(step.get("nodes") or self.nodes)
        threshold = int(step.get("threshold", 3))
        password = step.get("password", "").encode()
        payload = _payload(step)
        key = SigningKey(self.client_rng.randbytes(32))
        committee = assign_committee(self.roster, nodes)
        plan = RegistrationPlan(user, password, payload, committee, threshold, key)
        session = RegistrationSession(self.group, plan, self.roster, self.client_rng, directory_nodes=self.nodes)
        self.users[user] = _User(password, payload, key, {m.node_id: m.index for m in committee})
        return user, self.launch(self._principal(step, user), session)

    def start_recover(self, step: dict) -> tuple[str, Session]:
        user = step["user"]
        info = self.users.get(user)
        password = step["password"].encode() if "password" in step else (info.password if info else b"?")
        bootstrap = list(step.get("bootstrap") or self.nodes)
        session = RecoverySession(self.group, user, password, bootstrap, self.client_rng, step.get("exclude", ()))
        return user, self.launch(self._principal(step, user), session)

    def start_rotate(self, step: dict) -> tuple[str, Session]:
        user = step["user"]
        if user not in self.users:
            raise ScenarioError(f"rotate for unregistered user {user!r}")
        nodes = list(step["nodes"])
        bootstrap = list(step.get("bootstrap") or self.nodes)
        key = self.users[user].signing_key
        if "key_seed" in step:
            key = SigningKey(bytes.fromhex(step["key_seed"]))
        session = RotationSession(
            self.group,
            user,
            key,
            nodes,
            int(step["threshold"]),
            self.roster,
            bootstrap,
            self.client_rng,
            directory_nodes=self.nodes,
        )
        return user, self.launch(self._principal(step, user), session)

    def start_query(self, step: dict) -> tuple[str, Session]:
        user, nid = step["user"], step["node"]
        info = self.users.get(user)
        index = int(step.get("index", info.indices.get(nid, 1) if info else 1))
        session = _QuerySession(self.group, self.client_rng, user, nid, index)
        return user, self.launch(self._principal(step, user), session)

    def _outcome(self, op: str, user: str, session: Session) -> Outcome:
        if not session.done:
            session.cancel()
            return Outcome(self._step, op, user, "no_termination", type(session.error).__name__)
        if session.error is not None:
            if isinstance(session.error, DecryptionFailed):
                status = "decryption_failed"
            elif isinstance(session.error, InsufficientResponses):
                # gave up once t + 1 answers were out of reach: no output, same as a stall
                status = "no_termination"
            else:
                status = "error"
            return Outcome(self._step, op, user, status, type(session.error).__name__)
        if op == "recover":
            info = self.users.get(user)
            good = info is not None and session.result.data == info.payload
            return Outcome(self._step, op, user, "correct" if good else "wrong", _digest(session.result.data))
        if op == "rotate":
            rep = session.result
            info = self.users[user]
            info.indices.update({m.node_id: m.index for m in rep.committee})
            return Outcome(self._step, op, user, "ok", f"v={rep.version} epoch={rep.epoch} deleted={','.join(rep.deleted)}")
        if op == "query":
            return Outcome(self._step, op, user, "ok", f"node={session.node_id} {session.result}")
        return Outcome(self._step, op, user, "ok")

    def run_step(self, step: dict) -> list[Outcome]:
        op = step["op"]
        if op == "set_offline":
            self.offline |= set(step["nodes"])
            self.lines.append(f"{self.tick:08d} offline {','.join(sorted(self.offline))}")
            return []
        if op == "set_online":
            self.offline -= set(step["nodes"])
            self.lines.append(f"{self.tick:08d} offline {','.join(sorted(self.offline))}")
            return []
        if op == "advance":
            self.tick += int(step["ticks"])
            return []
        launched = []
        for sub in step["steps"] if op == "parallel" else [step]:
            starter = getattr(self, f"start_{sub['op']}", None)
            if starter is None:
                raise ScenarioError(f"cannot run {sub['op']!r} inside parallel")
            try:
                user, session = starter(sub)
            except (KeyError, ValueError) as exc:
                raise ScenarioError(f"step {self._step}: {exc}") from None
            launched.append((sub["op"], user, session))
        self.run_until_quiet()
        out = []
        for sub_op, user, session in launched:
            outcome = self._outcome(sub_op, user, session)
            self.lines.append(outcome.line())
            self.sessions.pop(session.session_id, None)
            out.append(outcome)
        return out

    def run(self, scenario: Scenario) -> SimResult:
        for i, step in enumerate(scenario.steps):
            self._step = i
            self.outcomes.extend(self.run_step(step))
        self.lines.extend(self.state_lines())
        return SimResult(self.config, "\n".join(self.lines) + "\n", self.outcomes, self.nodes, self.recordings, self.group)

    def state_lines(self) -> list[str]:
        lines = []
        for nid in sorted(self.nodes):
            node = self.nodes[nid]
            for user, rec in sorted(node.records.items()):
                lines.append(
                    f"state {nid} {user} index={rec.index} epoch={rec.epoch} t={rec.threshold} "
                    f"v={rec.version} share={_digest(self.group.encode_scalar(rec.share.value))}"
                )
            for entry in node.directory:
                lines.append(f"directory {nid} {entry.username} v={entry.version}")
        return lines


def _payload(step: dict) -> bytes:
    if "payload_hex" in step:
        return bytes.fromhex(step["payload_hex"])
    return step.get("payload", "").encode()


def run_simulation(config: SimConfig, scenario: Scenario) -> SimResult:
    return Simulation(config, scenario.nodes).run(scenario)


# -- collusion oracle ---------------------------------------------------------


@dataclass(frozen=True)
class AttackResult:
    success: bool
    password: bytes | None
    secret: int | None
    shares_used: int
    threshold: int | None
    consistent: tuple[bytes, ...]
    exhaustive: bool


def _pooled_view(result: SimResult, curious: Iterable[str], username: str):
    """Shares and backups that the colluding nodes hold or saw, grouped by epoch."""
    group = result.group
    shares: dict[int, dict[int, Share]] = {}
    backups: list[bytes] = []
    threshold: dict[int, int] = {}

    def add(share: Share) -> None:
        shares.setdefault(share.epoch, {})[share.index] = share
        threshold[share.epoch] = share.threshold

    for nid in curious:
        node = result.nodes[nid]
        rec: UserRecord | None = node.records.get(username) or node.state.pending.get(username)
        if rec is not None:
            add(rec.share)
            backups.append(rec.backup.to_bytes())
        for direction, _, data in result.recordings.get(nid, ()):
            if direction != "in":
                continue
            try:
                msg = decode_message(data, group).message
            except KintsugiError:
                continue
            sk = node.state.transport_key
            try:
                if isinstance(msg, RegisterRequest) and msg.username == username:
                    add(decode_share(seal.unseal(sk, msg.sealed_share, share_aad(username)), group))
                    backups.append(msg.backup)
                elif isinstance(msg, RefreshInstall) and msg.directive.username == username:
                    d = msg.directive
                    aad = subshare_aad(username, d.new_version)
                    subs = [decode_subshare(seal.unseal(sk, blob, aad), group) for _, blob in msg.sealed]
                    me = d.member(nid)
                    add(combine_subshares(me.index, subs, d.contributors))
                    backups.append(msg.backup)
            except KintsugiError:
                continue
    return shares, threshold, list(dict.fromkeys(backups))


def _trial_open(group: Group, s_times_p, backups: list[bytes], username: str) -> bool:
    key = derive_backup_key(s_times_p)
    for blob in backups:
        try:
            open_backup(key, EncryptedBackup.from_bytes(blob), username.encode())
            return True
        except (DecryptionFailed, MalformedMessage):
            continue
    return False


def collusion_oracle(
    result: SimResult,
    curious: Iterable[str],
    dictionary: Iterable[bytes],
    username: str | None = None,
) -> AttackResult:
    """Best offline attack for a coalition of honest-but-curious nodes.

    With ``t + 1`` shares of one epoch the coalition rebuilds ``s`` and tests
    each password by trial decryption. With at most ``t`` shares it can only
    ask, per password, whether *some* secret consistent with its shares opens
    the backup; in the toy group that is checked exhaustively over every
    candidate secret.
    """
    curious = sorted(set(curious))
    dictionary = list(dict.fromkeys(dictionary))
    group = result.group
    if username is None:
        users = {u for n in result.nodes.values() for u in n.records} | {
            u for n in result.nodes.values() for u in n.state.pending
        }
        username = min(users) if users else ""
    unknown = set(curious) - set(result.nodes)
    if unknown:
        raise ScenarioError(f"unknown principal(s) {sorted(unknown)}")
    shares, thresholds, backups = _pooled_view(result, curious, username)
    best_epoch = max(shares, key=lambda e: (len(shares[e]) - thresholds[e], e), default=None)
    held = list(shares[best_epoch].values()) if best_epoch is not None else []
    t = thresholds.get(best_epoch)

    if t is not None and len(held) >= t + 1:
        s = reconstruct_secret(held[: t + 1])
        matches = tuple(pw for pw in dictionary if _trial_open(group, s * group.hash_to_group(pw), backups, username))
        return AttackResult(
            len(matches) == 1, matches[0] if len(matches) == 1 else None, int(s), len(held), t, matches, True
        )

    if not backups or group.name != "toy":
        # no ciphertext to test against, or a group too large to enumerate:
        # below threshold every password stays consistent
        return AttackResult(False, None, None, len(held), t, tuple(dictionary), False)

    q = group.order
    points = [(sh.index, sh.value) for sh in held]
    candidates = [s for s in range(q) if _consistent(group, points, s, t)]
    consistent = []
    for pw in dictionary:
        point = group.hash_to_group(pw)
        if any(_trial_open(group, group.scalar(s) * point, backups, username) for s in candidates):
            consistent.append(pw)
    consistent = tuple(consistent)
    unique = len(consistent) == 1 and len(dictionary) > 1
    return AttackResult(unique, consistent[0] if unique else None, None, len(held), t, consistent, True)


def _consistent(group: Group, points, s: int, t: int) -> bool:
    """Is there a degree-<=t polynomial with constant term ``s`` through ``points``?"""
    pts = [(0, group.scalar(s))] + list(points)
    if t is None or len(pts) <= t + 1:
        return True
    base = pts[: t + 1]
    for x, y in pts[t + 1 :]:
        shifted = [(xi - x, yi) for xi, yi in base]
        if interpolate_at_zero(shifted) != y:
            return False
    return True
