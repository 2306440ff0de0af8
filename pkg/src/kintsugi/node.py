"""Recovery node: per-user share storage, rate limiting and message handlers.

A node only ever answers requests; it never opens connections itself. All
handlers are idempotent under message duplication. :meth:`RecoveryNode.handle`
is the transport-facing entry point (bytes in, bytes out); the typed
``handle_*`` methods raise :mod:`kintsugi.errors` exceptions, which
``handle`` turns into :class:`ErrorReply` messages.
"""

from __future__ import annotations

import json
import logging
import os
import random
import tempfile
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

from nacl.exceptions import BadSignatureError
from nacl.signing import VerifyKey

from . import seal
from .codec import Reader, Writer
from .directory import DirectoryEntry, DirectoryStore
from .errors import (
    BadAuthorization,
    CorruptState,
    DecryptionFailed,
    DuplicateUser,
    EpochMismatch,
    KintsugiError,
    MalformedMessage,
    MisaddressedSubshare,
    MixedEpoch,
    RateLimited,
    UnknownUser,
)
from .group import SYSTEM_RNG, Group, group_by_name
from .messages import (
    COMMIT_ABSENT,
    COMMIT_DELETED,
    COMMIT_PROMOTED,
    SESSION_ID_SIZE,
    CommitAck,
    DirectoryAck,
    DirectoryGet,
    DirectoryPut,
    DirectoryRecord,
    ErrorReply,
    Message,
    NodeInfo,
    NodeInfoRequest,
    RecoveryRequest,
    RecoveryResponse,
    RefreshAck,
    RefreshCommit,
    RefreshDirective,
    RefreshInstall,
    RefreshPrepare,
    RefreshReady,
    RegisterAck,
    RegisterRequest,
    SubshareBundle,
    decode_header,
    decode_message,
    decode_share,
    decode_subshare,
    encode_message,
    encode_share,
    encode_subshare,
    share_aad,
    subshare_aad,
)
from .oprf import BlindedElement, EncryptedBackup, evaluate
from .ratelimit import RateLimiter
from .sharing import Share, combine_subshares, make_refresh_subshares

log = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"KNTSNAP1"


@dataclass
class UserRecord:
    username: str
    share: Share
    backup: EncryptedBackup
    n: int
    user_pubkey: bytes
    version: int = 1

    @property
    def index(self) -> int:
        return self.share.index

    @property
    def epoch(self) -> int:
        return self.share.epoch

    @property
    def threshold(self) -> int:
        return self.share.threshold

    def encode(self, w: Writer, group: Group) -> None:
        w.str(self.username).bytes(encode_share(self.share, group)).bytes(self.backup.to_bytes())
        w.u32(self.n).raw(self.user_pubkey).u64(self.version)

    @classmethod
    def decode(cls, r: Reader, group: Group) -> UserRecord:
        username = r.str()
        share = decode_share(r.bytes(), group)
        backup = EncryptedBackup.from_bytes(r.bytes())
        return cls(username, share, backup, r.u32(), r.raw(32), r.u64())


@dataclass
class NodeConfig:
    node_id: str
    listen: str = "127.0.0.1:7001"
    rate_capacity: int = 5
    rate_refill_per_hour: float = 5.0
    storage_path: str | None = None
    group: str = "ristretto255"

    def __post_init__(self):
        if self.rate_capacity < 1:
            raise ValueError("rate_capacity must be >= 1")

    @classmethod
    def from_file(cls, path: str | os.PathLike, **overrides) -> NodeConfig:
        data = json.loads(Path(path).read_text())
        data.update({k: v for k, v in overrides.items() if v is not None})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @property
    def refill_per_second(self) -> Fraction:
        return Fraction(self.rate_refill_per_hour).limit_denominator(10**6) / 3600


@dataclass
class NodeState:
    """Everything a node persists. Rate-limiter buckets are deliberately absent."""

    transport_key: bytes
    records: dict[str, UserRecord] = field(default_factory=dict)
    pending: dict[str, UserRecord] = field(default_factory=dict)
    directory: DirectoryStore = field(default_factory=DirectoryStore)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, NodeState)
            and self.transport_key == other.transport_key
            and self.records == other.records
            and self.pending == other.pending
            and self.directory == other.directory
        )


def persist_state(state: NodeState, path: str | os.PathLike, group: Group) -> None:
    w = Writer().raw(SNAPSHOT_MAGIC).str(group.name).raw(state.transport_key)
    for table in (state.records, state.pending):
        w.u32(len(table))
        for username in sorted(table):
            table[username].encode(w, group)
    entries = list(state.directory)
    w.u32(len(entries))
    for e in entries:
        e.encode(w)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    with os.fdopen(fd, "wb") as fh:
        fh.write(w.getvalue())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_state(path: str | os.PathLike, group: Group, rng: random.Random = SYSTEM_RNG) -> NodeState:
    """Load a snapshot; a missing or empty file yields a fresh state."""
    path = Path(path)
    data = path.read_bytes() if path.exists() else b""
    if not data:
        return NodeState(transport_key=seal.generate_keypair(rng)[0])
    try:
        r = Reader(data)
        if r.raw(len(SNAPSHOT_MAGIC)) != SNAPSHOT_MAGIC:
            raise CorruptState("bad snapshot magic")
        name = r.str()
        if name != group.name:
            raise CorruptState(f"snapshot is for group {name!r}, node runs {group.name!r}")
        state = NodeState(transport_key=r.raw(32))
        for table in (state.records, state.pending):
            for _ in range(r.u32()):
                rec = UserRecord.decode(r, group)
                table[rec.username] = rec
        entries = [DirectoryEntry.decode(r) for _ in range(r.u32())]
        r.done()
        for e in entries:
            state.directory.put_entry(e)
        return state
    except CorruptState:
        raise
    except (KintsugiError, ValueError) as exc:
        raise CorruptState(f"{path}: {exc}") from None


class RecoveryNode:
    def __init__(
        self,
        node_id: str,
        group: Group,
        *,
        rng: random.Random = SYSTEM_RNG,
        clock: Callable[[], float] = time.monotonic,
        rate_capacity: int = 5,
        rate_refill_per_second: float | Fraction = Fraction(5, 3600),
        storage_path: str | os.PathLike | None = None,
        state: NodeState | None = None,
    ):
        self.node_id = node_id
        self.group = group
        self.rng = rng
        self.storage_path = Path(storage_path) if storage_path else None
        if state is None:
            if self.storage_path is not None:
                state = load_state(self.storage_path, group, rng)
            else:
                state = NodeState(transport_key=seal.generate_keypair(rng)[0])
        self.state = state
        self.limiter = RateLimiter(rate_capacity, rate_refill_per_second, clock)
        self._user_locks: dict[str, threading.RLock] = defaultdict(threading.RLock)
        self._locks_guard = threading.Lock()
        # signed directive -> bundle, so a duplicated directive gets the same subshares
        self._bundles: dict[bytes, SubshareBundle] = {}

    @classmethod
    def from_config(cls, config: NodeConfig, **kwargs) -> RecoveryNode:
        return cls(
            config.node_id,
            group_by_name(config.group),
            rate_capacity=config.rate_capacity,
            rate_refill_per_second=config.refill_per_second,
            storage_path=config.storage_path,
            **kwargs,
        )

    @property
    def transport_pubkey(self) -> bytes:
        return seal.public_key(self.state.transport_key)

    @property
    def records(self) -> dict[str, UserRecord]:
        return self.state.records

    @property
    def directory(self) -> DirectoryStore:
        return self.state.directory

    def _lock(self, username: str) -> threading.RLock:
        with self._locks_guard:
            return self._user_locks[username]

    def _persist(self) -> None:
        if self.storage_path is not None:
            persist_state(self.state, self.storage_path, self.group)

    def _pinned_key(self, username: str) -> bytes | None:
        rec = self.state.records.get(username)
        if rec is not None:
            return rec.user_pubkey
        return self.state.directory.pinned_key(username)

    # -- transport entry point ---------------------------------------------

    def handle(self, source: str, data: bytes) -> list[bytes]:
        """Process one encoded envelope from ``source``; return encoded replies."""
        try:
            _, session_id = decode_header(data)
        except MalformedMessage as exc:
            return [encode_message(ErrorReply(exc.code, str(exc)), self.group, bytes(SESSION_ID_SIZE))]
        try:
            envelope = decode_message(data, self.group)
            replies = self.handle_message(source, envelope.message)
        except KintsugiError as exc:
            log.debug("%s: %s from %s: %s", self.node_id, type(exc).__name__, source, exc)
            replies = [ErrorReply(exc.code, str(exc) or type(exc).__name__)]
        return [encode_message(m, self.group, session_id) for m in replies]

    def handle_message(self, source: str, msg: Message) -> list[Message]:
        if isinstance(msg, RecoveryRequest):
            return [self.handle_recovery_request(source, msg)]
        if isinstance(msg, RegisterRequest):
            return [self.handle_register(msg)]
        if isinstance(msg, DirectoryPut):
            return [self.handle_directory_put(msg)]
        if isinstance(msg, DirectoryGet):
            return [DirectoryRecord(self.state.directory.get_entry(msg.username))]
        if isinstance(msg, RefreshPrepare):
            return [self.handle_refresh_prepare(msg)]
        if isinstance(msg, RefreshDirective):
            return [self.handle_refresh_directive(msg)]
        if isinstance(msg, RefreshInstall):
            return [self.handle_refresh_install(msg)]
        if isinstance(msg, RefreshCommit):
            return [self.handle_refresh_commit(msg)]
        if isinstance(msg, NodeInfoRequest):
            return [NodeInfo(self.node_id, self.transport_pubkey, self.group.name)]
        raise MalformedMessage(f"{msg.type_name} is not a request", 1)

    # -- registration --------------------------------------------------------

    def handle_register(self, msg: RegisterRequest) -> RegisterAck:
        with self._lock(msg.username):
            existing = self.state.records.get(msg.username)
            pinned = self._pinned_key(msg.username)
            if existing is not None and not msg.is_signed:
                raise DuplicateUser(f"{msg.username!r} already registered here")
            if pinned is not None and pinned != msg.user_pubkey:
                raise BadAuthorization(f"{msg.username!r} is pinned to a different key")
            if msg.is_signed:
                try:
                    VerifyKey(msg.user_pubkey).verify(msg.signed_bytes(self.group), msg.signature)
                except (BadSignatureError, ValueError):
                    raise BadAuthorization("bad registration signature") from None
            try:
                plain = seal.unseal(self.state.transport_key, msg.sealed_share, share_aad(msg.username))
            except DecryptionFailed:
                raise BadAuthorization("share not sealed to this node") from None
            share = decode_share(plain, self.group)
            if share.index != msg.index or share.threshold != msg.threshold:
                raise MalformedMessage("sealed share disagrees with request header", 0)
            if msg.n < msg.threshold + 1:
                raise MalformedMessage("committee smaller than threshold + 1", 0)
            backup = EncryptedBackup.from_bytes(msg.backup)
            self.state.records[msg.username] = UserRecord(msg.username, share, backup, msg.n, msg.user_pubkey)
            self.state.pending.pop(msg.username, None)
            self._persist()
            return RegisterAck(msg.username, share.index, share.epoch)

    # -- recovery ------------------------------------------------------------

    def handle_recovery_request(self, source: str, msg: RecoveryRequest) -> RecoveryResponse:
        # charge the token before looking the user up, so probing costs the same
        if not self.limiter.admit(source):
            raise RateLimited(f"source {source} is over its recovery budget")
        if msg.blinded.is_identity():
            raise MalformedMessage("blinded element is the identity", 2)
        with self._lock(msg.username):
            rec = self.state.records.get(msg.username)
            if rec is None or rec.index != msg.index:
                raise UnknownUser(msg.username)
            evaluated = evaluate(rec.share, BlindedElement(msg.index, msg.blinded))
            return RecoveryResponse(
                msg.username, evaluated.index, evaluated.epoch, evaluated.element, rec.threshold, rec.backup.to_bytes()
            )

    # -- directory -----------------------------------------------------------

    def handle_directory_put(self, msg: DirectoryPut) -> DirectoryAck:
        entry = msg.entry
        with self._lock(entry.username):
            rec = self.state.records.get(entry.username)
            if rec is not None and rec.user_pubkey != entry.user_pubkey and entry.username not in self.state.directory:
                raise BadAuthorization("entry key differs from the registered key")
            stored = self.state.directory.put_entry(entry)
            self._persist()
            return DirectoryAck(stored.username, stored.version)

    # -- refresh / rotation --------------------------------------------------

    def handle_refresh_prepare(self, msg: RefreshPrepare) -> RefreshReady:
        with self._lock(msg.username):
            rec = self.state.records.get(msg.username)
            if rec is None:
                raise UnknownUser(msg.username)
            msg.verify(rec.user_pubkey)
            return RefreshReady(msg.username, rec.index, rec.epoch)

    def handle_refresh_directive(self, msg: RefreshDirective) -> SubshareBundle:
        d = msg.directive
        with self._lock(d.username):
            rec = self.state.records.get(d.username)
            if rec is None:
                raise UnknownUser(d.username)
            d.verify(rec.user_pubkey)
            cached = self._bundles.get(d.signature)
            if cached is not None:
                return cached
            if d.new_version <= rec.version:
                raise BadAuthorization(f"directive version {d.new_version} is not newer than {rec.version}")
            if rec.index not in d.contributors:
                raise BadAuthorization(f"index {rec.index} is not a contributor")
            if rec.epoch != d.old_epoch or rec.threshold != d.t_old:
                raise MixedEpoch(f"holding epoch {rec.epoch} t={rec.threshold}, directive says {d.old_epoch} t={d.t_old}")
            new_indices = [m.index for m in d.new_committee]
            subshares = make_refresh_subshares(rec.share, d.t_new, new_indices, self.rng)
            aad = subshare_aad(d.username, d.new_version)
            sealed = tuple(
                (sub.to_index, seal.seal(d.new_key_for(sub.to_index), encode_subshare(sub, self.group), aad, self.rng))
                for sub in subshares
            )
            bundle = SubshareBundle(d.username, rec.index, rec.epoch + 1, sealed, rec.backup.to_bytes())
            self._bundles[d.signature] = bundle
            return bundle

    def handle_refresh_install(self, msg: RefreshInstall) -> RefreshAck:
        d = msg.directive
        with self._lock(d.username):
            pinned = self._pinned_key(d.username)
            d.verify(pinned if pinned is not None else d.user_pubkey)
            me = d.member(self.node_id)
            if me is None:
                raise MisaddressedSubshare(f"{self.node_id} is not in the new committee")
            done = self.state.records.get(d.username)
            if done is not None and done.version == d.new_version:
                return RefreshAck(d.username, done.index, done.epoch)
            pending = self.state.pending.get(d.username)
            if pending is not None and pending.version == d.new_version:
                return RefreshAck(d.username, pending.index, pending.epoch)
            aad = subshare_aad(d.username, d.new_version)
            subshares = []
            for from_index, blob in msg.sealed:
                try:
                    sub = decode_subshare(seal.unseal(self.state.transport_key, blob, aad), self.group)
                except DecryptionFailed:
                    raise MisaddressedSubshare(f"subshare from {from_index} not sealed to this node") from None
                if sub.from_index != from_index or sub.old_epoch != d.old_epoch or sub.new_threshold != d.t_new:
                    raise MixedEpoch(f"subshare from {from_index} does not match the directive")
                subshares.append(sub)
            new_share = combine_subshares(me.index, subshares, d.contributors)
            backup = EncryptedBackup.from_bytes(msg.backup)
            self.state.pending[d.username] = UserRecord(
                d.username, new_share, backup, len(d.new_committee), d.user_pubkey, d.new_version
            )
            self._persist()
            return RefreshAck(d.username, new_share.index, new_share.epoch)

    def handle_refresh_commit(self, msg: RefreshCommit) -> CommitAck:
        d = msg.directive
        with self._lock(d.username):
            pending = self.state.pending.get(d.username)
            pinned = self._pinned_key(d.username)
            if pinned is None and pending is not None:
                # a brand-new holder pinned the key when it accepted the install
                pinned = pending.user_pubkey
            if pinned is None:
                return CommitAck(d.username, COMMIT_ABSENT, 0)
            d.verify(pinned)
            if pending is not None and pending.version == d.new_version:
                self.state.records[d.username] = self.state.pending.pop(d.username)
                self._persist()
                return CommitAck(d.username, COMMIT_PROMOTED, pending.epoch)
            rec = self.state.records.get(d.username)
            if rec is None:
                return CommitAck(d.username, COMMIT_ABSENT, 0)
            if rec.version == d.new_version:
                return CommitAck(d.username, COMMIT_PROMOTED, rec.epoch)
            if rec.version < d.new_version and d.member(self.node_id) is None:
                # the departing holder destroys its share and backup
                del self.state.records[d.username]
                self._bundles = {k: v for k, v in self._bundles.items() if v.username != d.username}
                self._persist()
                return CommitAck(d.username, COMMIT_DELETED, rec.epoch)
            raise EpochMismatch(f"commit for v{d.new_version} but holding v{rec.version} and nothing pending")

    # -- persistence ---------------------------------------------------------

    def persist_state(self, path: str | os.PathLike | None = None) -> None:
        target = path or self.storage_path
        if target is None:
            raise ValueError("no storage path")
        persist_state(self.state, target, self.group)
