"""User-side protocol sessions: registration, recovery and committee rotation.

Sessions are transport-agnostic state machines. ``start()`` returns the
first batch of :class:`Outgoing` messages; the driver (simulator or TCP)
feeds each reply into ``on_reply`` and sends whatever comes back, until
``done`` is set. A session that can make no further progress stays open;
the driver decides when to give up and calls ``cancel()``.

Secrets (the dealt scalar, shares, blinding scalars) live only in local
variables or are dropped as soon as a session finishes.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from nacl.signing import SigningKey

from . import seal
from .directory import CommitteeMember, DirectoryEntry
from .errors import (
    BadAuthorization,
    DecryptionFailed,
    DirectoryRejected,
    InsufficientContributors,
    InsufficientResponses,
    KintsugiError,
    MalformedMessage,
    NodeRejected,
    NotFound,
    RateLimited,
    error_from_code,
)
from .group import PASSWORD_TAG, SYSTEM_RNG, Group
from .messages import (
    COMMIT_DELETED,
    CommitAck,
    DirectoryAck,
    DirectoryGet,
    DirectoryPut,
    DirectoryRecord,
    ErrorReply,
    Message,
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
    RotationDirective,
    SubshareBundle,
    encode_share,
    new_session_id,
    share_aad,
)
from .oprf import (
    EncryptedBackup,
    EvaluatedElement,
    blind,
    derive_backup_key,
    open_backup,
    seal_backup,
    unblind_and_combine,
)
from .sharing import deal_shares

DEFAULT_THRESHOLD = 3
DEFAULT_COMMITTEE_SIZE = 5
PAYLOAD_MAGIC = b"KPAY"
SEED_SIZE = 32


@dataclass(frozen=True)
class NodeContact:
    node_id: str
    address: str
    transport_pubkey: bytes


Roster = dict[str, NodeContact]


@dataclass(frozen=True)
class Outgoing:
    node_id: str
    message: Message


@dataclass(frozen=True)
class RecoveredPayload:
    data: bytes
    signing_key: SigningKey


def pack_payload(signing_key: SigningKey, data: bytes) -> bytes:
    """The backup plaintext: the user's data plus the seed of their signing key."""
    return PAYLOAD_MAGIC + bytes(signing_key) + data


def unpack_payload(plaintext: bytes) -> RecoveredPayload:
    if not plaintext.startswith(PAYLOAD_MAGIC) or len(plaintext) < len(PAYLOAD_MAGIC) + SEED_SIZE:
        raise MalformedMessage("backup plaintext lacks payload header", 0)
    seed = plaintext[len(PAYLOAD_MAGIC) : len(PAYLOAD_MAGIC) + SEED_SIZE]
    return RecoveredPayload(plaintext[len(PAYLOAD_MAGIC) + SEED_SIZE :], SigningKey(seed))


def new_signing_key(rng: random.Random = SYSTEM_RNG) -> SigningKey:
    return SigningKey(rng.randbytes(SEED_SIZE))


def assign_committee(roster: Roster, node_ids: Sequence[str]) -> tuple[CommitteeMember, ...]:
    """Committee members with indices 1..n in the given order."""
    if len(set(node_ids)) != len(node_ids):
        raise ValueError("duplicate node in committee")
    return tuple(CommitteeMember(nid, roster[nid].address, i) for i, nid in enumerate(node_ids, start=1))


class Session:
    """Common bookkeeping for one protocol run."""

    def __init__(self, group: Group, rng: random.Random):
        self.group = group
        self.rng = rng
        self.session_id = new_session_id(rng)
        self.done = False
        self.result = None
        self.error: KintsugiError | None = None

    def _finish(self, result=None, error: KintsugiError | None = None) -> list[Outgoing]:
        self.done = True
        self.result = result
        self.error = error
        self._scrub()
        return []

    def _scrub(self) -> None:
        pass

    @property
    def ok(self) -> bool:
        return self.done and self.error is None

    def start(self) -> list[Outgoing]:
        raise NotImplementedError

    def on_reply(self, node_id: str, reply: Message | KintsugiError) -> list[Outgoing]:
        """``reply`` is the decoded message, or the decode error for malformed bytes."""
        if self.done:
            return []
        return self._on_reply(node_id, reply)

    def _on_reply(self, node_id: str, reply: Message | KintsugiError) -> list[Outgoing]:
        raise NotImplementedError

    def cancel(self) -> None:
        if not self.done:
            self._finish(error=self._stall_error())

    def _stall_error(self) -> KintsugiError:
        return InsufficientResponses("session cancelled before completion")

    def unwrap(self):
        if not self.done:
            raise InsufficientResponses("session did not complete")
        if self.error is not None:
            raise self.error
        return self.result


def _as_error(reply: Message | KintsugiError) -> KintsugiError | None:
    if isinstance(reply, KintsugiError):
        return reply
    if isinstance(reply, ErrorReply):
        return error_from_code(reply.code, reply.detail)
    return None


def _stale(reply: Message | KintsugiError, expected: type[Message]) -> bool:
    """A (possibly duplicated) answer to an earlier phase of the same session.

    Lookup misses (``NotFound``) are only ever answers to a directory query.
    """
    if isinstance(reply, ErrorReply):
        return reply.code == NotFound.code
    return isinstance(reply, Message) and not isinstance(reply, expected)


# -- directory lookup ---------------------------------------------------------


class _Lookup:
    """Directory lookup across bootstrap replicas.

    Waits for a majority of replicas to answer and takes the highest
    validly signed version among them, so one stale replica cannot pin the
    client to an old committee.
    """

    def __init__(self, username: str, bootstrap: Sequence[str]):
        if not bootstrap:
            raise ValueError("no bootstrap nodes")
        self.username = username
        self.bootstrap = list(dict.fromkeys(bootstrap))
        self.quorum = len(self.bootstrap) // 2 + 1
        self.answered: set[str] = set()
        self.best: DirectoryEntry | None = None
        self.entry: DirectoryEntry | None = None

    def requests(self) -> list[Outgoing]:
        return [Outgoing(nid, DirectoryGet(self.username)) for nid in self.bootstrap]

    def feed(self, node_id: str, reply) -> bool:
        """Return True once an entry has been settled on."""
        if node_id not in self.bootstrap or node_id in self.answered or self.entry is not None:
            return False
        if isinstance(reply, Message) and not isinstance(reply, (DirectoryRecord, ErrorReply)):
            return False
        self.answered.add(node_id)
        if isinstance(reply, DirectoryRecord) and reply.entry.username == self.username and reply.entry.is_valid():
            if self.best is None or reply.entry.version > self.best.version:
                self.best = reply.entry
        if self.best is not None and len(self.answered) >= min(self.quorum, len(self.bootstrap)):
            self.entry = self.best
            return True
        return False

    @property
    def exhausted(self) -> bool:
        return self.entry is None and self.answered >= set(self.bootstrap)


# -- registration -------------------------------------------------------------


@dataclass
class RegistrationPlan:
    username: str
    password: bytes = field(repr=False)
    payload: bytes = field(repr=False)
    committee: tuple[CommitteeMember, ...]
    threshold: int = DEFAULT_THRESHOLD
    signing_key: SigningKey = field(default=None, repr=False)

    def __post_init__(self):
        self.committee = tuple(self.committee)
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if len(self.committee) < self.threshold + 1:
            raise ValueError(f"committee of {len(self.committee)} cannot meet threshold {self.threshold}")
        if not self.password:
            raise ValueError("empty password")


@dataclass(frozen=True)
class RegistrationReport:
    username: str
    committee: tuple[CommitteeMember, ...]
    threshold: int
    version: int


class RegistrationSession(Session):
    """Deal a fresh secret to the committee, then publish the directory entry.

    All-or-nothing: any node rejecting the registration aborts before the
    directory is touched.
    """

    def __init__(
        self,
        group: Group,
        plan: RegistrationPlan,
        roster: Roster,
        rng: random.Random = SYSTEM_RNG,
        directory_nodes: Iterable[str] | None = None,
    ):
        super().__init__(group, rng)
        self.plan: RegistrationPlan | None = plan
        self.username = plan.username
        self.committee = plan.committee
        self.threshold = plan.threshold
        self.roster = roster
        self.signing_key = plan.signing_key or new_signing_key(rng)
        members = [m.node_id for m in plan.committee]
        missing = [nid for nid in members if nid not in roster]
        if missing:
            raise ValueError(f"no contact details for {missing}")
        self.directory_nodes = list(dict.fromkeys(list(directory_nodes or ()) + members))
        self.phase = "register"
        self.pending: set[str] = set(members)

    def start(self) -> list[Outgoing]:
        plan, g = self.plan, self.group
        user = plan.username
        s = g.random_scalar(self.rng, nonzero=True)
        shares = deal_shares(s, plan.threshold, [m.index for m in plan.committee], self.rng)
        point = g.hash_to_group(plan.password, PASSWORD_TAG)
        key = derive_backup_key(s * point)
        backup = seal_backup(key, pack_payload(self.signing_key, plan.payload), user.encode(), self.rng).to_bytes()
        pubkey = bytes(self.signing_key.verify_key)
        out = []
        for member, share in zip(plan.committee, shares):
            contact = self.roster[member.node_id]
            sealed = seal.seal(contact.transport_pubkey, encode_share(share, g), share_aad(user), self.rng)
            req = RegisterRequest(user, member.index, plan.threshold, len(plan.committee), sealed, backup, pubkey)
            out.append(Outgoing(member.node_id, req.signed(self.signing_key, g)))
        # the dealer forgets everything secret; only ciphertexts went out
        del s, shares, point, key
        self.plan = None
        return out

    def _on_reply(self, node_id, reply):
        err = _as_error(reply)
        if self.phase == "register":
            if node_id not in self.pending or _stale(reply, RegisterAck):
                return []
            if err is not None or not isinstance(reply, RegisterAck):
                detail = err or f"unexpected {type(reply).__name__}"
                return self._finish(error=NodeRejected(f"{node_id} rejected registration: {detail}"))
            self.pending.discard(node_id)
            if self.pending:
                return []
            self.phase = "directory"
            entry = DirectoryEntry(
                self.username, bytes(self.signing_key.verify_key), 1, self.committee, self.threshold
            ).signed(self.signing_key)
            self.pending = {m.node_id for m in self.committee}
            return [Outgoing(nid, DirectoryPut(entry)) for nid in self.directory_nodes]
        if self.phase == "directory":
            if node_id not in self.pending or _stale(reply, DirectoryAck):
                return []
            if err is not None or not isinstance(reply, DirectoryAck):
                detail = err or f"unexpected {type(reply).__name__}"
                return self._finish(error=DirectoryRejected(f"{node_id} rejected entry: {detail}"))
            self.pending.discard(node_id)
            if not self.pending:
                return self._finish(RegistrationReport(self.username, self.committee, self.threshold, 1))
        return []


# -- recovery -----------------------------------------------------------------


class RecoverySession(Session):
    """Look the user up, run the threshold OPRF and open the backup.

    Every committee member (minus ``exclude``) gets an independently blinded
    request; the first ``t + 1`` responses at the epoch of the first arrival
    are combined. A malformed response still occupies one of the ``t + 1``
    slots, so corruption surfaces as :class:`DecryptionFailed` rather than
    being silently skipped.
    """

    def __init__(
        self,
        group: Group,
        username: str,
        password: bytes,
        bootstrap: Sequence[str],
        rng: random.Random = SYSTEM_RNG,
        exclude: Iterable[str] = (),
    ):
        super().__init__(group, rng)
        if not password:
            raise ValueError("empty password")
        self.username = username
        self._password = password
        self.exclude = set(exclude)
        self.lookup = _Lookup(username, bootstrap)
        self.phase = "lookup"
        self.entry: DirectoryEntry | None = None
        self._state = None
        self.targets: dict[str, int] = {}
        self.awaited_epoch: int | None = None
        self.responses: list[EvaluatedElement] = []
        self.backups: list[bytes] = []
        self.corrupt = 0
        self.answered: set[str] = set()
        self.refusals: list[KintsugiError] = []
        self.discarded = 0

    def start(self) -> list[Outgoing]:
        return self.lookup.requests()

    def _scrub(self) -> None:
        self._password = b""
        self._state = None
        self.responses = []
        self.backups = []

    def _on_reply(self, node_id, reply):
        if self.phase == "lookup":
            if self.lookup.feed(node_id, reply):
                return self._begin(self.lookup.entry)
            if self.lookup.exhausted:
                return self._finish(error=NotFound(self.username))
            return []
        if node_id not in self.targets or node_id in self.answered or _stale(reply, RecoveryResponse):
            return []
        self.answered.add(node_id)
        if isinstance(reply, MalformedMessage):
            self.corrupt += 1
        elif (err := _as_error(reply)) is not None:
            self.refusals.append(err)
            return self._give_up_if_hopeless()
        else:
            if reply.username != self.username or reply.index != self.targets[node_id]:
                self.corrupt += 1
            else:
                if self.awaited_epoch is None:
                    self.awaited_epoch = reply.epoch
                if reply.epoch != self.awaited_epoch:
                    self.discarded += 1
                    return self._give_up_if_hopeless()
                self.responses.append(EvaluatedElement(reply.index, reply.epoch, reply.evaluated))
                self.backups.append(reply.backup)
        if len(self.responses) + self.corrupt >= self.entry.threshold + 1:
            return self._combine()
        return []

    def _give_up_if_hopeless(self) -> list[Outgoing]:
        # refusals are final answers: stop once t + 1 usable replies are out of reach
        possible = len(self.responses) + self.corrupt + len(set(self.targets) - self.answered)
        if possible < self.entry.threshold + 1:
            return self._finish(error=self._stall_error())
        return []

    def _begin(self, entry: DirectoryEntry) -> list[Outgoing]:
        self.entry = entry
        self.phase = "evaluate"
        self.targets = {m.node_id: m.index for m in entry.committee if m.node_id not in self.exclude}
        self._state, blinded = blind(self.group, self._password, self.targets.values(), self.rng)
        by_index = {b.index: b.element for b in blinded}
        return [
            Outgoing(nid, RecoveryRequest(self.username, idx, by_index[idx])) for nid, idx in self.targets.items()
        ]

    def _combine(self) -> list[Outgoing]:
        if self.corrupt:
            return self._finish(error=DecryptionFailed("decryption failed"))
        out = unblind_and_combine(self._state, self.responses, self.entry.threshold)
        key = derive_backup_key(out)
        for blob in self.backups:
            try:
                plain = open_backup(key, EncryptedBackup.from_bytes(blob), self.username.encode())
                return self._finish(unpack_payload(plain))
            except (DecryptionFailed, MalformedMessage):
                continue
        return self._finish(error=DecryptionFailed("decryption failed"))

    def _stall_error(self) -> KintsugiError:
        if any(isinstance(e, RateLimited) for e in self.refusals):
            return RateLimited("recovery refused by rate limiting")
        if self.phase == "lookup":
            return NotFound(f"no directory replica answered for {self.username!r}")
        got = len(self.responses)
        need = self.entry.threshold + 1
        return InsufficientResponses(f"{got} of {need} epoch-consistent responses")

    @property
    def stalled(self) -> bool:
        """All targets have answered and the session still cannot finish."""
        if self.done:
            return False
        if self.phase == "lookup":
            return self.lookup.exhausted
        return self.answered >= set(self.targets)


# -- rotation -----------------------------------------------------------------


@dataclass(frozen=True)
class RotationReport:
    username: str
    version: int
    epoch: int
    committee: tuple[CommitteeMember, ...]
    threshold: int
    contributors: tuple[int, ...]
    deleted: tuple[str, ...]


class RotationSession(Session):
    """Reshare onto ``new_nodes`` with threshold ``t_new`` (same committee = proactive refresh).

    Phases: lookup -> prepare (pick t_old+1 same-epoch contributors) ->
    directive (collect sealed subshare bundles) -> install (new members
    combine into pending shares) -> directory (publish version + 1) ->
    commit (new members promote, departing members delete).
    """

    def __init__(
        self,
        group: Group,
        username: str,
        signing_key: SigningKey,
        new_nodes: Sequence[str],
        t_new: int,
        roster: Roster,
        bootstrap: Sequence[str],
        rng: random.Random = SYSTEM_RNG,
        directory_nodes: Iterable[str] = (),
    ):
        super().__init__(group, rng)
        if t_new < 0 or len(new_nodes) < t_new + 1:
            raise ValueError(f"{len(new_nodes)} new nodes cannot meet threshold {t_new}")
        missing = [nid for nid in new_nodes if nid not in roster]
        if missing:
            raise ValueError(f"no contact details for {missing}")
        self.username = username
        self.signing_key = signing_key
        self.roster = roster
        self.new_committee = assign_committee(roster, list(new_nodes))
        self.t_new = t_new
        self.lookup = _Lookup(username, bootstrap)
        self.directory_nodes = [nid for nid in directory_nodes if nid in roster]
        self.phase = "lookup"
        self.entry: DirectoryEntry | None = None
        self.ready: dict[str, RefreshReady] = {}
        self.refused: set[str] = set()
        self.directive: RotationDirective | None = None
        self.bundles: dict[int, SubshareBundle] = {}
        self.pending: set[str] = set()
        self.deleted: list[str] = []
        self.commit_waiting: set[str] = set()

    def start(self) -> list[Outgoing]:
        return self.lookup.requests()

    def _old_ids(self) -> list[str]:
        return [m.node_id for m in self.entry.committee]

    _EXPECTED = {
        "lookup": DirectoryRecord,
        "prepare": RefreshReady,
        "directive": SubshareBundle,
        "install": RefreshAck,
        "directory": DirectoryAck,
        "commit": CommitAck,
    }

    def on_reply(self, node_id, reply):
        if self.done and self.ok and node_id in self.commit_waiting:
            # drivers keep draining after completion: fold in late deletion confirmations
            self.commit_waiting.discard(node_id)
            if isinstance(reply, CommitAck) and reply.status == COMMIT_DELETED:
                self.deleted.append(node_id)
                self.result = replace(self.result, deleted=tuple(sorted(self.deleted)))
            return []
        return super().on_reply(node_id, reply)

    def _on_reply(self, node_id, reply):
        if self.phase != "lookup" and _stale(reply, self._EXPECTED[self.phase]):
            return []
        handler = getattr(self, f"_on_{self.phase}")
        return handler(node_id, reply)

    def _on_lookup(self, node_id, reply):
        if self.lookup.feed(node_id, reply):
            entry = self.entry = self.lookup.entry
            if entry.user_pubkey != bytes(self.signing_key.verify_key):
                return self._finish(error=BadAuthorization("signing key does not match the directory entry"))
            self.phase = "prepare"
            prepare = RefreshPrepare(self.username, entry.version + 1).signed(self.signing_key)
            return [Outgoing(nid, prepare) for nid in self._old_ids()]
        if self.lookup.exhausted:
            return self._finish(error=NotFound(self.username))
        return []

    def _on_prepare(self, node_id, reply):
        if node_id not in self._old_ids() or node_id in self.ready or node_id in self.refused:
            return []
        err = _as_error(reply)
        if isinstance(err, BadAuthorization):
            return self._finish(error=err)
        if err is not None or not isinstance(reply, RefreshReady):
            self.refused.add(node_id)
            if len(self.refused) > len(self.entry.committee) - (self.entry.threshold + 1):
                return self._finish(error=InsufficientContributors("too many old nodes refused to prepare"))
            return []
        self.ready[node_id] = reply
        need = self.entry.threshold + 1
        same = [r for r in self.ready.values() if r.epoch == reply.epoch]
        if len(same) < need:
            return []
        chosen = sorted(same, key=lambda r: r.index)[:need]
        contributors = tuple(r.index for r in chosen)
        self.directive = RotationDirective(
            self.username,
            self.entry.user_pubkey,
            self.entry.committee,
            self.new_committee,
            tuple(self.roster[m.node_id].transport_pubkey for m in self.new_committee),
            contributors,
            self.entry.threshold,
            self.t_new,
            reply.epoch,
            self.entry.version + 1,
        ).signed(self.signing_key)
        self.phase = "directive"
        by_index = {m.index: m.node_id for m in self.entry.committee}
        self.pending = {by_index[i] for i in contributors}
        return [Outgoing(by_index[i], RefreshDirective(self.directive)) for i in contributors]

    def _on_directive(self, node_id, reply):
        if node_id not in self.pending:
            return []
        err = _as_error(reply)
        if err is not None or not isinstance(reply, SubshareBundle):
            return self._finish(error=InsufficientContributors(f"{node_id} did not contribute: {err or reply}"))
        self.pending.discard(node_id)
        self.bundles[reply.from_index] = reply
        if self.pending:
            return []
        self.phase = "install"
        backup = next(iter(self.bundles.values())).backup
        out = []
        for m in self.new_committee:
            sealed = []
            for from_index in self.directive.contributors:
                blobs = dict(self.bundles[from_index].sealed)
                if m.index not in blobs:
                    return self._finish(error=InsufficientContributors(f"bundle {from_index} lacks index {m.index}"))
                sealed.append((from_index, blobs[m.index]))
            out.append(Outgoing(m.node_id, RefreshInstall(self.directive, backup, tuple(sealed))))
        self.pending = {m.node_id for m in self.new_committee}
        return out

    def _on_install(self, node_id, reply):
        if node_id not in self.pending:
            return []
        err = _as_error(reply)
        if err is not None or not isinstance(reply, RefreshAck):
            return self._finish(error=err if err is not None else NodeRejected(f"{node_id}: {reply}"))
        self.pending.discard(node_id)
        if self.pending:
            return []
        self.phase = "directory"
        entry = DirectoryEntry(
            self.username,
            self.entry.user_pubkey,
            self.directive.new_version,
            self.new_committee,
            self.t_new,
        ).signed(self.signing_key)
        self.pending = {m.node_id for m in self.new_committee}
        targets = dict.fromkeys(self._old_ids() + [m.node_id for m in self.new_committee] + self.directory_nodes)
        return [Outgoing(nid, DirectoryPut(entry)) for nid in targets]

    def _on_directory(self, node_id, reply):
        if node_id not in self.pending:
            return []
        err = _as_error(reply)
        if err is not None or not isinstance(reply, DirectoryAck):
            return self._finish(error=DirectoryRejected(f"{node_id} rejected entry: {err or reply}"))
        self.pending.discard(node_id)
        if self.pending:
            return []
        self.phase = "commit"
        by_index = {m.index: m.node_id for m in self.entry.committee}
        self.pending = {m.node_id for m in self.new_committee} | {by_index[i] for i in self.directive.contributors}
        targets = dict.fromkeys(self._old_ids() + [m.node_id for m in self.new_committee])
        self.commit_waiting = set(targets)
        return [Outgoing(nid, RefreshCommit(self.directive)) for nid in targets]

    def _on_commit(self, node_id, reply):
        if node_id not in self.commit_waiting:
            return []
        self.commit_waiting.discard(node_id)
        if isinstance(reply, CommitAck) and reply.status == COMMIT_DELETED:
            self.deleted.append(node_id)
        self.pending.discard(node_id)
        if self.pending:
            return []
        d = self.directive
        return self._finish(
            RotationReport(
                self.username,
                d.new_version,
                d.old_epoch + 1,
                d.new_committee,
                d.t_new,
                d.contributors,
                tuple(sorted(self.deleted)),
            )
        )

    def _stall_error(self) -> KintsugiError:
        if self.phase in ("lookup", "prepare"):
            return InsufficientContributors(f"rotation stalled in {self.phase}")
        return InsufficientResponses(f"rotation stalled in {self.phase}")


class RefreshScheduler:
    """Periodic proactive refresh: rotate onto the same committee every ``interval`` seconds."""

    def __init__(self, username: str, signing_key: SigningKey, interval: float = 86400.0, start: float = 0.0):
        self.username = username
        self.signing_key = signing_key
        self.interval = interval
        self.next_due = start + interval

    def due(self, now: float) -> bool:
        return now >= self.next_due

    def session(self, group: Group, entry: DirectoryEntry, roster: Roster, rng: random.Random = SYSTEM_RNG):
        """A same-committee rotation for the current entry; advances the schedule."""
        self.next_due += self.interval
        nodes = [m.node_id for m in sorted(entry.committee, key=lambda m: m.index)]
        return RotationSession(group, self.username, self.signing_key, nodes, entry.threshold, roster, nodes, rng)
