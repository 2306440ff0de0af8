"""Replicated username -> committee registry with signed, versioned entries.

The first accepted entry for a username pins its verification key
(trust on first use). Later entries must be signed by that key and carry a
strictly higher version. Replicas reconcile with :func:`merge_replicas`,
which keeps the highest valid version per username.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

from nacl.exceptions import BadSignatureError
from nacl.signing import SigningKey, VerifyKey

from .codec import Reader, Writer
from .errors import BadSignature, KeyMismatch, MalformedMessage, NotFound, StaleVersion

ENTRY_SIGNING_TAG = b"kintsugi/dir/v1"
SIGNATURE_SIZE = 64
PUBKEY_SIZE = 32


@dataclass(frozen=True)
class CommitteeMember:
    node_id: str
    address: str
    index: int

    def encode(self, w: Writer) -> None:
        w.str(self.node_id).str(self.address).u32(self.index)

    @classmethod
    def decode(cls, r: Reader) -> CommitteeMember:
        return cls(r.str(), r.str(), r.u32())


def encode_committee(w: Writer, committee: Iterable[CommitteeMember]) -> None:
    committee = list(committee)
    w.u32(len(committee))
    for m in committee:
        m.encode(w)


def decode_committee(r: Reader) -> tuple[CommitteeMember, ...]:
    return tuple(CommitteeMember.decode(r) for _ in range(r.u32()))


@dataclass(frozen=True)
class DirectoryEntry:
    username: str
    user_pubkey: bytes
    version: int
    committee: tuple[CommitteeMember, ...]
    threshold: int
    signature: bytes = field(default=b"", compare=True)

    def __post_init__(self):
        object.__setattr__(self, "committee", tuple(self.committee))
        if len(self.user_pubkey) != PUBKEY_SIZE:
            raise ValueError("user_pubkey must be 32 bytes")
        if not 0 <= self.version < 2**64:
            raise ValueError("version out of range")
        indices = [m.index for m in self.committee]
        if len(set(indices)) != len(indices):
            raise ValueError("committee indices must be distinct")
        if len(self.committee) < self.threshold + 1:
            raise ValueError(f"committee of {len(self.committee)} cannot meet threshold {self.threshold}")

    def signed_bytes(self) -> bytes:
        w = Writer().raw(ENTRY_SIGNING_TAG)
        w.str(self.username).raw(self.user_pubkey).u64(self.version)
        encode_committee(w, self.committee)
        w.u32(self.threshold)
        return w.getvalue()

    def encode(self, w: Writer) -> None:
        w.raw(self.signed_bytes()[len(ENTRY_SIGNING_TAG) :])
        w.raw(self.signature.ljust(SIGNATURE_SIZE, b"\0"))

    def to_bytes(self) -> bytes:
        w = Writer()
        self.encode(w)
        return w.getvalue()

    @classmethod
    def decode(cls, r: Reader) -> DirectoryEntry:
        start = r.pos
        username = r.str()
        pubkey = r.raw(PUBKEY_SIZE)
        version = r.u64()
        committee = decode_committee(r)
        threshold = r.u32()
        signature = r.raw(SIGNATURE_SIZE)
        try:
            return cls(username, pubkey, version, committee, threshold, signature)
        except ValueError as exc:
            raise MalformedMessage(str(exc), start) from None

    @classmethod
    def from_bytes(cls, data: bytes) -> DirectoryEntry:
        r = Reader(data)
        entry = cls.decode(r)
        r.done()
        return entry

    def signed(self, key: SigningKey) -> DirectoryEntry:
        if bytes(key.verify_key) != self.user_pubkey:
            raise ValueError("signing key does not match user_pubkey")
        return replace(self, signature=key.sign(self.signed_bytes()).signature)

    def verify(self) -> None:
        try:
            VerifyKey(self.user_pubkey).verify(self.signed_bytes(), self.signature)
        except (BadSignatureError, ValueError):
            raise BadSignature(f"bad signature on entry for {self.username!r} v{self.version}") from None

    def is_valid(self) -> bool:
        try:
            self.verify()
        except BadSignature:
            return False
        return True


class DirectoryStore:
    """One replica of the registry."""

    def __init__(self, entries: Iterable[DirectoryEntry] = ()):
        self._entries: dict[str, DirectoryEntry] = {}
        self._lock = threading.Lock()
        for e in entries:
            self.put_entry(e)

    @classmethod
    def unchecked(cls, entries: Iterable[DirectoryEntry]) -> DirectoryStore:
        """A replica holding ``entries`` verbatim, valid or not (e.g. after tampering)."""
        store = cls()
        store._entries = {e.username: e for e in entries}
        return store

    def put_entry(self, entry: DirectoryEntry) -> DirectoryEntry:
        entry.verify()
        with self._lock:
            current = self._entries.get(entry.username)
            if current is not None:
                if current.user_pubkey != entry.user_pubkey:
                    raise KeyMismatch(f"{entry.username!r} is pinned to a different key")
                if entry == current:
                    return current
                if entry.version <= current.version:
                    raise StaleVersion(f"version {entry.version} <= stored {current.version}")
            self._entries[entry.username] = entry
            return entry

    def get_entry(self, username: str) -> DirectoryEntry:
        try:
            return self._entries[username]
        except KeyError:
            raise NotFound(username) from None

    def pinned_key(self, username: str) -> bytes | None:
        e = self._entries.get(username)
        return e.user_pubkey if e else None

    def __contains__(self, username: str) -> bool:
        return username in self._entries

    def __iter__(self) -> Iterator[DirectoryEntry]:
        return iter(sorted(self._entries.values(), key=lambda e: e.username))

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, DirectoryStore) and self._entries == other._entries

    def snapshot(self) -> dict[str, DirectoryEntry]:
        return dict(self._entries)


def _rank(entry: DirectoryEntry) -> tuple[int, bytes]:
    return (entry.version, entry.to_bytes())


def merge_replicas(a: DirectoryStore, b: DirectoryStore) -> DirectoryStore:
    """Join two replicas: per username, the highest-ranked validly signed entry.

    Ranking is by version, then by encoded bytes, so the join is a
    commutative, associative and idempotent max.
    """
    best: dict[str, DirectoryEntry] = {}
    for store in (a, b):
        for entry in store.snapshot().values():
            if not entry.is_valid():
                continue
            cur = best.get(entry.username)
            if cur is None or _rank(entry) > _rank(cur):
                best[entry.username] = entry
    return DirectoryStore.unchecked(best.values())
