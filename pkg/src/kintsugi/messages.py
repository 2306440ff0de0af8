"""Typed protocol messages and their canonical envelope encoding.

Envelope layout::

    version (u8 = 0x01) | type (u8) | session id (16 bytes) | payload

Each message class lists its fields as ``(name, kind)`` pairs in
``FIELDS``; the payload is those fields in order. Raw share values only
ever travel inside sealed envelopes (``sealed_share`` / ``sealed``
fields), never as plain scalars.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Any, ClassVar

from nacl.exceptions import BadSignatureError
from nacl.signing import SigningKey, VerifyKey

from .codec import Reader, Writer
from .directory import CommitteeMember, DirectoryEntry, decode_committee, encode_committee
from .errors import BadAuthorization, MalformedMessage
from .group import Group, GroupElement
from .sharing import RefreshSubshare, Share

PROTOCOL_VERSION = 0x01
SESSION_ID_SIZE = 16
NO_SIGNATURE = bytes(64)

REGISTER_TAG = b"kintsugi/register/v1"
PREPARE_TAG = b"kintsugi/prepare/v1"
DIRECTIVE_TAG = b"kintsugi/directive/v1"
SHARE_SEAL_TAG = b"kintsugi/share/v1"
SUBSHARE_SEAL_TAG = b"kintsugi/subshare/v1"


# -- field kinds ------------------------------------------------------------


def _enc(w: Writer, kind: str, value: Any, group: Group) -> None:
    if kind == "u8":
        w.u8(value)
    elif kind == "u32":
        w.u32(value)
    elif kind == "u64":
        w.u64(value)
    elif kind == "str":
        w.str(value)
    elif kind == "bytes":
        w.bytes(value)
    elif kind == "key":
        if len(value) != 32:
            raise ValueError("key fields are 32 bytes")
        w.raw(value)
    elif kind == "sig":
        if len(value) != 64:
            raise ValueError("signature fields are 64 bytes")
        w.raw(value)
    elif kind == "elem":
        w.raw(value.to_bytes())
    elif kind == "entry":
        value.encode(w)
    elif kind == "committee":
        encode_committee(w, value)
    elif kind == "indices":
        w.u32(len(value))
        for i in value:
            w.u32(i)
    elif kind == "keys":
        w.u32(len(value))
        for k in value:
            _enc(w, "key", k, group)
    elif kind == "sealed":
        w.u32(len(value))
        for idx, blob in value:
            w.u32(idx).bytes(blob)
    elif kind == "directive":
        value.encode(w)
    else:  # pragma: no cover
        raise AssertionError(kind)


def _dec(r: Reader, kind: str, group: Group) -> Any:
    if kind == "u8":
        return r.u8()
    if kind == "u32":
        return r.u32()
    if kind == "u64":
        return r.u64()
    if kind == "str":
        return r.str()
    if kind == "bytes":
        return r.bytes()
    if kind == "key":
        return r.raw(32)
    if kind == "sig":
        return r.raw(64)
    if kind == "elem":
        return r.element(group)
    if kind == "entry":
        return DirectoryEntry.decode(r)
    if kind == "committee":
        return decode_committee(r)
    if kind == "indices":
        return tuple(r.u32() for _ in range(r.u32()))
    if kind == "keys":
        return tuple(r.raw(32) for _ in range(r.u32()))
    if kind == "sealed":
        return tuple((r.u32(), r.bytes()) for _ in range(r.u32()))
    if kind == "directive":
        return RotationDirective.decode(r)
    raise AssertionError(kind)  # pragma: no cover


class Message:
    TYPE: ClassVar[int]
    FIELDS: ClassVar[tuple[tuple[str, str], ...]]

    def encode_payload(self, group: Group) -> bytes:
        w = Writer()
        for name, kind in self.FIELDS:
            _enc(w, kind, getattr(self, name), group)
        return w.getvalue()

    @classmethod
    def decode_payload(cls, r: Reader, group: Group) -> Message:
        values = {name: _dec(r, kind, group) for name, kind in cls.FIELDS}
        return cls(**values)

    @property
    def type_name(self) -> str:
        return type(self).__name__


# -- rotation directive -----------------------------------------------------


@dataclass(frozen=True)
class RotationDirective:
    """User-signed instruction to reshare onto a new committee.

    ``contributors`` are exactly ``t_old + 1`` old indices; every new node
    interpolates over this same set. ``new_keys`` are the transport keys
    of ``new_committee`` members, in order, for sealing subshares.
    """

    username: str
    user_pubkey: bytes
    old_committee: tuple[CommitteeMember, ...]
    new_committee: tuple[CommitteeMember, ...]
    new_keys: tuple[bytes, ...]
    contributors: tuple[int, ...]
    t_old: int
    t_new: int
    old_epoch: int
    new_version: int
    signature: bytes = NO_SIGNATURE

    def __post_init__(self):
        old_idx = {m.index for m in self.old_committee}
        new_idx = [m.index for m in self.new_committee]
        if len(set(new_idx)) != len(new_idx):
            raise ValueError("new committee indices must be distinct")
        if not set(self.contributors) <= old_idx:
            raise ValueError("contributors must come from the old committee")
        if len(set(self.contributors)) != self.t_old + 1 or len(self.contributors) != self.t_old + 1:
            raise ValueError(f"need exactly {self.t_old + 1} distinct contributors")
        if len(self.new_committee) < self.t_new + 1:
            raise ValueError("new committee too small for t_new")
        if len(self.new_keys) != len(self.new_committee):
            raise ValueError("one transport key per new member")

    def _body(self, w: Writer) -> None:
        w.str(self.username).raw(self.user_pubkey)
        encode_committee(w, self.old_committee)
        encode_committee(w, self.new_committee)
        _enc(w, "keys", self.new_keys, None)
        _enc(w, "indices", self.contributors, None)
        w.u32(self.t_old).u32(self.t_new).u64(self.old_epoch).u64(self.new_version)

    def signed_bytes(self) -> bytes:
        w = Writer().raw(DIRECTIVE_TAG)
        self._body(w)
        return w.getvalue()

    def encode(self, w: Writer) -> None:
        self._body(w)
        w.raw(self.signature)

    @classmethod
    def decode(cls, r: Reader) -> RotationDirective:
        start = r.pos
        username = r.str()
        pubkey = r.raw(32)
        old = decode_committee(r)
        new = decode_committee(r)
        keys = _dec(r, "keys", None)
        contributors = _dec(r, "indices", None)
        t_old, t_new, old_epoch, new_version = r.u32(), r.u32(), r.u64(), r.u64()
        sig = r.raw(64)
        try:
            return cls(username, pubkey, old, new, keys, contributors, t_old, t_new, old_epoch, new_version, sig)
        except ValueError as exc:
            raise MalformedMessage(str(exc), start) from None

    def signed(self, key: SigningKey) -> RotationDirective:
        return replace(self, signature=key.sign(self.signed_bytes()).signature)

    def verify(self, pinned_key: bytes) -> None:
        if pinned_key != self.user_pubkey:
            raise BadAuthorization("directive key differs from pinned key")
        try:
            VerifyKey(pinned_key).verify(self.signed_bytes(), self.signature)
        except BadSignatureError:
            raise BadAuthorization("bad directive signature") from None

    def member(self, node_id: str) -> CommitteeMember | None:
        return next((m for m in self.new_committee if m.node_id == node_id), None)

    def new_key_for(self, index: int) -> bytes:
        for m, k in zip(self.new_committee, self.new_keys):
            if m.index == index:
                return k
        raise KeyError(index)


# -- message types ----------------------------------------------------------


@dataclass(frozen=True)
class RegisterRequest(Message):
    TYPE = 0x01
    FIELDS = (
        ("username", "str"),
        ("index", "u32"),
        ("threshold", "u32"),
        ("n", "u32"),
        ("sealed_share", "bytes"),
        ("backup", "bytes"),
        ("user_pubkey", "key"),
        ("signature", "sig"),
    )
    username: str
    index: int
    threshold: int
    n: int
    sealed_share: bytes
    backup: bytes
    user_pubkey: bytes
    signature: bytes = NO_SIGNATURE

    def signed_bytes(self, group: Group) -> bytes:
        unsigned = replace(self, signature=NO_SIGNATURE)
        return REGISTER_TAG + unsigned.encode_payload(group)[:-64]

    def signed(self, key: SigningKey, group: Group) -> RegisterRequest:
        return replace(self, signature=key.sign(self.signed_bytes(group)).signature)

    @property
    def is_signed(self) -> bool:
        return self.signature != NO_SIGNATURE


@dataclass(frozen=True)
class RegisterAck(Message):
    TYPE = 0x02
    FIELDS = (("username", "str"), ("index", "u32"), ("epoch", "u64"))
    username: str
    index: int
    epoch: int


@dataclass(frozen=True)
class RecoveryRequest(Message):
    TYPE = 0x03
    FIELDS = (("username", "str"), ("index", "u32"), ("blinded", "elem"))
    username: str
    index: int
    blinded: GroupElement


@dataclass(frozen=True)
class RecoveryResponse(Message):
    TYPE = 0x04
    FIELDS = (
        ("username", "str"),
        ("index", "u32"),
        ("epoch", "u64"),
        ("evaluated", "elem"),
        ("threshold", "u32"),
        ("backup", "bytes"),
    )
    username: str
    index: int
    epoch: int
    evaluated: GroupElement
    threshold: int
    backup: bytes


@dataclass(frozen=True)
class ErrorReply(Message):
    TYPE = 0x05
    FIELDS = (("code", "u8"), ("detail", "str"))
    code: int
    detail: str


@dataclass(frozen=True)
class DirectoryPut(Message):
    TYPE = 0x06
    FIELDS = (("entry", "entry"),)
    entry: DirectoryEntry


@dataclass(frozen=True)
class DirectoryGet(Message):
    TYPE = 0x07
    FIELDS = (("username", "str"),)
    username: str


@dataclass(frozen=True)
class DirectoryRecord(Message):
    TYPE = 0x08
    FIELDS = (("entry", "entry"),)
    entry: DirectoryEntry


@dataclass(frozen=True)
class DirectoryAck(Message):
    TYPE = 0x09
    FIELDS = (("username", "str"), ("version", "u64"))
    username: str
    version: int


@dataclass(frozen=True)
class RefreshPrepare(Message):
    TYPE = 0x0A
    FIELDS = (("username", "str"), ("new_version", "u64"), ("signature", "sig"))
    username: str
    new_version: int
    signature: bytes = NO_SIGNATURE

    def signed_bytes(self) -> bytes:
        return Writer().raw(PREPARE_TAG).str(self.username).u64(self.new_version).getvalue()

    def signed(self, key: SigningKey) -> RefreshPrepare:
        return replace(self, signature=key.sign(self.signed_bytes()).signature)

    def verify(self, pinned_key: bytes) -> None:
        try:
            VerifyKey(pinned_key).verify(self.signed_bytes(), self.signature)
        except BadSignatureError:
            raise BadAuthorization("bad prepare signature") from None


@dataclass(frozen=True)
class RefreshReady(Message):
    TYPE = 0x0B
    FIELDS = (("username", "str"), ("index", "u32"), ("epoch", "u64"))
    username: str
    index: int
    epoch: int


@dataclass(frozen=True)
class RefreshDirective(Message):
    TYPE = 0x0C
    FIELDS = (("directive", "directive"),)
    directive: RotationDirective


@dataclass(frozen=True)
class SubshareBundle(Message):
    """Old node -> coordinator: one sealed subshare per new member, by new index."""

    TYPE = 0x0D
    FIELDS = (
        ("username", "str"),
        ("from_index", "u32"),
        ("new_epoch", "u64"),
        ("sealed", "sealed"),
        ("backup", "bytes"),
    )
    username: str
    from_index: int
    new_epoch: int
    sealed: tuple[tuple[int, bytes], ...]
    backup: bytes


@dataclass(frozen=True)
class RefreshInstall(Message):
    """Coordinator -> new node: sealed subshares keyed by contributor index."""

    TYPE = 0x0E
    FIELDS = (("directive", "directive"), ("backup", "bytes"), ("sealed", "sealed"))
    directive: RotationDirective
    backup: bytes
    sealed: tuple[tuple[int, bytes], ...]


@dataclass(frozen=True)
class RefreshAck(Message):
    TYPE = 0x0F
    FIELDS = (("username", "str"), ("index", "u32"), ("epoch", "u64"))
    username: str
    index: int
    epoch: int


@dataclass(frozen=True)
class RefreshCommit(Message):
    TYPE = 0x10
    FIELDS = (("directive", "directive"),)
    directive: RotationDirective


COMMIT_PROMOTED = 0
COMMIT_DELETED = 1
COMMIT_ABSENT = 2


@dataclass(frozen=True)
class CommitAck(Message):
    TYPE = 0x11
    FIELDS = (("username", "str"), ("status", "u8"), ("epoch", "u64"))
    username: str
    status: int
    epoch: int


@dataclass(frozen=True)
class NodeInfoRequest(Message):
    TYPE = 0x12
    FIELDS = ()


@dataclass(frozen=True)
class NodeInfo(Message):
    TYPE = 0x13
    FIELDS = (("node_id", "str"), ("transport_pubkey", "key"), ("group", "str"))
    node_id: str
    transport_pubkey: bytes
    group: str


MESSAGE_TYPES: dict[int, type[Message]] = {
    cls.TYPE: cls
    for cls in (
        RegisterRequest,
        RegisterAck,
        RecoveryRequest,
        RecoveryResponse,
        ErrorReply,
        DirectoryPut,
        DirectoryGet,
        DirectoryRecord,
        DirectoryAck,
        RefreshPrepare,
        RefreshReady,
        RefreshDirective,
        SubshareBundle,
        RefreshInstall,
        RefreshAck,
        RefreshCommit,
        CommitAck,
        NodeInfoRequest,
        NodeInfo,
    )
}

# replies a node may send; none of them may carry a plain scalar
NODE_REPLY_TYPES = (
    RegisterAck,
    RecoveryResponse,
    ErrorReply,
    DirectoryRecord,
    DirectoryAck,
    RefreshReady,
    SubshareBundle,
    RefreshAck,
    CommitAck,
    NodeInfo,
)


# -- envelope ---------------------------------------------------------------


@dataclass(frozen=True)
class Envelope:
    session_id: bytes
    message: Message
    version: int = PROTOCOL_VERSION

    @property
    def type(self) -> int:
        return self.message.TYPE


def new_session_id(rng=None) -> bytes:
    return rng.randbytes(SESSION_ID_SIZE) if rng is not None else os.urandom(SESSION_ID_SIZE)


def encode_message(message: Message, group: Group, session_id: bytes = bytes(SESSION_ID_SIZE)) -> bytes:
    if len(session_id) != SESSION_ID_SIZE:
        raise ValueError("session id must be 16 bytes")
    return bytes([PROTOCOL_VERSION, message.TYPE]) + session_id + message.encode_payload(group)


def decode_header(data: bytes) -> tuple[int, bytes]:
    """Validate version and type; return ``(type, session_id)``."""
    r = Reader(data)
    version = r.u8()
    if version != PROTOCOL_VERSION:
        raise MalformedMessage(f"unsupported protocol version {version:#04x}", 0)
    mtype = r.u8()
    if mtype not in MESSAGE_TYPES:
        raise MalformedMessage(f"unknown message type {mtype:#04x}", 1)
    return mtype, r.raw(SESSION_ID_SIZE)


def decode_message(data: bytes, group: Group) -> Envelope:
    mtype, session_id = decode_header(data)
    r = Reader(data, 2 + SESSION_ID_SIZE)
    message = MESSAGE_TYPES[mtype].decode_payload(r, group)
    r.done()
    return Envelope(session_id, message)


# -- sealed plaintexts ------------------------------------------------------


def share_aad(username: str) -> bytes:
    return Writer().raw(SHARE_SEAL_TAG).str(username).getvalue()


def subshare_aad(username: str, new_version: int) -> bytes:
    return Writer().raw(SUBSHARE_SEAL_TAG).str(username).u64(new_version).getvalue()


def encode_share(share: Share, group: Group) -> bytes:
    return (
        Writer()
        .u32(share.index)
        .raw(group.encode_scalar(share.value))
        .u64(share.epoch)
        .u32(share.threshold)
        .getvalue()
    )


def decode_share(data: bytes, group: Group) -> Share:
    r = Reader(data)
    index = r.u32()
    value = r.scalar(group)
    epoch, threshold = r.u64(), r.u32()
    r.done()
    if index < 1:
        raise MalformedMessage("share index must be >= 1", 0)
    return Share(index, value, epoch, threshold)


def encode_subshare(sub: RefreshSubshare, group: Group) -> bytes:
    return (
        Writer()
        .u32(sub.from_index)
        .u32(sub.to_index)
        .raw(group.encode_scalar(sub.value))
        .u64(sub.old_epoch)
        .u64(sub.new_epoch)
        .u32(sub.new_threshold)
        .getvalue()
    )


def decode_subshare(data: bytes, group: Group) -> RefreshSubshare:
    r = Reader(data)
    from_index, to_index = r.u32(), r.u32()
    value = r.scalar(group)
    old_epoch, new_epoch, t_new = r.u64(), r.u64(), r.u32()
    r.done()
    try:
        return RefreshSubshare(from_index, to_index, value, old_epoch, new_epoch, t_new)
    except ValueError as exc:
        raise MalformedMessage(str(exc), 0) from None


def scalar_fields(cls: type[Message]) -> list[str]:
    """Names of fields that would carry a bare scalar on the wire."""
    return [name for name, kind in cls.FIELDS if kind == "scalar"]

