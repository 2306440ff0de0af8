"""Exception hierarchy shared by every layer.

Errors that a node can report to a peer carry a one-byte wire ``code``.
"""

from __future__ import annotations


class KintsugiError(Exception):
    code = 0x00


# group / field
class ZeroInverse(KintsugiError, ZeroDivisionError):
    pass


class MalformedElement(KintsugiError, ValueError):
    pass


# secret sharing
class InsufficientIndices(KintsugiError, ValueError):
    pass


class DuplicateIndex(KintsugiError, ValueError):
    pass


class InsufficientShares(KintsugiError, ValueError):
    pass


class EpochMismatch(KintsugiError, ValueError):
    pass


class MixedEpoch(EpochMismatch):
    code = 0x0B


class InsufficientSubshares(KintsugiError, ValueError):
    code = 0x0A


class MisaddressedSubshare(KintsugiError, ValueError):
    code = 0x0C


# threshold OPRF
class InsufficientResponses(KintsugiError):
    pass


class UnknownIndex(KintsugiError, KeyError):
    pass


class DecryptionFailed(KintsugiError):
    """Wrong password or a corrupted evaluation; the two are indistinguishable."""


# directory
class DirectoryError(KintsugiError):
    pass


class BadSignature(DirectoryError):
    code = 0x20


class StaleVersion(DirectoryError):
    code = 0x21


class KeyMismatch(DirectoryError):
    code = 0x22


class NotFound(DirectoryError, LookupError):
    code = 0x23


# node
class RateLimited(KintsugiError):
    code = 0x01


class UnknownUser(KintsugiError):
    code = 0x02


class DuplicateUser(KintsugiError):
    code = 0x03


class BadAuthorization(KintsugiError):
    code = 0x04


class CorruptState(KintsugiError):
    pass


# client
class NodeRejected(KintsugiError):
    pass


class DirectoryRejected(KintsugiError):
    pass


class InsufficientContributors(KintsugiError):
    pass


# simulator
class ScenarioError(KintsugiError, ValueError):
    pass


# wire
class MalformedMessage(KintsugiError, ValueError):
    code = 0x30

    def __init__(self, reason: str, offset: int = 0):
        super().__init__(f"{reason} at offset {offset}")
        self.reason = reason
        self.offset = offset


class FrameTooLarge(KintsugiError):
    pass


class ConnectionClosed(KintsugiError, ConnectionError):
    pass


WIRE_ERRORS: dict[int, type[KintsugiError]] = {
    cls.code: cls
    for cls in (
        RateLimited,
        UnknownUser,
        DuplicateUser,
        BadAuthorization,
        InsufficientSubshares,
        MixedEpoch,
        MisaddressedSubshare,
        BadSignature,
        StaleVersion,
        KeyMismatch,
        NotFound,
        MalformedMessage,
    )
}


def error_from_code(code: int, detail: str = "") -> KintsugiError:
    cls = WIRE_ERRORS.get(code, KintsugiError)
    if cls is MalformedMessage:
        return MalformedMessage(detail)
    return cls(detail)
