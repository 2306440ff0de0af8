"""Threshold OPRF evaluation and the password-keyed backup built on it.

The client hashes the password to a point ``P`` and sends each node ``i``
a separately blinded copy ``r_i * P``. Node ``i`` answers with
``s_i * r_i * P``. Any ``t + 1`` answers are unblinded with ``r_i^-1`` and
interpolated in the exponent, giving ``s * P`` without anyone learning
``s``. That point keys an XChaCha20-Poly1305 backup.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

from nacl import bindings
from nacl.exceptions import CryptoError

from .errors import (
    DuplicateIndex,
    EpochMismatch,
    InsufficientResponses,
    MalformedMessage,
    UnknownIndex,
    DecryptionFailed,
)
from .group import KDF_TAG, PASSWORD_TAG, SYSTEM_RNG, Group, GroupElement, Scalar
from .sharing import Share, lagrange_at_zero

NONCE_SIZE = 24
KEY_SIZE = 32


@dataclass
class BlindingState:
    point: GroupElement
    blinds: dict[int, Scalar]

    def __post_init__(self):
        if any(not r for r in self.blinds.values()):
            raise ValueError("blinding scalars must be nonzero")


@dataclass(frozen=True)
class BlindedElement:
    index: int
    element: GroupElement


@dataclass(frozen=True)
class EvaluatedElement:
    index: int
    epoch: int
    element: GroupElement


def blind_point(point: GroupElement, blinds: dict[int, Scalar]) -> tuple[BlindingState, list[BlindedElement]]:
    state = BlindingState(point, dict(blinds))
    return state, [BlindedElement(i, r * point) for i, r in state.blinds.items()]


def blind(
    group: Group,
    password: bytes,
    node_indices: Iterable[int],
    rng: random.Random = SYSTEM_RNG,
) -> tuple[BlindingState, list[BlindedElement]]:
    if not password:
        raise ValueError("empty password")
    indices = list(node_indices)
    if len(set(indices)) != len(indices):
        raise DuplicateIndex(f"duplicate node indices {indices}")
    point = group.hash_to_group(password, PASSWORD_TAG)
    return blind_point(point, {i: group.random_scalar(rng, nonzero=True) for i in indices})


def evaluate(share: Share, blinded: BlindedElement) -> EvaluatedElement:
    return EvaluatedElement(share.index, share.epoch, share.value * blinded.element)


def unblind_and_combine(
    state: BlindingState,
    responses: Sequence[EvaluatedElement],
    threshold: int | None = None,
) -> GroupElement:
    """Recover ``s * P`` from at least ``threshold + 1`` evaluations."""
    if threshold is None:
        threshold = len(responses) - 1
    if len(responses) < max(threshold + 1, 1):
        raise InsufficientResponses(f"need {threshold + 1} responses, got {len(responses)}")
    epochs = {r.epoch for r in responses}
    if len(epochs) > 1:
        raise EpochMismatch(f"responses span epochs {sorted(epochs)}")
    indices = [r.index for r in responses]
    if len(set(indices)) != len(indices):
        raise DuplicateIndex(f"duplicate response indices {indices}")
    for i in indices:
        if i not in state.blinds:
            raise UnknownIndex(i)
    group = state.point.group
    lambdas = lagrange_at_zero(indices, group.order)
    acc = group.identity()
    for lam, resp in zip(lambdas, responses):
        acc = acc + (lam * state.blinds[resp.index].invert()) * resp.element
    return acc


def derive_backup_key(oprf_output: GroupElement) -> bytes:
    group = oprf_output.group
    return group.hash(KDF_TAG, oprf_output.to_bytes())[:KEY_SIZE]


@dataclass(frozen=True)
class EncryptedBackup:
    nonce: bytes
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return self.nonce + struct.pack("<I", len(self.ciphertext)) + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> EncryptedBackup:
        if len(data) < NONCE_SIZE + 4:
            raise MalformedMessage("backup too short", len(data))
        (n,) = struct.unpack_from("<I", data, NONCE_SIZE)
        body = data[NONCE_SIZE + 4 :]
        if len(body) != n:
            raise MalformedMessage(f"backup declares {n} ciphertext bytes, has {len(body)}", NONCE_SIZE)
        if n < bindings.crypto_aead_xchacha20poly1305_ietf_ABYTES:
            raise MalformedMessage("ciphertext shorter than tag", NONCE_SIZE)
        return cls(data[:NONCE_SIZE], body)


def seal_backup(key: bytes, plaintext: bytes, username: bytes, rng: random.Random = SYSTEM_RNG) -> EncryptedBackup:
    nonce = rng.randbytes(NONCE_SIZE)
    ct = bindings.crypto_aead_xchacha20poly1305_ietf_encrypt(plaintext, username, nonce, key)
    return EncryptedBackup(nonce, ct)


def open_backup(key: bytes, backup: EncryptedBackup, username: bytes) -> bytes:
    try:
        return bindings.crypto_aead_xchacha20poly1305_ietf_decrypt(backup.ciphertext, username, backup.nonce, key)
    except CryptoError:
        raise DecryptionFailed("decryption failed") from None
