"""Anonymous public-key envelopes for shares and refresh subshares.

``eph_pk || nonce || xchacha20poly1305(key, plaintext)`` where ``key`` is
hashed from the X25519 shared secret and both public keys. Randomness comes
from the caller's RNG, so seeded simulations stay byte-deterministic.
"""

from __future__ import annotations

import hashlib
import random

from nacl import bindings
from nacl.exceptions import CryptoError

from .errors import DecryptionFailed
from .group import SYSTEM_RNG

SEAL_TAG = b"kintsugi/seal"
KEY_SIZE = 32
NONCE_SIZE = 24
OVERHEAD = KEY_SIZE + NONCE_SIZE + bindings.crypto_aead_xchacha20poly1305_ietf_ABYTES


def generate_keypair(rng: random.Random = SYSTEM_RNG) -> tuple[bytes, bytes]:
    sk = rng.randbytes(KEY_SIZE)
    return sk, public_key(sk)


def public_key(sk: bytes) -> bytes:
    return bindings.crypto_scalarmult_base(sk)


def _key(shared: bytes, eph_pk: bytes, recipient_pk: bytes) -> bytes:
    return hashlib.sha512(SEAL_TAG + shared + eph_pk + recipient_pk).digest()[:32]


def seal(recipient_pk: bytes, plaintext: bytes, aad: bytes, rng: random.Random = SYSTEM_RNG) -> bytes:
    eph_sk, eph_pk = generate_keypair(rng)
    shared = bindings.crypto_scalarmult(eph_sk, recipient_pk)
    nonce = rng.randbytes(NONCE_SIZE)
    ct = bindings.crypto_aead_xchacha20poly1305_ietf_encrypt(
        plaintext, aad, nonce, _key(shared, eph_pk, recipient_pk)
    )
    return eph_pk + nonce + ct


def unseal(recipient_sk: bytes, blob: bytes, aad: bytes) -> bytes:
    if len(blob) < OVERHEAD:
        raise DecryptionFailed("sealed envelope too short")
    eph_pk, nonce, ct = blob[:KEY_SIZE], blob[KEY_SIZE : KEY_SIZE + NONCE_SIZE], blob[KEY_SIZE + NONCE_SIZE :]
    try:
        shared = bindings.crypto_scalarmult(recipient_sk, eph_pk)
        return bindings.crypto_aead_xchacha20poly1305_ietf_decrypt(
            ct, aad, nonce, _key(shared, eph_pk, public_key(recipient_sk))
        )
    except (CryptoError, RuntimeError):
        raise DecryptionFailed("cannot open sealed envelope") from None
