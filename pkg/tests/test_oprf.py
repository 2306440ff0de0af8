from __future__ import annotations

import random
from itertools import combinations

import pytest

from kintsugi.errors import DecryptionFailed, EpochMismatch, InsufficientResponses, MalformedMessage, UnknownIndex
from kintsugi.group import RistrettoGroup, ToyGroup
from kintsugi.oprf import (
    BlindedElement,
    EncryptedBackup,
    EvaluatedElement,
    blind,
    blind_point,
    derive_backup_key,
    evaluate,
    open_backup,
    seal_backup,
    unblind_and_combine,
)
from kintsugi.sharing import Share, deal_shares

TOY = ToyGroup()
RIST = RistrettoGroup()


def toy_state():
    return blind_point(TOY.element(7), {1: TOY.scalar(23), 2: TOY.scalar(11)})


def test_blinding_example():
    _, blinded = toy_state()
    assert [(b.index, b.element) for b in blinded] == [(1, TOY.element(60)), (2, TOY.element(77))]


def test_evaluate_example():
    s1 = Share(1, TOY.scalar(22), 0, 1)
    s2 = Share(2, TOY.scalar(25), 0, 1)
    assert evaluate(s1, BlindedElement(1, TOY.element(60))).element == TOY.element(7)
    assert evaluate(s2, BlindedElement(2, TOY.element(77))).element == TOY.element(6)
    zero = Share(3, TOY.scalar(0), 0, 1)
    assert evaluate(zero, BlindedElement(3, TOY.element(60))).element.is_identity()


def test_combine_example():
    state, _ = toy_state()
    responses = [EvaluatedElement(1, 0, TOY.element(7)), EvaluatedElement(2, 0, TOY.element(6))]
    assert unblind_and_combine(state, responses, 1) == TOY.element(32)
    assert unblind_and_combine(state, responses[::-1], 1) == TOY.element(32)


def test_combine_single_response():
    state, _ = blind_point(TOY.element(7), {4: TOY.scalar(5)})
    # s = 19, t = 0: the lone node holds s itself
    resp = EvaluatedElement(4, 0, TOY.scalar(19) * TOY.element(35))
    assert unblind_and_combine(state, [resp], 0) == TOY.element(32)


def test_combine_errors():
    state, _ = toy_state()
    r1 = EvaluatedElement(1, 0, TOY.element(7))
    with pytest.raises(EpochMismatch):
        unblind_and_combine(state, [r1, EvaluatedElement(2, 1, TOY.element(6))], 1)
    with pytest.raises(InsufficientResponses):
        unblind_and_combine(state, [r1], 1)
    with pytest.raises(UnknownIndex):
        unblind_and_combine(state, [r1, EvaluatedElement(9, 0, TOY.element(6))], 1)


def test_blind_uses_fresh_randomness():
    rng = random.Random(1)
    a, ba = blind(RIST, b"pw", [1, 2], rng)
    b, bb = blind(RIST, b"pw", [1, 2], rng)
    assert a.point == b.point
    assert ba[0].element != bb[0].element
    assert ba[0].element != ba[1].element
    with pytest.raises(ValueError):
        blind(RIST, b"", [1], rng)


def test_blinding_is_uniform_over_non_identity():
    # for fixed P, r * P hits every non-identity toy element exactly once
    p = TOY.hash_to_group(b"pw")
    images = [(TOY.scalar(r) * p).raw for r in range(1, TOY.order)]
    assert sorted(images) == list(range(1, TOY.order))


def test_oracle_equivalence_every_subset():
    rng = random.Random(2)
    for _ in range(40):
        t = rng.randint(0, 3)
        n = rng.randint(t + 1, 6)
        s = TOY.random_scalar(rng, nonzero=True)
        indices = rng.sample(range(1, 40), n)
        shares = {sh.index: sh for sh in deal_shares(s, t, indices, rng)}
        pw = rng.randbytes(8)
        state, blinded = blind(TOY, pw, indices, rng)
        evals = [evaluate(shares[b.index], b) for b in blinded]
        direct = s * TOY.hash_to_group(pw)
        for subset in combinations(evals, t + 1):
            assert unblind_and_combine(state, list(subset), t) == direct


def test_ristretto_combination():
    rng = random.Random(3)
    s = RIST.random_scalar(rng, nonzero=True)
    shares = deal_shares(s, 3, [1, 2, 3, 4, 5], rng)
    state, blinded = blind(RIST, b"correct horse", [1, 2, 3, 4, 5], rng)
    evals = [evaluate(sh, b) for sh, b in zip(shares, blinded)]
    out = unblind_and_combine(state, evals[1:], 3)
    assert out == s * RIST.hash_to_group(b"correct horse")
    assert out == unblind_and_combine(state, evals[:4][::-1], 3)


def test_distinct_passwords_distinct_outputs():
    s = RIST.scalar(123456789)
    outputs = {(s * RIST.hash_to_group(pw)).to_bytes() for pw in (b"a", b"b", b"c", b"d")}
    assert len(outputs) == 4


def test_backup_key():
    e = RIST.hash_to_group(b"x")
    k = derive_backup_key(e)
    assert len(k) == 32 and k == derive_backup_key(e)
    assert k != derive_backup_key(RIST.hash_to_group(b"y"))
    assert len(derive_backup_key(TOY.element(32))) == 32


def test_backup_round_trip_and_tamper():
    rng = random.Random(4)
    key = derive_backup_key(RIST.hash_to_group(b"x"))
    backup = seal_backup(key, b"payload", b"alice", rng)
    assert len(backup.nonce) == 24
    assert open_backup(key, backup, b"alice") == b"payload"
    assert EncryptedBackup.from_bytes(backup.to_bytes()) == backup
    ct = bytearray(backup.ciphertext)
    ct[0] ^= 1
    with pytest.raises(DecryptionFailed):
        open_backup(key, EncryptedBackup(backup.nonce, bytes(ct)), b"alice")
    with pytest.raises(DecryptionFailed):
        open_backup(key, backup, b"bob")


def test_backup_serialization_layout():
    b = EncryptedBackup(bytes(range(24)), bytes(20))
    raw = b.to_bytes()
    assert raw[:24] == bytes(range(24))
    assert raw[24:28] == (20).to_bytes(4, "little")
    with pytest.raises(MalformedMessage):
        EncryptedBackup.from_bytes(raw[:-1])


def test_wrong_password_key_fails_toy_end_to_end():
    rng = random.Random(5)
    s = TOY.scalar(19)
    shares = deal_shares(s, 1, [1, 2, 3], rng)
    key = derive_backup_key(s * TOY.hash_to_group(b"right"))
    backup = seal_backup(key, b"data", b"u", rng)

    def attempt(pw):
        state, blinded = blind(TOY, pw, [1, 2], rng)
        evals = [evaluate(shares[b.index - 1], b) for b in blinded]
        return open_backup(derive_backup_key(unblind_and_combine(state, evals, 1)), backup, b"u")

    assert attempt(b"right") == b"data"
    wrong = next(pw for pw in (b"w%d" % i for i in range(100)) if TOY.hash_to_group(pw) != TOY.hash_to_group(b"right"))
    with pytest.raises(DecryptionFailed):
        attempt(wrong)
