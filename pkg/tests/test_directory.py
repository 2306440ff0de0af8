from __future__ import annotations

import random
from dataclasses import replace

import pytest
from nacl.signing import SigningKey

from kintsugi.directory import CommitteeMember, DirectoryEntry, DirectoryStore, merge_replicas
from kintsugi.errors import BadSignature, KeyMismatch, MalformedMessage, NotFound, StaleVersion


def key(seed: int) -> SigningKey:
    return SigningKey(random.Random(seed).randbytes(32))


def committee(n: int, offset: int = 0):
    return tuple(CommitteeMember(f"n{i + offset}", f"127.0.0.1:{7000 + i + offset}", i) for i in range(1, n + 1))


def entry(sk: SigningKey, version: int, user: str = "alice", n: int = 3, t: int = 1) -> DirectoryEntry:
    return DirectoryEntry(user, bytes(sk.verify_key), version, committee(n, version), t).signed(sk)


def test_tofu_and_versioning():
    sk = key(1)
    store = DirectoryStore()
    v1 = store.put_entry(entry(sk, 1))
    assert store.pinned_key("alice") == bytes(sk.verify_key)
    store.put_entry(entry(sk, 2))
    assert store.get_entry("alice").version == 2
    with pytest.raises(StaleVersion):
        store.put_entry(v1)
    with pytest.raises(KeyMismatch):
        store.put_entry(entry(key(2), 3))
    assert store.get_entry("alice").version == 2


def test_identical_put_is_idempotent():
    sk = key(1)
    store = DirectoryStore()
    e = entry(sk, 1)
    store.put_entry(e)
    store.put_entry(e)
    assert len(store) == 1


def test_unknown_username():
    with pytest.raises(NotFound):
        DirectoryStore().get_entry("nobody")


def test_forged_signature_rejected():
    sk = key(1)
    e = entry(sk, 1)
    forged = replace(e, committee=committee(3, 50))
    with pytest.raises(BadSignature):
        DirectoryStore().put_entry(forged)
    other = replace(e, signature=key(2).sign(e.signed_bytes()).signature)
    with pytest.raises(BadSignature):
        DirectoryStore().put_entry(other)


def test_entry_invariants():
    sk = key(1)
    with pytest.raises(ValueError):
        DirectoryEntry("a", bytes(sk.verify_key), 1, committee(1), 1)
    dup = (CommitteeMember("x", "h:1", 1), CommitteeMember("y", "h:2", 1))
    with pytest.raises(ValueError):
        DirectoryEntry("a", bytes(sk.verify_key), 1, dup, 0)


def test_entry_encoding_round_trip():
    e = entry(key(3), 7, user="zoë")
    assert DirectoryEntry.from_bytes(e.to_bytes()) == e
    with pytest.raises(MalformedMessage):
        DirectoryEntry.from_bytes(e.to_bytes()[:-3])


def test_merge_keeps_highest_valid_version():
    sk = key(1)
    a = DirectoryStore([entry(sk, 1)])
    b = DirectoryStore([entry(sk, 1)])
    b.put_entry(entry(sk, 2))
    m = merge_replicas(a, b)
    assert m.get_entry("alice").version == 2
    assert m == merge_replicas(b, a)
    assert merge_replicas(a, a) == a


def test_merge_drops_invalid_entries():
    sk = key(1)
    good = entry(sk, 1, user="bob")
    bad = replace(entry(sk, 5), threshold=2)
    m = merge_replicas(DirectoryStore([good]), DirectoryStore.unchecked([bad]))
    assert "alice" not in m
    assert m.get_entry("bob") == good


def random_store(rng: random.Random, keys: dict[str, SigningKey]) -> DirectoryStore:
    store = DirectoryStore()
    for user in keys:
        if rng.random() < 0.8:
            store.put_entry(entry(keys[user], rng.randint(1, 4), user=user, n=rng.randint(2, 4)))
    return store


def test_merge_convergence_random_triples():
    rng = random.Random(11)
    keys = {u: key(i) for i, u in enumerate(["a", "b", "c", "d"])}
    for _ in range(30):
        x, y, z = (random_store(rng, keys) for _ in range(3))
        left = merge_replicas(merge_replicas(x, y), z)
        right = merge_replicas(x, merge_replicas(y, z))
        assert left == right == merge_replicas(merge_replicas(z, x), y)


def test_versions_never_decrease():
    sk = key(1)
    store = DirectoryStore()
    rng = random.Random(12)
    seen = 0
    for _ in range(60):
        try:
            store.put_entry(entry(sk, rng.randint(1, 30)))
        except StaleVersion:
            pass
        v = store.get_entry("alice").version
        assert v >= seen
        seen = v
