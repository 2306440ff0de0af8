"""The nine acceptance criteria, one test each; each prints a PASS/FAIL line."""

from __future__ import annotations

import asyncio
import random
import time
from dataclasses import replace
from fractions import Fraction
from itertools import combinations

import pytest
from nacl.signing import SigningKey

from acceptance_log import criterion
from harness import Cluster
from kintsugi.client import (
    RecoverySession,
    RegistrationPlan,
    RegistrationSession,
    RotationSession,
    assign_committee,
)
from kintsugi.directory import CommitteeMember, DirectoryEntry, DirectoryStore, merge_replicas
from kintsugi.errors import (
    BadSignature,
    DecryptionFailed,
    EpochMismatch,
    KeyMismatch,
    RateLimited,
    StaleVersion,
    UnknownUser,
)
from kintsugi.group import RistrettoGroup, ToyGroup
from kintsugi.messages import RecoveryRequest, RecoveryResponse, decode_message, encode_message
from kintsugi.netsim import Scenario, SimConfig, collusion_oracle, run_simulation
from kintsugi.node import RecoveryNode
from kintsugi.oprf import blind, blind_point, evaluate, unblind_and_combine
from kintsugi.ratelimit import RateLimiter
from kintsugi.sharing import (
    SecretPolynomial,
    Share,
    combine_subshares,
    deal_shares,
    interpolate_at_zero,
    lagrange_at_zero,
    make_refresh_subshares,
    reconstruct_secret,
    shares_from_polynomial,
)
from kintsugi.wire import NodeServer, drive_session, fetch_contacts
from oracles import P, dlog_toy, inverse_by_search, lagrange_by_search, poly_eval, secret_by_search

TOY = ToyGroup()
RIST = RistrettoGroup()
PAYLOAD = bytes(range(256)) * 4


# 1 ---------------------------------------------------------------------------


@criterion(1, "default n=5, t=3 end to end with one node offline (netsim < 5 s, TCP < 30 s)")
def test_criterion_1_default_parameters():
    steps = [
        {"op": "register", "user": "alice", "password": "correct horse", "payload_hex": PAYLOAD.hex(),
         "nodes": ["n1", "n2", "n3", "n4", "n5"], "threshold": 3},
        {"op": "set_offline", "nodes": ["n5"]},
        {"op": "recover", "user": "alice"},
    ]
    t0 = time.perf_counter()
    result = run_simulation(SimConfig(seed=1, group="ristretto255"), Scenario.from_dict({"nodes": 5, "steps": steps}))
    netsim_seconds = time.perf_counter() - t0
    assert [o.status for o in result.outcomes] == ["ok", "correct"]
    responders = {line.split()[2].split("->")[0] for line in result.transcript.splitlines()
                  if " RecoveryResponse " in line and " send " in line}
    assert responders == {"n1", "n2", "n3", "n4"}
    assert netsim_seconds < 5, netsim_seconds

    async def over_tcp():
        servers = []
        for i in range(1, 6):
            server = NodeServer(RecoveryNode(f"n{i}", RIST), "127.0.0.1:0")
            await server.start()
            servers.append(server)
        try:
            roster = await fetch_contacts([s.address for s in servers], RIST)
            book = {nid: c.address for nid, c in roster.items()}
            ids = sorted(roster)
            plan = RegistrationPlan("alice", b"correct horse", PAYLOAD, assign_committee(roster, ids), 3)
            reg = await drive_session(RegistrationSession(RIST, plan, roster), RIST, book, 5)
            assert reg.ok, reg.error
            await servers[4].close()
            rec = await drive_session(RecoverySession(RIST, "alice", b"correct horse", ids), RIST, book, 5)
            assert rec.ok, rec.error
            assert len(rec.answered) == 4
            return rec.result.data
        finally:
            for s in servers:
                await s.close()

    t0 = time.perf_counter()
    data = asyncio.run(over_tcp())
    tcp_seconds = time.perf_counter() - t0
    assert data == PAYLOAD
    assert tcp_seconds < 30, tcp_seconds
    print(f"netsim {netsim_seconds:.2f}s, tcp {tcp_seconds:.2f}s")


# 2 ---------------------------------------------------------------------------


@criterion(2, "toy-group worked values reproduce against independent oracles")
def test_criterion_2_toy_oracle_battery():
    # oracle side: plain ints, enumeration only
    assert [poly_eval([19, 3], i) for i in (1, 2, 3)] == [22, 25, 28]
    assert lagrange_by_search([1, 2]) == [2, P - 1]
    assert lagrange_by_search([1, 3]) == [52, 50]
    assert secret_by_search([(1, 22), (2, 25)]) == secret_by_search([(2, 25), (3, 28)]) == 19
    assert inverse_by_search(23) == 22 and inverse_by_search(11) == 46
    assert dlog_toy(32, 7) == 19
    w = lagrange_by_search([1, 2])
    assert ((w[0] * 26 + w[1] * 34) % P, (w[0] * 30 + w[1] * 43) % P) == (18, 17)
    assert secret_by_search([(1, 18), (2, 17)]) == 19

    # library side must agree exactly
    shares = shares_from_polynomial(SecretPolynomial((TOY.scalar(19), TOY.scalar(3))), [1, 2, 3])
    assert [int(s.value) for s in shares] == [poly_eval([19, 3], i) for i in (1, 2, 3)]
    assert lagrange_at_zero([1, 2], P) == lagrange_by_search([1, 2])
    assert lagrange_at_zero([1, 3], P) == lagrange_by_search([1, 3])
    assert int(reconstruct_secret(shares[:2])) == int(reconstruct_secret([shares[0], shares[2]])) == 19

    state, blinded = blind_point(TOY.element(7), {1: TOY.scalar(23), 2: TOY.scalar(11)})
    assert [b.element.raw for b in blinded] == [23 * 7 % P, 11 * 7 % P] == [60, 77]
    evals = [evaluate(s, b) for s, b in zip(shares, blinded)]
    assert [e.element.raw for e in evals] == [22 * 60 % P, 25 * 77 % P] == [7, 6]
    assert unblind_and_combine(state, evals, 1).raw == 19 * 7 % P == 32

    poly = lambda *c: SecretPolynomial(tuple(TOY.scalar(x) for x in c))  # noqa: E731
    subs1 = make_refresh_subshares(shares[0], 1, [1, 2], polynomial=poly(22, 4))
    subs2 = make_refresh_subshares(shares[1], 1, [1, 2], polynomial=poly(25, 9))
    new = [combine_subshares(j, [subs1[k], subs2[k]], [1, 2]) for k, j in enumerate((1, 2))]
    assert [int(s.value) for s in new] == [18, 17]
    assert int(reconstruct_secret(new)) == 19
    assert int(interpolate_at_zero([(1, shares[0].value), (2, new[1].value)])) == secret_by_search([(1, 22), (2, 17)])


# 3 ---------------------------------------------------------------------------


@criterion(3, "threshold OPRF equals direct s*P on every (t+1)-subset, 1000 toy trials")
def test_criterion_3_oprf_equivalence():
    rng = random.Random(3003)
    subsets_checked = 0
    for _ in range(1000):
        t = rng.randint(0, 4)
        n = rng.randint(t + 1, 8)
        s = TOY.random_scalar(rng)
        indices = rng.sample(range(1, TOY.order), n)
        password = rng.randbytes(rng.randint(1, 12))
        shares = {sh.index: sh for sh in deal_shares(s, t, indices, rng)}
        state, blinded = blind(TOY, password, indices, rng)
        evals = [evaluate(shares[b.index], b) for b in blinded]
        direct = s * TOY.hash_to_group(password)
        for subset in combinations(evals, t + 1):
            shuffled = list(subset)
            rng.shuffle(shuffled)
            assert unblind_and_combine(state, list(subset), t) == direct
            assert unblind_and_combine(state, shuffled, t) == direct
            subsets_checked += 1
    print(f"{subsets_checked} subsets checked")


# 4 ---------------------------------------------------------------------------


def _secret_of(cluster, user="alice"):
    shares = [n.records[user].share for n in cluster.nodes.values() if user in n.records]
    return reconstruct_secret(shares[: shares[0].threshold + 1]), shares


@criterion(4, "500 randomized rotations preserve the secret; departed nodes answer UnknownUser")
def test_criterion_4_refresh_battery():
    rng = random.Random(4004)
    rotations = 0
    kinds = set()
    for trial in range(100):
        cluster = Cluster(TOY, 8, seed=trial)
        ids = sorted(cluster.nodes)
        t = rng.randint(0, 3)
        committee = rng.sample(ids, rng.randint(t + 1, 6))
        plan = RegistrationPlan("alice", b"pw", b"payload", assign_committee(cluster.roster, committee), t)
        reg = cluster.drive(RegistrationSession(TOY, plan, cluster.roster, random.Random(trial), ids))
        assert reg.ok, reg.error
        secret, old_shares = _secret_of(cluster)
        for step in range(5):
            kind = rng.choice(["same", "grow", "shrink", "disjoint", "random"])
            t_new = {"grow": t + 1, "shrink": max(t - 1, 0)}.get(kind, rng.randint(0, 3))
            t_new = min(t_new, 4)
            others = [nid for nid in ids if nid not in committee]
            if kind == "same":
                new = list(committee)
                t_new = min(t_new, len(new) - 1)
            elif kind == "disjoint" and len(others) >= t_new + 1:
                new = rng.sample(others, rng.randint(t_new + 1, len(others)))
            else:
                new = rng.sample(ids, rng.randint(t_new + 1, 8))
            kinds.add(kind)
            held = {nid: n.records["alice"].index for nid, n in cluster.nodes.items() if "alice" in n.records}
            rot = cluster.drive(RotationSession(
                TOY, "alice", reg.signing_key, new, t_new, cluster.roster, ids, random.Random(rng.random()), ids))
            assert rot.ok, (kind, rot.error)
            rotations += 1
            new_secret, new_shares = _secret_of(cluster)
            assert new_secret == secret
            assert all(sh.threshold == t_new and sh.epoch == old_shares[0].epoch + 1 for sh in new_shares)
            departed = set(committee) - set(new)
            assert set(rot.result.deleted) == departed
            for nid in departed:
                with pytest.raises(UnknownUser):
                    probe = RecoveryRequest("alice", held[nid], TOY.element(5))
                    cluster.nodes[nid].handle_recovery_request(f"probe{rotations}", probe)
                assert "alice" not in cluster.nodes[nid].records
            # a share from before the rotation never combines with one from after
            mix = [rng.choice(old_shares)] + new_shares[: t_new + 1]
            with pytest.raises(EpochMismatch):
                reconstruct_secret(mix)
            rec = cluster.drive(RecoverySession(TOY, "alice", b"pw", ids, random.Random(rotations)), source=f"c{rotations}")
            assert rec.ok and rec.result.data == b"payload", rec.error
            committee, t, old_shares = new, t_new, new_shares
    assert rotations == 500
    assert kinds == {"same", "grow", "shrink", "disjoint", "random"}


# 5 ---------------------------------------------------------------------------


@criterion(5, "secrecy boundary: t colluders learn nothing, t+1 identify the password")
def test_criterion_5_collusion_boundary():
    rng = random.Random(5005)
    true_pw = b"hunter2"
    dictionary = [true_pw] + [b"guess-%d" % i for i in range(60)]
    # drop candidates that collide with the true password in the 101-element toy group
    dictionary = [pw for pw in dictionary if pw == true_pw or TOY.hash_to_group(pw) != TOY.hash_to_group(true_pw)]
    for t in (1, 2, 3):
        nodes = [f"n{i}" for i in range(1, t + 3)]
        steps = [{"op": "register", "user": "alice", "password": true_pw.decode(), "payload": "p",
                  "nodes": nodes, "threshold": t}]
        result = run_simulation(SimConfig(seed=t), Scenario.from_dict({"nodes": nodes, "steps": steps}))
        for _ in range(3):
            coalition = rng.sample(nodes, t)
            below = collusion_oracle(result, coalition, dictionary, "alice")
            assert below.exhaustive and not below.success
            assert set(below.consistent) == set(dictionary)
            extra = rng.choice([n for n in nodes if n not in coalition])
            at = collusion_oracle(result, coalition + [extra], dictionary, "alice")
            assert at.success and at.password == true_pw and at.consistent == (true_pw,)


# 6 ---------------------------------------------------------------------------


@criterion(6, "wrong password fails 200/200; a tampered evaluation fails, retry succeeds")
def test_criterion_6_wrong_password_and_tamper():
    cluster = Cluster(RIST, 5, seed=6)
    ids = sorted(cluster.nodes)
    plan = RegistrationPlan("alice", b"right", PAYLOAD, assign_committee(cluster.roster, ids), 3)
    assert cluster.drive(RegistrationSession(RIST, plan, cluster.roster, random.Random(1))).ok
    failures = 0
    for i in range(200):
        sess = RecoverySession(RIST, "alice", b"wrong-%d" % i, ids, random.Random(i))
        cluster.drive(sess, source=f"10.0.{i // 256}.{i % 256}")
        failures += isinstance(sess.error, DecryptionFailed)
    assert failures == 200

    def tamper(node_id, raw):
        env = decode_message(raw, RIST)
        if node_id == "n2" and isinstance(env.message, RecoveryResponse):
            moved = replace(env.message, evaluated=env.message.evaluated + RIST.generator())
            return encode_message(moved, RIST, env.session_id)
        return raw

    cluster.tamper = tamper
    first = cluster.drive(RecoverySession(RIST, "alice", b"right", ids, random.Random(900)), source="t1")
    assert isinstance(first.error, DecryptionFailed)
    retry = cluster.drive(RecoverySession(RIST, "alice", b"right", ids, random.Random(901), exclude=["n2"]), source="t2")
    assert retry.ok and retry.result.data == PAYLOAD


# 7 ---------------------------------------------------------------------------


def _adversarial_run(seed: int):
    rng = random.Random(seed)
    nodes = [f"n{i}" for i in range(1, 6)]
    t = rng.randint(1, 3)
    steps = [
        {"op": "register", "user": "alice", "password": "pw-a", "payload": "alpha", "nodes": nodes, "threshold": t},
        {"op": "register", "user": "bob", "password": "pw-b", "payload": "bravo", "nodes": nodes[1:], "threshold": 1},
    ]
    if rng.random() < 0.5:
        steps.append({"op": "set_offline", "nodes": rng.sample(nodes, rng.randint(1, 2))})
    new = rng.sample(nodes, rng.randint(t + 1, 5))
    steps.append({"op": "parallel", "steps": [
        {"op": "recover", "user": "alice"},
        {"op": "rotate", "user": "alice", "nodes": new, "threshold": rng.randint(0, len(new) - 1)},
        {"op": "recover", "user": "bob", "password": rng.choice(["pw-b", "nope"])},
    ]})
    steps.append({"op": "set_online", "nodes": nodes})
    steps.append({"op": "recover", "user": "alice"})
    config = SimConfig.from_dict({
        "seed": seed,
        "delay": rng.choice([{"kind": "uniform", "low": 0, "high": 50},
                             {"kind": "heavy_tail", "low": 1, "high": 10}]),
        "duplicate_prob": rng.choice([0.0, 0.2, 0.5]),
    })
    return config, Scenario.from_dict({"nodes": nodes, "steps": steps})


@criterion(7, "200 adversarial netsim runs: never a wrong payload; transcripts deterministic")
def test_criterion_7_asynchrony_safety():
    seen = set()
    for seed in range(200):
        config, scenario = _adversarial_run(seed)
        result = run_simulation(config, scenario)
        for o in result.outcomes:
            if o.op == "recover":
                assert o.status in ("correct", "decryption_failed", "no_termination"), o.line()
                seen.add(o.status)
        if seed % 20 == 0:
            again = run_simulation(*_adversarial_run(seed))
            assert again.transcript_bytes == result.transcript_bytes
    assert "correct" in seen
    print(f"recovery outcomes seen: {sorted(seen)}")


# 8 ---------------------------------------------------------------------------


@criterion(8, "rate limiting: 6th request refused; admissions within capacity + elapsed*refill")
def test_criterion_8_rate_limit():
    now = [0.0]
    node = RecoveryNode("n1", TOY, rng=random.Random(1), clock=lambda: now[0], rate_capacity=5)
    answers = []
    for _ in range(6):
        try:
            node.handle_recovery_request("192.0.2.7", RecoveryRequest("nobody", 1, TOY.element(60)))
        except (UnknownUser, RateLimited) as exc:
            answers.append(type(exc))
    assert answers == [UnknownUser] * 5 + [RateLimited]

    rng = random.Random(8008)
    for cap, rate in ((5, Fraction(5, 3600)), (3, Fraction(1, 7)), (1, Fraction(2))):
        clock = [Fraction(0)]
        rl = RateLimiter(cap, rate, lambda: clock[0])
        admitted = []
        for _ in range(1000):
            clock[0] += Fraction(rng.choice([0, 0, 1, 3, 17, 400, 900]), rng.choice([1, 2, 10]))
            if rl.admit("x"):
                admitted.append(clock[0])
        for i in range(len(admitted)):
            for j in range(i, len(admitted)):
                assert j - i + 1 <= cap + (admitted[j] - admitted[i]) * rate


# 9 ---------------------------------------------------------------------------


def _entry(sk, user, version, n=3):
    committee = tuple(CommitteeMember(f"n{i + version}", f"h:{i}", i) for i in range(1, n + 1))
    return DirectoryEntry(user, bytes(sk.verify_key), version, committee, 1).signed(sk)


@criterion(9, "directory merge converges on 100 triples; forged/stale entries always rejected")
def test_criterion_9_directory():
    rng = random.Random(9009)
    keys = {u: SigningKey(rng.randbytes(32)) for u in ("a", "b", "c", "d", "e")}

    def replica():
        store = DirectoryStore()
        for u, sk in keys.items():
            for v in sorted(rng.sample(range(1, 6), rng.randint(0, 2))):
                store.put_entry(_entry(sk, u, v, rng.randint(2, 4)))
        return store

    for _ in range(100):
        x, y, z = replica(), replica(), replica()
        results = [
            merge_replicas(merge_replicas(x, y), z),
            merge_replicas(x, merge_replicas(y, z)),
            merge_replicas(merge_replicas(z, y), x),
            merge_replicas(y, merge_replicas(x, z)),
        ]
        assert all(r == results[0] for r in results)
        for u in keys:
            versions = [s.get_entry(u).version for s in (x, y, z) if u in s]
            if versions:
                assert results[0].get_entry(u).version == max(versions)

    rejected = {"forged": 0, "stale": 0, "key": 0}
    attacker = SigningKey(rng.randbytes(32))
    for i in range(100):
        sk = keys["a"]
        store = DirectoryStore([_entry(sk, "a", 5)])
        good = _entry(sk, "a", 6 + i)
        forged = rng.choice([
            replace(good, threshold=2),
            replace(good, version=good.version + 1),
            replace(good, signature=attacker.sign(good.signed_bytes()).signature),
            replace(good, signature=bytes(64)),
        ])
        try:
            store.put_entry(forged)
        except BadSignature:
            rejected["forged"] += 1
        try:
            store.put_entry(_entry(sk, "a", rng.randint(1, 4)))
        except StaleVersion:
            rejected["stale"] += 1
        try:
            store.put_entry(_entry(attacker, "a", 50 + i))
        except KeyMismatch:
            rejected["key"] += 1
        assert store.get_entry("a").version == 5
    assert rejected == {"forged": 100, "stale": 100, "key": 100}
