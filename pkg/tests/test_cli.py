from __future__ import annotations

import json
import subprocess
import sys

import pytest

from kintsugi.cli import main

PY = [sys.executable, "-m", "kintsugi"]


def start_daemons(tmp_path, n):
    procs, addrs = [], []
    for i in range(1, n + 1):
        cfg = tmp_path / f"n{i}.json"
        cfg.write_text(json.dumps({"node_id": f"n{i}", "listen": "127.0.0.1:0", "storage_path": str(tmp_path / f"n{i}.snap")}))
        p = subprocess.Popen(PY + ["node", "run", "--config", str(cfg)], stdout=subprocess.PIPE, text=True)
        line = p.stdout.readline().strip()
        assert line.startswith(f"n{i} listening on "), line
        procs.append(p)
        addrs.append(line.rsplit(" ", 1)[1])
    return procs, addrs


@pytest.fixture
def daemons(tmp_path):
    procs, addrs = start_daemons(tmp_path, 5)
    yield addrs
    for p in procs:
        p.terminate()
    for p in procs:
        p.wait(timeout=10)


def cli(*args, **kw):
    return subprocess.run(PY + list(args), capture_output=True, text=True, timeout=60, **kw)


def test_register_recover_rotate(daemons, tmp_path):
    (tmp_path / "pw").write_text("correct horse\n")
    (tmp_path / "wrong").write_text("battery staple\n")
    (tmp_path / "payload").write_bytes(b"\x00binary payload\xff")
    nodes = ",".join(daemons)
    r = cli("register", "--user", "alice", "--password-file", str(tmp_path / "pw"), "--payload-file",
            str(tmp_path / "payload"), "--nodes", nodes, "--threshold", "3", "--key-out", str(tmp_path / "key"))
    assert r.returncode == 0, r.stderr
    assert "n=5 t=3 version=1" in r.stdout

    r = cli("recover", "--user", "alice", "--password-file", str(tmp_path / "pw"), "--out", str(tmp_path / "out"),
            "--bootstrap", nodes)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "out").read_bytes() == b"\x00binary payload\xff"

    r = cli("recover", "--user", "alice", "--password-file", str(tmp_path / "wrong"), "--out", str(tmp_path / "o2"),
            env={"KINTSUGI_BOOTSTRAP": nodes, "PATH": "/usr/bin:/bin"})
    assert r.returncode == 1
    assert "decryption failed" in r.stderr
    assert not (tmp_path / "o2").exists()

    r = cli("rotate", "--user", "alice", "--key-file", str(tmp_path / "key"), "--new-nodes", ",".join(daemons[2:]),
            "--new-threshold", "1", "--bootstrap", nodes)
    assert r.returncode == 0, r.stderr
    assert "version=2 epoch=1 n=3 t=1 deleted=n1,n2" in r.stdout

    r = cli("recover", "--user", "alice", "--password-file", str(tmp_path / "pw"), "--out", str(tmp_path / "o3"),
            "--bootstrap", ",".join(daemons[2:]))
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "o3").read_bytes() == b"\x00binary payload\xff"


def test_simulate_is_reproducible(tmp_path, capsys):
    scen = tmp_path / "s.json"
    scen.write_text(json.dumps({"nodes": 4, "duplicate_prob": 0.2, "steps": [
        {"op": "register", "user": "a", "password": "pw", "payload": "p", "threshold": 2},
        {"op": "recover", "user": "a"}]}))
    outs = []
    for _ in range(2):
        assert main(["simulate", "--scenario", str(scen), "--seed", "7"]) == 0
        outs.append(capsys.readouterr())
    assert outs[0].out == outs[1].out and "config seed=7" in outs[0].out
    assert "status=correct" in outs[0].err
    assert main(["simulate", "--scenario", str(scen), "--seed", "8"]) == 0
    assert capsys.readouterr().out != outs[0].out


def test_attack_verb(tmp_path, capsys):
    scen = tmp_path / "s.json"
    scen.write_text(json.dumps({"nodes": 3, "steps": [
        {"op": "register", "user": "a", "password": "hunter2", "payload": "p", "threshold": 1}]}))
    (tmp_path / "dict").write_text("hunter2\nletmein\n")
    assert main(["attack", "--scenario", str(scen), "--curious", "n1", "--dict", str(tmp_path / "dict")]) == 0
    assert "attack failed" in capsys.readouterr().out
    assert main(["attack", "--scenario", str(scen), "--curious", "n1,n3", "--dict", str(tmp_path / "dict")]) == 0
    assert "password=hunter2" in capsys.readouterr().out


def test_usage_errors(tmp_path, capsys, monkeypatch):
    assert main([]) == 2
    assert main(["register", "--user", "a"]) == 2
    assert main(["simulate", "--scenario", str(tmp_path / "missing.json")]) == 2
    monkeypatch.delenv("KINTSUGI_BOOTSTRAP", raising=False)
    (tmp_path / "pw").write_text("x")
    assert main(["recover", "--user", "a", "--password-file", str(tmp_path / "pw"), "--out", "o"]) == 2
    (tmp_path / "empty").write_text("\n")
    assert main(["recover", "--user", "a", "--password-file", str(tmp_path / "empty"), "--out", "o",
                 "--bootstrap", "127.0.0.1:1"]) == 2
    assert main(["attack", "--scenario", str(tmp_path / "pw"), "--curious", "n1", "--dict", "d"]) == 2
    assert "usage error" in capsys.readouterr().err


def test_unreachable_node_is_failure(tmp_path):
    (tmp_path / "pw").write_text("x")
    r = cli("recover", "--user", "a", "--password-file", str(tmp_path / "pw"), "--out", str(tmp_path / "o"),
            "--bootstrap", "127.0.0.1:1", "--timeout", "1")
    assert r.returncode == 1
