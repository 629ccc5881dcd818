import json
import os
import signal
import socket
import subprocess
import sys
import time

import pytest

from ctxpeers.cli import main

EX = "http://ctx.example.org/"


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_sim_bundled_scenario(capsys, tmp_path):
    log = tmp_path / "events.log"
    assert main(["sim", "--scenario", "multi_homes", "--log", str(log)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["passed"] and log.read_text().count("\n") > 100


def test_sim_failing_scenario_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.scenario"
    path.write_text(json.dumps([
        {"action": "join", "at": 0, "node": "a", "triples": []},
        {"action": "query", "at": 10, "node": "a", "name": "q",
         "text": f"SELECT ?s WHERE (?s, <{EX}p>, ?o)"},
        {"action": "assert", "at": 500, "check": "query_rows", "query": "q", "count": 1},
    ]))
    assert main(["sim", "--scenario", str(path)]) == 2
    assert "assert failed at t=500" in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["query", "--at", "127.0.0.1:1"]) == 1
    assert main(["sim", "--scenario", "no_such_thing"]) == 1
    assert main(["run", "--config", "/nonexistent.json"]) == 1


def test_unreachable_node_exits_3(capsys):
    port = free_port()
    assert main(["query", "--at", f"127.0.0.1:{port}", "SELECT ?s WHERE (?s, ?p, ?o)"]) == 3


@pytest.fixture
def node(tmp_path):
    port = free_port()
    addr = f"127.0.0.1:{port}"
    (tmp_path / "map.txt").write_text(f"functional <{EX}temperature> Environment\n"
                                      f"<{EX}loc/*> Location\n")
    (tmp_path / "data.nt").write_text(
        f'<{EX}kitchen> <{EX}temperature> "21.5"^^<decimal> .\n'
        f"<{EX}bob> <{EX}loc/in> <{EX}kitchen> .\n")
    cfg = tmp_path / "node.json"
    cfg.write_text(json.dumps({"address": addr, "mapping": "map.txt", "fixture": "data.nt"}))
    proc = subprocess.Popen([sys.executable, "-m", "ctxpeers.cli", "run", "--config", str(cfg)],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    line = proc.stdout.readline()
    assert "up" in line, proc.stderr.read()
    yield addr, proc
    if proc.poll() is None:
        proc.send_signal(signal.SIGTERM)
        proc.wait(10)


def test_node_over_tcp(node, capsys):
    addr, proc = node
    q = f"SELECT ?p ?r WHERE (?p, <{EX}loc/in>, ?r)"
    assert main(["query", "--at", addr, q]) == 0
    out = capsys.readouterr().out
    assert out.splitlines() == ["?p\t?r", f"<{EX}bob>\t<{EX}kitchen>"]

    assert main(["query", "--at", addr, "SELECT ?x WHERE"]) == 1
    assert "QuerySyntaxError" in capsys.readouterr().err

    sub = subprocess.Popen([sys.executable, "-m", "ctxpeers.cli", "subscribe", "--at", addr,
                            "--pattern", f"(?r, <{EX}temperature>, ?t)", "--filter", "?t > 25",
                            "--lease", "20", "--count", "1"],
                           stdout=subprocess.PIPE, text=True)
    assert sub.stdout.readline().startswith("# subscribed")
    triple = f'<{EX}attic> <{EX}temperature> "30"^^<decimal> .'
    assert main(["put", "--at", addr, f'<{EX}cellar> <{EX}temperature> "3"^^<decimal> .']) == 0
    assert main(["put", "--at", addr, triple]) == 0
    assert sub.wait(20) == 0
    kind, got, producer = sub.stdout.readline().rstrip("\n").split("\t")
    assert (kind, producer) == ("added", addr) and "attic" in got

    assert main(["rm", "--at", addr, triple]) == 0
    assert capsys.readouterr().out.split()[-1] == "changed"
    assert main(["rm", "--at", addr, triple]) == 0
    assert capsys.readouterr().out.split()[-1] == "unchanged"

    proc.send_signal(signal.SIGTERM)
    assert proc.wait(10) == 0


def test_run_with_dead_bootstrap_exits_3(tmp_path):
    cfg = tmp_path / "node.json"
    cfg.write_text(json.dumps({"address": f"127.0.0.1:{free_port()}",
                               "bootstrap": f"127.0.0.1:{free_port()}",
                               "join_timeout": 300, "join_retries": 1}))
    out = subprocess.run([sys.executable, "-m", "ctxpeers.cli", "run", "--config", str(cfg)],
                         capture_output=True, text=True, timeout=30)
    assert out.returncode == 3 and "join failed" in out.stderr
