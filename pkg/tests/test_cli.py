import json
import socket
import subprocess
import sys
import threading
import time

import pytest

from qsa import cli


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cost_classical(capsys):
    code, out, _ = run(capsys, "cost", "classical-eve", "--n", "27")
    years = float(out.split("=")[1].split()[0])
    assert code == 0 and years == pytest.approx(9.81e3, rel=0.01)


@pytest.mark.parametrize(
    "argv, expect",
    [
        (["cost", "memory"], "dense_evd_max_n=24 state_vector_max_n=46"),
        (["cost", "bell", "--n", "8", "--m", "8"], "506880"),
        (["cost", "survival", "--gates", "1180"], "4.347e-05"),
    ],
)
def test_cost_variants(capsys, argv, expect):
    code, out, _ = run(capsys, *argv)
    assert code == 0 and out.strip() == expect


def test_compile_deterministic(capsys, tmp_path):
    digests = []
    for name in ("a", "b"):
        path = tmp_path / f"{name}.json"
        code, _, err = run(capsys, "compile", "symmetric", "--n", "4", "--seed", "7", "--steps", "300", "--out", str(path))
        assert code == 0
        digests.append(json.loads(err)["digest"])
    assert digests[0] == digests[1]
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_compile_then_eval(capsys, tmp_path):
    bundle = tmp_path / "b.json"
    witness = tmp_path / "w.json"
    run(capsys, "compile", "symmetric", "--n", "4", "--seed", "3", "--steps", "1500", "--out", str(bundle), "--witness", str(witness))
    assert {"V_params", "betas", "b"} <= set(json.loads(witness.read_text()))
    results = {}
    for regime in "MCQ":
        code, out, _ = run(capsys, "eval", str(bundle), "--seed", "3", "--regime", regime)
        assert code == 0
        results[regime] = json.loads(out)
    assert len({r["bucket"] for r in results.values()}) == 1


def test_keygen(capsys):
    _, a, _ = run(capsys, "keygen", "--deterministic", "--seed", "5")
    _, b, _ = run(capsys, "keygen", "--deterministic", "--seed", "5")
    _, c, _ = run(capsys, "keygen")
    assert a == b and len(bytes.fromhex(a.strip())) == 32 and c != a


def test_attack_binmass(capsys):
    code, out, _ = run(capsys, "attack", "binmass", "--n", "4", "--m", "3", "--seed", "1")
    lines = out.strip().splitlines()
    assert code == 0 and lines[0] == "bin,mass" and len(lines) == 9
    assert sum(float(x.split(",")[1]) for x in lines[1:]) == pytest.approx(1, abs=1e-5)


def test_attack_chained(capsys):
    code, out, _ = run(capsys, "attack", "chained", "--n", "3", "--m", "2", "--k", "2", "--trials", "50", "--steps", "300")
    report = json.loads(out)
    assert code == 0 and report["trials"] == 50 and 0 <= report["rate"] <= 1


def test_sweep_csv(capsys, tmp_path):
    out = tmp_path / "s.csv"
    code, _, _ = run(capsys, "sweep", "--n", "3", "--m", "3", "--reps", "2", "--shots", "200", "--steps", "300",
                     "--trajectories", "8", "--p2-grid", "0,0.01", "--out", str(out))
    lines = out.read_text().splitlines()
    assert code == 0 and lines[0] == "p2,accuracy,reps,low_signal_rate" and len(lines) == 3


def test_bad_input_exit_code(capsys):
    code, _, err = run(capsys, "compile", "blockwise", "--n", "6", "--blocksize", "4")
    assert code == 2 and "block size" in err
    with pytest.raises(SystemExit) as e:
        cli.main(["cost", "nonsense"])
    assert e.value.code != 0


def test_serve_and_connect(tmp_path):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    log = tmp_path / "log.jsonl"
    common = ["--n", "3", "--m", "3", "--seed", "9", "--port", str(port)]
    server = subprocess.Popen(
        [sys.executable, "-m", "qsa.cli", "serve", *common, "--k", "2", "--steps", "500", "--sessions", "1", "--log", str(log)],
        stdout=subprocess.PIPE, text=True,
    )
    try:
        assert server.stdout.readline().startswith("listening")
        client = subprocess.run([sys.executable, "-m", "qsa.cli", "connect", *common], capture_output=True, text=True, timeout=120)
        assert client.returncode == 0 and json.loads(client.stdout)["accepted"]
        assert json.loads(server.stdout.readline())["accepted"]
    finally:
        server.wait(timeout=60)
    assert all(json.loads(line)["role"] == "verifier" for line in log.read_text().splitlines())
