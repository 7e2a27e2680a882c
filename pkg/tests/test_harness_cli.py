import json
import math
import os
import socket
import subprocess
import sys
import threading

import numpy as np
import pytest
from click.testing import CliRunner

from airqkd.analytics import binary_entropy
from airqkd.cli import load_config, main
from airqkd.harness import (
    ExperimentSpec,
    PlanLibrary,
    cells_to_csv,
    format_cells,
    make_rng,
    rand_pair,
    run_experiment,
    run_trials,
    summarize,
)
from airqkd.plan import FrozenPlan
from airqkd.protocol import (
    ABORTED,
    MSG_HELLO,
    BobSession,
    StreamTransport,
    TagMsg,
    bob_loop,
    decode,
    encode,
    run_session,
)

SMALL = dict(r_max=3, eps_target=1e-3, t=100)


@pytest.fixture(scope="module")
def lib(tmp_path_factory):
    return PlanLibrary(tmp_path_factory.mktemp("plans"))


@pytest.fixture(scope="module")
def plan256(lib):
    return lib.plan(256, 0.05, **SMALL)


# -- rand_pair -------------------------------------------------------------------


def test_philox_golden_values():
    # frozen first draws of the keyed generator
    assert make_rng((0, 0)).integers(0, 2**63, 3).tolist() == [
        106500010600983629, 2227898105101312729, 1027722119939102524]
    assert make_rng(7).random(2).tolist() == [0.8720734548204873, 0.29536538151378355]
    a, b = rand_pair(16, 0.25, (3, 4))
    assert a.tolist() == [1, 1, 0, 0, 1, 1, 0, 1, 1, 1, 1, 0, 1, 0, 1, 1]
    assert (a ^ b).tolist() == [1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 1]


def test_noiseless_pair():
    a, b = rand_pair(1024, 0.0, 5)
    assert np.array_equal(a, b)


def test_pair_is_deterministic_and_seed_sensitive():
    a1, b1 = rand_pair(512, 0.1, (1, 2))
    a2, b2 = rand_pair(512, 0.1, (1, 2))
    a3, _ = rand_pair(512, 0.1, (2, 1))
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)
    assert not np.array_equal(a1, a3)


@pytest.mark.parametrize("e", [0.01, 0.02, 0.11])
def test_crossover_fraction(e):
    n = 1 << 20
    a, b = rand_pair(n, e, (11, 0))
    frac = np.count_nonzero(a ^ b) / n
    assert abs(frac - e) <= 3 * math.sqrt(e * (1 - e) / n)
    assert abs(a.mean() - 0.5) <= 3 * math.sqrt(0.25 / n)


@pytest.mark.parametrize("seed", [-1, (1, 2, 3), 2**64])
def test_bad_seeds(seed):
    with pytest.raises(ValueError):
        rand_pair(8, 0.1, seed)


def test_bad_crossover():
    with pytest.raises(ValueError):
        rand_pair(8, 0.5, 0)


# -- experiment runner -----------------------------------------------------------


def test_spec_validation():
    with pytest.raises(ValueError):
        ExperimentSpec(trials=0)
    with pytest.raises(ValueError):
        ExperimentSpec(e_mu=[0.0])
    with pytest.raises(ValueError):
        ExperimentSpec(fmt="xml")
    with pytest.raises(ValueError):
        run_trials(None, 0)


def test_library_caches_plans(lib, plan256):
    path = lib.plan_path(256, 0.05, SMALL["r_max"], SMALL["eps_target"], t=SMALL["t"])
    assert path.exists()
    assert lib.plan(256, 0.05, build=False, **SMALL).hash() == plan256.hash()
    with pytest.raises(FileNotFoundError):
        lib.plan(256, 0.07, build=False, **SMALL)


def test_summary_recomputes_from_records(plan256):
    recs = run_trials(plan256, 50, root_seed=3)
    cell = summarize(plan256, recs)
    leaked = [r.leaked_bits for r in recs]
    # leaked_bits already include the d tag bits
    assert cell.f_measured == float(np.mean(leaked)) / (256 * binary_entropy(0.05))
    assert cell.mean_rounds == float(np.mean([r.rounds_used for r in recs]))
    assert cell.failures == sum(not r.success for r in recs)
    assert all(r.keys_match for r in recs if r.success)


def test_experiment_table_is_reproducible(tmp_path):
    spec = ExperimentSpec(n=[128, 256], e_mu=[0.04, 0.08], trials=20, plan_dir=str(tmp_path), fmt="csv",
                          **SMALL)
    first = cells_to_csv(run_experiment(spec))
    # second run loads the cached plans
    second = cells_to_csv(run_experiment(spec))
    assert first == second
    rows = first.strip().split("\n")
    assert rows[0].startswith("n,e_mu,trials")
    assert len(rows) == 5
    text = format_cells(run_experiment(spec), "text")
    assert "2^7" in text and "2^8" in text and "0.08" in text


def test_missing_plan_without_build(tmp_path):
    spec = ExperimentSpec(n=[128], e_mu=[0.04], trials=5, plan_dir=str(tmp_path), build=False, **SMALL)
    with pytest.raises(FileNotFoundError):
        run_experiment(spec)


# -- CLI -----------------------------------------------------------------------


def test_cli_plan_commands(tmp_path):
    runner = CliRunner()
    res = runner.invoke(main, ["plan", "build", "--n", "2^7", "--e-mu", "0.05", "--r-max", "3", "--eps-target",
                               "1e-3", "--t", "100", "--plan-dir", str(tmp_path), "--out",
                               str(tmp_path / "p.json")])
    assert res.exit_code == 0, res.output
    path, digest = res.stdout.split()
    assert FrozenPlan.load(path).hash() == digest
    res = runner.invoke(main, ["plan", "hash", path])
    assert res.stdout.strip() == digest
    res = runner.invoke(main, ["plan", "show", path])
    assert res.exit_code == 0 and "efficiency" in res.stdout and "round 3" in res.stdout
    res = runner.invoke(main, ["report", "--format", "csv", path])
    head, row = res.stdout.strip().split("\n")
    assert head.startswith("plan,n,e_mu") and row.split(",")[1] == "128"
    assert runner.invoke(main, ["report"]).exit_code != 0


def test_cli_run_with_config_and_env(tmp_path, monkeypatch):
    cfg = tmp_path / "grid.cfg"
    cfg.write_text("# desk grid\nn = 128\ne_mu = 0.04,0.08\nr_max = 3\neps_target = 1e-3\nt = 100\n"
                   "trials = 10\nformat = csv\n")
    assert load_config(cfg)["e_mu"] == "0.04,0.08"
    monkeypatch.setenv("AIRQKD_PLAN_DIR", str(tmp_path / "lib"))
    runner = CliRunner()
    res = runner.invoke(main, ["--config", str(cfg), "run"])
    assert res.exit_code == 0, res.output
    lines = res.stdout.strip().split("\n")
    assert lines[0].startswith("n,e_mu") and len(lines) == 3
    assert len(list((tmp_path / "lib").glob("plan_*.json"))) == 2
    # flags override the config file
    res = runner.invoke(main, ["--config", str(cfg), "run", "--e-mu", "0.04", "--format", "text"])
    assert "average rounds" in res.stdout
    res = runner.invoke(main, ["run", "--n", "64", "--trials", "0"])
    assert res.exit_code != 0


def test_cli_run_no_build(tmp_path):
    res = CliRunner().invoke(main, ["run", "--n", "128", "--plan-dir", str(tmp_path), "--no-build"])
    assert res.exit_code != 0 and "no plan" in res.output


# -- two processes -------------------------------------------------------------


def _two_process(plan_a, plan_b, tmp_path, trial=0):
    env = dict(os.environ)
    serve = subprocess.Popen(
        [sys.executable, "-m", "airqkd.cli", "serve", "--plan", str(plan_a), "--port", "0", "--trial", str(trial),
         "--transcript", str(tmp_path / "alice.bin")],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True, env=env)
    line = serve.stderr.readline()
    port = int(line.strip().rsplit(":", 1)[1])
    bob = subprocess.run(
        [sys.executable, "-m", "airqkd.cli", "connect", "--plan", str(plan_b), "--port", str(port), "--trial",
         str(trial), "--transcript", str(tmp_path / "bob.bin")],
        capture_output=True, text=True, env=env, timeout=300)
    out, _ = serve.communicate(timeout=300)
    return json.loads(out), serve.returncode, json.loads(bob.stdout), bob.returncode


def _split_frames(data):
    frames = []
    i = 0
    while i < len(data):
        length = int.from_bytes(data[i + 1 : i + 5], "little")
        frames.append(data[i : i + 5 + length])
        i += 5 + length
    return frames


def test_loopback_matches_in_process(plan256, lib, tmp_path):
    path = lib.plan_path(256, 0.05, SMALL["r_max"], SMALL["eps_target"], t=SMALL["t"])
    for trial in (0, 1):
        a, rc_a, b, rc_b = _two_process(path, path, tmp_path, trial)
        assert a == b
        assert (rc_a == 0) == (a["status"] == "success")
        fa = _split_frames((tmp_path / "alice.bin").read_bytes())
        fb = _split_frames((tmp_path / "bob.bin").read_bytes())
        assert fa[0][0] == fb[0][0] == MSG_HELLO
        k_a, k_b = rand_pair(256, 0.05, (0, trial))
        _, _, q = run_session(k_a, k_b, plan256)
        assert fa[1:] == q[:1] + q[1::2] and fb[1:] == q[2::2]


def test_loopback_hash_mismatch(plan256, lib, tmp_path):
    path = lib.plan_path(256, 0.05, SMALL["r_max"], SMALL["eps_target"], t=SMALL["t"])
    other = tmp_path / "other.json"
    obj = json.loads(plan256.to_bytes())
    obj["header"]["root_seed"] = 99
    other.write_text(json.dumps(obj))
    a, rc_a, b, rc_b = _two_process(path, other, tmp_path)
    assert a["status"] == b["status"] == ABORTED
    assert rc_a == rc_b == 1
    assert all(f[0] != 2 for f in _split_frames((tmp_path / "alice.bin").read_bytes()))


def test_truncated_frame_aborts_with_transport_reason(plan256):
    sa, sb = socket.socketpair()
    lb = StreamTransport(sb)
    bob = BobSession(rand_pair(256, 0.05, 0)[1], plan256, 0)
    th = threading.Thread(target=bob_loop, args=(bob, lb))
    th.start()
    frame = encode(TagMsg(0, 0x1234, 64))
    sa.sendall(frame[:7])
    sa.close()
    th.join(timeout=30)
    lb.close()
    assert bob.outcome.status == ABORTED
    assert bob.outcome.reason.startswith("transport")
    assert decode(frame).tag == 0x1234
