import subprocess
import sys

import pytest

from zerosim.cli import main
from zerosim.transport import free_loopback_roster

TINY = ["--steps", "3", "--hidden-dim", "4", "--layers", "1", "--batch-size", "4"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def body(text):
    return [l for l in text.splitlines() if l and not l.startswith("#")]


def test_plan_table1(capsys):
    code, out, _ = run(capsys, "plan", "--table", "table1")
    assert code == 0 and out.startswith("# schema=1 table=table1")
    assert body(out)[1].split(",")[:4] == ["1", "120", "120", "120"]


def test_plan_psi(capsys):
    code, out, _ = run(capsys, "plan", "--psi", "7.5e9", "--dp", "64")
    rows = [r.split(",") for r in body(out)]
    assert code == 0 and rows[0][0] == "stage"
    assert [r[9] for r in rows[1:]] == ["120", "31.4", "16.6", "1.88"]


def test_plan_trillion_partitioned(capsys):
    code, out, _ = run(capsys, "plan", "--psi", "1e12", "--dp", "1024", "--stage", "os+g+p")
    rows = [r.split(",") for r in body(out)]
    assert code == 0 and len(rows) == 2 and rows[1][9] == "15.6"


def test_plan_usage_errors(capsys):
    assert run(capsys, "plan")[0] == 2
    assert run(capsys, "plan", "--psi", "10", "--stage", "xx")[0] == 2
    assert run(capsys, "plan", "--psi", "-1")[0] == 2


def test_unknown_option_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["plan", "--bogus"])
    assert exc.value.code == 2


def test_train_sim(capsys):
    code, out, _ = run(capsys, "train", "--ranks", "2", *TINY)
    assert code == 0
    rows = body(out)
    assert rows[0] == "step,loss,sent_elements,state_bytes" and len(rows) == 4
    assert out.rstrip().splitlines()[-1].startswith("# digest=")


def test_train_same_digest_across_stages(capsys):
    digests = set()
    for stage in ("base", "os", "os+g", "os+g+p"):
        _, out, _ = run(capsys, "train", "--ranks", "2", "--stage", stage, *TINY)
        digests.add(out.rstrip().splitlines()[-1])
    assert len(digests) == 1


def test_train_bad_batch(capsys):
    code, _, err = run(capsys, "train", "--ranks", "3", "--batch-size", "4")
    assert code == 2 and "divisible" in err


def test_config_and_env_precedence(tmp_path, capsys, monkeypatch):
    cfg = tmp_path / "run.conf"
    cfg.write_text("# settings\nseed = 3\nsteps = 2\nhidden-dim = 4\nlayers = 1\nbatch_size = 4\nranks = 2\n")
    _, from_config, _ = run(capsys, "train", "--config", str(cfg))
    _, flag, _ = run(capsys, "train", "--config", str(cfg), "--seed", "3")
    assert from_config == flag and "seed=3" in from_config
    monkeypatch.setenv("ZEROSIM_SEED", "5")
    _, from_env, _ = run(capsys, "train", "--config", str(cfg))
    assert "seed=5" in from_env
    _, flag_wins, _ = run(capsys, "train", "--config", str(cfg), "--seed", "3")
    assert flag_wins == from_config


def test_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.conf"
    cfg.write_text("just words\n")
    assert run(capsys, "train", "--config", str(cfg))[0] == 2
    cfg.write_text("steps = many\n")
    assert run(capsys, "train", "--config", str(cfg))[0] == 2
    assert run(capsys, "train", "--config", str(tmp_path / "missing"))[0] == 2


def test_verify_ok_and_fault(capsys):
    code, out, _ = run(capsys, "verify", "--ranks", "1,2", "--seeds", "1", *TINY)
    assert code == 0 and out.count("ok N=") == 6 and "all stages match" in out
    code, out, _ = run(capsys, "verify", "--ranks", "2", "--seeds", "1", "--inject-fault", "os:2:1:5", *TINY)
    assert code == 1 and "step 1, index 5" in out


def test_verify_single_rank(capsys):
    assert run(capsys, "verify", "--ranks", "1", "--seeds", "1", *TINY)[0] == 0


def test_verify_bad_fault_spec(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["verify", "--inject-fault", "os:2"])
    assert exc.value.code == 2


def test_verify_tcp(capsys):
    code, out, _ = run(capsys, "verify", "--transport", "tcp", "--ranks", "2", "--seeds", "1", *TINY)
    assert code == 0 and out.count("ok N=2") == 4


def test_frag_fixture(capsys):
    code, out, _ = run(capsys, "frag")
    rows = [r.split(",") for r in body(out)]
    assert code == 0 and rows[1][0] == "interleaved" and rows[1][4] == "1"
    assert rows[2][0] == "md_defrag" and rows[2][4] == "0"


def test_frag_generator_and_errors(tmp_path, capsys):
    code, out, _ = run(capsys, "frag", "--layers", "3", "--ckpt-size", "2", "--temp-size", "5",
                       "--grads-size", "1", "--policy", "md_defrag")
    assert code == 0 and len(body(out)) == 2
    assert run(capsys, "frag", "--layers", "3")[0] == 2
    bad = tmp_path / "bad.trace"
    bad.write_text("free nobody\n")
    code, _, err = run(capsys, "frag", "--trace", str(bad))
    assert code == 2 and "nobody" in err


def test_frag_empty_trace_and_single_policy(tmp_path, capsys):
    empty = tmp_path / "empty.trace"
    empty.write_text("# nothing\n")
    code, out, _ = run(capsys, "frag", "--trace", str(empty))
    rows = [r.split(",") for r in body(out)]
    assert code == 0 and [r[2] for r in rows[1:]] == ["0", "0"] and [r[4] for r in rows[1:]] == ["0", "0"]
    code, out, _ = run(capsys, "frag", "--policy", "interleaved")
    assert code == 0 and len(body(out)) == 2


def test_report_dir(tmp_path, capsys):
    code, out, _ = run(capsys, "report", "--out-dir", str(tmp_path / "r"))
    names = {p.name for p in (tmp_path / "r").iterdir()}
    assert code == 0
    assert {"table1.csv", "table2.csv", "fig1.csv", "checks.csv", "frag.csv", "table1_exact.csv"} <= names
    assert "pa_overhead_ratio,1/12" in (tmp_path / "r" / "checks.csv").read_text()


def test_join_mode_over_roster(tmp_path):
    roster = tmp_path / "roster.txt"
    roster.write_text("".join(f"{h}:{p}\n" for h, p in free_loopback_roster(2)))
    args = ["train", "--transport", "tcp", "--ranks", "2", "--roster", str(roster), "--timeout", "30", *TINY]
    procs = [subprocess.Popen([sys.executable, "-m", "zerosim", *args, "--rank", str(r)],
                              stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True) for r in range(2)]
    outs = [p.communicate(timeout=120) for p in procs]
    assert [p.returncode for p in procs] == [0, 0], outs
    assert outs[1][0] == ""
    sim = subprocess.run([sys.executable, "-m", "zerosim", "train", "--ranks", "2", *TINY],
                         capture_output=True, text=True, check=True).stdout
    assert outs[0][0].splitlines()[-1] == sim.splitlines()[-1]


def test_roster_size_mismatch(tmp_path, capsys):
    roster = tmp_path / "roster.txt"
    roster.write_text("127.0.0.1:1\n")
    code, _, err = run(capsys, "train", "--transport", "tcp", "--ranks", "2", "--roster", str(roster), *TINY)
    assert code == 2 and "lists 1 ranks" in err
