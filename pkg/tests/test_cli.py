import csv
import subprocess
import sys

import numpy as np
import pytest

from spikewm.cli import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, TRACE_COLUMNS, gate_rate_correlation, main
from spikewm.config import DEFAULTS, RunConfig
from spikewm.errors import ConfigError
from spikewm.tasks import read_spk1

SEQ = ["--task.T=20", "--task.delay=5", "--task.n_samples=40", "--seq.hidden=8", "--epochs=1"]
WM = ["--loop.steps=150", "--loop.prefill=60", "--loop.train_every=50", "--loop.seq_len=6",
      "--loop.batch_size=2", "--loop.max_episode_steps=40", "--loop.eval_every=0", "--loop.eval_episodes=1",
      "--wm.ticks=2", "--wm.enc_units=8", "--wm.fuse_units=8", "--wm.hidden=8", "--wm.head_units=8",
      "--wm.groups=2", "--wm.classes=3", "--agent.head_units=8", "--agent.horizon=3", "--agent.imag_starts=4"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ------------------------------------------------------------------- config

def test_config_roundtrip_and_aliases(tmp_path):
    cfg = RunConfig({"seed": "3", "neuron.tau": "4.0", "agent": "off"})
    assert cfg["run.seed"] == 3 and cfg["neuron.tau"] == 4.0 and cfg["loop.agent"] is False
    back = RunConfig.from_text(cfg.to_text())
    assert back.values == cfg.values
    assert back.digest == cfg.digest
    assert len(cfg.to_text().splitlines()) == len(DEFAULTS)


def test_config_rejects_unknown_and_bad_values():
    with pytest.raises(ConfigError, match="neuron.tua"):
        RunConfig({"neuron.tua": 1})
    with pytest.raises(ConfigError, match="loop.steps"):
        RunConfig({"loop.steps": "many"})
    with pytest.raises(ConfigError):
        RunConfig.from_text("just words\n")


def test_config_file_and_comments(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# comment\nneuron.beta = 1.5  # inline\n\nrun.seed=9\n")
    cfg = RunConfig.load(p)
    assert cfg["neuron.beta"] == 1.5 and cfg["run.seed"] == 9


# -------------------------------------------------------------- exit codes

@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # lr=inf is meant to produce non-finite weights
def test_exit_codes(tmp_path, capsys):
    assert main(["train-seq", "--nonsense=1"]) == EXIT_CONFIG
    assert "nonsense" in capsys.readouterr().err
    assert main(["train-seq", "--neuron.tau=0.5", f"--out={tmp_path}"]) == EXIT_CONFIG
    assert main(["train-seq", "--seq.neuron=gru", f"--out={tmp_path}"] + SEQ) == EXIT_CONFIG
    assert main(["gen-data", "--config", str(tmp_path / "missing.txt")]) == EXIT_IO
    bad = tmp_path / "bad.swm"
    bad.write_bytes(b"XXXX")
    assert main(["trace", f"--out={tmp_path}", f"--checkpoint={bad}", "--trace.steps=1"] + WM) == EXIT_IO
    assert main(["train-seq", f"--out={tmp_path}", "--seq.lr=inf"] + SEQ) == EXIT_NUMERIC


def test_entry_point_runs_as_module(tmp_path):
    out = subprocess.run([sys.executable, "-m", "spikewm", "gen-data", "--n=4", f"--output={tmp_path / 'd.spk'}"],
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert "class histogram" in out.stdout


# ---------------------------------------------------------------- train-seq

def test_train_seq_outputs_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train-seq", f"--out={a}", "--neuron", "mcn", "--task", "delayed-recall"] + SEQ) == EXIT_OK
    assert "parameter counts" in capsys.readouterr().out
    assert main(["train-seq", f"--out={b}", "--neuron", "mcn", "--task", "delayed-recall"] + SEQ) == EXIT_OK
    rows = _rows(a / "metrics.csv")
    assert rows[0] == ["epoch", "split", "accuracy", "loss"]
    assert [r[:2] for r in rows[1:]] == [["0", "train"], ["0", "test"], ["1", "train"], ["1", "test"]]
    for name in ("metrics.csv", "checkpoint.swm"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    strip = lambda d: [x for x in (d / "config.resolved.txt").read_text().splitlines() if not x.startswith("run.out")]
    assert strip(a) == strip(b)
    # the resolved config reproduces the run
    c = tmp_path / "c"
    assert main(["train-seq", "--config", str(a / "config.resolved.txt"), f"--out={c}"]) == EXIT_OK
    assert (c / "metrics.csv").read_bytes() == (a / "metrics.csv").read_bytes()


def test_train_seq_zero_epochs(tmp_path):
    assert main(["train-seq", f"--out={tmp_path}"] + SEQ + ["--epochs=0"]) == EXIT_OK
    rows = _rows(tmp_path / "metrics.csv")
    assert len(rows) == 3 and {r[0] for r in rows[1:]} == {"0"}


# ----------------------------------------------------------------- gen-data

def test_gen_data_roundtrip_and_empty(tmp_path, capsys):
    p = tmp_path / "d.spk"
    assert main(["gen-data", "--n=12", f"--output={p}", "--task.T=20", "--task.delay=5"]) == EXIT_OK
    assert "[3, 3, 3, 3]" in capsys.readouterr().out
    assert len(read_spk1(p)) == 12
    e = tmp_path / "e.spk"
    assert main(["gen-data", "--n=0", f"--output={e}"]) == EXIT_OK
    assert e.stat().st_size == 20 and len(read_spk1(e)) == 0
    assert main(["gen-data", "--n=1", f"--output={tmp_path / 'no' / 'dir' / 'x.spk'}"]) == EXIT_IO


# ----------------------------------------------------------------- train-wm

def test_train_wm_outputs_resume_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train-wm", f"--out={a}"] + WM) == EXIT_OK
    assert main(["train-wm", f"--out={b}"] + WM) == EXIT_OK
    for name in ("metrics.csv", "checkpoint.swm", "episodes.swe"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rows = _rows(a / "metrics.csv")
    assert "eval_return" in rows[0]
    assert rows[-1][rows[0].index("eval_return")] != ""
    capsys.readouterr()
    c = tmp_path / "c"
    assert main(["train-wm", f"--out={c}", f"--resume={a / 'checkpoint.swm'}", "--steps=250"] + WM[1:]) == EXIT_OK
    assert "resumed from" in capsys.readouterr().out
    rows_c = _rows(c / "metrics.csv")
    first_update = int(rows_c[1][rows_c[0].index("update")])
    assert first_update > int(rows[-2][rows[0].index("update")])


def test_train_wm_without_agent(tmp_path):
    assert main(["train-wm", f"--out={tmp_path}", "--agent=off"] + WM) == EXIT_OK
    rows = _rows(tmp_path / "metrics.csv")
    ai = rows[0].index("actor_loss")
    assert all(r[ai] == "" for r in rows[1:])


# -------------------------------------------------------------------- trace

@pytest.mark.parametrize("source", ["env", "task"])
def test_trace_contract(tmp_path, source):
    extra = ["--task.T=20", "--task.delay=5", "--seq.hidden=6"] if source == "task" else ["--trace.steps=5"]
    assert main(["trace", f"--out={tmp_path}", f"--trace.source={source}"] + WM + extra) == EXIT_OK
    rows = _rows(tmp_path / "trace.csv")
    assert tuple(rows[0]) == TRACE_COLUMNS
    ticks = {int(r[0]) for r in rows[1:]}
    neurons = {int(r[1]) for r in rows[1:]}
    assert len(rows) - 1 == len(ticks) * len(neurons)
    assert len(neurons) == (6 if source == "task" else 8)
    z = np.array([float(r[5]) for r in rows[1:]])
    assert np.all((z > 0) & (z < 1))
    assert {r[6] for r in rows[1:]} <= {"0", "1"}
    summary = _rows(tmp_path / "trace_summary.csv")
    assert summary[0] == ["neuron", "firing_rate", "gate_duty_cycle", "mean_gate"]
    assert len(summary) - 1 == len(neurons)


def test_gate_rate_correlation_sign():
    z = np.linspace(0.1, 0.9, 20)[:, None].repeat(3, 1)
    spikes = (z > 0.5).astype(float)
    assert gate_rate_correlation({"z": z, "spike": spikes}) > 0
    assert np.isnan(gate_rate_correlation({"z": z, "spike": np.zeros_like(z)}))


# -------------------------------------------------------------- grid-search

def test_grid_search_rows_and_determinism(tmp_path):
    args = SEQ + ["--grid.epochs=1", "--grid.gb_over_gl=1.5,0.5,1.0", "--grid.beta=0.5,1.0,1.5"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["grid-search", f"--out={a}"] + args) == EXIT_OK
    assert main(["grid-search", f"--out={b}"] + args) == EXIT_OK
    rows = _rows(a / "grid.csv")
    assert rows[0] == ["gb_over_gl", "beta", "final_accuracy", "final_loss"]
    assert len(rows) == 10
    cells = [(float(r[0]), float(r[1])) for r in rows[1:]]
    assert cells == sorted(cells)
    assert (a / "grid.csv").read_bytes() == (b / "grid.csv").read_bytes()


def test_grid_single_cell_matches_train_seq(tmp_path):
    g = tmp_path / "g"
    s = tmp_path / "s"
    assert main(["grid-search", f"--out={g}", "--grid.epochs=1", "--grid.gb_over_gl=1.0", "--grid.beta=1.0"]
                + SEQ) == EXIT_OK
    assert main(["train-seq", f"--out={s}"] + SEQ) == EXIT_OK
    grid = _rows(g / "grid.csv")[1]
    final_test = _rows(s / "metrics.csv")[-1]
    assert float(grid[2]) == float(final_test[2])
    assert float(grid[3]) == float(final_test[3])


def test_grid_search_threads(tmp_path, capsys):
    args = SEQ + ["--grid.epochs=1", "--grid.gb_over_gl=0.5,1.0", "--grid.beta=1.0"]
    assert main(["grid-search", f"--out={tmp_path / 'p'}", "--threads=2"] + args) == EXIT_OK
    assert "deterministic only" in capsys.readouterr().err
    assert main(["grid-search", f"--out={tmp_path / 's'}"] + args) == EXIT_OK
    assert (tmp_path / "p" / "grid.csv").read_bytes() == (tmp_path / "s" / "grid.csv").read_bytes()
