import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rehearse.cli import main
from rehearse.config import ConfigError, ExperimentConfig, parse_config, serialize_config
from rehearse.metrics import trapezoid_auc

TINY = """
[data]
num_classes = 6
dim = 8
per_class = 30

[stream]
num_sessions = 3
base_init_classes = 3

[policy]
kind = grasp

[rehearsal]
iterations = 4
batch_size = 8

[model]
hidden_dim = 16

[base_init]
pretrain_steps = 10
"""

DRIFT = """
[data]
num_classes = 6
dim = 8
per_class = 30

[stream]
num_sessions = 2
base_init_classes = 2

[policy]
kind = grasp

[rehearsal]
iterations = 100
batch_size = 4

[model]
hidden_dim = 16
max_lr = 0.05

[base_init]
pretrain_steps = 10

[drift]
probe_size = 12
"""


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_run_writes_one_row_per_session_and_is_reproducible(tmp_path):
    cfg = write(tmp_path, TINY)
    assert main(["run", "-c", cfg, "-o", str(tmp_path / "a"), "--seeds", "1"]) == 0
    assert main(["run", "-c", cfg, "-o", str(tmp_path / "b"), "--seeds", "1"]) == 0
    rows = read_csv(tmp_path / "a" / "results.csv")
    assert len(rows) == 1 + 3
    assert rows[0][:5] == ["experiment_id", "policy", "seed", "t", "alpha"]
    for name in ("results.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_missing_policy_exits_2(tmp_path, capsys):
    cfg = write(tmp_path, TINY.replace("kind = grasp", ""))
    assert main(["run", "-c", cfg, "-o", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "kind" in err and "policy" in err


def test_bad_value_reports_line(tmp_path, capsys):
    text = TINY.replace("iterations = 4", "iterations = four")
    lineno = text.splitlines().index("iterations = four") + 1
    assert main(["run", "-c", write(tmp_path, text), "-o", str(tmp_path / "o")]) == 2
    assert f"line {lineno}:" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    cfg = write(tmp_path, TINY)
    assert main(["compare", "-c", cfg, "-o", str(tmp_path / "o"), "--policies", "grasp"]) == 2
    assert main(["compare", "-c", cfg, "-o", str(tmp_path / "o"), "--policies", "grasp,bogus"]) == 2
    assert main(["run", "-c", str(tmp_path / "nope.ini"), "-o", str(tmp_path / "o")]) == 2
    assert main(["frobnicate"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exits_3(tmp_path):
    cfg = write(tmp_path, TINY.replace("hidden_dim = 16", "hidden_dim = 16\nmax_lr = 1e300"))
    assert main(["run", "-c", cfg, "-o", str(tmp_path / "o")]) == 3


def test_compare_grid(tmp_path):
    cfg = write(tmp_path, TINY)
    out = tmp_path / "cmp"
    assert main(["compare", "-c", cfg, "-o", str(out), "--policies", "grasp,uniform_balanced", "--seeds", "0,1,2"]) == 0
    summary = read_csv(out / "summary.csv")
    assert len(summary) == 1 + 6
    results = read_csv(out / "results.csv")
    head = results[0]
    by_seed = {}
    for row in results[1:]:
        r = dict(zip(head, row))
        by_seed.setdefault(r["seed"], set()).add(r["schedule_hash"])
    assert all(len(h) == 1 for h in by_seed.values()) and len(by_seed) == 3
    table = read_csv(out / "comparison.csv")
    assert "mcnemar_p_vs_uniform_balanced" in table[0]
    rows = {r[0]: dict(zip(table[0], r)) for r in table[1:]}
    assert 0.0 <= float(rows["grasp"]["mcnemar_p_vs_uniform_balanced"]) <= 1.0
    assert rows["uniform_balanced"]["mcnemar_p_vs_uniform_balanced"] == ""


def test_compare_parallel_matches_serial(tmp_path):
    cfg = write(tmp_path, TINY)
    args = ["--policies", "grasp,uniform", "--seeds", "3,4"]
    assert main(["compare", "-c", cfg, "-o", str(tmp_path / "s"), *args]) == 0
    assert main(["compare", "-c", cfg, "-o", str(tmp_path / "p"), *args, "--jobs", "2"]) == 0
    for name in ("results.csv", "comparison.csv"):
        assert (tmp_path / "s" / name).read_bytes() == (tmp_path / "p" / name).read_bytes()
    # the baseline is added when missing
    assert len(read_csv(tmp_path / "s" / "comparison.csv")) == 1 + 3


def test_drift_outputs(tmp_path):
    cfg = write(tmp_path, DRIFT)
    out = tmp_path / "d"
    assert main(["drift", "-c", cfg, "-o", str(out), "--seeds", "0,1"]) == 0
    table = read_csv(out / "drift_table.csv")
    rows = {r[0]: dict(zip(table[0], r)) for r in table[1:]}
    assert set(rows) == {"grasp", "uniform_balanced"}
    for policy in rows:
        for task in (1, 2):
            curve = read_csv(out / f"drift_{policy}_task{task}.csv")[1:]
            assert len(curve) == 100
            xs = np.array([float(r[0]) for r in curve])
            ys = np.array([float(r[1]) for r in curve])
            assert float(rows[policy][f"beta_task{task}"]) == pytest.approx(trapezoid_auc(xs, ys), rel=1e-12)
            assert float(rows[policy][f"phi_task{task}"]) == pytest.approx(ys.mean(), rel=1e-12)
            # independent recomputation of the trapezoid rule
            manual = sum(0.5 * (ys[i] + ys[i + 1]) for i in range(len(ys) - 1))
            assert float(rows[policy][f"beta_task{task}"]) == pytest.approx(manual, rel=1e-9)


def test_drift_zero_lr_is_flat(tmp_path):
    cfg = write(tmp_path, DRIFT.replace("max_lr = 0.05", "max_lr = 0.0"))
    out = tmp_path / "z"
    assert main(["drift", "-c", cfg, "-o", str(out), "--policies", "grasp"]) == 0
    row = read_csv(out / "drift_table.csv")[1]
    assert [float(v) for v in row[1:]] == [0.0, 0.0, 0.0, 0.0]


def test_drift_rejects_linear(tmp_path):
    text = DRIFT.replace("hidden_dim = 16", "arch = linear").replace("probe_size = 12", "probe_size = 0")
    assert main(["drift", "-c", write(tmp_path, text), "-o", str(tmp_path / "o")]) == 2
    assert main(["drift", "-c", write(tmp_path, TINY), "-o", str(tmp_path / "o")]) == 2


def test_config_roundtrip_defaults():
    cfg = ExperimentConfig().replace(**{"policy.kind": "mir"})
    text = serialize_config(cfg)
    assert parse_config(text) == cfg
    assert serialize_config(parse_config(text)) == text


@settings(max_examples=40, deadline=None)
@given(
    kind=st.sampled_from(["grasp", "uniform", "max_loss", "mir", "kmeans"]),
    lr=st.floats(1e-6, 10.0),
    n=st.integers(1, 512),
    budget=st.integers(0, 10**9),
    insert=st.booleans(),
    mode=st.sampled_from(["cil", "iid", "long_tailed_cil"]),
)
def test_config_roundtrip_property(kind, lr, n, budget, insert, mode):
    cfg = ExperimentConfig().replace(**{
        "policy.kind": kind,
        "model.max_lr": lr,
        "rehearsal.batch_size": n,
        "memory.budget_bytes": budget,
        "base_init.insert_into_buffer": insert,
        "stream.mode": mode,
    })
    assert parse_config(serialize_config(cfg)) == cfg


def test_unknown_field_names_line():
    with pytest.raises(ConfigError) as err:
        parse_config("[policy]\nkind = grasp\n\n[model]\nwidth = 3\n")
    assert err.value.line == 5
