import json
import subprocess
import sys

import pytest

from sharpdro import __version__
from sharpdro.cli import main
from sharpdro.harness import read_manifest, read_table

SMALL = """\
data:
  n_train: 240
  n_test_per_severity: 20
  dim: 3
  classes: 3
model:
  hidden_dims: [4]
train:
  epochs: 1
  batch_size: 32
  method: SharpDROAgnostic
experiment:
  surface_resolution: 3
minimax:
  T: 500
  seeds: 2
  descent_steps: 50
  mc_samples: 10000
"""


@pytest.fixture
def cfg_path(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


def tree(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


def test_generate_train_evaluate_pipeline(tmp_path, cfg_path):
    data, run, ev = tmp_path / "data", tmp_path / "run", tmp_path / "eval"
    assert main(["generate", "--config", str(cfg_path), "--out", str(data)]) == 0
    assert (data / "train.npz").exists() and (data / "test.npz.manifest.json").exists()
    assert main(["train", "--config", str(cfg_path), "--data", str(data), "--out", str(run)]) == 0
    header, rows = read_table(run / "metrics.csv")
    assert header == ["method", "seed", "epoch", "severity", "accuracy", "loss", "sharpness",
                      "grad_norm", "omega_or_score_mean"]
    assert len(rows) == 2 * 6
    man = read_manifest(run / "metrics.csv")
    assert man["tool_version"] == __version__ and man["started"] == "2023-11-14T22:13:20+00:00"
    assert (run / "ood_hist.csv").exists()
    assert main(["evaluate", "--config", str(cfg_path), "--theta", str(run / "theta.npz"),
                 "--data", str(data), "--out", str(ev)]) == 0
    _, surface = read_table(ev / "surface.csv")
    assert len(surface) == 6 * 3 * 3


def test_results_are_byte_identical_across_invocations_and_workers(tmp_path, cfg_path):
    outs = []
    for i, workers in enumerate(("1", "1", "4")):
        out = tmp_path / f"r{i}"
        assert main(["train", "--config", str(cfg_path), "--out", str(out), "--workers", workers]) == 0
        outs.append(tree(out))
    assert outs[0] == outs[1] == outs[2]


def test_compare_table_shape(tmp_path, cfg_path):
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(cfg_path), "--out", str(out), "--workers", "3"]) == 0
    header, rows = read_table(out / "compare.csv")
    assert header == ["method"] + [f"acc_s{s}" for s in range(6)]
    assert [r[0] for r in rows] == ["GroupDRO", "SAM", "SharpDROAware"]


def test_sweep_rho_rows(tmp_path, cfg_path):
    out = tmp_path / "sweep"
    assert main(["sweep-rho", "--config", str(cfg_path), "--out", str(out)]) == 0
    _, rows = read_table(out / "sweep.csv")
    assert [float(r[0]) for r in rows] == [0.01, 0.05, 0.1, 0.5, 1.0, 2.0]


def test_minimax_verify_passes_and_gates_invalid_rates(tmp_path, cfg_path, capsys):
    out = tmp_path / "mm"
    assert main(["minimax-verify", "--config", str(cfg_path), "--out", str(out)]) == 0
    _, checks = read_table(out / "checks.csv")
    assert len(checks) == 5 and all(r[1] == "true" for r in checks)

    bad = tmp_path / "bad.yaml"
    bad.write_text(SMALL.replace("minimax:\n", "minimax:\n  rho: 0.2\n"))
    capsys.readouterr()
    assert main(["minimax-verify", "--config", str(bad), "--out", str(tmp_path / "mm_bad")]) == 1
    err = capsys.readouterr().err
    assert "rho*l <= 1/16" in err and "--force" in err
    assert not (tmp_path / "mm_bad" / "checks.csv").exists()


def test_usage_and_config_errors_exit_1(tmp_path, cfg_path, capsys):
    assert main(["bogus"]) == 1
    assert main(["train"]) == 1
    bad = tmp_path / "bad.yaml"
    bad.write_text("train:\n  rhoo: 0.1\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "train.rhoo" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "absent.yaml"), "--out", str(tmp_path / "x")]) == 1
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "x"), "--workers", "0"]) == 1
    assert main(["train", "--config", str(cfg_path), "--out", str(tmp_path / "x"), "--method", "Adam"]) == 1


def test_runtime_failure_exits_2_with_manifest(tmp_path, cfg_path, capsys):
    out = tmp_path / "fail"
    assert main(["evaluate", "--config", str(cfg_path), "--theta", str(tmp_path / "none.npz"),
                 "--out", str(out)]) == 2
    failure = json.loads((out / "failure.json").read_text())
    assert failure["tool_version"] == __version__
    assert "failure manifest" in capsys.readouterr().err


def test_report_merges_and_checks_versions(tmp_path, cfg_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(cfg_path), "--out", str(a), "--seed", "0"]) == 0
    assert main(["train", "--config", str(cfg_path), "--out", str(b), "--seed", "1"]) == 0
    merged = tmp_path / "m"
    assert main(["report", "--inputs", str(a), str(b), "--out", str(merged)]) == 0
    _, rows = read_table(merged / "merged.csv")
    assert len(rows) == 2 * 12
    _, summary = read_table(merged / "summary.csv")
    assert len(summary) == 6 and all(r[4] == "2" for r in summary)

    side = b / "metrics.csv.manifest.json"
    man = json.loads(side.read_text())
    man["tool_version"] = "0.0.1"
    side.write_text(json.dumps(man))
    assert main(["report", "--inputs", str(a), str(b), "--out", str(tmp_path / "m2")]) == 2
    assert main(["report", "--inputs", str(a), str(b), "--out", str(tmp_path / "m3"), "--force"]) == 0


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "sharpdro", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout
