from pathlib import Path

import pytest

from chainlens.cli import main
from chainlens.config import PipelineConfig


def test_config_defaults(capsys):
    assert main(["config", "--defaults"]) == 0
    out = capsys.readouterr().out
    for line in ("k = 10", "epsilon = 12.0", "granularities = 15Days,1Month", "variants = 1,2,3",
                 "window = 144", "stats = max,mean,std"):
        assert line in out


def test_config_file_and_redaction(tmp_path, capsys):
    p = tmp_path / "c.txt"
    p.write_text("k = 4\nrpc_pass = hunter2\nvariants = 3, 1\n")
    assert main(["config", "--config", str(p)]) == 0
    out = capsys.readouterr().out
    assert "k = 4" in out and "hunter2" not in out and "rpc_pass = ***" in out
    assert "variants = 1,3" in out


def test_digest_ignores_out_and_secret():
    a = PipelineConfig(out="x", rpc_pass="a")
    assert a.digest() == PipelineConfig(out="y", rpc_pass="b").digest()
    assert a.digest() != PipelineConfig(seed=1).digest()


@pytest.mark.parametrize("argv", [
    ["bogus"], ["run", "--epsilon", "25"], ["run", "--set", "nokey"], ["run", "--set", "zzz=1"],
    ["run", "--granularity", "2Weeks"], ["run", "--k", "ten"], [], ["fetch", "--out", "x.jsonl"],
])
def test_usage_errors(argv, capsys):
    assert main(argv) == 1


def test_synth_then_cluster_then_run(tmp_path, capsys):
    d = tmp_path / "econ"
    assert main(["synth", "--wallets", "12", "--n-tx", "600", "--seed", "3", "--out", str(d)]) == 0
    for name in ("txs.jsonl", "truth.csv", "changes.csv", "labels.csv", "spec.txt"):
        assert (d / name).exists()
    out = tmp_path / "o"
    base = ["--in", str(d / "txs.jsonl"), "--labels", str(d / "labels.csv"), "--out", str(out),
            "--granularity", "1Month", "--variant", "2,3", "--k", "3"]
    assert main(["cluster", *base]) == 0
    assert (out / "cluster" / "entities.csv").exists() and not (out / "graph").exists()
    capsys.readouterr()
    assert main(["run", *base]) == 0
    text = capsys.readouterr().out
    assert "skipped (unchanged): fetch, ingest, cluster" in text
    assert "[detect 1Month variant 3]" in text
    assert (out / "report" / "summary.txt").exists()


def test_version(capsys):
    with pytest.raises(SystemExit) as ei:
        main(["--version"])
    assert ei.value.code == 0
