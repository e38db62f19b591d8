import json
import subprocess
import sys

import pytest

from kgprefix.cli import main
from kgprefix.config import toy_config


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def chain(workdir):
    """gen-data -> base -> stage1 -> stage2 -> generate -> eval, run through the entry point."""
    d = workdir
    steps = [
        ["gen-data", "--seed", 1, "--n-conversations", 40, "--topics", 4, "--out", d / "corpus.jsonl"],
        ["train", "--stage", "base", "--corpus", d / "corpus.jsonl", "--out", d / "base.kptk", "--max-steps", 6],
        ["train", "--stage", "stage1", "--corpus", d / "corpus.jsonl", "--from", d / "base.kptk",
         "--out", d / "s1.kptk", "--max-steps", 4],
        ["train", "--stage", "stage2", "--corpus", d / "corpus.jsonl", "--from", d / "s1.kptk",
         "--out", d / "s2.kptk", "--max-steps", 4],
        ["generate", "--checkpoint", d / "s2.kptk", "--corpus", d / "corpus.jsonl", "--split", "test_seen",
         "--min-len", 5, "--max-len", 12, "--config", "toy", "--out", d / "gen.jsonl"],
        ["eval", "--generations", d / "gen.jsonl", "--corpus", d / "corpus.jsonl", "--split", "test_seen",
         "--checkpoint", d / "s2.kptk", "--report", d / "report.json", "--name", "kpt"],
    ]
    codes = [main([str(a) for a in argv]) for argv in steps]
    return d, codes, steps


def test_pipeline_runs_through_the_cli(chain):
    d, codes, _ = chain
    assert codes == [0] * len(codes)
    report = json.loads((d / "report.json").read_text())
    assert report["model"] == "kpt" and 0 <= report["f1"] <= 1 and 0 <= report["kf1"] <= 1
    assert report["trainable_params"] < report["total_params"]
    assert report["trainable_ratio"] == pytest.approx(report["trainable_params"] / report["total_params"])
    first = json.loads((d / "s2.kptk.metrics.jsonl").read_text().splitlines()[0])
    assert first["stage"] == "stage2" and {"loss", "lr", "bow", "nll"} <= set(first)


def test_pipeline_rerun_is_identical(chain, tmp_path):
    d, _, steps = chain
    for argv in steps:
        assert main([str(a).replace(str(d), str(tmp_path)) for a in argv]) == 0
    for name in ("corpus.jsonl", "base.kptk", "s1.kptk", "s2.kptk", "gen.jsonl", "report.json",
                 "s2.kptk.metrics.jsonl"):
        assert (tmp_path / name).read_bytes() == (d / name).read_bytes(), name


def test_table_renders_saved_reports(chain, capsys):
    d, _, _ = chain
    code, out, _ = run(capsys, "table", d / "report.json", d / "report.json")
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0].startswith("| Model | PPL") and len(lines) == 4


def test_gen_data_errors_and_determinism(capsys, tmp_path):
    code, _, err = run(capsys, "gen-data", "--n-conversations", 0, "--out", tmp_path / "x.jsonl")
    assert code == 2 and "empty corpus" in err
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert run(capsys, "gen-data", "--seed", 5, "--n-conversations", 12, "--topics", 4, "--out", a)[0] == 0
    assert run(capsys, "gen-data", "--seed", 5, "--n-conversations", 12, "--topics", 4, "--out", b)[0] == 0
    assert a.read_bytes() == b.read_bytes()


def test_dependency_and_io_exit_codes(chain, capsys, tmp_path):
    d, _, _ = chain
    code, _, err = run(capsys, "train", "--stage", "stage2", "--corpus", d / "corpus.jsonl", "--out", tmp_path / "x")
    assert code == 3 and "stage1" in err
    code, _, _ = run(capsys, "train", "--stage", "stage2", "--corpus", d / "corpus.jsonl",
                     "--from", d / "base.kptk", "--out", tmp_path / "x")
    assert code == 3
    code, _, _ = run(capsys, "generate", "--checkpoint", d / "s1.kptk", "--corpus", d / "corpus.jsonl",
                     "--out", tmp_path / "g.jsonl")
    assert code == 3
    code, _, _ = run(capsys, "train", "--stage", "base", "--corpus", tmp_path / "nope.jsonl", "--out", tmp_path / "x")
    assert code == 4


def test_parse_class_exit_codes(chain, capsys, tmp_path):
    d, _, _ = chain
    with pytest.raises(SystemExit) as err:
        main(["train", "--stage", "stage9"])
    assert err.value.code == 2
    bad = tmp_path / "bad.json"
    cfg = toy_config().to_dict()
    cfg["model"]["width"] = 3
    bad.write_text(json.dumps(cfg))
    assert run(capsys, "train", "--stage", "base", "--config", bad, "--corpus", d / "corpus.jsonl",
               "--out", tmp_path / "x")[0] == 2
    rows = (d / "gen.jsonl").read_text().splitlines()
    (tmp_path / "short.jsonl").write_text("\n".join(rows[1:]) + "\n")
    code, _, err = run(capsys, "eval", "--generations", tmp_path / "short.jsonl", "--corpus", d / "corpus.jsonl",
                       "--split", "test_seen", "--report", tmp_path / "r.json")
    assert code == 2 and "misaligned" in err


def test_config_hash_is_checked_on_generate(chain, capsys, tmp_path):
    d, _, _ = chain
    other = toy_config()
    other.prefix = type(other.prefix)(length=7, d_m=128, n_heads=2)
    other.save(tmp_path / "other.json")
    code, _, err = run(capsys, "generate", "--checkpoint", d / "s2.kptk", "--corpus", d / "corpus.jsonl",
                       "--config", tmp_path / "other.json", "--out", tmp_path / "g.jsonl")
    assert code == 4 and "hash" in err


def test_gradcheck_negative_control(capsys):
    code, out, err = run(capsys, "gradcheck", "--inject-fault", "softmax")
    assert code == 5
    assert "FAIL" in out and "softmax" in err


def test_module_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "kgprefix", "--help"], capture_output=True, text=True, timeout=60)
    assert proc.returncode == 0
    for sub in ("gen-data", "train", "generate", "eval", "table", "gradcheck"):
        assert sub in proc.stdout
