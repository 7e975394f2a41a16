import subprocess
import sys

import numpy as np
import pytest

from cashformer.cli import main
from cashformer.diffcore import load_checkpoint
from cashformer.seqcore import TransformerConfig, is_layernorm, write_pretrained
from cashformer.config import PRESETS


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def kv(text):
    return dict(line.split("\t", 1) for line in text.splitlines() if "\t" in line)


@pytest.fixture(scope="module")
def splits(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--config", "tiny", "--patients", "24", "--seed", "3", "--out", str(root / "data")]) == 0
    assert main(["split", "--config", "tiny", "--data", str(root / "data"), "--out", str(root / "splits")]) == 0
    return root


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 2
    assert "usage:" in capsys.readouterr().err


def test_unknown_command_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["fly"])
    assert exc.value.code == 2


@pytest.mark.parametrize("command", ["eval", "impute"])
def test_missing_checkpoint_exits_2(command, tmp_path, capsys):
    code, _, err = run([command, "--data", tmp_path], capsys)
    assert code == 2
    assert "usage:" in err and "--checkpoint" in err


def test_bad_seed_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gradcheck", "--seed", "-1"])
    assert exc.value.code == 2


def test_gradcheck_tiny(capsys):
    code, out, _ = run(["gradcheck", "--config", "tiny", "--samples", "4"], capsys)
    assert code == 0
    worst = float(out.strip().splitlines()[-1].split()[-1])
    assert out.strip().splitlines()[-1].startswith("max relative error") and worst < 1e-4
    assert {line.split("\t")[0] for line in out.splitlines()[:-1]} == {"spiral_conv", "res_block",
                                                                      "encoder_block", "pipeline"}


def test_precompute(tmp_path, capsys):
    code, out, _ = run(["precompute", "--config", "tiny", "--out", tmp_path], capsys)
    assert code == 0
    assert kv(out)["levels"] == "12 6 6"
    assert (tmp_path / "hierarchy.cshh").read_bytes()[:4] == b"CSHH"


def test_synth_unknown_profile(tmp_path, capsys):
    code, _, err = run(["synth", "--config", "tiny", "--profile", "nope", "--out", tmp_path], capsys)
    assert code == 1 and "unknown profile" in err


def test_split_outputs(splits):
    sizes = {}
    for name in ("train", "val", "test"):
        lines = (splits / "splits" / f"{name}.tsv").read_text().splitlines()
        sizes[name] = len({line.split("\t")[0] for line in lines[1:]})
    assert sum(sizes.values()) == 24
    assert (splits / "splits" / "template.mesh").exists()


def test_frozen_on_off_counts_differ(splits, tmp_path, capsys, caplog):
    caplog.set_level("INFO", logger="cashformer")
    counts = {}
    for mode in ("on", "off"):
        code, out, _ = run(["train", "--config", "tiny", "--data", splits / "splits", "--frozen", mode,
                              "--max-steps", "2", "--epochs", "1", "--out", tmp_path / mode], capsys)
        assert code == 0
        counts[mode] = int(kv(out)["trainable"])
    assert counts["on"] < counts["off"]
    logged = [r.getMessage() for r in caplog.records if "trainable parameters" in r.getMessage()]
    assert [int(m.split()[2]) for m in logged] == [counts["on"], counts["off"]]


def test_train_eval_impute_classify(splits, capsys):
    run_dir = splits / "run"
    ckpt = splits / "pretrained.cshw"
    write_pretrained(ckpt, TransformerConfig.from_model(PRESETS["tiny"]), seed=7)
    code, out, _ = run(["train", "--config", "tiny", "--data", splits / "splits", "--checkpoint", ckpt,
                        "--epochs", "2", "--out", run_dir], capsys)
    assert code == 0
    model_ckpt = kv(out)["checkpoint"]
    # frozen by default: non-LN transformer weights are the pretrained ones
    saved, pre = load_checkpoint(model_ckpt), load_checkpoint(ckpt)
    assert all(np.array_equal(saved[n], pre[n].astype(np.float64)) for n in pre if not is_layernorm(n))
    assert (run_dir / "train_log.txt").read_text().count("\n") == 2

    code, out, _ = run(["eval", "--checkpoint", model_ckpt, "--data", splits / "splits", "--experiment", "interp",
                        "--experiment", "extrap", "--out", splits / "report"], capsys)
    assert code == 0 and "copy-reference" in out
    rows = (splits / "report" / "results.tsv").read_text().splitlines()
    assert [r.split("\t")[:2] for r in rows[1:]] == [["interp", "cashformer"], ["interp", "copy-reference"],
                                                     ["extrap", "cashformer"], ["extrap", "copy-reference"]]
    assert (splits / "report" / "figures" / "experiment_errors.png").exists()

    code, out, _ = run(["impute", "--checkpoint", model_ckpt, "--data", splits / "splits" / "test.tsv",
                        "--out", splits / "imputed"], capsys)
    assert code == 0
    index = (splits / "imputed" / "imputed.tsv").read_text().splitlines()
    n_test = int(kv(out)["patients"])
    assert len(index) == 1 + 8 * n_test

    code, out, _ = run(["classify", "--checkpoint", model_ckpt, "--data", splits / "splits", "--repeats", "1",
                        "--epochs", "1", "--no-figures", "--out", splits / "cls"], capsys)
    assert code == 0
    assert set(kv(out)) == {"raw", "imputed"}


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "cashformer.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("precompute", "synth", "split", "train", "eval", "impute", "classify", "gradcheck"):
        assert cmd in res.stdout
