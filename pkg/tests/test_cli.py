"""Command-line surface: commands, flags, output artifacts, and the
0/1/2/3 exit-code contract."""
import subprocess
import sys

import numpy as np
import pytest

from hrnet_forge.cli import main
from hrnet_forge.config import load_config, render_config
from hrnet_forge.train import read_metrics


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


# ---------------------------------------------------------------------------
# describe


def test_describe_tiny(capsys):
    code, out, _ = run_cli(capsys, "describe", "--config", "tiny-seg")
    assert code == 0
    assert "config digest 0x" in out
    assert "branch outputs:" in out
    assert "(4, 8, 8)" in out and "(32, 1, 1)" in out
    assert "params:" in out


def test_describe_w18_at_224_lists_branch_shapes(capsys):
    code, out, _ = run_cli(capsys, "describe", "--config", "w18-lmk",
                           "--size", "224x224")
    assert code == 0
    for shape in ("(18, 56, 56)", "(36, 28, 28)", "(72, 14, 14)", "(144, 7, 7)"):
        assert shape in out


def test_describe_pyramid_lists_five_levels(capsys):
    code, out, _ = run_cli(capsys, "describe", "--config", "w18-pyr")
    assert code == 0
    assert "pyramid outputs:" in out
    for name in ("p2", "p3", "p4", "p5", "p6"):
        assert f"  {name}:" in out


def test_describe_resnet_baseline(capsys):
    code, out, _ = run_cli(capsys, "describe", "--config", "r50")
    assert code == 0
    assert "resnet-50" in out


def test_describe_invalid_width_names_field(tmp_path, capsys):
    cfg_text = render_config(load_config("tiny-seg")).replace(
        "net.width = 4", "net.width = 0")
    path = tmp_path / "bad.cfg"
    path.write_text(cfg_text)
    code, _, err = run_cli(capsys, "describe", "--config", str(path))
    assert code == 1
    assert "width" in err


# ---------------------------------------------------------------------------
# cost


def test_cost_writes_artifacts(tmp_path, capsys):
    out_dir = tmp_path / "cost"
    code, out, _ = run_cli(capsys, "cost", "--config", "tiny-seg",
                           "--out", str(out_dir))
    assert code == 0
    tsv = (out_dir / "cost.tsv").read_text()
    txt = (out_dir / "cost.txt").read_text()
    assert tsv.splitlines()[0].startswith("layer\t")
    assert tsv.splitlines()[-1].startswith("TOTAL\t")
    assert "total" in txt


def test_cost_resnet(capsys):
    code, out, _ = run_cli(capsys, "cost", "--config", "r50", "--size", "224x224")
    assert code == 0
    assert "25,586,344" in out


def test_cost_zero_size_rejected(capsys):
    code, _, err = run_cli(capsys, "cost", "--config", "tiny-seg", "--size", "0x0")
    assert code == 1 and "error" in err


def test_cost_malformed_size(capsys):
    code, _, err = run_cli(capsys, "cost", "--config", "tiny-seg", "--size", "32")
    assert code == 1 and "HxW" in err


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_passes(capsys):
    code, out, _ = run_cli(capsys, "gradcheck", "--config", "tiny-seg",
                           "--tensors", "4", "--coords", "4")
    assert code == 0
    assert "gradcheck PASS" in out


def test_gradcheck_corrupted_backward_fails(capsys):
    code, out, _ = run_cli(capsys, "gradcheck", "--config", "tiny-seg",
                           "--tensors", "2", "--coords", "2", "--corrupt")
    assert code == 2
    assert "gradcheck FAIL" in out


def test_gradcheck_deterministic(capsys):
    args = ("gradcheck", "--config", "tiny-seg", "--seed", "5",
            "--tensors", "2", "--coords", "2")
    _, out1, _ = run_cli(capsys, *args)
    _, out2, _ = run_cli(capsys, *args)
    assert out1 == out2


# ---------------------------------------------------------------------------
# train / eval / gen-data


def _micro_cfg_file(tmp_path):
    import dataclasses
    cfg = dataclasses.replace(load_config("tiny-seg"), data_count=12,
                              opt_iters=8, train_log_every=4)
    path = tmp_path / "micro.cfg"
    path.write_text(render_config(cfg))
    return path


def test_train_then_eval(tmp_path, capsys):
    cfg_path = _micro_cfg_file(tmp_path)
    run_dir = tmp_path / "run"
    code, out, _ = run_cli(capsys, "train", "--config", str(cfg_path),
                           "--out", str(run_dir))
    assert code == 0
    assert "final miou" in out
    ckpt = run_dir / "ckpt_final.hrfk"
    assert ckpt.exists()
    trained = read_metrics(run_dir / "metrics.txt")

    eval_dir = tmp_path / "eval"
    code, out, _ = run_cli(capsys, "eval", "--config", str(cfg_path),
                           "--ckpt", str(ckpt), "--out", str(eval_dir))
    assert code == 0
    assert "miou =" in out
    evaled = read_metrics(eval_dir / "metrics.txt")
    assert abs(evaled["miou"] - trained["miou"]) <= 1e-6


def test_eval_digest_mismatch_exit_1(tmp_path, capsys):
    cfg_path = _micro_cfg_file(tmp_path)
    run_dir = tmp_path / "run"
    assert run_cli(capsys, "train", "--config", str(cfg_path),
                   "--out", str(run_dir))[0] == 0
    code, _, err = run_cli(capsys, "eval", "--config", "tiny-seg",
                           "--ckpt", str(run_dir / "ckpt_final.hrfk"))
    assert code == 1
    assert "digest" in err


def test_eval_missing_checkpoint_is_io_error(tmp_path, capsys):
    code, _, err = run_cli(capsys, "eval", "--config", "tiny-seg",
                           "--ckpt", str(tmp_path / "nope.hrfk"))
    assert code == 3
    assert "I/O error" in err


def test_gen_data_writes_files(tmp_path, capsys):
    out_dir = tmp_path / "data"
    code, out, _ = run_cli(capsys, "gen-data", "--config", "tiny-seg",
                           "--out", str(out_dir))
    assert code == 0
    imgs = sorted(out_dir.glob("img_*.ppm"))
    msks = sorted(out_dir.glob("msk_*.pgm"))
    assert len(imgs) == 48 and len(msks) == 48


def test_gen_data_requires_out(capsys):
    code, _, err = run_cli(capsys, "gen-data", "--config", "tiny-seg")
    assert code == 1
    assert "--out" in err


def test_eval_on_generated_dir(tmp_path, capsys):
    cfg_path = _micro_cfg_file(tmp_path)
    run_dir, data_dir = tmp_path / "run", tmp_path / "data"
    assert run_cli(capsys, "train", "--config", str(cfg_path),
                   "--out", str(run_dir))[0] == 0
    assert run_cli(capsys, "gen-data", "--config", str(cfg_path),
                   "--out", str(data_dir))[0] == 0
    code, out, _ = run_cli(capsys, "eval", "--config", str(cfg_path),
                           "--ckpt", str(run_dir / "ckpt_final.hrfk"),
                           "--data", str(data_dir))
    assert code == 0
    assert "miou =" in out


# ---------------------------------------------------------------------------
# usage / environment


def test_no_command_is_usage_error(capsys):
    assert run_cli(capsys, )[0] == 1


def test_unknown_command(capsys):
    code, _, err = run_cli(capsys, "frobnicate")
    assert code == 1
    assert "usage error" in err


def test_unknown_preset(capsys):
    code, _, err = run_cli(capsys, "describe", "--config", "no-such-preset")
    assert code == 1
    assert "neither a file nor a preset" in err


def test_help_exits_zero(capsys):
    assert run_cli(capsys, "--help")[0] == 0


def test_thread_cap_accepted(monkeypatch, capsys):
    monkeypatch.setenv("HRNET_FORGE_THREADS", "2")
    code, out, _ = run_cli(capsys, "describe", "--config", "tiny-seg")
    assert code == 0 and "params:" in out


@pytest.mark.parametrize("bad", ["0", "-3", "many"])
def test_thread_cap_validated(monkeypatch, capsys, bad):
    monkeypatch.setenv("HRNET_FORGE_THREADS", bad)
    code, _, err = run_cli(capsys, "describe", "--config", "tiny-seg")
    assert code == 1
    assert "HRNET_FORGE_THREADS" in err


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hrnet_forge.cli",
                           "describe", "--config", "tiny-seg"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0
    assert "branch outputs:" in proc.stdout
