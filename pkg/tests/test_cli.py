import hashlib
import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from cmvim import cli
from cmvim.numerics import BACKWARD_RULES

TOY_CFG = """\
volume_size = 16
d_model = 16
depth = 1
d_state = 4
d_proj = 16
batch_size = 4
epochs = 1
"""


def tree_digest(root: Path) -> str:
    """Checksum of every file under ``root`` except the run manifest, whose timestamps vary."""
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != cli.MANIFEST_NAME:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.txt"
    spec.write_text("n_samples = 18\nvolume_size = 16\nblob_radius = 2\nregion_jitter = 1\n")
    cfg = root / "toy.cfg"
    cfg.write_text(TOY_CFG)
    assert cli.main(["gen", "--spec", str(spec), "--out", str(root / "data"), "--seed", "4",
                     "--train-frac", "0.5", "--val-frac", "0.25"]) == 0
    return root


def test_default_gen_is_sixty_balanced_pairs(tmp_path, capsys):
    assert cli.main(["gen", "--out", str(tmp_path / "d"), "--n", "60"]) == 0
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()]
    assert sum(int(r[1]) for r in rows) == 60
    per_class = [sum(int(r[2 + k]) for r in rows) for k in range(3)]
    assert per_class == [20, 20, 20]
    assert (tmp_path / "d" / "train" / "labels.tsv").exists()


def test_gen_same_seed_same_checksum(tmp_path, workspace):
    for name in ("a", "b"):
        assert cli.main(["gen", "--spec", str(workspace / "spec.txt"), "--out", str(tmp_path / name),
                         "--seed", "9"]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    manifest = json.loads((tmp_path / "a" / cli.MANIFEST_NAME).read_text())
    assert manifest["seed"] == 9 and manifest["build"].startswith("v")


def test_gen_bad_spec_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("n_samples = 5\nflavour = strange\n")
    assert cli.main(["gen", "--spec", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "flavour" in capsys.readouterr().err


def test_stage_two_without_resume_exits_2(workspace, capsys):
    code = cli.main(["pretrain", "--stage", "2", "--config", str(workspace / "toy.cfg"),
                     "--data", str(workspace / "data"), "--out", str(workspace / "x")])
    assert code == 2 and "stage-2 requires stage-1 checkpoint" in capsys.readouterr().err


def test_unknown_config_key_exits_2(workspace, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("d_modle = 8\n")
    assert cli.main(["params", "--config", str(cfg)]) == 2


@pytest.fixture(scope="module")
def pretrained(workspace):
    out = workspace / "pre"
    base = ["--config", str(workspace / "toy.cfg"), "--data", str(workspace / "data"), "--out", str(out)]
    assert cli.main(["pretrain", "--stage", "1"] + base) == 0
    assert cli.main(["pretrain", "--stage", "2", "--resume", str(out / "stage1.ckpt")] + base) == 0
    return out


def test_pretrain_metrics_schema(pretrained):
    keys1 = {line.split("\t")[1] for line in (pretrained / "stage1_metrics.tsv").read_text().splitlines()}
    keys2 = {line.split("\t")[1] for line in (pretrained / "stage2_metrics.tsv").read_text().splitlines()}
    assert keys1 == {"rec_mri", "rec_pet", "intra_mri", "intra_pet", "total"}
    assert keys2 == keys1 | {"inter"}
    manifest = json.loads((pretrained / cli.MANIFEST_NAME).read_text())
    assert manifest["outputs"]["checkpoint"].endswith("stage2.ckpt")
    assert manifest["config"]["train"]["stage"] == "pretrain2"


def test_manifest_config_replays_the_run(pretrained, workspace, tmp_path):
    """Stage 1 again from the stage-2 manifest's config, but forced to stage 1, must match bit for bit."""
    replay = tmp_path / "replay"
    first = tmp_path / "first"
    for out, cfg in ((first, str(workspace / "toy.cfg")), (replay, str(pretrained / cli.MANIFEST_NAME))):
        assert cli.main(["pretrain", "--stage", "1", "--config", cfg, "--data", str(workspace / "data"),
                         "--out", str(out)]) == 0
    assert (first / "stage1.ckpt").read_bytes() == (replay / "stage1.ckpt").read_bytes()
    assert (first / "stage1_metrics.tsv").read_text() == (replay / "stage1_metrics.tsv").read_text()


def test_finetune_then_eval_is_deterministic(pretrained, workspace, capsys):
    ft = workspace / "ft"
    assert cli.main(["finetune", "--config", str(workspace / "toy.cfg"), "--data", str(workspace / "data"),
                     "--ckpt", str(pretrained / "stage2.ckpt"), "--out", str(ft)]) == 0
    capsys.readouterr()
    lines = []
    for _ in range(2):
        assert cli.main(["eval", "--config", str(workspace / "toy.cfg"), "--data", str(workspace / "data"),
                         "--ckpt", str(ft / "finetune.ckpt")]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "metric\tvalue"
        lines.append(out[-1])
    assert lines[0] == lines[1] and lines[0].startswith("RESULT acc=")


def test_scratch_skips_checkpoint(workspace, capsys):
    assert cli.main(["eval", "--config", str(workspace / "toy.cfg"), "--data", str(workspace / "data"),
                     "--scratch", "--ckpt", "/nonexistent.ckpt"]) == 0
    assert capsys.readouterr().out.splitlines()[-1].startswith("RESULT")


def test_missing_checkpoint_exits_2(workspace):
    assert cli.main(["eval", "--config", str(workspace / "toy.cfg"), "--data", str(workspace / "data"),
                     "--ckpt", str(workspace / "nope.ckpt")]) == 2


def test_corrupt_checkpoint_exits_1(workspace, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"CMVIMCKP" + b"\0" * 4)
    assert cli.main(["eval", "--config", str(workspace / "toy.cfg"), "--data", str(workspace / "data"),
                     "--ckpt", str(bad)]) == 1


def test_params_prints_total(capsys):
    assert cli.main(["params", "--config", "toy"]) == 0
    last = capsys.readouterr().out.splitlines()[-1]
    assert last.startswith("total\t") and int(last.split("\t")[1]) > 0


def test_selftest_passes_on_clean_build(capsys):
    assert cli.main(["selftest", "--suite", "scan", "--suite", "losses", "--suite", "formats"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 3 and all(line.startswith("PASS") for line in out)


def test_selftest_names_a_perturbed_backward_rule(monkeypatch, capsys):
    original = BACKWARD_RULES["exp"]
    monkeypatch.setitem(BACKWARD_RULES, "exp", lambda ctx, inputs, g: tuple(
        None if d is None else 1.05 * d for d in original(ctx, inputs, g)))
    assert cli.main(["selftest", "--suite", "grad-ops"]) == 1
    line = capsys.readouterr().out.strip()
    assert line.startswith("FAIL grad-ops") and "exp" in line


def test_selftest_unknown_suite_exits_2():
    assert cli.main(["selftest", "--suite", "vibes"]) == 2


def test_thread_cap_env_is_honoured():
    env = dict(os.environ, CMVIM_THREADS="1")
    code = "import numba, cmvim.kernels; print(numba.get_num_threads())"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    if out.returncode != 0:
        pytest.skip("numba not importable")
    assert out.stdout.strip() == "1"


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "cmvim.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("cmvim ")
