import json

import numpy as np
import pytest

from duat import cli
from duat import config as C
from duat.data import load_manifest, read_mask
from duat.losses import read_report
from duat.model import DuAT

TINY = [
    "model.depths=1,1,1,1", "model.dims=8,8,16,16", "model.heads=1,2,2,4",
    "model.reductions=4,2,1,1", "model.mlp_ratios=2,2,2,2", "data.size=32",
    "data.n=12", "train.steps=4", "train.batch_size=2", "train.log_every=1",
]


def run(*args, sets=TINY):
    argv = list(args)
    for s in sets:
        argv += ["--set", s]
    return cli.main(argv)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", str(root / "data")) == 0
    assert run("train", "--data", str(root / "data"), "--out", str(root / "run")) == 0
    return root


def test_synth_layout(workspace):
    data = workspace / "data"
    sizes = [len(load_manifest(data / f"{p}.tsv")) for p in ("train", "val", "test")]
    assert sum(sizes) == 12 and sizes[0] > 0
    assert (data / "config.txt").exists()


def test_synth_is_byte_reproducible(workspace, tmp_path):
    assert run("synth", "--out", str(tmp_path / "again")) == 0
    for name in ("train.tsv", "test.tsv", "config.txt"):
        assert (tmp_path / "again" / name).read_bytes() == (workspace / "data" / name).read_bytes()
    first = (workspace / "data" / "train.tsv").read_text().split("\t")[1]
    assert (tmp_path / "again" / first).read_bytes() == (workspace / "data" / first).read_bytes()


def test_training_outputs(workspace):
    run_dir = workspace / "run"
    for name in ("config.txt", "train.log", "model.ckpt", "training_curve.png"):
        assert (run_dir / name).exists()
    lines = (run_dir / "train.log").read_text().splitlines()
    assert '"record": "header"' in lines[0] and '"time"' in lines[0]
    assert all('"time"' not in line for line in lines[1:])


def test_training_is_deterministic_except_header(workspace, tmp_path):
    assert run("train", "--data", str(workspace / "data"), "--out", str(tmp_path / "r2")) == 0
    a = (workspace / "run" / "train.log").read_text().splitlines()
    b = (tmp_path / "r2" / "train.log").read_text().splitlines()
    assert a[1:] == b[1:]
    assert (workspace / "run" / "model.ckpt").read_bytes() == (tmp_path / "r2" / "model.ckpt").read_bytes()


def test_config_echo_reconstructs_the_run(workspace, tmp_path):
    echo = workspace / "run" / "config.txt"
    assert cli.main(["train", "--config", str(echo), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "r3")]) == 0
    a = (workspace / "run" / "train.log").read_text().splitlines()[1:]
    assert (tmp_path / "r3" / "train.log").read_text().splitlines()[1:] == a
    assert (tmp_path / "r3" / "config.txt").read_text() == echo.read_text()


def test_eval_outputs_and_idempotence(workspace, tmp_path):
    args = ["eval", "--checkpoint", str(workspace / "run" / "model.ckpt"), "--data", str(workspace / "data")]
    assert cli.main(args + ["--out", str(tmp_path / "e1")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "e2")]) == 0
    for name in ("report.jsonl", "size_curve.dat", "size_curve.png"):
        assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()
    report = read_report((tmp_path / "e1" / "report.jsonl").read_text().splitlines())
    n_test = len(load_manifest(workspace / "data" / "test.tsv"))
    assert sum(b["count"] for b in report["bins"]) == n_test == report["aggregate"]["n"]


def test_eval_rejects_size_mismatch(workspace, tmp_path):
    assert run("synth", "--out", str(tmp_path / "big"), sets=TINY[:-5] + ["data.size=64", "data.n=3"]) == 0
    code = cli.main(["eval", "--checkpoint", str(workspace / "run" / "model.ckpt"),
                     "--manifest", str(tmp_path / "big" / "train.tsv"), "--out", str(tmp_path / "e")])
    assert code == cli.EXIT_DATA


def test_predict_writes_masks(workspace, tmp_path):
    image = workspace / "data" / (workspace / "data" / "test.tsv").read_text().split("\t")[1]
    code = cli.main(["predict", "--checkpoint", str(workspace / "run" / "model.ckpt"),
                     "--out", str(tmp_path), str(image)])
    assert code == 0
    mask = read_mask(tmp_path / (image.stem + "_pred.pgm"))
    assert mask.shape == (1, 32, 32)


def test_count_matches_model(capsys):
    assert run("count") == 0
    out = capsys.readouterr().out
    model = DuAT(C.model_config(C.resolve(None, TINY)))
    assert f"params {model.num_parameters()}" in out.splitlines()
    assert "24.92M params, 9.88G MACs" in out


def test_ablate_table(workspace, tmp_path, capsys):
    variants = "ablate.variants=w/o GLSA,SBA + GLSA (Ours)"
    assert run("ablate", "--data", str(workspace / "data"), "--out", str(tmp_path),
               sets=TINY[:-3] + ["train.steps=2", "train.batch_size=2", "train.log_every=1", variants]) == 0
    rows = cli.parse_ablation((tmp_path / "ablation.txt").read_text())
    assert list(rows) == ["w/o GLSA", "SBA + GLSA (Ours)"]
    assert (tmp_path / "ablation.png").exists()
    records = [json.loads(line) for line in (tmp_path / "ablate.log").read_text().splitlines()[1:]]
    results = [r for r in records if r["record"] == "result"]
    assert [r["variant"] for r in results] == list(rows)
    # both variants train on the same batches, so their first step losses differ only through the model
    first = [r for r in records if r["record"] == "step" and r["step"] == 1]
    assert len(first) == 2 and first[0]["variant"] != first[1]["variant"]


@pytest.mark.parametrize("argv, code", [
    (["bogus"], cli.EXIT_USAGE),
    (["train", "--set", "nope=1"], cli.EXIT_USAGE),
    (["train", "--out", "x"], cli.EXIT_USAGE),
    (["eval", "--data", "x"], cli.EXIT_USAGE),
    (["eval", "--checkpoint", "/nonexistent.ckpt", "--data", "x"], cli.EXIT_DATA),
    (["predict", "--checkpoint", "/nonexistent.ckpt", "a.ppm"], cli.EXIT_DATA),
    (["train", "--data", "/nonexistent-dir"], cli.EXIT_DATA),
])
def test_exit_codes(argv, code, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    if argv == ["bogus"]:
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == code
    else:
        assert cli.main(argv) == code


def test_corrupt_checkpoint_is_data_error(workspace, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes((workspace / "run" / "model.ckpt").read_bytes()[:100])
    assert cli.main(["eval", "--checkpoint", str(bad), "--data", str(workspace / "data"),
                     "--out", str(tmp_path)]) == cli.EXIT_DATA


def test_divergence_is_numerical_failure(workspace, tmp_path, monkeypatch):
    import duat.train as train_mod
    from duat.tensor import Tensor

    monkeypatch.setattr(train_mod, "total_loss",
                        lambda pred, mask, cfg=None: Tensor(np.full((1, 1, 1, 1), np.inf), requires_grad=True))
    assert run("train", "--data", str(workspace / "data"), "--out", str(tmp_path)) == cli.EXIT_NUMERIC


def test_gradcheck_failure_exit_code(monkeypatch, capsys):
    from duat import gradcheck

    fake = [gradcheck.CheckResult("ok", 1e-9, 3, 0.0), gradcheck.CheckResult("bad", 1.0, 3, 0.0)]
    monkeypatch.setattr(gradcheck, "run_all", lambda seed=0: fake)
    assert cli.main(["gradcheck"]) == cli.EXIT_NUMERIC
    assert "1/2 passed" in capsys.readouterr().out
