import json
import textwrap

import pytest

from langadv import cli
from langadv.trainer import TrainerConfig

SMALL_CONFIG = """
[experiment]
runs = 2
seed = 5
output_dir = out

[corpus]
n_train = 40
n_dev = 12
n_unlabeled = 24
n_test = 20
n_pairs = 6
min_len = 5
max_len = 8

[encoder]
hidden = 8
heads = 2
layers = 1
ffn_width = 16
max_len = 16

[trainer]
batch_size = 4
total_cycles = 4
eval_every = 1
"""


@pytest.fixture
def config(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.OUTPUT_ENV, raising=False)
    path = tmp_path / "exp.ini"
    path.write_text(SMALL_CONFIG)
    return path


def run(*args):
    return cli.main([str(a) for a in args])


def test_missing_config(tmp_path, capsys):
    assert run("gen", "--config", tmp_path / "nope.ini") != 0
    assert "not found" in capsys.readouterr().err


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        run("gen")
    assert exc.value.code != 0


def test_unknown_key(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[trainer]\nlearning_rate = 1\n")
    assert run("gen", "--config", p) == 1


def test_learning_rates_default_to_ratios(tmp_path):
    p = tmp_path / "lr.ini"
    p.write_text("[trainer]\nlr_task = 2e-6\n")
    tc = cli.load_config(p).trainer_config(True, 0)
    assert tc.lr_gen == pytest.approx(2e-8) and tc.lr_disc == pytest.approx(5e-5)
    tc = cli.load_config(tmp_path / "lr.ini").trainer_config(False, 0)
    assert isinstance(tc, TrainerConfig)


def test_none_and_int_fields(tmp_path):
    p = tmp_path / "e.ini"
    p.write_text("[encoder]\nffn_width = none\nhidden = 16\nheads = 2\n")
    enc = cli.load_config(p).encoder_config(10, 0)
    assert enc.ffn_width == 64 and enc.hidden == 16


def test_gen_deterministic_with_manifest(config, tmp_path):
    assert run("gen", "--config", config) == 0
    manifest = json.loads((tmp_path / "out/corpus/manifest.json").read_text())
    for split in ("train", "dev", "unlabeled", "test", "pairs"):
        assert f"{split}.tsv" in manifest["digests"]
    assert run("gen", "--config", config) == 0
    again = json.loads((tmp_path / "out/corpus/manifest.json").read_text())
    assert again["digests"] == manifest["digests"]


def test_env_overrides_output(config, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ENV, str(tmp_path / "elsewhere"))
    assert run("gen", "--config", config) == 0
    assert (tmp_path / "elsewhere/corpus/manifest.json").is_file()
    assert not (tmp_path / "out").exists()


def test_unwritable_output(config, tmp_path, monkeypatch, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    monkeypatch.setenv(cli.OUTPUT_ENV, str(blocker / "sub"))
    assert run("gen", "--config", config) == 1
    assert "error" in capsys.readouterr().err


def test_failed_gen_leaves_no_manifest(config, tmp_path, monkeypatch):
    assert run("gen", "--config", config) == 0

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(cli, "corpus_files", boom)
    assert run("gen", "--config", config) == 1
    assert not (tmp_path / "out/corpus/manifest.json").exists()


def test_train_without_corpus(config):
    assert run("train", "--config", config) == 1


def test_tampered_corpus_rejected(config, tmp_path):
    run("gen", "--config", config)
    with open(tmp_path / "out/corpus/test.tsv", "a") as fh:
        fh.write("extra\t0\tCCAT\ts1\n")
    assert run("train", "--config", config) == 1


@pytest.fixture
def trained(config, tmp_path):
    assert run("gen", "--config", config) == 0
    assert run("train", "--config", config, "--no-adversarial") == 0
    assert run("train", "--config", config) == 0
    return tmp_path / "out"


def test_train_outputs(trained):
    for mode in ("baseline", "adversarial"):
        d = trained / "runs" / mode
        assert sorted(p.name for p in d.glob("run*/metrics.tsv")) == ["metrics.tsv"] * 2
        assert (d / "averaged.tsv").read_text().splitlines()[0] == "metric\tmean\trun0\trun1"
    table = (trained / "reports/transfer.tsv").read_text().splitlines()
    assert table[0] == "\tA\tB"
    assert table[1].startswith("Source labels\t") and table[2].startswith("Source labels + Adv.\t")
    stats = (trained / "reports/curve_stats.tsv").read_text().splitlines()
    assert [s.split("\t")[0] for s in stats[1:]] == ["baseline", "adversarial"]


def test_train_runs_and_seed_flags(config, tmp_path):
    run("gen", "--config", config)
    assert run("train", "--config", config, "--runs", 1, "--seed", 9, "--no-adversarial") == 0
    d = tmp_path / "out/runs/baseline"
    assert [p.parent.name for p in d.glob("run*/metrics.tsv")] == ["run0"]
    from langadv.encoder import read_checkpoint

    with open(d / "run0/model.ckpt", "rb") as fh:
        assert read_checkpoint(fh)[2]["seed"] == 9


def test_train_deterministic(trained, config):
    first = (trained / "runs/adversarial/run1/metrics.tsv").read_bytes()
    assert run("train", "--config", config) == 0
    assert (trained / "runs/adversarial/run1/metrics.tsv").read_bytes() == first


def test_eval(trained, config, capsys):
    ck = trained / "runs/baseline/run0/model.ckpt"
    assert run("eval", "--config", config, "--checkpoint", ck) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("A\t") and lines[1].startswith("B\t")


def test_align_table(trained, config):
    base = trained / "runs/baseline/run0/model.ckpt"
    adv = trained / "runs/adversarial/run0/model.ckpt"
    assert run("align", "--config", config, "--checkpoint", base, "--checkpoint", adv) == 0
    first = (trained / "reports/alignment.tsv").read_text()
    rows = first.splitlines()
    assert rows[0] == "Source\tTarget\tWithout Adv.\tWith Adv."
    assert rows[1].split("\t")[:2] == ["A", "B"] and "-" not in rows[1].split("\t")
    assert run("align", "--config", config, "--checkpoint", base, "--checkpoint", adv) == 0
    assert (trained / "reports/alignment.tsv").read_text() == first


def test_align_hidden_mismatch(trained, config, tmp_path, capsys):
    other = tmp_path / "other.ini"
    other.write_text(SMALL_CONFIG.replace("hidden = 8", "hidden = 12"))
    ck = trained / "runs/baseline/run0/model.ckpt"
    assert run("align", "--config", other, "--checkpoint", ck) == 1
    assert "hidden" in capsys.readouterr().err


def test_align_empty_pairs(trained, config, tmp_path):
    cfg = textwrap.dedent(SMALL_CONFIG).replace("n_pairs = 6", "n_pairs = 0").replace("output_dir = out", "output_dir = nopairs")
    p = tmp_path / "np.ini"
    p.write_text(cfg)
    assert run("gen", "--config", p) == 0
    assert run("align", "--config", p, "--checkpoint", trained / "runs/baseline/run0/model.ckpt") == 1


def test_ner_pipeline(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.OUTPUT_ENV, raising=False)
    p = tmp_path / "ner.ini"
    p.write_text(SMALL_CONFIG.replace("[experiment]", "[experiment]\ntask = ner").replace("runs = 2", "runs = 1"))
    assert run("gen", "--config", p) == 0
    assert run("train", "--config", p, "--no-adversarial") == 0
    assert run("train", "--config", p) == 0
    table = (tmp_path / "out/reports/transfer.tsv").read_text().splitlines()
    assert len(table) == 3
