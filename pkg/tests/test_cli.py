import subprocess
import sys

import numpy as np
import pytest

from corrverify.cli import main, parse_config
from corrverify.encoder4d import load_weights
from corrverify.retrieval import load_store, read_ranks

SMALL = """\
# tiny run for command tests
steps = 3
batch_size = 2
seed = 5
toy.channels = 8
train_per_class = 4
heldout_per_class = 3
"""


def files_of(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.txt").write_text(SMALL)
    assert main(["train-toy", "--config", str(root / "cfg.txt"), "--out", str(root / "w.cvw"),
                 "--curve", str(root / "curve.csv")]) == 0
    assert main(["make-toy", "--out", str(root / "toy"), "--images", "24", "--queries", "3",
                 "--config", str(root / "cfg.txt")]) == 0
    assert main(["ingest", "--manifest", str(root / "toy" / "manifest.txt"), "--weights", str(root / "w.cvw"),
                 "--out", str(root / "store")]) == 0
    return root


class TestConfig:
    def test_defaults_and_overrides(self):
        train, sch, enc, toy, extras = parse_config(SMALL)
        assert train.steps == 3 and train.batch_size == 2 and train.momentum == 0.9
        assert sch.total_steps == 3 and sch.r_h_start == 0.2
        assert toy.channels == 8 and enc.feature_channels == 8
        assert extras == {"train_per_class": 4, "heldout_per_class": 3}

    def test_block_channels_tuple(self):
        _, _, enc, _, _ = parse_config("block_channels = 4, 8, 16\nconvs_per_block = 2")
        assert enc.block_channels == (4, 8, 16) and enc.convs_per_block == 2

    def test_errors(self):
        with pytest.raises(ValueError, match="unknown key"):
            parse_config("nope = 1")
        with pytest.raises(ValueError, match="duplicate"):
            parse_config("lr = 0.1\nlr = 0.2")
        with pytest.raises(ValueError, match=":1:"):
            parse_config("just words")


class TestCommands:
    def test_train_outputs(self, corpus, capsys):
        lines = (corpus / "curve.csv").read_text().splitlines()
        assert lines[0] == "step,loss,lr,r_h,p_has"
        assert len(lines) == 4
        assert lines[1].split(",")[2:] == ["0.020000", "0.200000", "0.000000"]
        assert load_weights(corpus / "w.cvw").config.feature_channels == 8

    def test_store(self, corpus):
        store = load_store(corpus / "store")
        assert len(store) == 24 and store.quantized and store.num_scales == 3
        assert (corpus / "toy" / "queries.txt").read_text().count("\n") == 3

    def test_rank_rerank_eval(self, corpus, capsys):
        q = str(corpus / "toy" / "queries.txt")
        assert main(["rank", "--query", q, "--store", str(corpus / "store"), "--exclude-self",
                     "--out", str(corpus / "g.csv")]) == 0
        assert main(["rerank", "--query", q, "--store", str(corpus / "store"), "--weights", str(corpus / "w.cvw"),
                     "--k", "5", "--exclude-self", "--out", str(corpus / "r.csv")]) == 0
        ranks = read_ranks(corpus / "r.csv")
        assert len(ranks) == 3 and all(len(v) == 23 for v in ranks.values())
        rows = (corpus / "r.csv").read_text().splitlines()
        assert rows[1].split(",")[4] != "" and rows[6].split(",")[4] == ""
        capsys.readouterr()
        assert main(["eval", "--ranks", str(corpus / "r.csv"), "--truth", str(corpus / "toy" / "truth.csv"),
                     "--cutoff", "10"]) == 0
        out = capsys.readouterr().out.strip()
        assert out.startswith("mAP = ") and len(out.split(" = ")[1].split(".")[1]) == 6

    def test_errors_exit_2(self, corpus, capsys):
        assert main(["rank", "--query", "missing", "--store", str(corpus / "store")]) == 2
        assert "missing" in capsys.readouterr().err
        assert main(["make-toy", "--out", str(corpus / "x"), "--images", "7"]) == 2

    def test_console_entry(self, corpus):
        out = subprocess.run([sys.executable, "-m", "corrverify.cli", "eval", "--ranks", str(corpus / "r.csv"),
                              "--truth", str(corpus / "toy" / "truth.csv")],
                             capture_output=True, text=True, check=True)
        assert out.stdout.startswith("mAP = ")


class TestDeterminism:
    def test_every_command_twice(self, corpus, tmp_path, capsys):
        cfg = str(corpus / "cfg.txt")
        for run in ("a", "b"):
            d = tmp_path / run
            d.mkdir()
            main(["train-toy", "--config", cfg, "--out", str(d / "w.cvw"), "--curve", str(d / "curve.csv")])
            main(["make-toy", "--out", str(d / "toy"), "--images", "24", "--queries", "3", "--config", cfg])
            main(["ingest", "--manifest", str(d / "toy" / "manifest.txt"), "--weights", str(d / "w.cvw"),
                  "--out", str(d / "store")])
            q = str(d / "toy" / "queries.txt")
            main(["rank", "--query", q, "--store", str(d / "store"), "--out", str(d / "g.csv")])
            main(["rerank", "--query", q, "--store", str(d / "store"), "--weights", str(d / "w.cvw"),
                  "--k", "6", "--out", str(d / "r.csv")])
            capsys.readouterr()
            main(["eval", "--ranks", str(d / "r.csv"), "--truth", str(d / "toy" / "truth.csv")])
            (d / "eval.txt").write_text(capsys.readouterr().out)
        a, b = files_of(tmp_path / "a"), files_of(tmp_path / "b")
        assert a.keys() == b.keys() and len(a) > 10
        for name in a:
            assert a[name] == b[name], name
