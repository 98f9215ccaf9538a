"""Command-line workflows: generation, training, evaluation, dumps,
manifests, and exit codes."""

import json
from pathlib import Path

import numpy as np
import pytest

from cellgraph.cli import main
from cellgraph.graphs import parse_graph_dump
from cellgraph.metrics import format_report
from cellgraph.training import evaluate, load_checkpoint

TINY_TRAIN = {
    "model": {"width": 16, "stem_width": 8, "link_dim": 4, "knn": 2,
              "encoder_layers": 2, "heads": 2},
    "batch_accum": 2,
    "gcn_edges": 2,
    "pretrain_epochs": 1,
    "finetune_epochs": 1,
    "pretrain_lr": 1e-3,
    "finetune_lr": 1e-3,
}

TINY_CORPUS = {
    "image_size": 32,
    "nuclei_range": [5, 9],
    "count": 10,
    "fractions": [0.6, 0.2, 0.2],
}


@pytest.fixture
def tiny_corpus_dir(tmp_path):
    cfg_path = tmp_path / "corpus.json"
    cfg_path.write_text(json.dumps(TINY_CORPUS))
    out = tmp_path / "corpus"
    assert main(["gen", "--config", str(cfg_path), "--out", str(out), "--seed", "5"]) == 0
    return out


@pytest.fixture
def train_cfg_path(tmp_path):
    p = tmp_path / "train.json"
    p.write_text(json.dumps(TINY_TRAIN))
    return p


def corpus_digest(root: Path):
    import hashlib

    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.read_bytes())
    return h.hexdigest()


class TestGen:
    def test_writes_splits_and_prints_counts(self, tiny_corpus_dir, capsys):
        for name, count in (("train", 6), ("val", 2), ("test", 2)):
            index = json.loads((tiny_corpus_dir / name / "index.json").read_text())
            assert len(index["ids"]) == count

    def test_same_seed_identical_digests(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(TINY_CORPUS))
        digests = []
        for run in range(2):
            out = tmp_path / f"corpus{run}"
            assert main(["gen", "--config", str(cfg_path), "--out", str(out), "--seed", "7"]) == 0
            digests.append(corpus_digest(out))
        assert digests[0] == digests[1]

    def test_bad_fractions_exit_2(self, tmp_path, capsys):
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps({**TINY_CORPUS, "fractions": [0.5, 0.2, 0.2]}))
        code = main(["gen", "--config", str(cfg_path), "--out", str(tmp_path / "x")])
        assert code == 2
        assert "fractions" in capsys.readouterr().err

    def test_manifest_written_and_protected(self, tiny_corpus_dir, tmp_path, capsys):
        manifest = json.loads((tiny_corpus_dir / "manifest.json").read_text())
        assert manifest["command"] == "gen"
        assert manifest["tool_version"]
        cfg_path = tmp_path / "c2.json"
        cfg_path.write_text(json.dumps(TINY_CORPUS))
        code = main(["gen", "--config", str(cfg_path), "--out", str(tiny_corpus_dir)])
        assert code == 2
        assert "--force" in capsys.readouterr().err
        code = main(["gen", "--config", str(cfg_path), "--out", str(tiny_corpus_dir),
                     "--seed", "5", "--force"])
        assert code == 0


class TestTrainEval:
    def test_full_workflow(self, tiny_corpus_dir, train_cfg_path, tmp_path, capsys):
        pre_dir = tmp_path / "pre"
        code = main(["pretrain", str(tiny_corpus_dir), "--config", str(train_cfg_path),
                     "--out", str(pre_dir), "--seed", "1"])
        assert code == 0
        assert (pre_dir / "extractor.ckpt").exists()
        assert (pre_dir / "curve.jsonl").exists()

        run_dir = tmp_path / "run"
        code = main(["train", str(tiny_corpus_dir), "--config", str(train_cfg_path),
                     "--out", str(run_dir), "--seed", "1",
                     "--init", str(pre_dir / "extractor.ckpt")])
        assert code == 0
        ckpt = run_dir / "model.ckpt"
        assert ckpt.exists()

        eval_dir = tmp_path / "eval"
        code = main(["eval", str(tiny_corpus_dir), "--init", str(ckpt),
                     "--split", "test", "--out", str(eval_dir)])
        assert code == 0
        report = (eval_dir / "report.txt").read_text()
        assert "F_avg" in report

    def test_eval_reproduces_direct_report_bytes(self, tiny_corpus_dir, train_cfg_path, tmp_path):
        run_dir = tmp_path / "run"
        assert main(["train", str(tiny_corpus_dir), "--config", str(train_cfg_path),
                     "--out", str(run_dir), "--seed", "2"]) == 0
        ckpt_path = run_dir / "model.ckpt"

        eval_dir = tmp_path / "eval"
        assert main(["eval", str(tiny_corpus_dir), "--init", str(ckpt_path),
                     "--split", "val", "--out", str(eval_dir)]) == 0
        via_cli = (eval_dir / "report.txt").read_bytes()

        # golden oracle: drive the library directly and format the same way
        from cellgraph.config import TrainConfig
        from cellgraph.data import read_corpus

        ck = load_checkpoint(ckpt_path)
        tcfg = TrainConfig.from_dict(ck.config)
        samples = read_corpus(tiny_corpus_dir / "val")
        rep = evaluate(ck.params, tcfg.model, samples)
        golden = format_report(rep.per_class, rep.f_avg, rep.confusion).encode()
        assert via_cli == golden

        eval_dir2 = tmp_path / "eval2"
        assert main(["eval", str(tiny_corpus_dir), "--init", str(ckpt_path),
                     "--split", "val", "--out", str(eval_dir2)]) == 0
        assert (eval_dir2 / "report.txt").read_bytes() == via_cli

    def test_train_manifests_differ_only_in_init(self, tiny_corpus_dir, train_cfg_path, tmp_path):
        pre_dir = tmp_path / "pre"
        main(["pretrain", str(tiny_corpus_dir), "--config", str(train_cfg_path),
              "--out", str(pre_dir), "--seed", "3"])
        dirs = {}
        for tag, init in (("scratch", "none"), ("warm", str(pre_dir / "extractor.ckpt"))):
            d = tmp_path / tag
            main(["train", str(tiny_corpus_dir), "--config", str(train_cfg_path),
                  "--out", str(d), "--seed", "3", "--init", init])
            dirs[tag] = json.loads((d / "manifest.json").read_text())
        a, b = dirs["scratch"]["config"], dirs["warm"]["config"]
        assert a.pop("init") == "none" and b.pop("init").endswith("extractor.ckpt")
        assert a == b

    def test_missing_corpus_exit_2(self, tmp_path, train_cfg_path):
        code = main(["pretrain", str(tmp_path / "nowhere"), "--config", str(train_cfg_path),
                     "--out", str(tmp_path / "o")])
        assert code == 2

    def test_missing_checkpoint_exit_2(self, tiny_corpus_dir, tmp_path):
        code = main(["eval", str(tiny_corpus_dir), "--init", str(tmp_path / "no.ckpt"),
                     "--out", str(tmp_path / "o")])
        assert code == 2


class TestSweepCommand:
    def test_two_value_sweep_emits_table(self, tiny_corpus_dir, train_cfg_path, tmp_path, capsys):
        out = tmp_path / "sweep"
        code = main(["sweep", str(tiny_corpus_dir), "--config", str(train_cfg_path),
                     "--out", str(out), "--axis", "layers", "--values", "1,2",
                     "--pretrain-epochs", "1", "--epochs", "1"])
        assert code == 0
        table = (out / "sweep.tsv").read_text().strip().splitlines()
        assert len(table) == 3  # header + one row per value
        assert table[0].startswith("layers")
        # per-class columns plus the average
        assert len(table[1].split("\t")) == 1 + 3 + 1


class TestGraphCommand:
    def test_dump_round_trips_and_records_default_k(self, tiny_corpus_dir, tmp_path):
        dump = tmp_path / "graph.json"
        code = main(["graph", str(tiny_corpus_dir), "--image", "0", "--out", str(dump)])
        assert code == 0
        doc = parse_graph_dump(dump)
        assert doc["k"] <= 4  # default request is 4, clamped by graph size
        assert doc["n"] == len(doc["centroids"])
        assert doc["markers"].shape == (doc["n"], 16)

    def test_single_nucleus_dump_has_no_edges(self, tmp_path):
        cfg_path = tmp_path / "one.json"
        cfg_path.write_text(json.dumps({**TINY_CORPUS, "nuclei_range": [1, 1],
                                        "count": 2, "fractions": [1.0, 0.0, 0.0]}))
        corpus = tmp_path / "corpus1"
        assert main(["gen", "--config", str(cfg_path), "--out", str(corpus)]) == 0
        dump = tmp_path / "g.json"
        assert main(["graph", str(corpus), "--image", "0", "--out", str(dump)]) == 0
        doc = parse_graph_dump(dump)
        assert doc["n"] == 1 and doc["edge_list"].shape == (0, 2)

    def test_unknown_sample_exit_2(self, tiny_corpus_dir, tmp_path):
        code = main(["graph", str(tiny_corpus_dir), "--image", "99",
                     "--out", str(tmp_path / "g.json")])
        assert code == 2
