import json
import shutil

import pytest

from vipg import cli
from vipg import dataio as dio
from vipg import training as T

TABLE_SENTENCE = "several men in hard hats are operating a giant pulley system ."
TINY_MODEL = {"d_model": 16, "heads": 2, "enc_layers": 1, "dec_layers": 1, "d_ff": 32, "d_img": 8}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth-data", "--n", 24, "--seed", 7, "--out", root / "data") == 0
    spec = json.loads((root / "data" / "synth_spec.json").read_text())
    assert spec["d_img"] == 32
    # smaller features keep the CLI tests quick
    shutil.rmtree(root / "data")
    (root / "spec.json").write_text(json.dumps({"d_img": 8, "l": 2}))
    assert run("synth-data", "--n", 24, "--seed", 7, "--out", root / "data", "--spec", root / "spec.json") == 0
    assert run("preprocess", "--manifest", root / "data" / "manifest.jsonl", "--out", root / "prep") == 0
    cfg = {"data": str(root / "prep"), "out": str(root / "run"), "seed": 3, "val_fraction": 0.25,
           "model": TINY_MODEL, "train": {"max_steps": 30, "batch_size": 6, "val_every": 10,
                                          "base_lr": 2.0, "warmup": 20}}
    (root / "run.json").write_text(json.dumps(cfg))
    assert run("train", "--config", root / "run.json") == 0
    return root


def test_preprocess_table_dump(tmp_path):
    (tmp_path / "m.jsonl").write_text(json.dumps({"id": "t1", "caption": TABLE_SENTENCE, "feature": "f.vipg"}) + "\n")
    assert run("preprocess", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "out") == 0
    dump = (tmp_path / "out" / "samples.txt").read_text().splitlines()
    assert dump == [
        "Original Text: " + TABLE_SENTENCE,
        "Object Sequence: NNS@0 men NNS@1 hats NN@0 pulley NN@1 system",
        "Relation Sequence: several NNS@0 in hard NNS@1 are operating a giant NN@0 NN@1 .",
        "Transformed Input Text: <POS_DICT> NNS@0 men NNS@1 hats NN@0 pulley NN@1 system "
        "<RELATION> several NNS@0 in hard NNS@1 are operating a giant NN@0 NN@1 .",
    ]
    rec = json.loads((tmp_path / "out" / "processed.jsonl").read_text())
    assert rec["object_ids"][0] == 5 and rec["relation_ids"][0] == 6 and rec["target_ids"][-1] == 2


def test_preprocess_empty_manifest(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert run("preprocess", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "out") == 0
    vocab = json.loads((tmp_path / "out" / "vocab.json").read_text())
    assert len(vocab["tokens"]) == 7 + 40
    assert (tmp_path / "out" / "processed.jsonl").read_text() == ""


def test_preprocess_one_caption_deterministic(tmp_path):
    lines = [json.dumps({"id": f"{img}-{k}", "caption": f"a dog number {k} .", "feature": f"{img}.vipg"})
             for img in "abcd" for k in range(5)]
    (tmp_path / "m.jsonl").write_text("\n".join(lines) + "\n")
    for d in ("x", "y"):
        assert run("preprocess", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / d,
                   "--captions", "one", "--seed", 7) == 0
    x = (tmp_path / "x" / "processed.jsonl").read_text()
    assert x == (tmp_path / "y" / "processed.jsonl").read_text()
    assert len(x.splitlines()) == 4


def test_preprocess_capacity_error_names_record(tmp_path, capsys):
    (tmp_path / "m.jsonl").write_text(json.dumps({"id": "crowded", "caption": "dog " * 12, "feature": "f"}) + "\n")
    assert run("preprocess", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "o") == 2
    assert "crowded" in capsys.readouterr().err


def test_preprocess_pretagged_sidecar(tmp_path):
    (tmp_path / "m.jsonl").write_text(json.dumps({"id": "a", "caption": "zyx runs", "feature": "f"}) + "\n")
    (tmp_path / "tags.txt").write_text("NN VBZ\n")
    assert run("preprocess", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "o", "--tags", tmp_path / "tags.txt") == 0
    rec = json.loads((tmp_path / "o" / "processed.jsonl").read_text())
    assert rec["objects"] == [["NN@0", "zyx"]]


def test_train_outputs(prepared):
    run_dir = prepared / "run"
    for name in ("config.json", "vocab.json", "best.ckpt", "latest.ckpt", "metrics.jsonl", "val_log.jsonl"):
        assert (run_dir / name).exists(), name
    resolved = json.loads((run_dir / "config.json").read_text())
    assert resolved["model"]["d_model"] == 16 and resolved["train"]["seed"] == 3
    metrics = [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]
    assert len(metrics) == 30 and set(metrics[0]) == {"step", "ce", "kl", "total", "grad_norm", "lr"}


def test_resolved_config_reproduces_bytes(prepared, tmp_path):
    assert run("train", "--config", prepared / "run" / "config.json", "--out", tmp_path / "again") == 0
    for name in ("best.ckpt", "latest.ckpt", "metrics.jsonl", "val_log.jsonl"):
        assert (prepared / "run" / name).read_bytes() == (tmp_path / "again" / name).read_bytes(), name


@pytest.mark.parametrize("ablation,scope", [("copy_whole_sentence", "sentence"), ("no_copy", "none"),
                                            ("original_text", "objects")])
def test_train_ablation_flags(prepared, tmp_path, ablation, scope):
    out = tmp_path / ablation
    assert run("train", "--config", prepared / "run.json", "--out", out, "--ablation", ablation,
               "--max-steps", 2) == 0
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["model"]["copy_scope"] == scope and resolved["train"]["ablation"] == ablation


def test_train_lambda_zero(prepared, tmp_path):
    assert run("train", "--config", prepared / "run.json", "--out", tmp_path / "o", "--lambda-kl", 0,
               "--max-steps", 3) == 0
    assert json.loads((tmp_path / "o" / "config.json").read_text())["train"]["lambda_kl"] == 0


def test_train_config_errors_list_every_field(prepared, tmp_path, capsys):
    bad = {"data": str(prepared / "prep"), "out": str(tmp_path / "o"),
           "model": {"d_model": 10, "heads": 3}, "train": {"warmup": 0, "batch_size": 0}}
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert run("train", "--config", tmp_path / "bad.json") == 1
    err = capsys.readouterr().err
    for field in ("divisible", "warmup", "batch_size"):
        assert field in err


def test_train_missing_feature_names_record(prepared, tmp_path, capsys):
    shutil.copytree(prepared / "data", tmp_path / "data")
    (tmp_path / "data" / "features" / "synth-00003.vipg").unlink()
    assert run("preprocess", "--manifest", tmp_path / "data" / "manifest.jsonl", "--out", tmp_path / "prep") == 0
    assert run("train", "--data", tmp_path / "prep", "--out", tmp_path / "o", "--max-steps", 1) == 2
    assert "synth-00003" in capsys.readouterr().err


def test_train_divergence_exit_code(prepared, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise T.TrainingDivergedError("loss is nan")
    monkeypatch.setattr(T, "train_step", boom)
    assert run("train", "--config", prepared / "run.json", "--out", tmp_path / "o") == 3


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--bogus"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main([])
    assert e.value.code == 1


def test_infer_image_free_and_deterministic(prepared, tmp_path, capsys, monkeypatch):
    src = tmp_path / "in.txt"
    captions = [json.loads(line)["caption"] for line in (prepared / "prep" / "processed.jsonl").read_text().splitlines()]
    src.write_text("\n".join(captions[:5]) + "\n")
    ckpt = prepared / "run" / "best.ckpt"
    assert run("infer", "--checkpoint", ckpt, "--input", src, "--out", tmp_path / "a.txt") == 0
    assert run("infer", "--checkpoint", ckpt, "--input", src, "--out", tmp_path / "b1.txt", "--beam", 1) == 0
    moved = tmp_path / "moved"
    shutil.move(str(prepared / "data" / "features"), moved)
    try:
        monkeypatch.chdir(tmp_path)
        assert run("infer", "--checkpoint", ckpt, "--input", src, "--out", tmp_path / "c.txt") == 0
    finally:
        shutil.move(str(moved), prepared / "data" / "features")
    a = (tmp_path / "a.txt").read_text()
    assert a == (tmp_path / "c.txt").read_text()
    assert len(a.splitlines()) == 5
    assert (tmp_path / "a.txt.config.json").exists()


def test_infer_stdin(prepared, capsys, monkeypatch):
    import io
    monkeypatch.setattr("sys.stdin", io.StringIO("a cat sits on the table .\n\n"))
    assert run("infer", "--checkpoint", prepared / "run" / "best.ckpt") == 0
    out = capsys.readouterr().out.split("\n")
    assert len(out) == 3 and out[1] == ""


def test_infer_caption_route(prepared, tmp_path, capsys):
    feat = prepared / "data" / "features" / "synth-00000.vipg"
    (tmp_path / "hint.txt").write_text("a cat sits on the table .\n")
    assert run("infer", "--checkpoint", prepared / "run" / "best.ckpt", "--input", tmp_path / "hint.txt",
               "--route", "caption", "--feature", feat) == 0
    assert capsys.readouterr().out.strip()
    assert run("infer", "--checkpoint", prepared / "run" / "best.ckpt", "--input", tmp_path / "hint.txt",
               "--route", "caption") == 1


def test_infer_vocab_mismatch(prepared, tmp_path):
    (tmp_path / "m.jsonl").write_text(json.dumps({"id": "a", "caption": "a dog .", "feature": "f"}) + "\n")
    assert run("preprocess", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "p") == 0
    (tmp_path / "in.txt").write_text("a dog .\n")
    assert run("infer", "--checkpoint", prepared / "run" / "best.ckpt", "--vocab", tmp_path / "p" / "vocab.json",
               "--input", tmp_path / "in.txt") == 2


def test_eval_reports(tmp_path, capsys):
    (tmp_path / "s.txt").write_text("a red dog runs .\nthe cat sleeps .\n")
    (tmp_path / "d.txt").write_text("x y z\nq w\n")
    (tmp_path / "bs.txt").write_text("0.91\n")
    assert run("eval", "--sources", tmp_path / "s.txt", "--candidates", tmp_path / "s.txt") == 0
    rep = json.loads(capsys.readouterr().out)
    assert set(rep) == {"self_bleu", "distinct_1", "distinct_2"} and rep["self_bleu"] == 100.0
    assert run("eval", "--sources", tmp_path / "s.txt", "--candidates", tmp_path / "d.txt",
               "--external", f"bertscore={tmp_path / 'bs.txt'}", "--out", tmp_path / "r.json") == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert rep["self_bleu"] == 0.0 and rep["external"] == {"bertscore": 0.91}
    (tmp_path / "short.txt").write_text("one line\n")
    assert run("eval", "--sources", tmp_path / "s.txt", "--candidates", tmp_path / "short.txt") == 2


@pytest.mark.parametrize("dims,ones", [((2, 3, 4), 47), ((0, 1, 1), 3), ((0, 0, 1), 1)])
def test_inspect_mask(capsys, dims, ones):
    assert run("inspect-mask", *dims) == 0
    out = capsys.readouterr().out
    assert out.strip().endswith(f"ones: {ones}")
    grid = [line for line in out.splitlines() if "|" in line]
    assert len(grid) == sum(dims)
    assert sum(line.split("|")[1].split().count("1") for line in grid) == ones


def test_threads_env(prepared, tmp_path, monkeypatch):
    monkeypatch.setenv("VIPG_THREADS", "4")
    assert run("train", "--config", prepared / "run.json", "--out", tmp_path / "t", "--max-steps", 30) == 0
    assert (tmp_path / "t" / "best.ckpt").read_bytes() == (prepared / "run" / "best.ckpt").read_bytes()
    monkeypatch.setenv("VIPG_THREADS", "many")
    assert run("train", "--config", prepared / "run.json", "--out", tmp_path / "u") == 1


def test_data_error_on_missing_prep(tmp_path):
    assert run("train", "--data", tmp_path / "nowhere", "--out", tmp_path / "o") == 2
    assert isinstance(dio.DataError("x"), ValueError)
