import io
import json
import subprocess
import sys

import numpy as np
import pytest

from probembed.cli import main
from probembed.datagen import DatasetConfig, generate
from probembed.gaussian import GaussianEmbedding
from probembed.io import read_csv, read_dataset, read_embeddings, read_model, write_dataset, write_embeddings
from probembed.trainer import TrainConfig, init_model


def run(*argv):
    err = io.StringIO()
    code = main(list(argv), stderr=err)
    return code, err.getvalue()


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def error_payload(stderr):
    lines = stderr.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_gen_data_deterministic(workdir):
    assert run("gen-data", "--classes", "3", "--items", "20", "--seed", "7", "--out", "d.jsonl")[0] == 0
    first = (workdir / "d.jsonl").read_bytes()
    assert run("gen-data", "--classes", "3", "--items", "20", "--seed", "7", "--out", "d.jsonl")[0] == 0
    assert (workdir / "d.jsonl").read_bytes() == first
    ds, meta = read_dataset(workdir / "d.jsonl")
    assert len(ds) == 120 and meta["invocation"]["flags"]["seed"] == 7


def test_unknown_flag_is_an_error(workdir):
    code, err = run("gen-data", "--seed", "1", "--out", "d.jsonl", "--colour", "red")
    assert code == 1 and error_payload(err)["error"] == "usage"
    assert not (workdir / "d.jsonl").exists()


def test_seed_required(workdir):
    code, err = run("gen-data", "--out", "d.jsonl")
    assert code == 1 and "--seed" in error_payload(err)["message"]


def test_bad_values_fail_before_io(workdir):
    code, _ = run("train", "--data", "missing.jsonl", "--seed", "1", "--out", "m.json", "--batch", "zero")
    assert code == 1
    code, err = run("train", "--data", "missing.jsonl", "--seed", "1", "--out", "m.json")
    assert code == 1 and "not found" in error_payload(err)["message"]


def test_train_zero_epochs_is_initialization(workdir):
    run("gen-data", "--seed", "3", "--feature-dim", "6", "--out", "d.jsonl")
    assert run("train", "--data", "d.jsonl", "--epochs", "0", "--seed", "5", "--embed-dim", "4", "--out", "m.json")[0] == 0
    model, raw = read_model(workdir / "m.json")
    ref = init_model(6, TrainConfig(seed=5, embed_dim=4, epochs=0))
    for m in ref.heads:
        for p, q in zip(ref.heads[m].params(), model.heads[m].params()):
            assert p.tobytes() == q.tobytes()
    assert raw["invocation"]["flags"]["epochs"] == 0


def test_config_file_mirrors_flags(workdir):
    (workdir / "c.json").write_text(json.dumps({"classes": 2, "items": 4, "seed": 11, "out": "d.jsonl"}))
    assert run("gen-data", "--config", "c.json")[0] == 0
    assert len(read_dataset(workdir / "d.jsonl")[0]) == 16
    # explicit flags win
    assert run("gen-data", "--config", "c.json", "--items", "5")[0] == 0
    assert len(read_dataset(workdir / "d.jsonl")[0]) == 20
    (workdir / "bad.json").write_text(json.dumps({"colour": 1}))
    assert run("gen-data", "--config", "bad.json")[0] == 1


def _forced_dumps(workdir):
    rng = np.random.default_rng(0)
    ds = generate(DatasetConfig(items_per_class_per_modality=3))
    write_dataset(workdir / "d.jsonl", ds)
    qa, gb = [], []
    # only one class-mate gets the query's exact mean
    for it in ds.modality_items("a"):
        qa.append(GaussianEmbedding(it.id, "a", rng.normal(size=4), np.zeros(4)))
    for it in ds.modality_items("b"):
        twin = next(q for q in qa if ds[q.id].class_id == it.class_id and ds[q.id].index == it.index)
        gb.append(GaussianEmbedding(it.id, "b", twin.mu, np.zeros(4)))
    write_embeddings(workdir / "q.jsonl", qa)
    write_embeddings(workdir / "g.jsonl", gb)
    return ds


def test_eval_forced_ranking(workdir):
    _forced_dumps(workdir)
    code, err = run("eval", "--queries", "q.jsonl", "--gallery", "g.jsonl", "--data", "d.jsonl",
                    "--metric", "mean", "--out", "r.csv")
    assert code == 0, err
    header, rows, inv = read_csv(workdir / "r.csv")
    assert header == ["direction", "metric", "param", "value"]
    r1 = [r for r in rows if r[1] == "recall" and r[2] == "1"]
    assert r1 == [["a2b", "recall", "1", "1.0"]]
    assert inv["command"] == "eval" and inv["flags"]["zeta"] == [0, 1, 2]


def test_eval_dimension_mismatch(workdir):
    _forced_dumps(workdir)
    write_embeddings(workdir / "g3.jsonl", [GaussianEmbedding("b-000-0000", "b", [0, 0, 1], [0, 0, 0])])
    code, err = run("eval", "--queries", "q.jsonl", "--gallery", "g3.jsonl", "--data", "d.jsonl", "--out", "r.csv")
    assert code == 1 and error_payload(err)["error"] == "validation"


def test_schema_error_reports_line(workdir):
    _forced_dumps(workdir)
    lines = (workdir / "q.jsonl").read_text().splitlines()
    lines[2] = '{"id": 3}'
    (workdir / "q.jsonl").write_text("\n".join(lines) + "\n")
    code, err = run("eval", "--queries", "q.jsonl", "--gallery", "g.jsonl", "--data", "d.jsonl", "--out", "r.csv")
    payload = error_payload(err)
    assert code == 1 and payload["line"] == 3


def test_numeric_failure_exit_code(workdir):
    run("gen-data", "--seed", "1", "--items", "8", "--out", "d.jsonl")
    code, err = run("train", "--data", "d.jsonl", "--seed", "1", "--epochs", "3", "--batch", "4",
                    "--lr", "1e300", "--out", "m.json")
    payload = error_payload(err)
    assert code == 2 and payload["error"] == "numeric" and "step" in payload
    assert not (workdir / "m.json").exists()


def test_retrieve_topk(workdir):
    _forced_dumps(workdir)
    code, _ = run("retrieve", "--queries", "q.jsonl", "--gallery", "g.jsonl", "--metric", "w2",
                  "--seed", "0", "--topk", "2", "--out", "r.jsonl")
    assert code == 0
    lines = [json.loads(l) for l in (workdir / "r.jsonl").read_text().splitlines()]
    assert "_meta" in lines[0]
    assert all(len(l["ranked"]) == 2 for l in lines[1:]) and len(lines) == 10


def test_inputs_not_mutated(workdir):
    run("gen-data", "--seed", "2", "--items", "8", "--out", "d.jsonl")
    before = (workdir / "d.jsonl").read_bytes()
    run("train", "--data", "d.jsonl", "--seed", "1", "--epochs", "2", "--batch", "4", "--out", "m.json")
    run("embed", "--model", "m.json", "--data", "d.jsonl", "--out", "e.jsonl")
    assert (workdir / "d.jsonl").read_bytes() == before
    embs, meta = read_embeddings(workdir / "e.jsonl")
    assert meta["invocation"]["command"] == "embed" and len(embs) == 48


def test_analyze_outputs(workdir):
    run("gen-data", "--seed", "2", "--items", "8", "--out", "d.jsonl")
    run("train", "--data", "d.jsonl", "--seed", "1", "--epochs", "2", "--batch", "4", "--out", "m.json")
    run("embed", "--model", "m.json", "--data", "d.jsonl", "--out", "e.jsonl")
    code, err = run("analyze", "--model", "m.json", "--data", "d.jsonl", "--embeddings", "e.jsonl",
                    "--bins", "4", "--ratios", "0,0.5", "--out", "an")
    assert code == 0, err
    header, rows, _ = read_csv(workdir / "an" / "uncertainty_bins_a2b.csv")
    assert header == ["bin", "mean_uncertainty", "mean_r1"] and len(rows) == 4
    header, rows, _ = read_csv(workdir / "an" / "corruption.csv")
    assert header == ["ratio", "mean_sigma"] and [r[0] for r in rows] == ["0.0", "0.5"]


def test_module_entry_point(workdir):
    proc = subprocess.run([sys.executable, "-m", "probembed", "gen-data", "--seed", "1", "--out", "d.jsonl"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and (workdir / "d.jsonl").exists()
    proc = subprocess.run([sys.executable, "-m", "probembed", "nosuch"], capture_output=True, text=True)
    assert proc.returncode == 1
