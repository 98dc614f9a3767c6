import json

import pytest

from visrec.ann import HnswIndex
from visrec.cli import main
from visrec.config import DEFAULTS, load_config
from visrec.domain import load_embeddings


def test_config_precedence(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"reco": {"k_final": 10, "price_ratio": 2.0}, "ann": {"M": 12}}))
    env = {"VISREC_RECO_K_FINAL": "7", "VISREC_RECO_INCLUDE_QUERY_CATEGORY_TIERS": "false"}
    cfg = load_config(path, env=env, overrides={"reco": {"k_final": 5, "price_ratio": None}})
    assert cfg["reco"]["k_final"] == 5
    assert cfg["reco"]["price_ratio"] == 2.0
    assert cfg["reco"]["include_query_category_tiers"] is False
    assert cfg["ann"]["M"] == 12 and cfg["ann"]["ef_search"] == 100
    assert load_config(path, env={"VISREC_RECO_K_FINAL": "7"})["reco"]["k_final"] == 7
    assert DEFAULTS["reco"]["k_final"] == 24


def test_config_rejects_unknown(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"reco": {"k_finale": 1}}))
    with pytest.raises(ValueError):
        load_config(path, env={})
    path.write_text(json.dumps({"bogus": {}}))
    with pytest.raises(ValueError):
        load_config(path, env={})


def run(capsys, *argv):
    assert main([str(a) for a in argv]) == 0
    return json.loads(capsys.readouterr().out)


def test_offline_workflow(tmp_path, capsys, monkeypatch):
    monkeypatch.chdir(tmp_path)
    run(capsys, "synth-catalog", "--n", 300, "--out", "cat.jsonl")
    out = run(capsys, "backfill", "--catalog", "cat.jsonl", "--fit-pca", "--pca-dim", 16, "--index", "idx.vrix",
              "--pca", "pca.vrpc", "--catalog-out", "store.jsonl")
    assert out["processed"] == 300 and out["index_size"] == 300
    assert len(HnswIndex.load("idx.vrix")) == 300

    run(capsys, "encode", "--catalog", "cat.jsonl", "--out", "raw.npz")
    assert load_embeddings("raw.npz")[1].shape == (300, 768)
    out = run(capsys, "pca-fit", "--embeddings", "raw.npz", "--pca-dim", 8, "--out", "p8.vrpc")
    assert out["output_dim"] == 8
    run(capsys, "encode", "--catalog", "cat.jsonl", "--pca-model", "pca.vrpc", "--out", "good.npz")
    run(capsys, "encode", "--catalog", "cat.jsonl", "--pca-model", "pca.vrpc", "--noise", 1.5, "--out", "poor.npz")
    out = run(capsys, "index-build", "--embeddings", "good.npz", "--out", "good.vrix")
    assert out["size"] == 300

    out = run(capsys, "replay-compare", "--catalog", "cat.jsonl", "--embeddings-a", "poor.npz",
              "--embeddings-b", "good.npz", "--label-a", "poor", "--label-b", "good", "--queries", 50)
    assert out["n_queries_total"] == 50 and set(out["models"]) == {"poor", "good"}

    events = tmp_path / "ev.jsonl"
    events.write_text(json.dumps({"kind": "delisted", "event_id": 1, "item_id": 1}) + "\n")
    out = run(capsys, "ingest", "--events", events, "--index", "idx.vrix", "--pca", "pca.vrpc",
              "--catalog", "store.jsonl", "--lanes", 2)
    assert out["processed"] == 1 and out["index_size"] == 299
    assert 1 not in HnswIndex.load("idx.vrix")


def test_eval_command(tmp_path, capsys):
    log = tmp_path / "log.jsonl"
    log.write_text(json.dumps({"query_item_id": 1, "shown": [2, 3, 4], "tapped": [2, 4]}) + "\n")
    out_file = tmp_path / "report.json"
    assert main(["eval", "--log", str(log), "--ks", "1,3", "--out", str(out_file)]) == 0
    report = json.loads(out_file.read_text())
    assert report["ndcg"]["3"] == pytest.approx(0.91972, abs=1e-5)
    log.write_text("garbage\n")
    assert main(["eval", "--log", str(log)]) == 2


def test_bench_recall_small(capsys):
    out = run(capsys, "bench-recall", "--n", 300, "--dim", 16, "--queries", 20, "--ef", "10,50",
              "--backend", "python", "--service-items", 200, "--service-requests", 20)
    row = out["results"][0]
    assert row["backend"] == "python" and [s["ef"] for s in row["searches"]] == [10, 50]
    assert row["searches"][1]["recall@10"] >= row["searches"][0]["recall@10"]
    assert out["service"]["requests"] == 20 and out["service"]["p99_ms"] > 0
