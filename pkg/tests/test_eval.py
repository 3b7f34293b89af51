import json

import pytest

from storydiffuse.eval import (
    DataError,
    MetricReport,
    append_csv,
    evaluate_generations,
    generation_records,
    read_generations,
    score,
    thread_cap,
    write_generations,
)
from storydiffuse.metrics import bleu


def records_for(stories, texts=None):
    texts = texts or [[p.caption for p in s.panels] for s in stories]
    return generation_records(stories, texts, steps=10, w=0.3, seed=0, model_type="diffusion", p_unguide=0.5)


def test_perfect_generations_score_maxima(tiny_corpus):
    rep = evaluate_generations(records_for(tiny_corpus["test"]), tiny_corpus["test"])
    assert rep.b1 == pytest.approx(1.0) and rep.b4 == pytest.approx(1.0) and rep.rouge_l == pytest.approx(1.0)
    assert rep.config == {"model": "diffusion", "steps": 10, "w": 0.3, "p_unguide": 0.5, "seed": 0}
    assert len(rep.per_story) == len(tiny_corpus["test"])


def test_story_level_concatenates_panels():
    rep = score([["a b", "c"], ["d", "e f"]], [["a b", "c x"], ["d", "e f"]], ["s0", "s1"])
    assert rep.b1 == pytest.approx(bleu(["a b c", "d e f"], ["a b c x", "d e f"], 1))
    assert rep.panel["b1"] == pytest.approx(bleu(["a b", "c", "d", "e f"], ["a b", "c x", "d", "e f"], 1))


def test_threads_do_not_change_report(tiny_corpus, monkeypatch):
    stories = tiny_corpus["test"]
    texts = [[p.caption.replace("the", "a") for p in s.panels] for s in stories]
    one = evaluate_generations(records_for(stories, texts), stories).to_json()
    monkeypatch.setenv("STORYDIFFUSE_THREADS", "4")
    assert thread_cap() == 4
    assert evaluate_generations(records_for(stories, texts), stories).to_json() == one


def test_bad_thread_env(monkeypatch):
    monkeypatch.setenv("STORYDIFFUSE_THREADS", "many")
    with pytest.raises(DataError):
        thread_cap()


def test_missing_story_and_panel_mismatch(tiny_corpus):
    recs = records_for(tiny_corpus["test"])
    recs[0]["story_id"] = "nope"
    with pytest.raises(DataError):
        evaluate_generations(recs, tiny_corpus["test"])
    recs = records_for(tiny_corpus["test"])
    recs[1]["panels"] = recs[1]["panels"][:1]
    with pytest.raises(DataError):
        evaluate_generations(recs, tiny_corpus["test"])
    with pytest.raises(DataError):
        evaluate_generations([], tiny_corpus["test"])


def test_jsonl_round_trip_and_errors(tiny_corpus, tmp_path):
    recs = records_for(tiny_corpus["test"])
    write_generations(tmp_path / "g.jsonl", recs)
    assert read_generations(tmp_path / "g.jsonl") == recs
    line = (tmp_path / "g.jsonl").read_text().splitlines()[0]
    assert list(json.loads(line)) == sorted(json.loads(line))
    (tmp_path / "bad.jsonl").write_text("{not json\n")
    with pytest.raises(DataError):
        read_generations(tmp_path / "bad.jsonl")
    with pytest.raises(DataError):
        read_generations(tmp_path / "absent.jsonl")


def test_report_round_trip_and_csv(tiny_corpus, tmp_path):
    rep = evaluate_generations(records_for(tiny_corpus["test"]), tiny_corpus["test"])
    rep.save(tmp_path / "r.json")
    assert MetricReport.load(tmp_path / "r.json") == rep
    append_csv(tmp_path / "t.csv", [rep.csv_row()])
    append_csv(tmp_path / "t.csv", [rep.csv_row()])
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("model,steps,w,p_unguide,seed,b1")
