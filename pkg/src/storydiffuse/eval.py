"""Generation files, metric reports and run evaluation."""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from . import metrics
from .dataset import StorySample, load_split
from .metrics import MetricError

REPORT_FIELDS = ["model", "steps", "w", "p_unguide", "seed", "b1", "b4", "rouge_l", "cider",
                 "panel_b1", "panel_b4", "panel_rouge_l", "panel_cider"]


class DataError(ValueError):
    """Inputs on disk are missing or inconsistent."""


def thread_cap() -> int:
    raw = os.environ.get("STORYDIFFUSE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise DataError(f"STORYDIFFUSE_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


# generation JSONL ------------------------------------------------------------


def generation_records(stories: Sequence[StorySample], texts: Sequence[Sequence[str]], *, steps, w, seed,
                       model_type: str, p_unguide=None, wall_seconds=None) -> list[dict]:
    """One record per story; ``texts[i][n]`` is panel n of story i."""
    out = []
    for s, panels in zip(stories, texts):
        out.append({
            "story_id": s.story_id,
            "panels": [{"image_id": p.image_id, "text": t} for p, t in zip(s.panels, panels)],
            "steps": steps,
            "w": w,
            "p_unguide": p_unguide,
            "seed": seed,
            "wall_seconds": wall_seconds,
            "model_type": model_type,
        })
    return out


def write_generations(path, records: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_generations(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"generation file {path} not found")
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{i}: malformed JSON ({e})") from None
            if "story_id" not in rec or "panels" not in rec:
                raise DataError(f"{path}:{i}: record lacks story_id/panels")
            out.append(rec)
    return out


# reports ---------------------------------------------------------------------


@dataclass
class MetricReport:
    b1: float
    b4: float
    rouge_l: float
    cider: float
    panel: dict = field(default_factory=dict)
    per_story: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def csv_row(self) -> dict:
        row = {k: self.config.get(k) for k in ("model", "steps", "w", "p_unguide", "seed")}
        row.update(b1=self.b1, b4=self.b4, rouge_l=self.rouge_l, cider=self.cider)
        row.update({f"panel_{k}": self.panel.get(k) for k in ("b1", "b4", "rouge_l", "cider")})
        return row


def append_csv(path, rows: list[dict], fields: Sequence[str] = REPORT_FIELDS) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow(r)


def _story_scores(args) -> dict:
    sid, hyp, ref, cider_doc = args
    return {
        "story_id": sid,
        "b1": metrics.bleu([hyp], [ref], 1),
        "rouge_l": metrics.rouge_l_pair(hyp, ref),
        "cider": cider_doc,
    }


def score(hyp_panels: list[list[str]], ref_panels: list[list[str]], story_ids: list[str],
          config: dict | None = None) -> MetricReport:
    """Story-level scores over concatenated panels, plus panel-level scores."""
    if len(hyp_panels) != len(ref_panels):
        raise MetricError(f"{len(hyp_panels)} generated stories vs {len(ref_panels)} references")
    hyps = [" ".join(t for t in p if t) for p in hyp_panels]
    refs = [" ".join(p) for p in ref_panels]
    head = metrics.all_metrics(hyps, refs)
    flat_h = [t for p in hyp_panels for t in p]
    flat_r = [t for p in ref_panels for t in p]
    panel = metrics.all_metrics(flat_h, flat_r)
    cider_docs = metrics.cider_per_doc(hyps, refs) if len(hyps) > 1 else [0.0] * len(hyps)
    jobs = list(zip(story_ids, hyps, refs, cider_docs))
    # IDF pass above is single-threaded; the per-story breakdown is independent
    with ThreadPoolExecutor(max_workers=thread_cap()) as ex:
        per_story = list(ex.map(_story_scores, jobs))
    return MetricReport(head["b1"], head["b4"], head["rouge_l"], head["cider"], panel, per_story, config or {})


def evaluate_generations(records: list[dict], stories: list[StorySample]) -> MetricReport:
    by_id = {s.story_id: s for s in stories}
    missing = [r["story_id"] for r in records if r["story_id"] not in by_id]
    if missing:
        raise DataError(f"{len(missing)} generated stories not in the split: {', '.join(missing[:10])}")
    if not records:
        raise DataError("no generations to evaluate")
    hyp = [[p["text"] for p in r["panels"]] for r in records]
    ref = [[p.caption for p in by_id[r["story_id"]].panels] for r in records]
    for r, h, g in zip(records, hyp, ref):
        if len(h) != len(g):
            raise DataError(f"story {r['story_id']}: {len(h)} panels generated, {len(g)} in the corpus")
    r0 = records[0]
    config = {"model": r0.get("model_type"), "steps": r0.get("steps"), "w": r0.get("w"),
              "p_unguide": r0.get("p_unguide"), "seed": r0.get("seed")}
    return score(hyp, ref, [r["story_id"] for r in records], config)


def evaluate_run(generation_jsonl, corpus_dir, out_report=None, split: str = "test") -> MetricReport:
    stories = load_split(corpus_dir, split)
    report = evaluate_generations(read_generations(generation_jsonl), stories)
    if out_report is not None:
        report.save(out_report)
    return report
