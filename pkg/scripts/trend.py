"""Multi-seed guided-vs-unguided and adapter ablation study.

Trains one run per (seed, setting) on the pororo-like preset and writes a CSV
of held-out scores.  Usage: python scripts/trend.py --out trend.csv
"""
import argparse
import csv
import statistics

from storydiffuse.config import toy_config
from storydiffuse.dataset import Vocab, generate_corpus, grammar_vocab, to_batch
from storydiffuse.eval import score
from storydiffuse.fusion import GuidanceConfig
from storydiffuse.sampler import SamplerConfig, generate
from storydiffuse.train import train_diffusion

SETTINGS = {
    "guided p=0.3": {"guidance.p_unguide": 0.3},
    "guided p=0.5": {"guidance.p_unguide": 0.5},
    "guided p=0.7": {"guidance.p_unguide": 0.7},
    "unguided": {"guidance.p_unguide": 1.0},
    "adapter(-) p=0.5": {"guidance.p_unguide": 0.5, "model.use_adapters": False},
}


def held_out(system, stories, vocab, steps):
    b = to_batch(stories, vocab, system.cfg.corpus.max_len)
    g = generate(system, b.attrs, SamplerConfig(steps, GuidanceConfig(system.cfg.guidance.w, system.cfg.guidance.p_unguide)),
                 b.story_ids)
    hyp = [[vocab.detokenize(p) for p in story] for story in g.panels]
    return score(hyp, [[p.caption for p in s.panels] for s in stories], b.story_ids)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--steps", type=int, default=30)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()
    vocab = Vocab(grammar_vocab())
    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        corpus = generate_corpus(toy_config(seed=seed).corpus)
        for name, overrides in SETTINGS.items():
            cfg = toy_config(seed=seed, **{"train.epochs": args.epochs, **overrides})
            system, hist = train_diffusion(cfg, corpus["train"], vocab)
            r = held_out(system, corpus["test"], vocab, args.steps)
            rows.append({"setting": name, "seed": seed, "b1": r.b1, "b4": r.b4, "rouge_l": r.rouge_l,
                         "cider": r.cider, "train_s": hist.seconds})
            print(f"{name:18s} seed {seed}: b1 {r.b1:.4f} b4 {r.b4:.4f}", flush=True)
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for name in SETTINGS:
        sel = [r for r in rows if r["setting"] == name]
        print(f"{name:18s} median b1 {statistics.median(r['b1'] for r in sel):.4f} "
              f"b4 {statistics.median(r['b4'] for r in sel):.4f}")


if __name__ == "__main__":
    main()
