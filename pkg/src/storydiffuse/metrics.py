"""Corpus-level NLG metrics over whitespace-tokenized strings.

One reference per hypothesis.  BLEU is corpus BLEU without smoothing;
ROUGE-L is the LCS F-measure with beta = 1.2 averaged over pairs; CIDEr is
TF-IDF n-gram cosine (n = 1..4) with document frequencies taken from the
reference corpus, averaged over n and scaled by 10.
"""
from __future__ import annotations

import math
import warnings
from collections import Counter
from typing import Sequence


class MetricError(ValueError):
    pass


def _tok(s) -> list[str]:
    return s.split() if isinstance(s, str) else list(s)


def _check(hyps, refs) -> None:
    if len(hyps) == 0:
        raise MetricError("empty corpus")
    if len(hyps) != len(refs):
        raise MetricError(f"{len(hyps)} hypotheses vs {len(refs)} references")


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hyps: Sequence[str], refs: Sequence[str], max_n: int = 4) -> float:
    _check(hyps, refs)
    match = [0] * max_n
    total = [0] * max_n
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        h, r = _tok(h), _tok(r)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = ngrams(h, n), ngrams(r, n)
            match[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0 or min(match) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(match, total)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(hyp, ref, beta: float = 1.2) -> float:
    h, r = _tok(hyp), _tok(ref)
    if not h or not r:
        return 0.0
    lcs = lcs_length(h, r)
    if lcs == 0:
        return 0.0
    p, rec = lcs / len(h), lcs / len(r)
    return (1 + beta**2) * p * rec / (rec + beta**2 * p)


def rouge_l(hyps: Sequence[str], refs: Sequence[str], beta: float = 1.2) -> float:
    _check(hyps, refs)
    return sum(rouge_l_pair(h, r, beta) for h, r in zip(hyps, refs)) / len(hyps)


def cider_per_doc(hyps: Sequence[str], refs: Sequence[str], max_n: int = 4) -> list[float]:
    _check(hyps, refs)
    n_docs = len(refs)
    if n_docs == 1:
        warnings.warn("CIDEr on a single-document corpus: every IDF is log(1) = 0, score is 0", stacklevel=2)
    ref_grams = [[ngrams(_tok(r), n) for n in range(1, max_n + 1)] for r in refs]
    hyp_grams = [[ngrams(_tok(h), n) for n in range(1, max_n + 1)] for h in hyps]
    df = [Counter() for _ in range(max_n)]
    for doc in ref_grams:
        for n in range(max_n):
            df[n].update(doc[n].keys())
    log_n = math.log(float(n_docs))

    def vec(counts: Counter, n: int) -> dict:
        return {g: c * (log_n - math.log(max(1.0, df[n][g]))) for g, c in counts.items()}

    scores = []
    for hg, rg in zip(hyp_grams, ref_grams):
        per_n = []
        for n in range(max_n):
            vh, vr = vec(hg[n], n), vec(rg[n], n)
            nh = math.sqrt(sum(v * v for v in vh.values()))
            nr = math.sqrt(sum(v * v for v in vr.values()))
            if nh == 0 or nr == 0:
                per_n.append(0.0)
                continue
            dot = sum(v * vr.get(g, 0.0) for g, v in vh.items())
            per_n.append(dot / (nh * nr))
        scores.append(10.0 * sum(per_n) / max_n)
    return scores


def cider(hyps: Sequence[str], refs: Sequence[str], max_n: int = 4) -> float:
    s = cider_per_doc(hyps, refs, max_n)
    return sum(s) / len(s)


def all_metrics(hyps: Sequence[str], refs: Sequence[str]) -> dict[str, float]:
    return {
        "b1": bleu(hyps, refs, 1),
        "b4": bleu(hyps, refs, 4),
        "rouge_l": rouge_l(hyps, refs),
        "cider": cider(hyps, refs),
    }
