"""Command-line entry point: ``storydiffuse <command> [flags]``.

Progress goes to standard error; results go to files only.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import ConfigFieldError, RunConfig, toy_config
from .dataset import PRESETS, Vocab, generate_corpus, load_corpus_config, load_split, to_batch, write_corpus
from .eval import REPORT_FIELDS, DataError, append_csv, evaluate_generations, evaluate_run, generation_records, \
    write_generations
from .fusion import GuidanceConfig
from .metrics import MetricError
from .nncore import ConfigError, NumericError
from .nncore.checkpoint import CheckpointError
from .sampler import SamplerConfig, benchmark_generate, generate

log = logging.getLogger("storydiffuse")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

W_GRID = (0.0, 0.3, 0.5, 0.7, 1.0)
P_GRID = (0.3, 0.5, 0.7)
STEPS_GRID = (1, 2, 5, 10, 20, 30)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x)


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.split(",") if x)


# config resolution -------------------------------------------------------------


def resolve_config(args) -> RunConfig:
    """Config file (or the desk-scale preset) with flag overrides on top."""
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file {path} not found")
        cfg = RunConfig.load(path)
        if getattr(args, "preset", None):
            cfg = cfg.replace(**{f"corpus.{k}": v for k, v in _preset_fields(args.preset).items()})
    else:
        cfg = toy_config(getattr(args, "preset", None) or "pororo-like", seed=0)
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
        over["corpus.seed"] = args.seed
    if getattr(args, "w", None) is not None:
        over["guidance.w"] = args.w
    if getattr(args, "p_unguide", None) is not None:
        over["guidance.p_unguide"] = args.p_unguide
    if getattr(args, "steps", None) is not None:
        over["sampler.steps"] = args.steps
    if getattr(args, "epochs", None) is not None:
        over["train.epochs"] = args.epochs
    cfg = cfg.replace(**over) if over else cfg
    try:
        cfg.corpus.validate()
        GuidanceConfig(cfg.guidance.w, cfg.guidance.p_unguide)
    except ValueError as e:
        raise UsageError(str(e)) from None
    return cfg


def _preset_fields(name: str) -> dict:
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}")
    return dict(PRESETS[name], preset=name)


def _fresh_dir(path) -> Path:
    """Run directories are append-only: refuse to reuse a non-empty one."""
    p = Path(path)
    if p.exists() and any(p.iterdir()):
        raise UsageError(f"{p} already exists and is not empty; choose a new --out")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _fresh_file(path) -> Path:
    p = Path(path)
    if p.exists():
        raise UsageError(f"{p} already exists; choose a new --out")
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _progress(epoch, means):
    log.info("epoch %d %s", epoch + 1, " ".join(f"{k}={v:.4f}" for k, v in means.items()))


# run loading ---------------------------------------------------------------------


def load_system(run_dir):
    from .baseline import ARSystem
    from .nncore.checkpoint import load_meta
    from .train import DiffusionSystem

    ck = Path(run_dir) / "checkpoint"
    if not ck.exists():
        raise DataError(f"{run_dir} has no checkpoint/")
    kind = load_meta(ck).get("model_type", "diffusion")
    return (ARSystem if kind == "ar" else DiffusionSystem).load(ck)


def _corpus_vocab(corpus_dir) -> Vocab:
    path = Path(corpus_dir) / "vocab.txt"
    if not path.exists():
        raise DataError(f"{corpus_dir} has no vocab.txt")
    return Vocab.load(path)


def run_generation(system, stories, vocab, steps: int, w: float, seed: int, teacher: bool = False):
    """Generate every story; returns (records, seconds)."""
    from .baseline import ar_generate

    batch = to_batch(stories, vocab, system.cfg.corpus.max_len)
    t0 = time.perf_counter()
    if system.model_type == "ar":
        gen = ar_generate(system, batch.attrs)
        steps_out, w_out = None, None
    else:
        scfg = SamplerConfig(
            steps=steps,
            guidance=GuidanceConfig(w, system.cfg.guidance.p_unguide),
            text_guidance_source="teacher" if teacher else system.cfg.sampler.text_guidance_source,
            seed=seed,
            rule=system.cfg.sampler.rule,
            clamp=system.cfg.sampler.clamp,
        )
        gen = generate(system, batch.attrs, scfg, batch.story_ids, batch.tokens if teacher else None)
        steps_out, w_out = steps, w
    seconds = time.perf_counter() - t0
    texts = [[vocab.detokenize(p) for p in story] for story in gen.panels]
    records = generation_records(stories, texts, steps=steps_out, w=w_out, seed=seed,
                                 model_type=system.model_type, p_unguide=system.cfg.guidance.p_unguide)
    return records, seconds


def train_run(cfg: RunConfig, corpus_dir, out_dir, model: str = "diffusion") -> Path:
    from .baseline import ar_train
    from .train import train_diffusion

    vocab = _corpus_vocab(corpus_dir)
    ccfg = load_corpus_config(corpus_dir)
    if (ccfg.n_panels, ccfg.max_len) != (cfg.corpus.n_panels, cfg.corpus.max_len):
        raise DataError(
            f"corpus has {ccfg.n_panels} panels of {ccfg.max_len} tokens; config expects "
            f"{cfg.corpus.n_panels} of {cfg.corpus.max_len}"
        )
    stories = load_split(corpus_dir, "train")
    out = _fresh_dir(out_dir)
    cfg.save(out / "config.json")
    if model == "ar":
        system, hist = ar_train(cfg, stories, vocab, out / "train_log.csv", _progress)
        summary = {"model_type": "ar", "seconds": hist.seconds, "epoch_means": hist.epoch_means}
    else:
        system, hist = train_diffusion(cfg, stories, vocab, out / "train_log.csv", _progress)
        summary = {"model_type": "diffusion", "seconds": hist.seconds, "epoch_means": hist.epoch_means}
    system.save(out / "checkpoint")
    (out / "history.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


# commands ------------------------------------------------------------------------


def cmd_dataset(args) -> int:
    cfg = resolve_config(args)
    out = _fresh_dir(args.out)
    corpus = generate_corpus(cfg.corpus)
    write_corpus(corpus, cfg.corpus, out)
    log.info("wrote %s", ", ".join(f"{k}={len(v)}" for k, v in corpus.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    train_run(cfg, args.corpus, args.out, args.model)
    return EXIT_OK


def cmd_generate(args) -> int:
    system = load_system(args.run)
    vocab = _corpus_vocab(args.corpus)
    stories = load_split(args.corpus, args.split)
    if args.limit:
        stories = stories[: args.limit]
    steps = args.steps if args.steps is not None else system.cfg.sampler.steps
    w = args.w if args.w is not None else system.cfg.guidance.w
    seed = args.seed if args.seed is not None else system.cfg.seed
    out = _fresh_file(args.out)
    records, seconds = run_generation(system, stories, vocab, steps, w, seed, args.teacher)
    per_story = seconds / len(stories)
    if args.record_time:
        for r in records:
            r["wall_seconds"] = per_story
    write_generations(out, records)
    timing = {"total_seconds": seconds, "mean_seconds_per_story": per_story, "n_stories": len(stories)}
    Path(str(out) + ".timing.json").write_text(json.dumps(timing, indent=2) + "\n", encoding="utf-8")
    log.info("generated %d stories in %.2fs", len(stories), seconds)
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _fresh_file(args.out)
    report = evaluate_run(args.generations, args.corpus, out, args.split)
    if args.csv:
        append_csv(args.csv, [report.csv_row()])
    log.info("b1=%.4f b4=%.4f rouge_l=%.4f cider=%.4f", report.b1, report.b4, report.rouge_l, report.cider)
    return EXIT_OK


def cmd_sweep(args) -> int:
    out = _fresh_dir(args.out)
    table = out / "sweep.csv"
    split = args.split
    vocab = _corpus_vocab(args.corpus)
    stories = load_split(args.corpus, split)
    if args.limit:
        stories = stories[: args.limit]
    rows = []
    if args.steps_grid:
        if not args.run:
            raise UsageError("--steps-grid sweeps an existing --run")
        system = load_system(args.run)
        seed = args.seed if args.seed is not None else system.cfg.seed
        w = args.w if args.w is not None else system.cfg.guidance.w
        for steps in _ints(args.steps_grid):
            records, secs = run_generation(system, stories, vocab, steps, w, seed, args.teacher)
            write_generations(out / f"gen_steps{steps}.jsonl", records)
            row = evaluate_generations(records, stories).csv_row()
            row["seconds_per_story"] = secs / len(stories)
            rows.append(row)
            log.info("steps=%d b1=%.4f", steps, row["b1"])
    else:
        cfg = resolve_config(args)
        w_grid = _floats(args.w_grid) if args.w_grid else W_GRID
        p_grid = _floats(args.p_grid) if args.p_grid else P_GRID
        for p in p_grid:
            run = train_run(cfg.replace(**{"guidance.p_unguide": p}), args.corpus, out / f"run_p{p}")
            system = load_system(run)
            for w in w_grid:
                records, secs = run_generation(system, stories, vocab, system.cfg.sampler.steps, w, cfg.seed,
                                               teacher=not args.masked)
                write_generations(out / f"gen_p{p}_w{w}.jsonl", records)
                row = evaluate_generations(records, stories).csv_row()
                row["seconds_per_story"] = secs / len(stories)
                rows.append(row)
                log.info("p_unguide=%s w=%s b1=%.4f b4=%.4f", p, w, row["b1"], row["b4"])
    append_csv(table, rows, REPORT_FIELDS + ["seconds_per_story"])
    return EXIT_OK


BENCH_FIELDS = ["model", "steps", "mean_seconds", "std_seconds", "n_samples", "forward_passes", "parameters"]


def cmd_bench(args) -> int:
    from .baseline import ar_generate

    out = _fresh_file(args.out)
    diff = load_system(args.run_diffusion)
    ar = load_system(args.run_ar)
    if diff.model_type != "diffusion" or ar.model_type != "ar":
        raise UsageError("--run-diffusion and --run-ar must point at a diffusion and an AR run")
    stories = load_split(args.corpus, args.split)[: args.n_stories]
    vocab = _corpus_vocab(args.corpus)
    batch = to_batch(stories, vocab, diff.cfg.corpus.max_len)
    steps = args.steps if args.steps is not None else 10
    scfg = SamplerConfig(steps=steps, guidance=GuidanceConfig(diff.cfg.guidance.w, diff.cfg.guidance.p_unguide),
                         seed=diff.cfg.seed)
    attrs = list(batch.attrs)
    rep_d = benchmark_generate(attrs, lambda a: generate(diff, a, scfg), args.warmup, steps)
    rep_a = benchmark_generate(attrs, lambda a: ar_generate(ar, a), args.warmup)
    rows = [
        {"model": "diffusion", "steps": steps, "mean_seconds": rep_d.mean_seconds, "std_seconds": rep_d.std_seconds,
         "n_samples": rep_d.n_samples, "forward_passes": rep_d.forward_passes,
         "parameters": sum(p.data.size for p in diff.trainable_parameters())},
        {"model": "ar", "steps": None, "mean_seconds": rep_a.mean_seconds, "std_seconds": rep_a.std_seconds,
         "n_samples": rep_a.n_samples, "forward_passes": rep_a.forward_passes,
         "parameters": sum(p.data.size for p in ar.trainable_parameters())},
    ]
    append_csv(out, rows, BENCH_FIELDS)
    log.info("speedup %.2fx (ar %.4fs vs diffusion %.4fs per story)", rep_a.mean_seconds / rep_d.mean_seconds,
             rep_a.mean_seconds, rep_d.mean_seconds)
    return EXIT_OK


# parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="storydiffuse", description="Diffusion visual storytelling at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="RunConfig JSON; defaults to the desk-scale preset")
        sp.add_argument("--preset", choices=sorted(PRESETS))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True, help=out_help)

    sp = sub.add_parser("dataset", help="generate a synthetic corpus")
    common(sp, "corpus directory")
    sp.set_defaults(func=cmd_dataset)

    sp = sub.add_parser("train", help="train a diffusion model or the AR baseline")
    common(sp, "new run directory")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--model", choices=("diffusion", "ar"), default="diffusion")
    sp.add_argument("--w", type=float)
    sp.add_argument("--p-unguide", type=float, dest="p_unguide")
    sp.add_argument("--steps", type=int, help="default inference steps stored with the run")
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="write generation JSONL for a split")
    sp.add_argument("--run", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--w", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--teacher", action="store_true", help="evaluation-only ground-truth text guidance")
    sp.add_argument("--limit", type=int, default=0)
    sp.add_argument("--record-time", action="store_true",
                    help="store wall_seconds in each record (output is then not byte-reproducible)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("eval", help="score a generation file")
    sp.add_argument("--generations", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--csv", help="append a summary row to this CSV")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="w x p_unguide grid (trains one run per p) or a steps grid")
    sp.add_argument("--config")
    sp.add_argument("--preset", choices=sorted(PRESETS))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--run", help="existing run for --steps-grid")
    sp.add_argument("--w-grid")
    sp.add_argument("--p-grid")
    sp.add_argument("--steps-grid")
    sp.add_argument("--w", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--split", default="test")
    sp.add_argument("--limit", type=int, default=0)
    sp.add_argument("--teacher", action="store_true")
    sp.add_argument("--masked", action="store_true", help="w grid with masked guidance (w has no effect)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("bench", help="per-story generation time, diffusion vs AR")
    sp.add_argument("--run-diffusion", required=True)
    sp.add_argument("--run-ar", required=True)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--n-stories", type=int, default=20)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigFieldError, ConfigError) as e:
        print(f"storydiffuse: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"storydiffuse: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, MetricError, FileNotFoundError, KeyError) as e:
        print(f"storydiffuse: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
