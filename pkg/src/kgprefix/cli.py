"""``kgprefix`` command line: data generation, staged training, generation, evaluation, gradient checks."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import config_hash, load_checkpoint, save_checkpoint
from .config import PRESETS, RunConfig
from .data import SPLITS, generate_synthetic_corpus, load_corpus, save_corpus
from .decoding import BeamConfig, EvalReport, evaluate, generate_split, load_generations, render_table, save_generations
from .exceptions import DependencyError, KgPrefixError
from .gradcheck import run_gradcheck
from .model import PrefixLM
from .training import run_stage

STAGE_NAMES = {
    "base": "base",
    "stage1": "stage1",
    "stage2": "stage2",
    "finetune": "finetune_baseline",
    "prefix-baseline": "prefix_baseline",
}
EXIT_IO = 4


def load_run_config(spec: str) -> RunConfig:
    """A preset name (``toy``, ``paper``) or a path to a config file."""
    if spec in PRESETS:
        return PRESETS[spec]()
    return RunConfig.load(spec)


# --- commands ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    corpus = generate_synthetic_corpus(seed=args.seed, n_conversations=args.n_conversations,
                                       topics=args.topics, turns_per_conv=args.turns)
    save_corpus(corpus, args.out)
    counts = {s: corpus.split(s).n_turns() for s in SPLITS}
    print(json.dumps({"out": str(args.out), "turns": counts}))
    return 0


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    if args.seed is not None:
        rc.seed = args.seed
    corpus = load_corpus(args.corpus)
    stage = STAGE_NAMES[args.stage]
    overrides = {}
    if args.no_interactive:
        # the bag-of-words term is defined on the interaction distribution, so it goes too
        overrides.update(interactive_enabled=False, bow_loss_enabled=False)
    if args.no_bow:
        overrides["bow_loss_enabled"] = False
    if args.prefix_len is not None:
        overrides["prefix_length"] = args.prefix_len
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.max_steps is not None:
        overrides["max_steps"] = args.max_steps
    parent = load_checkpoint(args.parent, config_hash(rc.hashed_sections())) if args.parent else None
    if parent is None and stage != "base":
        needed = {"stage2": "stage1"}.get(stage, "base")
        raise DependencyError(f"stage {args.stage!r} needs a {needed!r} checkpoint (pass --from)")
    log_path = args.log or f"{args.out}.metrics.jsonl"
    result = run_stage(rc.stage(stage, **overrides), corpus, parent, rc, log_path=log_path)
    digest = save_checkpoint(result.checkpoint, args.out)
    last = result.log[-1] if result.log else {}
    print(json.dumps({"stage": stage, "checkpoint": str(args.out), "sha256": digest, "log": str(log_path),
                      "steps": len(result.log), "final_loss": last.get("loss"),
                      "parameters": result.model.parameter_counts()}))
    return 0


def _load_model(path, config: str | None) -> PrefixLM:
    expected = config_hash(load_run_config(config).hashed_sections()) if config else None
    return PrefixLM.from_checkpoint(load_checkpoint(path, expected))


def cmd_generate(args) -> int:
    model = _load_model(args.checkpoint, args.config)
    if model.stage in ("base", "stage1"):
        raise DependencyError(f"generation needs a stage2 or baseline checkpoint, got {model.stage!r}")
    part = load_corpus(args.corpus).split(args.split)
    beam = BeamConfig(args.beam, args.min_len, args.block_ngram, args.max_len)
    rows = generate_split(model, model.examples(part), beam, args.split)
    save_generations(rows, args.out)
    print(json.dumps({"out": str(args.out), "generations": len(rows)}))
    return 0


def cmd_eval(args) -> int:
    part = load_corpus(args.corpus).split(args.split)
    model = _load_model(args.checkpoint, None) if args.checkpoint else None
    name = args.name or (model.stage if model else Path(args.generations).stem)
    if args.time_examples and model is None:
        raise DependencyError("--time-examples needs --checkpoint")
    report = evaluate(load_generations(args.generations), part, name, args.split, model,
                      timing_examples=args.time_examples)
    report.save(args.report)
    print(render_table([report]))
    return 0


def cmd_table(args) -> int:
    reports = []
    for path in args.reports:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        d.pop("trainable_ratio", None)
        reports.append(EvalReport(**d))
    print(render_table(reports))
    return 0


def cmd_gradcheck(args) -> int:
    rc = load_run_config(args.config)
    results, seconds = run_gradcheck(rc, eps=args.eps, seed=args.seed, fault=args.inject_fault,
                                     max_coords=args.max_coords)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name:<24} {r.error:.3e} (tol {r.tolerance:.0e})")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} components passed in {seconds:.1f}s")
    if failed:
        print("failing components: " + ", ".join(failed), file=sys.stderr)
        return 5
    return 0


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kgprefix", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic knowledge-grounded corpus")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--n-conversations", type=int, default=320)
    g.add_argument("--topics", type=int, default=16)
    g.add_argument("--turns", type=int, default=3)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True, choices=sorted(STAGE_NAMES))
    t.add_argument("--config", default="toy", help="preset name or config file")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--from", dest="parent", help="prerequisite checkpoint")
    t.add_argument("--no-interactive", action="store_true")
    t.add_argument("--no-bow", action="store_true")
    t.add_argument("--prefix-len", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--log", help="metrics JSONL path (default: <out>.metrics.jsonl)")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("generate", help="beam-search responses for a corpus split")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--corpus", required=True)
    q.add_argument("--split", default="test_seen", choices=SPLITS)
    q.add_argument("--beam", type=int, default=3)
    q.add_argument("--min-len", type=int, default=20)
    q.add_argument("--block-ngram", type=int, default=3)
    q.add_argument("--max-len", type=int, default=40)
    q.add_argument("--config", help="verify the checkpoint against this config")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_generate)

    e = sub.add_parser("eval", help="score generations (PPL and counts need --checkpoint)")
    e.add_argument("--generations", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="test_seen", choices=SPLITS)
    e.add_argument("--report", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--name")
    e.add_argument("--time-examples", type=int, default=0,
                   help="also time generation on this many turns (makes the report non-reproducible)")
    e.set_defaults(func=cmd_eval)

    tb = sub.add_parser("table", help="render saved reports as one table")
    tb.add_argument("reports", nargs="+")
    tb.set_defaults(func=cmd_table)

    c = sub.add_parser("gradcheck", help="finite-difference check of primitives and the full loss")
    c.add_argument("--config", default="toy")
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--max-coords", type=int, default=6)
    c.add_argument("--inject-fault", help=argparse.SUPPRESS)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except KgPrefixError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
