"""Command-line entry point: gen, train1, train2, eval, bound, sweep.

Exit codes: 0 success, 2 bad input (missing file, parse or dimension error,
invalid spec), 3 training divergence, 4 bound check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np

from .core_model import DimensionError, check_compatible
from .evaluation import budget_sweep, evaluate, verify_irreducibility
from .io import (
    SchemaError,
    read_checkpoint,
    read_corpus,
    read_rated_items,
    read_spec,
    write_checkpoint,
    write_corpus,
    write_json,
    write_manifest,
    write_rows_csv,
    write_spec,
)
from .population import InvalidSpecError, binarize_rated_corpus, make_population, sample_corpus
from .stage1 import NonFiniteGradientError, Stage1Config, TrainingDivergedError, train_stage1
from .stage2 import TAU_PRESETS, BudgetError, MissingContextError, Stage2Config, run_algorithm1, select_budget

log = logging.getLogger("micro_pref")

EXIT_OK, EXIT_INPUT, EXIT_DIVERGED, EXIT_BOUND = 0, 2, 3, 4


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _flags(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _require(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"input file not found: {p}")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    t0 = time.time()
    out = _out_dir(args.out)
    if args.rated_input:
        src = _require(args.rated_input)
        attrs = [a for a in args.attributes.split(",") if a] if args.attributes else []
        if not attrs:
            raise CommandError("--attributes is required with --rated-input")
        corpus = binarize_rated_corpus(read_rated_items(src), attrs, args.exclude_unanimous)
        if not corpus:
            raise CommandError("binarization produced no pairs")
        write_corpus(out / "corpus.jsonl", corpus)
        counts = Counter(ex.attribute for ex in corpus)
        print(f"n={len(corpus)} pairs from {src}; per attribute: {dict(sorted(counts.items()))}")
        write_manifest(out, "gen", _flags(args), time.time() - t0, [str(src)], ["corpus.jsonl"])
        return EXIT_OK

    try:
        spec = make_population(
            args.k,
            args.dim,
            args.rho,
            args.seed,
            prompt_dim=args.prompt_dim,
            head_scale=args.head_scale,
            head_cosine=args.head_cosine,
            shift_scale=args.shift_scale,
            context_noise=args.context_noise,
        )
    except InvalidSpecError as e:
        raise CommandError(f"invalid population: {e}") from None
    corpus = sample_corpus(spec, args.n, with_context=args.with_context, tag=args.tag)
    write_corpus(out / "corpus.jsonl", corpus)
    write_spec(out / "spec.json", spec)
    freq = np.bincount(corpus.group_id, minlength=spec.k) / len(corpus)
    print(f"n={len(corpus)} K={spec.k} rho={spec.rho:g} group frequencies: {np.round(freq, 4).tolist()}")
    write_manifest(out, "gen", _flags(args), time.time() - t0, [], ["corpus.jsonl", "spec.json"])
    return EXIT_OK


def cmd_train1(args) -> int:
    t0 = time.time()
    corpus = read_corpus(_require(args.corpus))
    out = _out_dir(args.out)
    cfg = Stage1Config(
        k=args.k,
        alpha=args.alpha,
        learning_rate=args.lr,
        batch_size=args.batch_size,
        grad_accum_steps=args.grad_accum,
        warmup_ratio=args.warmup_ratio,
        epochs=args.epochs,
        seed=args.seed,
        hidden=args.hidden,
        weight_decay=args.weight_decay,
    )
    try:
        model, history = train_stage1(corpus, cfg)
    except (TrainingDivergedError, NonFiniteGradientError) as e:
        raise CommandError(f"training diverged: {e}", EXIT_DIVERGED) from None
    write_checkpoint(out / "model.json", model, cfg, cfg.seed)
    write_rows_csv(out / "train_log.csv", history, ["step", "mle_loss", "reg_loss", "total_loss", "mean_router_entropy"])
    print(f"trained K={cfg.k} for {len(history)} steps; final total loss {history[-1].total_loss:.5f}")
    write_manifest(out, "train1", cfg, time.time() - t0, [args.corpus], ["model.json", "train_log.csv"])
    return EXIT_OK


def cmd_train2(args) -> int:
    t0 = time.time()
    model, _ = read_checkpoint(_require(args.checkpoint))
    corpus = read_corpus(_require(args.corpus))
    heldout = read_corpus(_require(args.heldout)) if args.heldout else None
    out = _out_dir(args.out)
    tau = TAU_PRESETS[args.tau_preset] if args.tau_preset else args.tau
    cfg = Stage2Config(
        tau=tau,
        budget_per_attribute=args.budget,
        batch_size=args.batch_size,
        epochs=args.epochs,
        recompute_weights_once_per_epoch=not args.recompute_per_batch,
        router_lr=args.router_lr,
        optimizer=args.optimizer,
        seed=args.seed,
    )
    check_compatible(model, corpus)
    sub = select_budget(corpus, args.budget, args.seed)
    adapted, history = run_algorithm1(model, sub, cfg, heldout)
    write_checkpoint(out / "model.json", adapted, cfg, cfg.seed)
    write_rows_csv(out / "adapt_log.csv", history, ["epoch", "mean_soft_label_entropy", "router_ce", "heldout_accuracy"])
    print(f"adapted router on {len(sub)} examples over {cfg.epochs} epochs; final router CE {history[-1].router_ce:.5f}")
    inputs = [args.checkpoint, args.corpus] + ([args.heldout] if args.heldout else [])
    write_manifest(out, "train2", cfg, time.time() - t0, inputs, ["model.json", "adapt_log.csv"])
    return EXIT_OK


def cmd_eval(args) -> int:
    t0 = time.time()
    model, _ = read_checkpoint(_require(args.checkpoint))
    corpus = read_corpus(_require(args.corpus))
    out = _out_dir(args.out)
    report = evaluate(model, corpus)
    write_json(out / "report.json", report.to_dict())
    print(f"average accuracy {report.average_accuracy:.4f} over {report.n_examples} examples; CE {report.ce_loss:.4f}")
    for attr, acc in report.per_attribute_accuracy.items():
        print(f"  {attr}: {acc:.4f} (best head {report.best_head_per_attribute[attr]})")
    write_manifest(out, "eval", _flags(args), time.time() - t0, [args.checkpoint, args.corpus], ["report.json"])
    return EXIT_OK


def cmd_bound(args) -> int:
    t0 = time.time()
    spec = read_spec(_require(args.spec))
    out = _out_dir(args.out)
    report = verify_irreducibility(
        spec, m=args.m, bt_training_budget=args.bt_budget, epochs=args.epochs, restarts=args.restarts, seed=args.seed
    )
    write_json(out / "bound_report.json", report.to_dict())
    print(
        f"bound {report.bound:.5f} (variance {report.variance_term:.5f} + entropy {report.entropy_term:.5f}); "
        f"single-BT CE {report.single_bt_ce:.5f} +/- {report.mc_std_error:.5f}; satisfied={report.satisfied}"
    )
    write_manifest(out, "bound", _flags(args), time.time() - t0, [args.spec], ["bound_report.json"])
    return EXIT_OK if report.satisfied else EXIT_BOUND


def cmd_sweep(args) -> int:
    t0 = time.time()
    model, _ = read_checkpoint(_require(args.checkpoint))
    pool = read_corpus(_require(args.corpus))
    held = read_corpus(_require(args.heldout))
    out = _out_dir(args.out)
    budgets = sorted(int(b) for b in args.budgets.split(","))
    cfg = Stage2Config(tau=args.tau, epochs=args.epochs, router_lr=args.router_lr, optimizer=args.optimizer, seed=args.seed)
    points = budget_sweep(model, pool, held, budgets, cfg, args.repeats)
    write_rows_csv(out / "curve.csv", points, ["budget", "mean_acc", "std_acc"])
    for p in points:
        print(f"budget {p.budget:4d}: {p.mean_acc:.4f} +/- {p.std_acc:.4f}")
    write_manifest(out, "sweep", cfg, time.time() - t0, [args.checkpoint, args.corpus, args.heldout], ["curve.csv"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="micro-pref", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a planted corpus or binarize a rated corpus")
    g.add_argument("--k", type=int, default=2)
    g.add_argument("--dim", type=int, default=8, help="pair feature dimension")
    g.add_argument("--prompt-dim", type=int, default=None, help="prompt feature dimension (default: --dim)")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--rho", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--head-scale", type=float, default=3.0)
    g.add_argument("--head-cosine", type=float, default=None)
    g.add_argument("--shift-scale", type=float, default=0.0)
    g.add_argument("--with-context", action="store_true", help="fill context slots with the annotator group")
    g.add_argument("--context-noise", type=float, default=0.0)
    g.add_argument("--tag", default="corpus", help="stream tag; different tags give disjoint draws")
    g.add_argument("--rated-input", default=None, help="JSONL of rated responses to binarize")
    g.add_argument("--attributes", default=None, help="comma-separated attributes for --rated-input")
    g.add_argument("--exclude-unanimous", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train1", help="stage-1 mixture training")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--k", type=int, default=2)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--alpha", type=float, default=0.5)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--grad-accum", type=int, default=8)
    t.add_argument("--warmup-ratio", type=float, default=0.05)
    t.add_argument("--hidden", type=int, default=128)
    t.add_argument("--weight-decay", type=float, default=0.0)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train1)

    r = sub.add_parser("train2", help="stage-2 router adaptation (Hedge soft labels)")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--corpus", required=True, help="context-annotated corpus")
    r.add_argument("--heldout", default=None)
    r.add_argument("--out", required=True)
    r.add_argument("--tau", type=float, default=1e-3)
    r.add_argument("--tau-preset", choices=sorted(TAU_PRESETS), default=None)
    r.add_argument("--budget", type=int, default=50, help="examples per context group")
    r.add_argument("--batch-size", type=int, default=32)
    r.add_argument("--epochs", type=int, default=10)
    r.add_argument("--router-lr", type=float, default=1e-2)
    r.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    r.add_argument("--recompute-per-batch", action="store_true", help="refresh soft labels every minibatch")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_train2)

    e = sub.add_parser("eval", help="accuracy report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bound", help="check the single-BT lower bound on a population spec")
    b.add_argument("--spec", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--m", type=int, default=20000)
    b.add_argument("--bt-budget", type=int, default=20000)
    b.add_argument("--epochs", type=int, default=3)
    b.add_argument("--restarts", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bound)

    s = sub.add_parser("sweep", help="stage-2 accuracy versus context budget")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--heldout", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--budgets", default="5,10,20,50,100")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--tau", type=float, default=1e-3)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--router-lr", type=float, default=1e-2)
    s.add_argument("--optimizer", choices=["sgd", "adam"], default="sgd")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CommandError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (DimensionError, SchemaError, InvalidSpecError, MissingContextError, BudgetError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingDivergedError, NonFiniteGradientError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
