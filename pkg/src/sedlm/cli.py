"""``sedlm`` command line: generate, train, eval, ab, schedule.

Exit codes: 0 success, 1 internal failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from sedlm import config as cfgmod
from sedlm.config import ConfigError, RunConfig
from sedlm.schedule import ScheduleParams, format_curve, schedule_curve
from sedlm.synthdata import make_corpus, read_corpus, write_corpus
from sedlm.trainer import (
    Checkpoint, TrainingDiverged, ab_experiment, ab_table, evaluate, train,
)

RUN_CONFIG = "run.cfg"


class UsageError(Exception):
    pass


def _load_config(path) -> RunConfig:
    return cfgmod.load(path) if path else RunConfig()


def _train_overrides(cfg: RunConfig, args) -> RunConfig:
    values = {}
    for key in ("lr", "seed", "patience", "batch_size", "max_epochs"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if getattr(args, "clip", None) is not None:
        values["clip"] = None if args.clip <= 0 else args.clip
    if values:
        cfg = cfgmod.apply_overrides(cfg, "train", values)
    if getattr(args, "conditioning", None):
        cfg = cfgmod.apply_overrides(cfg, "model", {"conditioning": args.conditioning})
    return cfg


def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    values = {"kind": args.kind}
    if args.n_sequences is not None:
        values["n_sequences"] = args.n_sequences
    cfg = cfgmod.apply_overrides(cfg, "corpus", values)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        corpus = make_corpus(cfg.corpus, seed=args.seed)
        manifest = write_corpus(corpus, out)
    except OSError as exc:
        raise UsageError(f"cannot write corpus to {out}: {exc}") from None
    print(f"wrote {len(corpus.train)}/{len(corpus.val)}/{len(corpus.test)} train/val/test sequences; "
          f"manifest {manifest}")
    return 0


def _echo(rec) -> None:
    print(rec.line(), end="", flush=True)


def cmd_train(args) -> int:
    cfg = _train_overrides(_load_config(args.config), args)
    corpus = read_corpus(args.data)
    if corpus.n_classes != cfg.model.n_classes:
        raise UsageError(f"corpus has {corpus.n_classes} classes but the config sets n_classes={cfg.model.n_classes}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RUN_CONFIG).write_text(cfgmod.dumps(cfg))
    result = train(cfg.train, corpus, on_epoch=_echo if args.verbose else None)
    result.best.save(out / "best.sedm")
    result.last.save(out / "last.sedm")
    (out / "train.log").write_text(result.log.render())
    report = evaluate(result.best, cfg.model, corpus.train, cfg.train.batch_size)
    print(f"trained {len(result.log.epochs)} epochs, best epoch {result.log.best_epoch}; "
          f"checkpoint {out / 'best.sedm'}")
    print(f"train-split f1={report.f1:.6f} er={report.er:.6f}")
    return 0


def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        raise UsageError(f"checkpoint {ckpt_path} does not exist")
    cfg_path = Path(args.config) if args.config else ckpt_path.parent / RUN_CONFIG
    cfg = cfgmod.load(cfg_path)
    ckpt = Checkpoint.load(ckpt_path)
    corpus = read_corpus(args.data)
    if corpus.n_classes != cfg.model.n_classes:
        raise UsageError(f"corpus has {corpus.n_classes} classes, checkpoint model has {cfg.model.n_classes}")
    try:
        report = evaluate(ckpt, cfg.model, corpus.split(args.split), cfg.train.batch_size)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sys.stdout.write(report.table())
    sys.stdout.write(report.key_values())
    return 0


def cmd_ab(args) -> int:
    if args.seeds < 3:
        raise UsageError(f"--seeds must be at least 3, got {args.seeds}")
    cfg = _load_config(args.config or cfgmod.shipped("ab"))
    if args.max_epochs is not None:
        cfg = cfgmod.apply_overrides(cfg, "train", {"max_epochs": args.max_epochs})
    seeds = list(range(args.first_seed, args.first_seed + args.seeds))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(kind, arm, seed, res):
        print(f"{kind:<13}{arm:<10}seed={seed} f1={res[0]:.4f} er={res[1]:.4f}", flush=True)

    cells = ab_experiment(cfg.train, cfg.corpus, seeds, workers=args.workers, progress=progress)
    table = ab_table(cells)
    (out / "ab_table.txt").write_text(table)
    rows = ["corpus\tarm\tseed\tf1\ter\n"]
    for (kind, arm), cell in cells.items():
        for s, f, e in zip(seeds, cell.f1, cell.er):
            rows.append(f"{kind}\t{arm}\t{s}\t{f:.6f}\t{e:.6f}\n")
    (out / "ab_runs.tsv").write_text("".join(rows))
    (out / RUN_CONFIG).write_text(cfgmod.dumps(cfg))
    sys.stdout.write(table)
    return 0


def cmd_schedule(args) -> int:
    try:
        params = ScheduleParams(args.gamma, args.pmin, args.pmax, args.nb)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.updates < 0:
        raise UsageError("--updates must be >= 0")
    text = format_curve(schedule_curve(params, args.updates))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _fraction(text: str) -> float:
    from fractions import Fraction
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sedlm", description=__doc__.splitlines()[0],
        epilog=cfgmod.defaults_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic corpus (features, annotations, manifest)")
    g.add_argument("--kind", required=True, choices=["structured", "unstructured"])
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config")
    g.add_argument("--n-sequences", type=int, dest="n_sequences")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a generated corpus")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--lr", type=float)
    t.add_argument("--clip", type=float, help="per-layer l2 gradient clip (<= 0 disables)")
    t.add_argument("--seed", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--max-epochs", type=int, dest="max_epochs")
    t.add_argument("--conditioning", choices=["off", "ground_truth", "scheduled", "predictions"])
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="frame F1 / ER of a checkpoint on a corpus split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.add_argument("--config", help=f"run config (default: {RUN_CONFIG} next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ab", help="baseline vs scheduled conditioning on structured/unstructured corpora")
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--first-seed", type=int, default=0, dest="first_seed")
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="run config (default: the shipped ab.cfg)")
    a.add_argument("--workers", type=int, default=1)
    a.add_argument("--max-epochs", type=int, dest="max_epochs")
    a.set_defaults(func=cmd_ab)

    s = sub.add_parser("schedule", help="tabulate the teacher-forcing probability per weight update")
    s.add_argument("--gamma", type=_fraction, default=1.0 / 12.0)
    s.add_argument("--pmin", type=float, default=0.05)
    s.add_argument("--pmax", type=float, default=0.9)
    s.add_argument("--nb", type=int, default=44, help="batches per epoch")
    s.add_argument("--updates", type=int, default=4400)
    s.add_argument("--out")
    s.set_defaults(func=cmd_schedule)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"sedlm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"sedlm {args.command}: training diverged: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logging.getLogger(__name__).debug("internal failure", exc_info=True)
        print(f"sedlm {args.command}: internal error: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
