"""Command-line entry point: ``liestate {train,eval,verify,sweep,trace}``.

Machine-readable output goes to stdout as one JSON record per line; the
human-readable summary goes to stderr.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 data error, 4 numeric abort, 5 checkpoint mismatch.
"""
import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import config as cfgmod
from . import models
from .diagnostics import trace_run, write_trace
from .errors import (CheckpointError, ConfigError, DataError, LieStateError, NumericAbort,
                     NumericRangeError)
from .training import Corpus, TrainConfig, count_params, evaluate, format_record, train
from .verify import CORRUPTIONS, run_verify

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5

SWEEP_DIMS = range(1, 65)
SWEEP_MAX_GAP = 0.25  # relative distance beyond which a budget counts as unreachable

log = logging.getLogger("liestate")


def _emit(record, stream=None):
    stream = stream or sys.stdout
    stream.write(json.dumps(record) + "\n")
    stream.flush()


def _say(text):
    sys.stderr.write(text + "\n")


def _load_corpus(run):
    if run.data_path is None:
        raise ConfigError("data.path: required")
    return Corpus.from_file(run.data_path, **run.corpus_kwargs())


def _checkpoint_config(model, run, corpus):
    return {"model": model.config(), "train": run.train.to_dict(), "data": run.data_config(),
            "vocab": corpus.vocab}


def _train_one(run, corpus, out_dir, echo=True):
    """Train per ``run`` into ``out_dir``; returns the summary record."""
    model = run.build_model(corpus.vocab_size)
    counts = count_params(model)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    ckpt_path = out_dir / "best.ckpt"
    meta_config = _checkpoint_config(model, run, corpus)

    def on_best(state):
        meta = {"epoch": state.best_epoch, "best_val_bpc": state.best_val_bpc}
        ckpt.save(ckpt_path, meta_config, state.best_params, state.best_opt, meta)

    with open(metrics_path, "w", encoding="utf-8") as fh:
        def on_record(rec):
            line = format_record(rec)
            fh.write(line + "\n")
            fh.flush()
            if echo:
                sys.stdout.write(line + "\n")

        with open(out_dir / "traces.jsonl", "w", encoding="utf-8") as trace_fh:
            probe = corpus.split("val")[: run.train.seq_len]
            last_traced = [-1]  # skipped steps leave step_count unchanged

            def on_step(trainer):
                every = run.train.trace_every
                if every and trainer.step_count % every == 0 and trainer.step_count != last_traced[0]:
                    last_traced[0] = trainer.step_count
                    for rec in trace_run(model, trainer.params, probe):
                        trace_fh.write(json.dumps(dict(rec, step=trainer.step_count)) + "\n")

            result = train(model, corpus, run.train, on_record=on_record, on_best=on_best,
                           on_step=on_step)

    summary = {
        "best_val_bpc": result.best_val_bpc,
        "test_bpc": result.test_bpc,
        "param_count": counts["total"],
        "seed": run.seed,
        "params_by_component": {k: v for k, v in counts.items() if k != "total"},
        "best_epoch": result.best_epoch,
        "epochs": result.epochs,
        "steps": result.steps,
        "skipped_steps": result.skipped_steps,
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
        fh.write(json.dumps(summary) + "\n")
    return summary


def cmd_train(args):
    run = cfgmod.load_config(args.config)
    corpus = _load_corpus(run)
    summary = _train_one(run, corpus, run.output_dir)
    _emit(summary)
    _say(f"trained {run.model['kind']} on {run.model['family']}({run.model['d']}): "
         f"{summary['param_count']} params, best val {summary['best_val_bpc']:.4f} BPC "
         f"(epoch {summary['best_epoch']}), test {summary['test_bpc']:.4f} BPC; "
         f"outputs in {run.output_dir}")
    return EXIT_OK


def _restore(path):
    config, params, _, meta = ckpt.load(path)
    try:
        model = models.build_model(config["model"])
        train_cfg = TrainConfig(**config["train"])
        vocab = list(config["vocab"])
        data = config["data"]
    except (KeyError, TypeError, LieStateError) as exc:
        raise CheckpointError(f"checkpoint config unusable: {exc}") from exc
    if set(params) != set(model.param_shapes()):
        raise CheckpointError("checkpoint parameters do not match its model config")
    return model, params, train_cfg, vocab, data, meta


def _corpus_for(path, vocab, data):
    kw = {"offsets": tuple(data["offsets"])} if data.get("offsets") else {"fractions": tuple(data["splits"])}
    corpus = Corpus.from_file(path, **kw)
    if corpus.vocab != vocab:
        raise CheckpointError(f"corpus vocabulary ({corpus.vocab_size} symbols) does not match "
                              f"the checkpoint vocabulary ({len(vocab)} symbols)")
    return corpus


def cmd_eval(args):
    model, params, train_cfg, vocab, data, _ = _restore(args.ckpt)
    corpus = _corpus_for(args.data, vocab, data)
    bpc = evaluate(model, params, corpus, args.split, train_cfg.seq_len, train_cfg.eval_batch_size)
    record = {"split": args.split, "bpc": bpc, "param_count": count_params(model)["total"]}
    _emit(record)
    _say(f"{args.split} BPC {bpc:.6f} ({record['param_count']} params)")
    return EXIT_OK


def cmd_trace(args):
    model, params, _, vocab, data, _ = _restore(args.ckpt)
    corpus = _corpus_for(args.data, vocab, data)
    ids = corpus.split(args.split)[: args.length]
    if len(ids) == 0:
        raise DataError(f"{args.split} split is empty")
    write_trace(trace_run(model, params, ids), sys.stdout)
    return EXIT_OK


def cmd_verify(args):
    results = run_verify(args.level, corrupt=args.corrupt, out=sys.stderr)
    for res in results:
        _emit(res.record())
    failed = [r.name for r in results if not r.passed]
    if failed:
        _say(f"verify {args.level}: {len(failed)} of {len(results)} checks FAILED: {', '.join(failed)}")
        return EXIT_VERIFY
    _say(f"verify {args.level}: all {len(results)} checks passed")
    return EXIT_OK


def parse_budgets(text):
    """``"5K,20K"`` or ``"5000 20000"`` -> ``[5000, 20000]``."""
    out = []
    for tok in text.replace(",", " ").split():
        mult = 1
        if tok[-1] in "kKmM":
            mult = 1000 if tok[-1] in "kK" else 1_000_000
            tok = tok[:-1]
        try:
            value = float(tok) * mult
        except ValueError:
            raise ConfigError(f"budgets: cannot parse {tok!r}") from None
        if value <= 0 or value != int(value):
            raise ConfigError(f"budgets: need positive integer counts, got {tok!r}")
        out.append(int(value))
    if not out:
        raise ConfigError("budgets: empty list")
    return out


def choose_dim(model_cfg, vocab_size, budget, dims=SWEEP_DIMS):
    """Matrix size whose total parameter count is closest to ``budget``.

    Returns ``(d, count)``; ties go to the smaller model.
    """
    best = None
    for d in dims:
        n = count_params(models.build_model(dict(model_cfg, d=d, vocab_size=vocab_size)))["total"]
        key = (abs(n - budget), n)
        if best is None or key < best[0]:
            best = (key, d, n)
        if n > 2 * budget:
            break
    return best[1], best[2]


def cmd_sweep(args):
    run = cfgmod.load_config(args.config)
    budgets = parse_budgets(args.budgets)
    corpus = _load_corpus(run)
    rows = []
    for budget in budgets:
        d, n = choose_dim(run.model, corpus.vocab_size, budget)
        gap = abs(n - budget) / budget
        if gap > SWEEP_MAX_GAP:
            note = f"closest config d={d} has {n} params ({gap:.0%} away); skipped"
            _emit({"budget": budget, "skipped": True, "note": note})
            _say(f"budget {budget}: {note}")
            continue
        sub = dataclasses.replace(run, model=dict(run.model, d=d))
        summary = _train_one(sub, corpus, run.output_dir / f"budget-{budget}", echo=False)
        row = {"budget": budget, "d": d, "params": summary["param_count"],
               "val_bpc": summary["best_val_bpc"], "test_bpc": summary["test_bpc"]}
        rows.append(row)
        _emit(row)
    run.output_dir.mkdir(parents=True, exist_ok=True)
    with open(run.output_dir / "sweep.jsonl", "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    _say(f"{'budget':>9} {'d':>3} {'params':>9} {'val BPC':>8} {'test BPC':>8}")
    for row in rows:
        _say(f"{row['budget']:>9} {row['d']:>3} {row['params']:>9} "
             f"{row['val_bpc']:>8.4f} {row['test_bpc']:>8.4f}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="liestate", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a TOML config")
    p.add_argument("--config", required=True, type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="bits per character of a checkpoint on a split")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the built-in invariant and oracle suites")
    p.add_argument("--level", choices=("fast", "full"), default="fast")
    p.add_argument("--corrupt", default=None, choices=sorted(CORRUPTIONS), help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="train one config per parameter budget")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--budgets", required=True, help="comma-separated counts, e.g. 5K,20K")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("trace", help="per-position geometry records for a checkpoint")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--length", type=int, default=256)
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        _say(f"config error: {exc}")
        return EXIT_CONFIG
    except CheckpointError as exc:
        _say(f"checkpoint error: {exc}")
        return EXIT_CHECKPOINT
    except DataError as exc:
        _say(f"data error: {exc}")
        return EXIT_DATA
    except (NumericAbort, NumericRangeError) as exc:
        _say(f"numeric abort: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
