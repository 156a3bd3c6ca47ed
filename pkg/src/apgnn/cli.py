"""``apgnn`` command line: prepare, train, eval, baselines, ablate, gradcheck, synth.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as MX
from . import synthetic
from .errors import ContractError, DataError, NumericError
from .gradcheck import run_micro
from .pgnn import AblationFlags
from .trainer import (
    Checkpoint,
    TrainConfig,
    Trainer,
    load_checkpoint,
    rank_instances,
    save_checkpoint,
    vocab_fingerprint,
)

log = logging.getLogger("apgnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


# ------------------------------------------------------------------ config


def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        k, v = (x.strip() for x in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _coerce(field: dataclasses.Field, value):
    if not isinstance(value, str):
        return value
    kind = field.type if isinstance(field.type, str) else field.type.__name__
    if kind == "bool":
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{field.name}: not a boolean: {value!r}")
    try:
        return {"int": int, "float": float}[kind](value)
    except (KeyError, ValueError):
        raise UsageError(f"{field.name}: bad value {value!r}") from None


def resolve_config(args) -> TrainConfig:
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    if getattr(args, "preset", None):
        values.update(TrainConfig.PRESETS[args.preset])
    if getattr(args, "config", None):
        file_vals = read_config_file(args.config)
        unknown = set(file_vals) - set(fields)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        values.update({k: _coerce(fields[k], v) for k, v in file_vals.items()})
    if getattr(args, "ablation", None):
        fl = AblationFlags.from_name(args.ablation)
        values.update(use_user_embed=fl.use_user_embed, use_history_attention=fl.use_history_attention, use_pgnn=fl.use_pgnn)
    for name in fields:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    cfg = TrainConfig(**values)
    if cfg.precision not in (32, 64):
        raise UsageError(f"precision must be 32 or 64, got {cfg.precision}")
    return cfg


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file; flags override it")
    p.add_argument("--preset", choices=sorted(TrainConfig.PRESETS), help="dataset preset (xing or reddit)")
    p.add_argument("--ablation", help="variant: full, -U, -A, -P, -A-P (combinable), or no-user / no-attention / no-pgnn")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        if kind == "bool":
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None, help=f"(default {f.default})")
        else:
            p.add_argument(flag, dest=f.name, type={"int": int, "float": float}[kind], default=None, help=f"(default {f.default})")


def _echo_config(cfg: TrainConfig, out=None) -> None:
    print("# effective config: " + " ".join(f"{k}={v}" for k, v in cfg.to_dict().items()), file=out or sys.stdout)


# -------------------------------------------------------------------- data


def _load_split(data_dir: Path, name: str, required: bool = True):
    if not data_dir.is_dir():
        raise UsageError(f"--data {data_dir}: no such directory (run 'apgnn prepare' first)")
    path = data_dir / f"{name}.json"
    if not path.exists():
        if required:
            raise DataError(f"{path} not found")
        return None
    return D.load_corpus(path)


def _eval_instances(data_dir: Path, split: str, M: int, max_len: int, last_only: bool = False):
    train = _load_split(data_dir, "train")
    valid = _load_split(data_dir, "valid", required=False)
    if split == "valid":
        if valid is None:
            raise DataError(f"{data_dir}/valid.json not found")
        inst = D.make_instances(valid, M, max_len, context=[train])
    else:
        test = _load_split(data_dir, "test")
        inst = D.make_instances(test, M, max_len, context=[train] + ([valid] if valid is not None else []))
    if last_only:
        inst = [x for x in inst if x.last]
    if not inst:
        raise DataError(f"no {split} instances in {data_dir}")
    return train, inst


STATS_COLUMNS = ["split", "users", "items", "sessions", "avg_session_length", "sessions_per_user"]


def cmd_prepare(args) -> int:
    keep = None
    if args.exclude:
        banned = set(args.exclude)

        def keep(cols):
            return not any(c in banned for c in cols[3:])

    events = D.read_interactions(args.input, keep=keep)
    corpus = D.filter_corpus(D.split_sessions(events, args.idle_minutes), args.min_session_len, args.min_user_sessions)
    if corpus.num_sessions() == 0:
        raise DataError("no sessions survive filtering")
    train, test = D.split_train_test(corpus, args.train_frac)
    splits = {"all": corpus}
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.valid_frac:
        fit, valid = D.split_train_test(train, 1.0 - args.valid_frac, reindex=False)
        D.save_corpus(fit, out / "train.json")
        D.save_corpus(valid, out / "valid.json")
        splits.update(train=fit, valid=valid)
    else:
        D.save_corpus(train, out / "train.json")
        splits["train"] = train
    D.save_corpus(test, out / "test.json")
    splits["test"] = test
    rows = [{"split": k, **D.corpus_stats(c)} for k, c in splits.items()]
    with open(out / "stats.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=STATS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "avg_session_length": f"{r['avg_session_length']:.4f}", "sessions_per_user": f"{r['sessions_per_user']:.4f}"})
    print(f"# idle_minutes={args.idle_minutes} min_session_len={args.min_session_len} min_user_sessions={args.min_user_sessions} train_frac={args.train_frac} valid_frac={args.valid_frac}")
    print((out / "stats.csv").read_text(), end="")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _echo_config(cfg)
    data_dir = Path(args.data)
    train = _load_split(data_dir, "train")
    valid = _load_split(data_dir, "valid", required=False)
    inst = D.make_instances(train, cfg.M, cfg.max_session_len)
    if not inst:
        raise DataError("training corpus yields no instances")
    vinst = D.make_instances(valid, cfg.M, cfg.max_session_len, context=[train]) if valid is not None else None
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(out.suffix + ".log.csv")
    trainer = Trainer(cfg, train.n_items, train.n_users)
    with open(log_path, "w", newline="") as fh:
        cols = ["epoch", "train_loss"] + (["valid_recall@5"] if vinst else [])
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()

        def on_epoch(rec):
            w.writerow(rec)
            fh.flush()
            print(" ".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))

        trainer.fit(inst, valid=vinst, callback=on_epoch)
    save_checkpoint(trainer.checkpoint(vocab_fingerprint(train.items)), out)
    print(f"# checkpoint written to {out} (seed={cfg.seed})")
    return EXIT_OK


def _check_vocab(ck: Checkpoint, train: D.SessionCorpus) -> None:
    if ck.n_items != train.n_items or ck.n_users != train.n_users:
        raise DataError(
            f"checkpoint was trained for {ck.n_items} items / {ck.n_users} users, "
            f"data has {train.n_items} items / {train.n_users} users"
        )
    if ck.vocab_fingerprint and ck.vocab_fingerprint != vocab_fingerprint(train.items):
        raise DataError("checkpoint item vocabulary does not match the data's vocabulary")


def _emit(rows, output, with_std=False):
    text = MX.to_csv(rows, with_std=with_std)
    if output:
        Path(output).write_text(text)
    return text


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.config
    data_dir = Path(args.data)
    train, inst = _eval_instances(data_dir, args.split, cfg.M, cfg.max_session_len, args.last_click_only)
    _check_vocab(ck, train)
    model = ck.model()
    ranks = rank_instances(model, inst)
    rows = MX.summary_rows(ranks, args.k)
    for by in args.breakdown or []:
        rows.extend(MX.breakdown(ranks, inst, by, args.k, width=args.group_width))
    text = _emit(rows, args.output)
    print(MX.format_summary(rows, f"A-PGNN ({cfg.flags.name}) on {args.split}, {len(inst)} instances"), file=sys.stderr)
    if not args.output:
        print(text, end="")
    return EXIT_OK


def cmd_baselines(args) -> int:
    data_dir = Path(args.data)
    train, inst = _eval_instances(data_dir, args.split, args.M, args.max_session_len, args.last_click_only)
    scorers = {"pop": MX.pop_baseline(train), "itemknn": MX.itemknn_baseline(train)}
    all_rows = []
    for name, sc in scorers.items():
        ranks = MX.label_ranks(sc.scores(inst), [x.label for x in inst])
        rows = MX.summary_rows(ranks, args.k, bucket=name)
        all_rows.extend(rows)
        print(MX.format_summary([{**r, "bucket": "all"} for r in rows], f"{name} on {args.split}"), file=sys.stderr)
    text = _emit(all_rows, args.output)
    if not args.output:
        print(text, end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    _echo_config(base)
    data_dir = Path(args.data)
    train = _load_split(data_dir, "train")
    inst = D.make_instances(train, base.M, base.max_session_len)
    _, test_inst = _eval_instances(data_dir, args.split, base.M, base.max_session_len, args.last_click_only)
    out_rows = []
    seeds = args.seeds or [base.seed]
    for variant in args.variants.split(","):
        flags = AblationFlags.from_name(variant)
        runs = []
        for seed in seeds:
            cfg = dataclasses.replace(base.with_flags(flags), seed=seed)
            t = Trainer(cfg, train.n_items, train.n_users)
            t.fit(inst)
            runs.append(rank_instances(t.model, test_inst))
        for K in args.k:
            for metric, fn in (("recall", MX.recall_at_k), ("mrr", MX.mrr_at_k)):
                vals = [fn(r, K) for r in runs]
                out_rows.append({"metric": metric, "K": K, "bucket": flags.name, "value": float(np.mean(vals)), "std": float(np.std(vals)), "count": len(test_inst)})
        print(f"{flags.name:6s} " + " ".join(f"R@{K}={100 * MX.recall_at_k(runs[0], K):.2f}" for K in args.k), file=sys.stderr)
    text = _emit(out_rows, args.output, with_std=True)
    if not args.output:
        print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.scale != "micro":
        raise UsageError("only --scale micro is supported")
    flags = AblationFlags.from_name(args.ablation or "full")
    ok = True
    with warnings.catch_warnings():
        warnings.simplefilter("always")
        for seed in args.seeds:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                rep = run_micro(seed, args.precision, flags, args.batch_norm, args.inject_fault, h=args.step, bias=args.bias)
            for w in caught:
                print(f"warning: {w.message}", file=sys.stderr)
            for line in rep.lines():
                print(line)
            worst = rep.worst
            print(f"seed={seed} {'PASS' if rep.ok else 'FAIL'} worst={worst.name} rel_err={worst.rel_err:.3e} tol={rep.tol:g}")
            ok &= rep.ok
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_synth(args) -> int:
    if args.kind == "random":
        events = synthetic.random_interactions(args.events, seed=args.seed)
    else:
        gen = synthetic.markov_corpus if args.kind == "markov" else synthetic.cohort_corpus
        events = synthetic.to_interactions(gen(seed=args.seed))
    with open(args.output, "w", encoding="utf-8") as fh:
        fh.write("# user_id\titem_id\ttimestamp\n")
        for e in events:
            fh.write(f"{e.user_id}\t{e.item_id}\t{e.timestamp}\n")
    print(f"# wrote {len(events)} interactions to {args.output}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="apgnn", description="Session-aware recommendation with personalised graph neural networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="sessionise, filter and split an interaction log")
    s.add_argument("--input", required=True, help="TSV: user_id, item_id, timestamp[, extra columns]")
    s.add_argument("--output", required=True, help="output directory")
    s.add_argument("--preset", choices=["xing", "reddit"], help="xing: 30 min idle, reddit: 60 min idle")
    s.add_argument("--idle-minutes", type=float, default=None, help="idle gap that starts a new session (default 30)")
    s.add_argument("--min-session-len", type=int, default=3)
    s.add_argument("--min-user-sessions", type=int, default=5)
    s.add_argument("--train-frac", type=float, default=0.8)
    s.add_argument("--valid-frac", type=float, default=0.0, help="carve the last fraction of each user's training sessions out as validation")
    s.add_argument("--exclude", action="append", help="drop rows whose extra columns contain this value (repeatable), e.g. delete")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    s.add_argument("--data", required=True, help="directory written by 'prepare'")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="per-epoch CSV log (default <out>.log.csv)")
    _add_train_flags(s)
    s.set_defaults(func=cmd_train)

    def eval_flags(s):
        s.add_argument("--data", required=True)
        s.add_argument("--k", type=_int_list, default=[5, 10, 20], help="comma-separated cutoffs (default 5,10,20)")
        s.add_argument("--split", choices=["test", "valid"], default="test")
        s.add_argument("--last-click-only", action="store_true", help="score only the final click of each session")
        s.add_argument("--output", help="write CSV here instead of stdout")

    s = sub.add_parser("eval", help="Recall@K / MRR@K of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    eval_flags(s)
    s.add_argument("--breakdown", type=lambda x: x.split(","), help="prefix_length, history_count, history_group_width")
    s.add_argument("--group-width", type=int, default=10)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("baselines", help="POP and Item-KNN metrics")
    eval_flags(s)
    s.add_argument("--M", type=int, default=50)
    s.add_argument("--max-session-len", type=int, default=20)
    s.set_defaults(func=cmd_baselines)

    s = sub.add_parser("ablate", help="train and evaluate ablation variants")
    s.add_argument("--data", required=True)
    s.add_argument("--variants", default="full,-U,-A,-P,-A-P")
    s.add_argument("--seeds", type=_int_list, help="one run per seed; std reported")
    s.add_argument("--k", type=_int_list, default=[5, 10])
    s.add_argument("--split", choices=["test", "valid"], default="test")
    s.add_argument("--last-click-only", action="store_true")
    s.add_argument("--output")
    _add_train_flags(s)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of every parameter gradient")
    s.add_argument("--scale", default="micro")
    s.add_argument("--precision", type=int, choices=[32, 64], default=64)
    s.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    s.add_argument("--ablation")
    s.add_argument("--batch-norm", action="store_true")
    s.add_argument("--bias", action="store_true", help="include the opt-in aggregation/GRU biases")
    s.add_argument("--step", type=float, default=1e-5, help="central-difference step (default 1e-5)")
    s.add_argument("--inject-fault", choices=["gru-candidate-sign"], help="deliberately break a backward rule (must FAIL)")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic interaction log")
    s.add_argument("--kind", choices=["markov", "cohort", "random"], default="markov")
    s.add_argument("--events", type=int, default=10_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_synth)
    return p


# values such as "-A-P" would otherwise be read as options
_DASH_VALUED = ("--ablation", "--variants")


def _join_dash_values(argv: list[str]) -> list[str]:
    out, i = [], 0
    while i < len(argv):
        if argv[i] in _DASH_VALUED and i + 1 < len(argv):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(_join_dash_values(list(sys.argv[1:] if argv is None else argv)))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "prepare":
        if args.idle_minutes is None:
            args.idle_minutes = 60.0 if args.preset == "reddit" else 30.0
    try:
        return args.func(args)
    except (UsageError, ContractError, ValueError) as exc:
        if isinstance(exc, DataError):
            print(f"apgnn: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"apgnn: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"apgnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"apgnn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
