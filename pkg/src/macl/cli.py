"""Command-line entry point.

Subcommands cover the whole pipeline on synthetic data:

  synth    write train/valid/test JSONL corpora
  train    fit mle | nt | macl and write run.json + traces + checkpoints
  mine     dump hard-negative pools for a corpus from a degenerator
  decode   generate responses with beam / greedy / nucleus
  score    metrics report JSON (+ per-example CSV) for generations
  report   side-by-side comparison of score reports, CSV and optional PNGs

Exit codes: 0 success, 1 invalid input or flags, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

from . import corpus as corpus_mod
from .decoding import DecodeConfig, decode_corpus
from .errors import ParameterError, ValidationError
from .model import ModelConfig, checkpoint_sha256, load_checkpoint
from .report import comparison_table, load_score_report, write_comparison, write_score_report
from .sampling import mine_hard_negatives, save_negative_cache
from .trainer import OBJECTIVES, TrainConfig, run_training
from .metrics import build_report


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; the contract is 1
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _load_config_file(path: Path) -> dict:
    if path.suffix == ".toml":
        try:
            import tomllib  # py311+
        except ModuleNotFoundError:
            import tomli as tomllib
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    elif path.suffix == ".json":
        with path.open("r", encoding="utf-8") as fh:
            data = json.load(fh)
    else:
        raise ValidationError(f"config file must be .toml or .json, got {path.name}")
    unknown = set(data) - {"train", "model"}
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)} (expected train/model)")
    return data


def _dataclass_kwargs(section: dict, cls, what: str) -> dict:
    allowed = {f.name for f in dataclass_fields(cls)}
    unknown = set(section) - allowed
    if unknown:
        raise ValidationError(f"unknown {what} config keys: {sorted(unknown)}")
    return dict(section)


# -- synth -------------------------------------------------------------------


def _cmd_synth(args) -> int:
    out = Path(args.out)
    n_valid = args.n_valid if args.n_valid is not None else max(1, args.n // 10)
    n_test = args.n_test if args.n_test is not None else max(1, args.n // 10)
    splits = (
        ("train", args.seed, args.n),
        ("valid", args.seed + 1, n_valid),
        ("test", args.seed + 2, n_test),
    )
    for split, seed, n in splits:
        corpus = corpus_mod.generate_synthetic(
            seed=seed,
            n_examples=n,
            vocab_size=args.vocab_size,
            shortcut_rate=args.shortcut_rate,
            split=split,
        )
        corpus_mod.save_corpus(corpus, out / f"{split}.jsonl")
        print(f"wrote {out / f'{split}.jsonl'} ({n} examples)")
    return 0


# -- train -------------------------------------------------------------------


def _cmd_train(args) -> int:
    data_dir = Path(args.data)
    train = corpus_mod.load_corpus(data_dir / "train.jsonl", split="train")
    valid = corpus_mod.load_corpus(data_dir / "valid.jsonl", split="valid")

    file_cfg = _load_config_file(Path(args.config)) if args.config else {}
    train_section = _dataclass_kwargs(file_cfg.get("train", {}), TrainConfig, "train")
    base = TrainConfig.desk() if args.profile == "desk" else TrainConfig()
    merged = {**{f.name: getattr(base, f.name) for f in dataclass_fields(TrainConfig)}, **train_section}
    if args.objective is not None:
        merged["objective"] = args.objective
    if args.seed is not None:
        merged["seed"] = args.seed
    if args.deterministic:
        merged["deterministic"] = True
    if args.from_scratch:
        merged["from_scratch"] = True
    config = TrainConfig(**merged)

    model_section = _dataclass_kwargs(file_cfg.get("model", {}), ModelConfig, "model")
    model_section.pop("vocab_size", None)  # always derived from the train split
    model_config = ModelConfig(vocab_size=5, **model_section)

    cache_file = Path(args.negatives) if args.negatives else None
    cache_dir = os.environ.get("MACL_CACHE_DIR")
    record = run_training(
        train,
        valid,
        model_config,
        config,
        out_dir=Path(args.out),
        degenerator_path=Path(args.degenerator) if args.degenerator else None,
        negatives_cache=cache_file,
        negatives_cache_dir=Path(cache_dir) if cache_dir and cache_file is None else None,
    )
    print(f"objective={record.objective} best_epoch={record.best_epoch} "
          f"val_pod={record.val_pod} val_kud={record.val_kud}")
    print(f"run artifacts in {args.out}")
    return 0


# -- mine --------------------------------------------------------------------


def _cmd_mine(args) -> int:
    model, vocab, _ = load_checkpoint(args.degenerator)
    model.eval()
    model.requires_grad_(False)
    corpus = corpus_mod.load_corpus(args.data)
    beam_cfg = _beam_config_from_args(args, model.config.max_target_len)
    pools = [
        mine_hard_negatives(model, ex, vocab, beam_cfg, args.m)
        for ex in corpus
    ]
    save_negative_cache(pools, checkpoint_sha256(args.degenerator), args.out)
    print(f"wrote {args.out} ({len(pools)} pools, m={args.m})")
    return 0


def _beam_config_from_args(args, max_target_len: int):
    from .sampling import GroupBeamConfig

    return GroupBeamConfig(
        beam_size=args.beam_size,
        num_groups=args.num_groups,
        diversity_penalty=args.diversity_penalty,
        max_target_len=max_target_len,
    )


# -- decode ------------------------------------------------------------------


def _cmd_decode(args) -> int:
    model, vocab, _ = load_checkpoint(args.checkpoint)
    model.eval()
    corpus = corpus_mod.load_corpus(args.data)
    cfg = DecodeConfig(
        strategy=args.strategy,
        beam_size=args.beam_size,
        nucleus_p=args.nucleus_p,
        max_target_len=args.max_target_len or model.config.max_target_len,
        seed=args.seed,
        length_normalize=args.length_normalize,
    )
    records = decode_corpus(model, vocab, list(corpus), cfg)
    corpus_mod.save_generations(records, args.out)
    print(f"wrote {args.out} ({len(records)} generations, {cfg.strategy})")
    return 0


# -- score -------------------------------------------------------------------


def _cmd_score(args) -> int:
    references = corpus_mod.load_corpus(args.references)
    generations = corpus_mod.load_generations(args.generations)
    report = build_report(references, generations)
    write_score_report(report, args.out, csv_path=args.csv)
    print(f"wrote {args.out}")
    if args.csv:
        print(f"wrote {args.csv}")
    g = report.generated
    print(f"pod={g.pod:.4f} kud={report.kud:.4f} plcs={g.plcs_mean:.4f} mkp1={g.mkp_1:.4f}")
    return 0


# -- report ------------------------------------------------------------------


def _cmd_report(args) -> int:
    labels = args.labels or [Path(p).stem for p in args.runs]
    if len(labels) != len(args.runs):
        raise ValidationError(f"{len(args.runs)} runs but {len(labels)} labels")
    if len(set(labels)) != len(labels):
        raise ValidationError(f"duplicate report labels: {labels}")
    reports = {label: load_score_report(path) for label, path in zip(labels, args.runs)}
    written = write_comparison(reports, args.out, plots=args.plots)
    sys.stdout.write(comparison_table(reports))
    for path in written:
        print(f"wrote {path}")
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="macl", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=2000, help="train split size")
    p.add_argument("--n-valid", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--vocab-size", type=int, default=160)
    p.add_argument("--shortcut-rate", type=float, default=0.9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train an objective on a data directory")
    p.add_argument("--data", required=True, help="directory with train.jsonl and valid.jsonl")
    p.add_argument("--objective", choices=OBJECTIVES, default=None)
    p.add_argument("--config", default=None, help="TOML or JSON file with [train]/[model] tables")
    p.add_argument("--profile", choices=("paper", "desk"), default="paper")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--from-scratch", action="store_true",
                   help="do not initialize the macl model from the degenerator")
    p.add_argument("--degenerator", default=None, help="reuse an existing frozen checkpoint")
    p.add_argument("--negatives", default=None, help="negative-pool cache file")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("mine", help="mine hard negatives into a cache file")
    p.add_argument("--degenerator", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--m", type=int, default=16)
    p.add_argument("--beam-size", type=int, default=32)
    p.add_argument("--num-groups", type=int, default=8)
    p.add_argument("--diversity-penalty", type=float, default=0.5)
    p.set_defaults(func=_cmd_mine)

    p = sub.add_parser("decode", help="generate responses for a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--strategy", choices=("beam", "greedy", "nucleus"), default="beam")
    p.add_argument("--beam-size", type=int, default=3)
    p.add_argument("--nucleus-p", type=float, default=0.9)
    p.add_argument("--max-target-len", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--length-normalize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("score", help="metrics report for generations vs references")
    p.add_argument("--references", required=True)
    p.add_argument("--generations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None, help="also write per-example PLCS/KP-1 CSV")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("report", help="compare several score reports")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--labels", nargs="*", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--plots", action="store_true", help="render PNG figures next to the CSVs")
    p.set_defaults(func=_cmd_report)
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ValidationError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        sys.stderr.write(f"runtime failure: {type(exc).__name__}: {exc}\n")
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
