#!/usr/bin/env python3
"""
wclre - command-line driver for the weighted contrastive RE pipeline.

Each pipeline stage is one subcommand; stages hand off through files.
Every subcommand takes --config (TOML) and --seed, and writes the effective
config next to its outputs.

Exit codes:
    0  success
    1  usage error
    2  data, config or validation error
    3  numerical error

Usage:
    wclre build-ds --ha ha.jsonl --corpus corpus.txt --out ds.jsonl --cap 100
    wclre train-reliability --ha ha.jsonl --out models/reliability
    wclre score --model models/reliability --ds ds.jsonl --out ds.scored.jsonl
    wclre pretrain --ds-scored ds.scored.jsonl --out ckpt/
    wclre finetune --init ckpt/ --ha ha.jsonl --out models/final
    wclre evaluate --model models/final --test test.jsonl --out report.txt
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from config import PipelineConfig, build_config, parse_config, with_seed, write_effective_config
from data_model import Dataset, load_dataset, save_dataset, validate_dataset
from ds_builder import build_ds, build_ds_files, read_corpus
from errors import UsageError, WclreError
from finetune_eval import evaluate, finetune, low_resource_split, noise_benchmark
from pretrain import load_encoder, pretrain
from reliability import ClassifierModel, score_dataset, train_classifier

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so run() owns the exit code"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _load(args) -> PipelineConfig:
    return with_seed(parse_config(args.config), args.seed)


def _provenance_dir(out: Path) -> Path:
    """Output directories get the config inside them; files get it beside them"""
    return out if out.suffix == "" else out.parent


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_build_ds(args) -> int:
    config = _load(args)
    ds = config.ds
    out = Path(args.out)
    stats = build_ds_files(
        args.ha, args.corpus, out,
        cap=args.cap if args.cap is not None else ds.cap,
        corpus_mode=args.corpus_mode or ds.corpus_mode,
        drop_pronouns=args.drop_pronouns or ds.drop_pronouns,
        pronouns=ds.pronouns,
        max_len=config.encoder.max_len,
        workers=args.workers or ds.workers,
        drop_conflicting_na=ds.drop_conflicting_na,
    )
    write_effective_config(config, _provenance_dir(out))
    logger.info(f"{stats.total_instances} instance(s), {stats.capped_triplets} capped triplet(s)")
    return 0


def cmd_train_reliability(args) -> int:
    config = _load(args)
    model = train_classifier(load_dataset(args.ha), config)
    model.save(args.out)
    write_effective_config(config, args.out)
    logger.info(f"✅ Reliability classifier saved to {args.out}")
    return 0


def cmd_score(args) -> int:
    config = _load(args)
    model = ClassifierModel.load(args.model)
    ds = load_dataset(args.ds, model.label_set)
    out = Path(args.out)
    save_dataset(score_dataset(model, ds), out)
    write_effective_config(config, _provenance_dir(out))
    logger.info(f"✅ Scored DS data written to {out}")
    return 0


def cmd_pretrain(args) -> int:
    config = _load(args)
    ds = load_dataset(args.ds_scored)
    pretrain(ds, config, args.out, resume_from=args.resume)
    return 0


def cmd_finetune(args) -> int:
    config = _load(args)
    ha = load_dataset(args.ha)
    if args.init == "fresh":
        model = finetune(None, ha, config)
    else:
        encoder, vocab = load_encoder(args.init)
        model = finetune(encoder, ha, config, vocab)
    model.save(args.out)
    write_effective_config(config, args.out)
    logger.info(f"✅ Fine-tuned model saved to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load(args)
    model = ClassifierModel.load(args.model)
    test = load_dataset(args.test)
    report = evaluate(model, test, args.na_label or config.eval.na_label, args.f1_mode or config.eval.f1_mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_text(), encoding="utf-8")
    write_effective_config(config, _provenance_dir(out))
    return 0


def cmd_split(args) -> int:
    config = _load(args)
    ha = load_dataset(args.ha)
    out = Path(args.out)
    save_dataset(low_resource_split(ha, args.fraction, config.seed), out)
    write_effective_config(config, _provenance_dir(out))
    return 0


def cmd_bench_noise(args) -> int:
    config = _load(args)
    if args.noise_rate is not None:
        data = config.model_dump()
        data["bench"]["noise_rate"] = args.noise_rate
        config = build_config(data)
    report = noise_benchmark(config, work_dir=args.work_dir)
    out = report.save(args.out)
    write_effective_config(config, _provenance_dir(out))
    for arm, f1 in report.means().items():
        logger.info(f"mean F1 {arm}: {f1:.4f}")
    return 0


def cmd_validate(args) -> int:
    config = _load(args)
    ds = load_dataset(args.data, strict=False)
    report = validate_dataset(ds)
    text = report.to_text()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        write_effective_config(config, out.parent)
    else:
        sys.stdout.write(text)
    if report:
        logger.warning(f"⚠️ {len(report)} violation(s) in {args.data}")
        return 2
    logger.info(f"✅ {args.data}: {len(ds)} instance(s), no violations")
    return 0


def cmd_pipeline(args) -> int:
    """split -> build-ds -> train-reliability -> score -> pretrain -> finetune -> evaluate, per seed"""
    base = parse_config(args.config)
    seeds = args.seeds or ([args.seed] if args.seed is not None else [base.seed])
    ha_full = load_dataset(args.ha)
    test = load_dataset(args.test)
    corpus = read_corpus(args.corpus, base.ds.corpus_mode)
    out = Path(args.out)

    rows = []
    for seed in seeds:
        config = with_seed(base, seed)
        run_dir = out / f"seed-{seed}"
        logger.info("=" * 60)
        logger.info(f"🚀 Pipeline run seed={seed} fraction={args.fraction}")
        logger.info("=" * 60)
        ha = low_resource_split(ha_full, args.fraction, seed) if args.fraction < 1.0 else ha_full
        ds, stats = build_ds(ha, corpus, cap=config.ds.cap, drop_pronouns=config.ds.drop_pronouns,
                             pronouns=config.ds.pronouns, max_len=config.encoder.max_len,
                             workers=config.ds.workers, drop_conflicting_na=config.ds.drop_conflicting_na)
        save_dataset(ds, run_dir / "ds.jsonl")
        (run_dir / "ds.jsonl.stats.tsv").write_text(stats.to_text(), encoding="utf-8")

        # the classifier must know every DS label, including NA from unlabeled HA pairs
        reliability = train_classifier(Dataset(instances=ha.instances, label_set=ds.label_set), config)
        reliability.save(run_dir / "reliability")
        scored = score_dataset(reliability, ds)
        save_dataset(scored, run_dir / "ds.scored.jsonl")

        encoder = pretrain(scored, config, run_dir / "pretrain")
        _, vocab = load_encoder(run_dir / "pretrain")
        model = finetune(encoder, ha, config, vocab)
        model.save(run_dir / "model")

        report = evaluate(model, test, config.eval.na_label, config.eval.f1_mode)
        (run_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
        write_effective_config(config, run_dir)
        rows.append({"seed": str(seed), "f1": report.micro_f1})

    table = pd.DataFrame(rows, columns=["seed", "f1"])
    table = pd.concat([table, pd.DataFrame([{"seed": "mean", "f1": float(np.mean(table["f1"]))}])],
                      ignore_index=True)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "pipeline.tsv", sep="\t", index=False, lineterminator="\n")
    logger.info(f"✅ Mean micro-F1 over {len(seeds)} run(s): {table['f1'].iloc[-1]:.4f}")
    return 0


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="TOML config file (defaults when omitted)")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    parser = _Parser(prog="wclre", description="Weighted contrastive pre-training for relation extraction")
    parser.add_argument("--verbose", "-v", dest="verbose_global", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("build-ds", parents=[common], help="align a corpus to HA triplets")
    p.add_argument("--ha", required=True)
    p.add_argument("--corpus", required=True, help="file or directory")
    p.add_argument("--out", required=True)
    p.add_argument("--cap", type=int, default=None, help="max instances per triplet")
    p.add_argument("--corpus-mode", choices=["doc", "line"], default=None)
    p.add_argument("--drop-pronouns", action="store_true")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_build_ds)

    p = sub.add_parser("train-reliability", parents=[common], help="train the confidence classifier on HA")
    p.add_argument("--ha", required=True)
    p.add_argument("--out", required=True, help="model directory")
    p.set_defaults(func=cmd_train_reliability)

    p = sub.add_parser("score", parents=[common], help="attach confidences to DS instances")
    p.add_argument("--model", required=True)
    p.add_argument("--ds", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("pretrain", parents=[common], help="weighted contrastive + MLM pre-training")
    p.add_argument("--ds-scored", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--resume", default=None, help="state checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="supervised RE on HA")
    p.add_argument("--init", required=True, help="pre-trained checkpoint (file or directory) or 'fresh'")
    p.add_argument("--ha", required=True)
    p.add_argument("--out", required=True, help="model directory")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", parents=[common], help="micro-F1 on a test file")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--na-label", default=None)
    p.add_argument("--f1-mode", choices=["exclude_na", "all"], default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("split", parents=[common], help="random low-resource subset of HA")
    p.add_argument("--ha", required=True)
    p.add_argument("--fraction", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("bench-noise", parents=[common], help="synthetic noisy-DS benchmark")
    p.add_argument("--out", required=True, help="report TSV")
    p.add_argument("--noise-rate", type=float, default=None)
    p.add_argument("--work-dir", default=None, help="keep intermediate checkpoints here")
    p.set_defaults(func=cmd_bench_noise)

    p = sub.add_parser("validate", parents=[common], help="check a dataset file against the record rules")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("pipeline", parents=[common], help="full two-stage run averaged over seeds")
    p.add_argument("--ha", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=None)
    p.add_argument("--fraction", type=float, default=1.0)
    p.set_defaults(func=cmd_pipeline)
    return parser


def configure_logging(verbose: bool = False):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_usage(sys.stderr)
            raise UsageError("wclre: a subcommand is required")
        configure_logging(args.verbose or args.verbose_global)
        return args.func(args)
    except WclreError as exc:
        print(f"wclre: error: {exc}", file=sys.stderr)
        return exc.exit_code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
