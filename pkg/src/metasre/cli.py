"""Command-line front end.

Subcommands: ``gen-data``, ``split``, ``train``, ``ablate``, ``sweep``,
``eval``. Configuration comes from one JSON file; command-line flags win
over file values. All randomness flows from the configured seeds, so any
command rerun with identical inputs produces byte-identical outputs.

Exit codes: 0 on success, 2 on configuration errors, 3 when training
diverged with a non-finite gradient (partial reports are still written).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import statistics
import sys
from pathlib import Path

from .data import (
    Dataset,
    SplitSpec,
    SynthSpec,
    load_jsonl,
    save_jsonl,
    stratified_split,
    synth_generate,
)
from .encoder import RelationMention
from .errors import ConfigError, MetasreError, NonFiniteGradient
from .evaluation import ablation_suite, micro_prf, sweep
from .networks import load_params
from .runner import (
    RunConfig,
    config_from_dict,
    config_hash,
    materialize_data,
    report_to_dict,
    run_seed_safely,
    with_mode,
    write_json,
    write_meta_csv,
    write_metrics_csv,
)

OK, CONFIG_ERROR, DIVERGED = 0, 2, 3


def _load_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _out_dir(args, cfg_dir: str | None = None) -> Path:
    out = args.out or cfg_dir or os.environ.get("METASRE_OUT_DIR") or "runs"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_run_config(args) -> RunConfig:
    cfg = config_from_dict(_load_json(args.config))
    st = cfg.selftrain
    if getattr(args, "mode", None) == "self_training":
        cfg = with_mode(with_mode(with_mode(cfg, "no_meta"), "no_selection"), "no_exploitation")
        st = cfg.selftrain
    if getattr(args, "no_meta", False):
        st = dataclasses.replace(st, no_meta=True)
    if getattr(args, "no_selection", False):
        st = dataclasses.replace(st, no_selection=True)
    if getattr(args, "no_exploitation", False):
        st = dataclasses.replace(st, no_exploitation=True)
    if getattr(args, "z_percent", None) is not None:
        st = dataclasses.replace(st, z_percent=args.z_percent)
    if getattr(args, "batches", None) is not None:
        st = dataclasses.replace(st, num_batches=args.batches)
    cfg = dataclasses.replace(cfg, selftrain=st)
    if getattr(args, "seed", None):
        cfg = dataclasses.replace(cfg, seeds=tuple(args.seed))
    return cfg


def cmd_gen_data(args) -> int:
    spec_dict = _load_json(args.spec)
    names = {f.name for f in dataclasses.fields(SynthSpec)}
    unknown = set(spec_dict) - names
    if unknown:
        raise ConfigError(f"unknown synth spec keys: {sorted(unknown)}")
    try:
        spec = SynthSpec(**spec_dict)
    except TypeError as exc:
        raise ConfigError(f"bad synth spec: {exc}") from exc
    dataset = synth_generate(spec)
    save_jsonl(dataset, args.out)
    print(f"wrote {len(dataset.mentions)} mentions to {args.out}")
    return OK


def cmd_split(args) -> int:
    dataset = load_jsonl(args.data)
    spec = SplitSpec(args.labeled_fraction, args.unlabeled_fraction, seed=args.seed_value)
    labeled, unlabeled, rest = stratified_split(dataset, spec)
    out = _out_dir(args)
    save_jsonl(
        Dataset(
            mentions=tuple(ex.mention for ex in labeled),
            label_names=dataset.label_names,
            no_relation_index=dataset.no_relation_index,
        ),
        out / "labeled.jsonl",
    )
    save_jsonl(
        Dataset(
            mentions=unlabeled.mentions,
            label_names=dataset.label_names,
            no_relation_index=dataset.no_relation_index,
        ),
        out / "unlabeled.jsonl",
    )
    save_jsonl(
        Dataset(
            mentions=tuple(rest),
            label_names=dataset.label_names,
            no_relation_index=dataset.no_relation_index,
        ),
        out / "rest.jsonl",
    )
    print(f"labeled={len(labeled)} unlabeled={len(unlabeled)} rest={len(rest)} -> {out}")
    return OK


def _run_seeds(cfg: RunConfig, jobs: int):
    cells = [("train", cfg, seed) for seed in cfg.seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(run_seed_safely, cells))
    return [run_seed_safely(cell) for cell in cells]


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args, cfg.out_dir)
    tag = config_hash(cfg)
    outcomes = _run_seeds(cfg, args.jobs)

    diverged = False
    finals = []
    for seed, report, error in outcomes:
        if report is not None:
            stem = out / f"run_{tag}_seed{seed}"
            write_json(report_to_dict(report, cfg, seed), f"{stem}.report.json")
            write_metrics_csv(report, f"{stem}.metrics.csv")
            write_meta_csv(report, f"{stem}.meta.csv")
            if report.final_classifier is not None:
                from .networks import save_params

                save_params(report.final_classifier, f"{stem}.classifier.json", report.vocab)
            if not report.aborted:
                finals.append(report.final_f1)
        if error is not None:
            print(f"seed {seed}: {error}", file=sys.stderr)
            if error.startswith("NonFiniteGradient"):
                diverged = True
            else:
                raise ConfigError(error)
    if finals:
        mean = statistics.fmean(finals)
        std = statistics.pstdev(finals) if len(finals) > 1 else 0.0
        summary = {
            "config_hash": tag,
            "seeds": list(cfg.seeds),
            "final_f1": {str(s): r.final_f1 for s, r, e in outcomes if r is not None},
            "mean_f1": mean,
            "std_f1": std,
        }
        write_json(summary, out / f"summary_{tag}.json")
        print(f"final F1: {mean:.4f} +/- {std:.4f} over {len(finals)} seeds")
    return DIVERGED if diverged else OK


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args, cfg.out_dir)
    tag = config_hash(cfg)
    rows = ablation_suite(cfg, cfg.seeds, jobs=args.jobs)
    lines = ["mode,mean_f1,std_f1,runs,errors"]
    all_failed = True
    for row in rows:
        n = len(row["seed_f1"])
        if n:
            all_failed = False
        lines.append(
            f"{row['name']},{repr(row['mean_f1'])},{repr(row['std_f1'])},{n},{len(row['errors'])}"
        )
        print(f"{row['name']:>16s}: F1 {row['mean_f1']:.4f} +/- {row['std_f1']:.4f} ({n} runs)")
    (out / f"ablation_{tag}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return CONFIG_ERROR if all_failed else OK


def cmd_sweep(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(args, cfg.out_dir)
    tag = config_hash(cfg)
    values = [float(v) for v in args.values.split(",") if v.strip() != ""]
    rows = sweep(args.axis, values, cfg, cfg.seeds, jobs=args.jobs)
    lines = [f"{args.axis},mean_f1,std_f1,runs,errors"]
    all_failed = True
    for row in rows:
        n = len(row["seed_f1"])
        if n:
            all_failed = False
        lines.append(
            f"{repr(row['value'])},{repr(row['mean_f1'])},{repr(row['std_f1'])},{n},{len(row['errors'])}"
        )
        print(f"{args.axis}={row['value']}: F1 {row['mean_f1']:.4f} +/- {row['std_f1']:.4f}")
    (out / f"sweep_{args.axis}_{tag}.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return CONFIG_ERROR if all_failed else OK


def cmd_eval(args) -> int:
    params, vocab = load_params(args.params)
    if vocab is None:
        raise ConfigError("checkpoint carries no vocabulary; cannot score raw mentions")
    dataset = load_jsonl(args.data)
    if dataset.num_classes != params.num_classes:
        raise ConfigError(
            f"dataset has {dataset.num_classes} labels, checkpoint {params.num_classes}"
        )
    from .networks import LabeledExample
    from .selftrain import evaluate_classifier

    test = [
        LabeledExample(mention=m, label=m.gold_label)
        for m in dataset.mentions
        if m.gold_label is not None
    ]
    if not test:
        raise ConfigError("no labeled mentions to evaluate on")
    metrics = evaluate_classifier(params, test, vocab, dataset.no_relation_index)
    print(f"P={metrics.precision:.4f} R={metrics.recall:.4f} F1={metrics.f1:.4f} n={metrics.count}")
    return OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metasre", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--spec", required=True, help="synth spec JSON file")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="stratified labeled/unlabeled/rest split")
    p.add_argument("--data", required=True)
    p.add_argument("--labeled-fraction", type=float, required=True)
    p.add_argument("--unlabeled-fraction", type=float, required=True)
    p.add_argument("--seed", dest="seed_value", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_split)

    def add_run_flags(p):
        p.add_argument("--config", required=True, help="run config JSON file")
        p.add_argument("--seed", type=int, action="append", help="override config seeds")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--out", default=None)
        p.add_argument("--mode", choices=["metasre", "self_training"], default="metasre")
        p.add_argument("--no-meta", action="store_true")
        p.add_argument("--no-selection", action="store_true")
        p.add_argument("--no-exploitation", action="store_true")
        p.add_argument("--z-percent", type=float, default=None)
        p.add_argument("--batches", type=int, default=None)

    p = sub.add_parser("train", help="run incremental self-training per seed")
    add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="full model vs single-module ablations")
    add_run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep one config axis")
    add_run_flags(p)
    p.add_argument("--axis", required=True, choices=["z_percent", "unlabeled_fraction", "labeled_fraction"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled JSONL file")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return CONFIG_ERROR
    except NonFiniteGradient as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return DIVERGED
    except MetasreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
