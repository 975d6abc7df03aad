"""Run orchestration: configs, seed derivation, and report serialization.

A run config fully determines every output byte: all randomness flows from
the config's seed list through named seed derivations, reports contain no
timestamps, and floats are serialized with ``repr`` so reruns reproduce
files exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import (
    Dataset,
    SplitSpec,
    SynthSpec,
    load_jsonl,
    partition_unlabeled,
    stratified_split,
    synth_generate,
)
from .encoder import build_vocab
from .errors import ConfigError, MetasreError, NonFiniteGradient
from .meta import MetaConfig
from .networks import LabeledExample, init_params
from .selftrain import SelfTrainConfig, TrainReport, run_incremental

#: the held-out test carve is shared by every seed of a run
TEST_CARVE_SEED = 7


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run needs; defaults mirror the evaluation
    protocol (top 90 percent, 10 batches, learning rate 1e-4)."""

    data: str | SynthSpec
    test_path: str | None = None
    test_fraction: float = 0.2
    labeled_fraction: float = 0.05
    unlabeled_fraction: float = 0.5
    selftrain: SelfTrainConfig = SelfTrainConfig()
    meta: MetaConfig = MetaConfig()
    hidden_size: int = 32
    embedding_dim: int = 16
    seeds: tuple[int, ...] = (0,)
    out_dir: str | None = None  # METASRE_OUT_DIR, then "runs", when unset

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.test_path is None and not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in (0, 1) when no test_path is given")
        # the split spec validates the fractions
        SplitSpec(self.labeled_fraction, self.unlabeled_fraction)


def _from_dict(cls, d: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad {where}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    """Strictly validated RunConfig from a plain JSON dict."""
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    d = dict(raw)
    data = d.get("data")
    if isinstance(data, dict):
        d["data"] = _from_dict(SynthSpec, data, "data (synth spec)")
    elif not isinstance(data, str):
        raise ConfigError("config needs 'data': a JSONL path or a synth spec object")
    if isinstance(d.get("selftrain"), dict):
        d["selftrain"] = _from_dict(SelfTrainConfig, d["selftrain"], "selftrain")
    if isinstance(d.get("meta"), dict):
        d["meta"] = _from_dict(MetaConfig, d["meta"], "meta")
    if "seeds" in d:
        d["seeds"] = tuple(int(s) for s in d["seeds"])
    return _from_dict(RunConfig, d, "run config")


def config_to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["seeds"] = list(cfg.seeds)
    return d


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:10]


def with_mode(cfg: RunConfig, mode: str) -> RunConfig:
    """Config variant for one ablation mode ('full' or a single switch)."""
    st = cfg.selftrain
    if mode == "full":
        st = replace(st, no_meta=False, no_selection=False, no_exploitation=False)
    elif mode == "no_meta":
        st = replace(st, no_meta=True)
    elif mode == "no_selection":
        st = replace(st, no_selection=True)
    elif mode == "no_exploitation":
        st = replace(st, no_exploitation=True)
    else:
        raise ConfigError(f"unknown ablation mode {mode!r}")
    return replace(cfg, selftrain=st)


def with_axis_value(cfg: RunConfig, axis: str, value: float) -> RunConfig:
    if axis == "z_percent":
        return replace(cfg, selftrain=replace(cfg.selftrain, z_percent=value))
    if axis == "unlabeled_fraction":
        return replace(cfg, unlabeled_fraction=value)
    if axis == "labeled_fraction":
        return replace(cfg, labeled_fraction=value)
    raise ConfigError(f"unknown axis {axis!r}")


def derive_seed(seed: int, stream: int) -> int:
    """Named deterministic sub-seed of a run seed."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def materialize_data(cfg: RunConfig) -> tuple[Dataset, list[LabeledExample]]:
    """Load or generate the corpus and produce (train pool, test set).

    With no explicit test file, a stratified test slice is carved once with
    a fixed seed so every run seed evaluates on the same held-out set.
    """
    dataset = synth_generate(cfg.data) if isinstance(cfg.data, SynthSpec) else load_jsonl(cfg.data)
    if cfg.test_path is not None:
        test_ds = load_jsonl(cfg.test_path, label_names=dataset.label_names)
        test = [
            LabeledExample(mention=m, label=m.gold_label)
            for m in test_ds.mentions
            if m.gold_label is not None
        ]
        if not test:
            raise ConfigError(f"test file {cfg.test_path} has no labeled mentions")
        return dataset, test
    carved, _, rest = stratified_split(
        dataset, SplitSpec(cfg.test_fraction, 0.0, seed=TEST_CARVE_SEED)
    )
    test = [LabeledExample(mention=ex.mention, label=ex.label) for ex in carved]
    train = Dataset(
        mentions=tuple(rest),
        label_names=dataset.label_names,
        no_relation_index=dataset.no_relation_index,
    )
    return train, test


def run_single(
    cfg: RunConfig,
    seed: int,
    train: Dataset | None = None,
    test: Sequence[LabeledExample] | None = None,
) -> TrainReport:
    """One full training run under one seed."""
    if train is None or test is None:
        train, test = materialize_data(cfg)
    labeled, unlabeled, _ = stratified_split(
        train,
        SplitSpec(cfg.labeled_fraction, cfg.unlabeled_fraction, seed=derive_seed(seed, 0)),
    )
    vocab = build_vocab([ex.mention for ex in labeled] + list(unlabeled.mentions))
    classifier = init_params(
        derive_seed(seed, 1),
        train.num_classes,
        cfg.hidden_size,
        cfg.embedding_dim,
        vocab.size,
        role="classifier",
    )
    labeler = init_params(
        derive_seed(seed, 2),
        train.num_classes,
        cfg.hidden_size,
        cfg.embedding_dim,
        vocab.size,
        role="labeler",
    )
    batches = partition_unlabeled(unlabeled, cfg.selftrain.num_batches, derive_seed(seed, 3))
    selftrain_cfg = replace(cfg.selftrain, seed=derive_seed(seed, 4))
    try:
        report = run_incremental(
            labeled,
            batches,
            list(test),
            classifier,
            labeler,
            selftrain_cfg,
            cfg.meta,
            vocab,
            train.no_relation_index,
        )
    except NonFiniteGradient as exc:
        if exc.report is not None:
            exc.report.vocab = vocab
        raise
    report.vocab = vocab
    return report


def run_seed_safely(cell: tuple[str, RunConfig, int]) -> tuple[int, TrainReport | None, str | None]:
    """Harness cell runner: returns (seed, report, error message)."""
    _name, cfg, seed = cell
    try:
        return seed, run_single(cfg, seed), None
    except NonFiniteGradient as exc:
        return seed, exc.report, f"NonFiniteGradient: {exc}"
    except MetasreError as exc:
        return seed, None, f"{type(exc).__name__}: {exc}"


# --- serialization -------------------------------------------------------------


def report_to_dict(report: TrainReport, cfg: RunConfig, seed: int) -> dict:
    return {
        "config": config_to_dict(cfg),
        "seed": seed,
        "supervised": report.supervised.to_dict(),
        "final_f1": report.final_f1,
        "aborted": report.aborted,
        "abort_reason": report.abort_reason,
        "iterations": [dataclasses.asdict(rec) for rec in report.records],
        "meta_traces": report.meta_traces,
    }


def write_json(payload: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def write_metrics_csv(report: TrainReport, path) -> None:
    """Flat per-iteration metrics, one row per incremental iteration."""
    header = "iter,precision,recall,f1,pseudo_f1,selected_M,mean_w,distribution_l1"
    lines = [header]
    for rec in report.records:
        lines.append(
            ",".join(
                [
                    str(rec.iteration),
                    repr(rec.precision),
                    repr(rec.recall),
                    repr(rec.f1),
                    repr(rec.pseudo_f1),
                    str(rec.selected_count),
                    repr(rec.mean_weight),
                    repr(rec.distribution_l1),
                ]
            )
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_meta_csv(report: TrainReport, path) -> None:
    """The meta-step diagnostics stream."""
    header = "iteration,inner_loss,meta_loss,grad_norm,pseudo_count"
    lines = [header]
    for row in report.meta_traces:
        lines.append(
            ",".join(
                [
                    str(row["iteration"]),
                    repr(row["inner_loss"]),
                    repr(row["meta_loss"]),
                    repr(row["grad_norm"]),
                    str(row["pseudo_count"]),
                ]
            )
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
