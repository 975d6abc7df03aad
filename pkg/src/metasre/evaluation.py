"""Metrics and experiment harnesses.

The headline metric is micro precision/recall/F1 where correct predictions
of the no-relation class are ignored: they count neither toward the
numerator nor toward either denominator. Pseudo-label quality reuses the
same metric against the hidden shadow labels, and distribution drift is the
L1 distance between normalized label histograms.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ConfigError, DiagnosticsError, ShapeError

if TYPE_CHECKING:  # pragma: no cover
    from .selftrain import PseudoLabel


@dataclass(frozen=True)
class Metrics:
    """Micro precision/recall/F1 plus the per-class confusion counts."""

    precision: float
    recall: float
    f1: float
    count: int
    confusion: tuple[tuple[int, ...], ...] = field(repr=False, default=())

    @staticmethod
    def zero(num_classes: int) -> "Metrics":
        empty = tuple(tuple(0 for _ in range(num_classes)) for _ in range(num_classes))
        return Metrics(precision=0.0, recall=0.0, f1=0.0, count=0, confusion=empty)

    @property
    def is_empty(self) -> bool:
        return self.count == 0

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "count": self.count,
        }


def micro_prf(
    predictions: Sequence[int],
    golds: Sequence[int],
    no_relation_index: int | None,
    num_classes: int | None = None,
) -> Metrics:
    """Micro P/R/F1 ignoring correct predictions of the no-relation class.

    precision = correct non-no-relation predictions / predicted non-no-relation,
    recall uses the gold non-no-relation count; zero denominators yield zero.
    """
    if len(predictions) != len(golds):
        raise ShapeError(f"{len(predictions)} predictions vs {len(golds)} golds")
    if num_classes is None:
        num_classes = max((max(predictions, default=0), max(golds, default=0))) + 1
    confusion = [[0] * num_classes for _ in range(num_classes)]
    correct = predicted_pos = gold_pos = 0
    for p, g in zip(predictions, golds):
        confusion[g][p] += 1
        if p != no_relation_index:
            predicted_pos += 1
        if g != no_relation_index:
            gold_pos += 1
        if p == g and p != no_relation_index:
            correct += 1
    precision = correct / predicted_pos if predicted_pos else 0.0
    recall = correct / gold_pos if gold_pos else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(
        precision=precision,
        recall=recall,
        f1=f1,
        count=len(golds),
        confusion=tuple(tuple(row) for row in confusion),
    )


def pseudo_label_f1(
    pseudo: Sequence["PseudoLabel"],
    shadow_golds: Sequence[int],
    no_relation_index: int | None,
    num_classes: int | None = None,
) -> Metrics:
    """Micro P/R/F1 of pseudo labels against the hidden shadow labels.

    An empty pseudo set yields all-zero metrics flagged by ``is_empty``.
    """
    if not pseudo:
        return Metrics.zero(num_classes or 1)
    preds, golds = [], []
    for pl in pseudo:
        if not 0 <= pl.mention_index < len(shadow_golds):
            raise DiagnosticsError(f"no shadow gold for mention index {pl.mention_index}")
        gold = shadow_golds[pl.mention_index]
        if gold is None:
            raise DiagnosticsError(f"mention index {pl.mention_index} has no shadow gold")
        preds.append(pl.label)
        golds.append(gold)
    return micro_prf(preds, golds, no_relation_index, num_classes)


def label_distribution(labels: Sequence[int], num_classes: int) -> np.ndarray:
    """Normalized histogram over ``num_classes`` classes (uniform if empty)."""
    if not labels:
        return np.full(num_classes, 1.0 / num_classes)
    hist = np.bincount(list(labels), minlength=num_classes).astype(np.float64)
    return hist / hist.sum()


def distribution_l1(a: np.ndarray, b: np.ndarray) -> float:
    """L1 distance between two label distributions; range [0, 2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"distributions of different sizes: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())


# --- experiment harnesses -------------------------------------------------------

ABLATION_MODES = ("full", "no_meta", "no_selection", "no_exploitation")

SWEEP_AXES = ("z_percent", "unlabeled_fraction", "labeled_fraction")


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    mean = statistics.fmean(values)
    std = statistics.pstdev(values) if len(values) > 1 else 0.0
    return mean, std


def _run_cells(configs: Sequence[tuple[str, "RunConfig"]], seeds: Sequence[int], jobs: int = 1):
    """Run every (name, config) x seed cell; failures are recorded per cell
    and the suite continues."""
    from .runner import run_seed_safely

    cells = [(name, cfg, seed) for name, cfg in configs for seed in seeds]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run_seed_safely, cells))
    else:
        outcomes = [run_seed_safely(cell) for cell in cells]

    rows = []
    for (name, _cfg), group in zip(
        configs, [outcomes[i : i + len(seeds)] for i in range(0, len(outcomes), len(seeds))]
    ):
        f1s, errors, reports = [], [], []
        for (seed, report, error) in group:
            if error is not None:
                errors.append({"seed": seed, "error": error})
            else:
                f1s.append(report.final_f1)
                reports.append((seed, report))
        mean, std = _mean_std(f1s)
        rows.append(
            {
                "name": name,
                "mean_f1": mean,
                "std_f1": std,
                "seed_f1": {seed: rep.final_f1 for seed, rep in reports},
                "errors": errors,
                "reports": reports,
            }
        )
    return rows


def ablation_suite(base_config: "RunConfig", seeds: Sequence[int], jobs: int = 1) -> list[dict]:
    """Mean and std of final F1 for the full model and each single-module
    ablation, across seeds. Always four rows, in ``ABLATION_MODES`` order."""
    if not seeds:
        raise ConfigError("need at least one seed")
    from .runner import with_mode

    configs = [(mode, with_mode(base_config, mode)) for mode in ABLATION_MODES]
    return _run_cells(configs, seeds, jobs)


def sweep(
    axis: str,
    values: Sequence[float],
    base_config: "RunConfig",
    seeds: Sequence[int],
    jobs: int = 1,
) -> list[dict]:
    """One run set per value of the swept axis; rows carry mean/std final F1."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    if not seeds:
        raise ConfigError("need at least one seed")
    from .runner import with_axis_value

    configs = [(repr(float(v)), with_axis_value(base_config, axis, float(v))) for v in values]
    rows = _run_cells(configs, seeds, jobs)
    for row, v in zip(rows, values):
        row["value"] = float(v)
    return rows
