"""Pseudo-label generation, top-percent selection, exploitation, and the
incremental self-training driver.

The driver consumes the unlabeled pool in disjoint stratified batches. Each
iteration meta-updates the labeler, pseudo-labels the next batch, keeps the
highest-confidence slice, freezes those confidences as loss weights, and
continues training the classifier on the labeled set plus every pseudo
example selected so far. Selected pseudo labels accumulate across
iterations; they are never re-labeled.

Hidden gold labels of unlabeled mentions never reach the training path:
permuting the shadow labels changes only the diagnostics in the report, not
a single trained parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .data import UnlabeledSet
from .encoder import RelationMention, Vocabulary
from .errors import ConfigError, EmptyBatch, NonFiniteGradient
from .evaluation import Metrics, label_distribution, distribution_l1, micro_prf, pseudo_label_f1
from .meta import MetaConfig, MetaStepTrace, meta_step, supervised_warmup
from .networks import (
    ClassifierParams,
    LabeledExample,
    OptimState,
    WeightedExample,
    adam_step,
    batched_class_probs,
    init_optim_state,
    weighted_nll,
    one_hot,
)


@dataclass(frozen=True)
class PseudoLabel:
    """Argmax class and max-probability confidence for one pool mention."""

    mention_index: int
    label: int
    confidence: float


@dataclass(frozen=True)
class SelfTrainConfig:
    """Driver knobs; the defaults mirror the evaluation protocol
    (keep the top 90 percent, ten unlabeled batches).

    ``seed`` drives the driver's only randomness, the per-epoch shuffling of
    training streams.
    """

    z_percent: float = 90.0
    num_batches: int = 10
    initial_epochs: int = 10
    epochs_per_batch: int = 3
    meta_epochs: int = 1
    batch_size: int = 16
    learning_rate: float = 1e-4
    seed: int = 0
    no_meta: bool = False
    no_selection: bool = False
    no_exploitation: bool = False

    def __post_init__(self):
        if not 0.0 < self.z_percent <= 100.0:
            raise ConfigError("z_percent must be in (0, 100]")
        if self.num_batches < 1:
            raise ConfigError("num_batches must be >= 1")
        if min(self.initial_epochs, self.epochs_per_batch, self.meta_epochs) < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")


@dataclass
class IterationRecord:
    """Everything measured after one incremental iteration."""

    iteration: int
    precision: float
    recall: float
    f1: float
    pseudo_f1: float
    selected_pseudo_f1: float
    selected_count: int
    batch_size: int
    mean_weight: float
    distribution_l1: float
    pseudo_hist: list[float]
    selected_hist: list[float]
    gold_hist: list[float]
    train_losses: list[float]


@dataclass
class TrainReport:
    """Per-run record: supervised baseline, one record per iteration, and
    the meta-step diagnostics stream. The trained parameter snapshots ride
    along for checkpointing but are not serialized."""

    supervised: Metrics
    records: list[IterationRecord] = field(default_factory=list)
    meta_traces: list[dict] = field(default_factory=list)
    aborted: bool = False
    abort_reason: str = ""
    final_classifier: ClassifierParams | None = None
    final_labeler: ClassifierParams | None = None
    vocab: Vocabulary | None = None

    @property
    def final_f1(self) -> float:
        return self.records[-1].f1 if self.records else self.supervised.f1


def generate_pseudo_labels(
    labeler: ClassifierParams,
    pool_batch: Sequence[RelationMention],
    vocab: Vocabulary,
) -> list[PseudoLabel]:
    """Score every mention with the labeler; ties break to the lowest class.

    Gold labels are never read here, even if callers left them attached.
    """
    if not pool_batch:
        raise EmptyBatch("no mentions to pseudo-label")
    probs = batched_class_probs(list(pool_batch), labeler.leaves(trainable=False), vocab)
    out = []
    for i in range(len(pool_batch)):
        row = probs.value[i]
        label = int(np.argmax(row))
        out.append(PseudoLabel(mention_index=i, label=label, confidence=float(row[label])))
    return out


def select_top(labels: Sequence[PseudoLabel], z_percent: float) -> list[PseudoLabel]:
    """Keep the ceil(z/100 * n) highest-confidence pseudo labels.

    Sorted by confidence descending, ties by ascending mention index; the
    ceiling keeps tiny batches from selecting nothing.
    """
    if not labels:
        raise EmptyBatch("no pseudo labels to select from")
    if not 0.0 < z_percent <= 100.0:
        raise ConfigError("z_percent must be in (0, 100]")
    keep = math.ceil(z_percent / 100.0 * len(labels))
    ranked = sorted(labels, key=lambda pl: (-pl.confidence, pl.mention_index))
    return ranked[:keep]


def exploit(
    selected: Sequence[PseudoLabel],
    pool: Sequence[RelationMention],
    unit_weights: bool = False,
) -> list[WeightedExample]:
    """Freeze each selected confidence as the pseudo example's loss weight.

    ``unit_weights`` forces every weight to 1.0 (the ablation that treats
    pseudo labels like golden ones).
    """
    out = []
    for pl in selected:
        if not 0 <= pl.mention_index < len(pool):
            raise IndexError(f"mention index {pl.mention_index} outside pool of {len(pool)}")
        out.append(
            WeightedExample(
                mention=pool[pl.mention_index],
                label=pl.label,
                weight=1.0 if unit_weights else pl.confidence,
            )
        )
    return out


def _stream_seed(base: int, stage: int, index: int = 0) -> int:
    """Named sub-seed of the driver seed (stage 0: labeled order, 1: labeler
    warmup, 2: classifier training per iteration)."""
    return int(np.random.SeedSequence([base, stage, index]).generate_state(1)[0])


def _train_classifier(
    params: ClassifierParams,
    state: OptimState,
    labeled: Sequence[LabeledExample],
    pseudo_pool: Sequence[WeightedExample],
    epochs: int,
    batch_size: int,
    vocab: Vocabulary,
    shuffle_seed: int | None = None,
) -> tuple[ClassifierParams, OptimState, list[float]]:
    """Optimizer epochs over minibatches of golden plus pseudo terms.

    With a ``shuffle_seed`` the combined stream is re-permuted every epoch
    (epoch e uses ``SeedSequence([shuffle_seed, e])``); otherwise chunks are
    taken in order, golden first. A chunk may contain only pseudo terms.
    """
    stream: list[tuple[str, object]] = [("g", ex) for ex in labeled]
    stream += [("p", ex) for ex in pseudo_pool]
    k = params.num_classes
    epoch_losses = []
    for epoch in range(epochs):
        if shuffle_seed is None:
            epoch_stream = stream
        else:
            rng = np.random.default_rng(np.random.SeedSequence([shuffle_seed, epoch]))
            epoch_stream = [stream[int(i)] for i in rng.permutation(len(stream))]
        total = 0.0
        for start in range(0, len(epoch_stream), batch_size):
            chunk = epoch_stream[start : start + batch_size]
            golden = [ex for kind, ex in chunk if kind == "g"]
            pseudo = [ex for kind, ex in chunk if kind == "p"]
            leaves = params.leaves()
            cache: dict = {}
            g_probs = (
                batched_class_probs([ex.mention for ex in golden], leaves, vocab, cache)
                if golden
                else None
            )
            p_probs = (
                batched_class_probs([ex.mention for ex in pseudo], leaves, vocab, cache)
                if pseudo
                else None
            )
            weights = np.asarray([[float(ex.weight)] for ex in pseudo]) if pseudo else None
            loss = weighted_nll(
                g_probs,
                [ex.label for ex in golden],
                p_probs,
                [ex.label for ex in pseudo],
                weights,
                k,
            )
            grad_nodes = ad.grad(loss, list(leaves.values()))
            grads = {name: g.value for name, g in zip(leaves, grad_nodes)}
            for name, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise NonFiniteGradient(f"classifier gradient for {name!r} is not finite")
            params, state = adam_step(params, grads, state)
            total += loss.item()
        epoch_losses.append(total / max(1, math.ceil(len(stream) / batch_size)))
    return params, state, epoch_losses


def evaluate_classifier(
    params: ClassifierParams,
    test_set: Sequence[LabeledExample],
    vocab: Vocabulary,
    no_relation_index: int | None,
) -> Metrics:
    """Micro precision/recall/F1 of argmax predictions on a labeled set."""
    leaves = params.leaves(trainable=False)
    preds: list[int] = []
    for start in range(0, len(test_set), 64):
        chunk = test_set[start : start + 64]
        probs = batched_class_probs([ex.mention for ex in chunk], leaves, vocab)
        preds.extend(int(i) for i in np.argmax(probs.value, axis=1))
    return micro_prf(
        preds, [ex.label for ex in test_set], no_relation_index, params.num_classes
    )


def _chunks(items: Sequence, size: int) -> list[list]:
    return [list(items[i : i + size]) for i in range(0, len(items), size)]


def run_incremental(
    labeled: Sequence[LabeledExample],
    unlabeled_batches: Sequence[UnlabeledSet],
    test_set: Sequence[LabeledExample],
    classifier: ClassifierParams,
    labeler: ClassifierParams,
    cfg: SelfTrainConfig,
    meta_cfg: MetaConfig,
    vocab: Vocabulary,
    no_relation_index: int | None,
) -> TrainReport:
    """The incremental self-training loop.

    Trains the classifier on labeled data alone first, then per batch:
    meta-update the labeler, pseudo-label the batch, select the top slice,
    and continue classifier training on labeled plus all selected pseudo
    examples. Each unlabeled mention is offered exactly once. On a
    non-finite gradient the partial report is attached to the raised
    NonFiniteGradient.

    All randomness comes from ``cfg.seed``: the labeled list is permuted
    once (stage 0), labeler warmup shuffles with stage 1, and the classifier
    training before iteration i shuffles with stage 2 and index i (the
    initial labeled-only training is i=0).
    """
    if not labeled:
        raise EmptyBatch("the labeled set must be nonempty")
    if not unlabeled_batches:
        raise EmptyBatch("need at least one unlabeled batch")
    k = classifier.num_classes

    order_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    labeled = [labeled[int(i)] for i in order_rng.permutation(len(labeled))]

    c_state = init_optim_state(classifier, cfg.learning_rate)
    l_state = init_optim_state(labeler, meta_cfg.outer_lr)

    report = TrainReport(supervised=Metrics.zero(k))
    try:
        classifier, c_state, _ = _train_classifier(
            classifier, c_state, labeled, [], cfg.initial_epochs, cfg.batch_size, vocab,
            shuffle_seed=_stream_seed(cfg.seed, 2, 0),
        )
        report.supervised = evaluate_classifier(classifier, test_set, vocab, no_relation_index)

        if not cfg.no_meta and meta_cfg.warmup_epochs:
            labeler, l_state = supervised_warmup(
                labeler, labeled, meta_cfg.warmup_epochs, l_state, vocab, cfg.batch_size,
                shuffle_seed=_stream_seed(cfg.seed, 1, 0),
            )

        pseudo_pool: list[WeightedExample] = []
        for iteration, batch in enumerate(unlabeled_batches, start=1):
            if not cfg.no_meta:
                lchunks = _chunks(labeled, meta_cfg.labeled_batch_size)
                uchunks = _chunks(batch.mentions, meta_cfg.unlabeled_batch_size)
                for _ in range(cfg.meta_epochs):
                    for i, lchunk in enumerate(lchunks):
                        labeler, l_state, trace = meta_step(
                            classifier,
                            labeler,
                            lchunk,
                            uchunks[i % len(uchunks)],
                            meta_cfg,
                            l_state,
                            vocab,
                        )
                        report.meta_traces.append(
                            {
                                "iteration": iteration,
                                "inner_loss": trace.inner_loss,
                                "meta_loss": trace.meta_loss,
                                "grad_norm": trace.grad_norm,
                                "pseudo_count": trace.pseudo_count,
                            }
                        )

            labeling_params = classifier if cfg.no_meta else labeler
            pseudo = generate_pseudo_labels(labeling_params, batch.mentions, vocab)
            keep = 100.0 if cfg.no_selection else cfg.z_percent
            selected = select_top(pseudo, keep)
            pseudo_pool.extend(exploit(selected, batch.mentions, cfg.no_exploitation))

            classifier, c_state, losses = _train_classifier(
                classifier,
                c_state,
                labeled,
                pseudo_pool,
                cfg.epochs_per_batch,
                cfg.batch_size,
                vocab,
                shuffle_seed=_stream_seed(cfg.seed, 2, iteration),
            )

            metrics = evaluate_classifier(classifier, test_set, vocab, no_relation_index)
            all_f1 = pseudo_label_f1(pseudo, batch.shadow_golds, no_relation_index, k)
            sel_f1 = pseudo_label_f1(selected, batch.shadow_golds, no_relation_index, k)
            sel_hist = label_distribution([pl.label for pl in selected], k)
            gold_hist = label_distribution(list(batch.shadow_golds), k)
            report.records.append(
                IterationRecord(
                    iteration=iteration,
                    precision=metrics.precision,
                    recall=metrics.recall,
                    f1=metrics.f1,
                    pseudo_f1=all_f1.f1,
                    selected_pseudo_f1=sel_f1.f1,
                    selected_count=len(selected),
                    batch_size=len(batch),
                    mean_weight=float(np.mean([pl.confidence for pl in selected])),
                    distribution_l1=distribution_l1(sel_hist, gold_hist),
                    pseudo_hist=label_distribution([pl.label for pl in pseudo], k).tolist(),
                    selected_hist=sel_hist.tolist(),
                    gold_hist=gold_hist.tolist(),
                    train_losses=losses,
                )
            )
    except NonFiniteGradient as exc:
        report.aborted = True
        report.abort_reason = str(exc)
        raise NonFiniteGradient(str(exc), report=report) from exc
    report.final_classifier = classifier
    report.final_labeler = labeler if not cfg.no_meta else None
    return report
