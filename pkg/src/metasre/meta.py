"""Meta update of the labeler through a differentiable classifier step.

One meta step:

 1. the labeler scores a batch of unlabeled mentions; the argmax class of
    each row becomes its pseudo label (a constant) and the max probability
    becomes its weight (a graph node, so gradients can flow back into the
    labeler),
 2. those weighted pseudo terms join the labeled batch in the classifier's
    confidence-weighted loss,
 3. the classifier takes one differentiable gradient-descent step, giving
    one-step-updated parameters still connected to the labeler's leaves,
 4. the labeled loss is re-evaluated at the updated parameters,
 5. the gradient of that loss with respect to the labeler drives one
    optimizer step on the labeler.

The classifier itself is never modified here, and the labeler influences the
objective only through the pseudo weights: replacing them with constant
zeros severs the path and makes the labeler gradient exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .encoder import RelationMention, Vocabulary
from .errors import ConfigError, EmptyBatch, NonFiniteGradient
from .networks import (
    ClassifierParams,
    LabeledExample,
    OptimState,
    WeightedExample,
    adam_step,
    batched_class_probs,
    classification_loss,
    one_hot,
)


@dataclass(frozen=True)
class MetaConfig:
    """Knobs of the meta update.

    ``inner_lr`` is the step size of the differentiable classifier update;
    ``outer_lr`` drives the labeler's optimizer. ``warmup_epochs`` of plain
    supervised training on the labeled set precede the first meta update
    (set to 0 for the strictly meta-only variant). ``first_order`` skips the
    second-order path as a cheap escape hatch; note that in this
    architecture the labeler reaches the objective only through the inner
    gradient, so the first-order labeler gradient is identically zero.
    """

    inner_lr: float = 1e-4
    outer_lr: float = 1e-4
    warmup_epochs: int = 1
    labeled_batch_size: int = 8
    unlabeled_batch_size: int = 8
    first_order: bool = False

    def __post_init__(self):
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be >= 0")
        if self.labeled_batch_size < 1 or self.unlabeled_batch_size < 1:
            raise ConfigError("meta batch sizes must be >= 1")


@dataclass(frozen=True)
class MetaStepTrace:
    """Diagnostics of one meta step."""

    inner_loss: float
    meta_loss: float
    grad_norm: float
    pseudo_count: int


def pseudo_terms(
    labeler: Mapping[str, Node],
    mentions: Sequence[RelationMention],
    vocab: Vocabulary,
) -> list[WeightedExample]:
    """Pseudo label (argmax, constant) and weight (max probability, node)
    for each mention, scored by the labeler."""
    if not mentions:
        raise EmptyBatch("no unlabeled mentions to pseudo-label")
    probs = batched_class_probs(mentions, labeler, vocab)
    terms = []
    for i, m in enumerate(mentions):
        row = ad.narrow(probs, 0, i, 1)
        label = int(np.argmax(row.value[0]))
        weight = ad.narrow(row, 1, label, 1)
        terms.append(WeightedExample(mention=m, label=label, weight=weight))
    return terms


def inner_update(
    tau: Mapping[str, Node], inner_loss: Node, inner_lr: float, create_graph: bool = True
) -> dict[str, Node]:
    """One differentiable descent step on the classifier leaves.

    The returned tensors stay connected to every upstream leaf, including
    the labeler whenever the loss contains labeler-weighted pseudo terms.
    A zero step size returns the leaves unchanged (bitwise).
    """
    leaves = list(tau.values())
    if inner_lr == 0.0:
        return dict(tau)
    grads = ad.grad(inner_loss, leaves, create_graph=create_graph)
    return {
        name: ad.sub(leaf, ad.scalar_mul(inner_lr, g))
        for (name, leaf), g in zip(tau.items(), grads)
    }


def meta_loss(
    tau_plus: Mapping[str, Node],
    labeled: Sequence[LabeledExample],
    vocab: Vocabulary,
) -> Node:
    """Sum of labeled cross entropies evaluated at the updated classifier."""
    if not labeled:
        raise EmptyBatch("meta loss needs labeled examples")
    num_classes = tau_plus["dense2_w"].shape[1]
    probs = batched_class_probs([ex.mention for ex in labeled], tau_plus, vocab)
    targets = one_hot([ex.label for ex in labeled], num_classes)
    return ad.sum_all(ad.nll_rows(probs, targets))


def meta_objective(
    classifier: ClassifierParams,
    labeler: ClassifierParams,
    labeled: Sequence[LabeledExample],
    unlabeled: Sequence[RelationMention],
    inner_lr: float,
    vocab: Vocabulary,
    create_graph: bool = True,
) -> tuple[Node, dict[str, Node], Node, int]:
    """Build the full meta objective graph.

    Returns (meta loss, labeler leaves, inner loss, pseudo term count). With
    ``create_graph=False`` the inner step is detached, which is enough when
    only the objective's value is needed (e.g. finite differencing).
    """
    if not labeled or not unlabeled:
        raise EmptyBatch("meta objective needs nonempty labeled and unlabeled batches")
    eta_leaves = labeler.leaves()
    terms = pseudo_terms(eta_leaves, unlabeled, vocab)
    tau_leaves = classifier.leaves()
    inner = classification_loss(labeled, terms, tau_leaves, vocab)
    tau_plus = inner_update(tau_leaves, inner, inner_lr, create_graph=create_graph)
    return meta_loss(tau_plus, labeled, vocab), eta_leaves, inner, len(terms)


def grad_global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def meta_step(
    classifier: ClassifierParams,
    labeler: ClassifierParams,
    labeled_batch: Sequence[LabeledExample],
    unlabeled_batch: Sequence[RelationMention],
    cfg: MetaConfig,
    labeler_state: OptimState,
    vocab: Vocabulary,
) -> tuple[ClassifierParams, OptimState, MetaStepTrace]:
    """One labeler update through the one-step-lookahead objective.

    The classifier parameters are read-only here. Raises NonFiniteGradient
    if the labeler gradient diverges.
    """
    loss, eta_leaves, inner, count = meta_objective(
        classifier,
        labeler,
        labeled_batch,
        unlabeled_batch,
        cfg.inner_lr,
        vocab,
        create_graph=not cfg.first_order,
    )
    grad_nodes = ad.grad(loss, list(eta_leaves.values()))
    grads = {name: g.value for name, g in zip(eta_leaves, grad_nodes)}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"labeler gradient for {name!r} is not finite")
    new_labeler, new_state = adam_step(labeler, grads, labeler_state)
    trace = MetaStepTrace(
        inner_loss=inner.item(),
        meta_loss=loss.item(),
        grad_norm=grad_global_norm(grads),
        pseudo_count=count,
    )
    return new_labeler, new_state, trace


def supervised_warmup(
    labeler: ClassifierParams,
    labeled: Sequence[LabeledExample],
    epochs: int,
    state: OptimState,
    vocab: Vocabulary,
    batch_size: int = 16,
    shuffle_seed: int | None = None,
) -> tuple[ClassifierParams, OptimState]:
    """Plain cross-entropy training of the labeler on labeled data only.

    Zero epochs is a no-op. The result is fully determined by the inputs:
    without a ``shuffle_seed`` batches are fixed-order chunks, with one the
    stream is re-permuted per epoch from ``SeedSequence([seed, epoch])``.
    """
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    if not labeled:
        raise EmptyBatch("warmup needs labeled examples")
    for epoch in range(epochs):
        if shuffle_seed is None:
            stream = list(labeled)
        else:
            rng = np.random.default_rng(np.random.SeedSequence([shuffle_seed, epoch]))
            stream = [labeled[int(i)] for i in rng.permutation(len(labeled))]
        for start in range(0, len(stream), batch_size):
            chunk = stream[start : start + batch_size]
            leaves = labeler.leaves()
            loss = classification_loss(chunk, [], leaves, vocab)
            grad_nodes = ad.grad(loss, list(leaves.values()))
            grads = {name: g.value for name, g in zip(leaves, grad_nodes)}
            for name, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise NonFiniteGradient(f"warmup gradient for {name!r} is not finite")
            labeler, state = adam_step(labeler, grads, state)
    return labeler, state
