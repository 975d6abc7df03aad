"""Classifier architecture shared by the main classifier and the labeler.

Both networks are the same shape: the pair encoder followed by a dense head
``2*hidden -> hidden -> num_classes`` with a tanh between the dense layers
and a row softmax on top. The classification loss sums plain cross entropy
over golden examples and confidence-weighted cross entropy over pseudo
examples; weights may be graph nodes (differentiable, as in a meta step) or
plain floats (frozen, as produced by exploitation).

Parameter snapshots are immutable; optimizer steps return new snapshots, so
evaluation may keep reading an old snapshot while training produces the next
one.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import json

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .encoder import (
    ENCODER_PARAM_NAMES,
    RESERVED_TOKENS,
    EncoderParams,
    RelationMention,
    Vocabulary,
    encoder_forward,
    init_encoder_params,
    insert_entity_markers,
)
from .errors import ConfigError, EmptyBatch, ShapeError

HEAD_PARAM_NAMES = ("dense1_w", "dense1_b", "dense2_w", "dense2_b")
PARAM_NAMES = ENCODER_PARAM_NAMES + HEAD_PARAM_NAMES

CHECKPOINT_FORMAT = "metasre.params.v1"


@dataclass(frozen=True)
class ClassifierParams:
    """Full parameter snapshot of one network (encoder plus dense head)."""

    encoder: EncoderParams
    dense1_w: np.ndarray  # 2h x h
    dense1_b: np.ndarray  # 1 x h
    dense2_w: np.ndarray  # h x K
    dense2_b: np.ndarray  # 1 x K
    role: str = ""

    def __post_init__(self):
        h = self.encoder.hidden_size
        k = self.dense2_w.shape[1]
        ok = (
            self.dense1_w.shape == (2 * h, h)
            and self.dense1_b.shape == (1, h)
            and self.dense2_w.shape == (h, k)
            and self.dense2_b.shape == (1, k)
        )
        if not ok:
            raise ConfigError("head shapes must follow 2h -> h -> K")

    @property
    def num_classes(self) -> int:
        return self.dense2_w.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.encoder.hidden_size

    def to_dict(self) -> dict[str, np.ndarray]:
        d = {name: getattr(self.encoder, name) for name in ENCODER_PARAM_NAMES}
        d.update({name: getattr(self, name) for name in HEAD_PARAM_NAMES})
        return d

    def leaves(self, trainable: bool = True) -> dict[str, Node]:
        """Fresh graph leaves for every tensor, in canonical name order."""
        return {name: ad.leaf(arr, trainable=trainable) for name, arr in self.to_dict().items()}


def params_from_arrays(arrays: Mapping[str, np.ndarray], role: str = "") -> ClassifierParams:
    missing = [n for n in PARAM_NAMES if n not in arrays]
    if missing:
        raise ConfigError(f"missing parameter tensors: {missing}")
    enc = EncoderParams(**{n: np.asarray(arrays[n], dtype=np.float64) for n in ENCODER_PARAM_NAMES})
    return ClassifierParams(
        encoder=enc,
        dense1_w=np.asarray(arrays["dense1_w"], dtype=np.float64),
        dense1_b=np.asarray(arrays["dense1_b"], dtype=np.float64),
        dense2_w=np.asarray(arrays["dense2_w"], dtype=np.float64),
        dense2_b=np.asarray(arrays["dense2_b"], dtype=np.float64),
        role=role,
    )


def init_params(
    seed: int,
    num_classes: int,
    hidden_size: int = 32,
    embedding_dim: int = 16,
    vocab_size: int = 5,
    role: str = "",
) -> ClassifierParams:
    """Seeded uniform(-0.1, 0.1) initialization of every tensor.

    The classifier and the labeler must be created with different seeds so
    they start from genuinely independent parameters.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    enc = init_encoder_params(rng, vocab_size, hidden_size, embedding_dim)
    u = lambda *shape: rng.uniform(-0.1, 0.1, size=shape)
    return ClassifierParams(
        encoder=enc,
        dense1_w=u(2 * hidden_size, hidden_size),
        dense1_b=u(1, hidden_size),
        dense2_w=u(hidden_size, num_classes),
        dense2_b=u(1, num_classes),
        role=role,
    )


# --- forward passes -----------------------------------------------------------


def batched_class_probs(
    mentions: Sequence[RelationMention],
    params: Mapping[str, Node],
    vocab: Vocabulary,
    proj_cache: dict | None = None,
) -> Node:
    """Class probabilities for a batch of mentions as one [B, K] node."""
    if not mentions:
        raise EmptyBatch("cannot classify an empty batch")
    if proj_cache is None:
        proj_cache = {}
    reps = [
        encoder_forward(insert_entity_markers(m, vocab), params, proj_cache)
        for m in mentions
    ]
    h = reps[0] if len(reps) == 1 else ad.concat(reps, axis=0)
    b = len(mentions)
    a1 = ad.tanh(ad.add(ad.matmul(h, params["dense1_w"]), ad.tile_rows(params["dense1_b"], b)))
    logits = ad.add(ad.matmul(a1, params["dense2_w"]), ad.tile_rows(params["dense2_b"], b))
    return ad.softmax_rows(logits)


def classify(m: RelationMention, p: ClassifierParams, v: Vocabulary) -> Node:
    """Probability distribution over classes for one mention (1 x K node).

    Pure function of (mention, params); rows sum to 1. For differentiable
    use, call :func:`batched_class_probs` with leaves from ``p.leaves()``.
    """
    return batched_class_probs([m], p.leaves(trainable=False), v)


def predict(m: RelationMention, p: ClassifierParams, v: Vocabulary) -> tuple[int, float]:
    """Argmax class and its probability (ties break to the lowest index)."""
    row = classify(m, p, v).value[0]
    label = int(np.argmax(row))
    return label, float(row[label])


# --- the confidence-weighted classification loss ------------------------------


@dataclass(frozen=True)
class LabeledExample:
    """A mention with its golden relation label."""

    mention: RelationMention
    label: int


@dataclass(frozen=True)
class WeightedExample:
    """A pseudo-labeled mention with a confidence weight in [0, 1].

    ``weight`` is a float when frozen by exploitation, or a graph node when
    the labeler supplies it inside a meta step.
    """

    mention: RelationMention
    label: int
    weight: float | Node

    def __post_init__(self):
        if isinstance(self.weight, (int, float)) and not 0.0 <= self.weight <= 1.0:
            raise ConfigError(f"weight {self.weight} outside [0, 1]")


def one_hot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes))
    for i, lab in enumerate(labels):
        if not 0 <= lab < num_classes:
            raise ConfigError(f"label {lab} outside [0, {num_classes})")
        out[i, lab] = 1.0
    return out


def _weight_column(pseudo: Sequence[WeightedExample]) -> Node | np.ndarray:
    if any(isinstance(ex.weight, Node) for ex in pseudo):
        cells = [
            ex.weight if isinstance(ex.weight, Node) else ad.constant([[ex.weight]])
            for ex in pseudo
        ]
        return cells[0] if len(cells) == 1 else ad.concat(cells, axis=0)
    return np.asarray([[float(ex.weight)] for ex in pseudo])


def weighted_nll(
    golden_probs: Node | None,
    golden_labels: Sequence[int],
    pseudo_probs: Node | None,
    pseudo_labels: Sequence[int],
    pseudo_weights: Node | np.ndarray | None,
    num_classes: int,
) -> Node:
    """Sum of golden negative log likelihoods plus weighted pseudo ones.

    Either side may be absent; at least one must be present.
    """
    total: Node | None = None
    if golden_probs is not None:
        total = ad.sum_all(ad.nll_rows(golden_probs, one_hot(golden_labels, num_classes)))
    if pseudo_probs is not None:
        rows = ad.nll_rows(pseudo_probs, one_hot(pseudo_labels, num_classes))
        term = ad.weighted_sum(rows, pseudo_weights)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise EmptyBatch("loss over no examples")
    return total


def _loss_over(
    golden: Sequence[LabeledExample],
    pseudo: Sequence[WeightedExample],
    params: Mapping[str, Node],
    vocab: Vocabulary,
) -> Node:
    num_classes = params["dense2_w"].shape[1]
    cache: dict = {}
    g_probs = (
        batched_class_probs([ex.mention for ex in golden], params, vocab, cache)
        if golden
        else None
    )
    p_probs = (
        batched_class_probs([ex.mention for ex in pseudo], params, vocab, cache)
        if pseudo
        else None
    )
    return weighted_nll(
        g_probs,
        [ex.label for ex in golden],
        p_probs,
        [ex.label for ex in pseudo],
        _weight_column(pseudo) if pseudo else None,
        num_classes,
    )


def classification_loss(
    golden: Sequence[LabeledExample],
    pseudo: Sequence[WeightedExample],
    params: ClassifierParams | Mapping[str, Node],
    vocab: Vocabulary,
) -> Node:
    """The two-term training objective: golden cross entropy plus
    confidence-weighted pseudo cross entropy.

    ``pseudo`` may be empty (nothing has been pseudo-labeled yet); ``golden``
    may not, which catches harness bugs early.
    """
    if not golden:
        raise EmptyBatch("classification loss needs at least one golden example")
    if isinstance(params, ClassifierParams):
        params = params.leaves()
    return _loss_over(golden, pseudo, params, vocab)


# --- optimizers -----------------------------------------------------------------


@dataclass(frozen=True)
class OptimState:
    """Adaptive-moment accumulators for one parameter set (functional)."""

    learning_rate: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    v: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def init_optim_state(
    params: ClassifierParams,
    learning_rate: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimState:
    if learning_rate <= 0:
        raise ConfigError(f"learning rate must be positive, got {learning_rate}")
    zeros = {name: np.zeros_like(arr) for name, arr in params.to_dict().items()}
    return OptimState(
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        step=0,
        m=zeros,
        v={name: arr.copy() for name, arr in zeros.items()},
    )


def _check_grads(params: ClassifierParams, grads: Mapping[str, np.ndarray]) -> None:
    tensors = params.to_dict()
    for name, arr in tensors.items():
        g = grads.get(name)
        if g is None or g.shape != arr.shape:
            raise ShapeError(f"gradient for {name!r} missing or misshaped")


def adam_step(
    params: ClassifierParams,
    grads: Mapping[str, np.ndarray],
    state: OptimState,
) -> tuple[ClassifierParams, OptimState]:
    """One adaptive-moment update with bias correction. Deterministic;
    all-zero gradients leave the parameters unchanged."""
    _check_grads(params, grads)
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_arrays: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, arr in params.to_dict().items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_arrays[name] = arr - update
        new_m[name] = m
        new_v[name] = v
    new_params = params_from_arrays(new_arrays, role=params.role)
    new_state = replace(state, step=t, m=new_m, v=new_v)
    return new_params, new_state


def gd_step(
    params: ClassifierParams, grads: Mapping[str, np.ndarray], learning_rate: float
) -> ClassifierParams:
    """Plain gradient descent, matching the inner-update rule."""
    _check_grads(params, grads)
    new_arrays = {
        name: arr - learning_rate * grads[name] for name, arr in params.to_dict().items()
    }
    return params_from_arrays(new_arrays, role=params.role)


# --- checkpoints -----------------------------------------------------------------


def save_params(
    params: ClassifierParams, path, vocab: Vocabulary | None = None
) -> None:
    """Write a versioned JSON checkpoint of named tensors (plus the
    vocabulary, so a saved classifier can score raw mentions)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "role": params.role,
        "tensors": {
            name: {"shape": list(arr.shape), "data": arr.ravel().tolist()}
            for name, arr in params.to_dict().items()
        },
        "vocab": list(vocab.id_to_token) if vocab is not None else None,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_params(path) -> tuple[ClassifierParams, Vocabulary | None]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"unsupported checkpoint format {payload.get('format')!r}")
    arrays = {
        name: np.asarray(t["data"], dtype=np.float64).reshape(t["shape"])
        for name, t in payload["tensors"].items()
    }
    params = params_from_arrays(arrays, role=payload.get("role", ""))
    vocab = None
    if payload.get("vocab"):
        tokens = tuple(payload["vocab"])
        vocab = Vocabulary(
            id_to_token=tokens,
            token_to_id={t: i for i, t in enumerate(tokens) if i >= len(RESERVED_TOKENS)},
        )
    return params, vocab
