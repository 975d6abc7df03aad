"""Datasets, JSONL I/O, stratified splitting, batching, and synthetic corpora.

The one interchange format is JSONL: one UTF-8 object per line with keys
``tokens`` (list of strings), ``e1`` and ``e2`` (``[start, end)`` token
index pairs), and an optional ``relation`` name. Unlabeled files simply omit
``relation``.

Gold labels of unlabeled mentions survive only as *shadow* labels on the
side: the mention objects handed to training code carry ``gold_label=None``,
while diagnostics read the parallel shadow list. Keeping the shadows in the
same object (rather than a parallel file) prevents desynchronization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .encoder import RelationMention, make_mention, validate_mention
from .errors import ConfigError, LabelError, ParseError, SpanError, SplitError
from .networks import LabeledExample

NO_RELATION_NAME = "no_relation"


@dataclass(frozen=True)
class Dataset:
    mentions: tuple[RelationMention, ...]
    label_names: tuple[str, ...]
    no_relation_index: int | None

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def __post_init__(self):
        if len(set(self.label_names)) != len(self.label_names):
            raise ConfigError("label names must be unique")
        k = len(self.label_names)
        for m in self.mentions:
            if m.gold_label is not None and not 0 <= m.gold_label < k:
                raise ConfigError(f"gold label {m.gold_label} outside [0, {k})")


@dataclass(frozen=True)
class SplitSpec:
    """Stratified labeled/unlabeled split fractions."""

    labeled_fraction: float
    unlabeled_fraction: float
    seed: int = 0

    def __post_init__(self):
        lf, uf = self.labeled_fraction, self.unlabeled_fraction
        if not (0.0 < lf <= 1.0) or not (0.0 <= uf <= 1.0):
            raise ConfigError("fractions must lie in (0, 1]")
        if lf + uf > 1.0 + 1e-12:
            raise ConfigError("labeled + unlabeled fractions exceed 1")


@dataclass(frozen=True)
class UnlabeledSet:
    """Mentions stripped of gold labels plus the parallel shadow labels.

    Training code must only touch ``mentions``; ``shadow_golds`` exists for
    diagnostics.
    """

    mentions: tuple[RelationMention, ...]
    shadow_golds: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.mentions)


# --- JSONL ---------------------------------------------------------------------


def load_jsonl(path, label_names: Sequence[str] | None = None) -> Dataset:
    """Read a JSONL dataset; the label set is the sorted distinct relation
    names unless an explicit ``label_names`` pins it (unknown names then
    raise LabelError)."""
    raw: list[tuple[list[str], tuple[int, int], tuple[int, int], str | None]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                tokens = [str(t) for t in obj["tokens"]]
                e1 = (int(obj["e1"][0]), int(obj["e1"][1]))
                e2 = (int(obj["e2"][0]), int(obj["e2"][1]))
                relation = obj.get("relation")
            except (KeyError, TypeError, ValueError, IndexError, json.JSONDecodeError) as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            try:
                validate_mention(make_mention(tokens, e1, e2))
            except SpanError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            raw.append((tokens, e1, e2, relation))

    if label_names is None:
        names = tuple(sorted({r for *_, r in raw if r is not None}))
    else:
        names = tuple(label_names)
    index = {name: i for i, name in enumerate(names)}
    mentions = []
    for lineno_offset, (tokens, e1, e2, relation) in enumerate(raw):
        gold = None
        if relation is not None:
            if relation not in index:
                raise LabelError(f"unknown relation name {relation!r}")
            gold = index[relation]
        mentions.append(make_mention(tokens, e1, e2, gold))
    return Dataset(
        mentions=tuple(mentions),
        label_names=names,
        no_relation_index=index.get(NO_RELATION_NAME),
    )


def save_jsonl(dataset: Dataset, path) -> None:
    """Write the dataset; loading the file back reproduces an equal Dataset."""
    with open(path, "w", encoding="utf-8") as fh:
        for m in dataset.mentions:
            obj = {
                "tokens": list(m.tokens),
                "e1": list(m.e1_span),
                "e2": list(m.e2_span),
            }
            if m.gold_label is not None:
                obj["relation"] = dataset.label_names[m.gold_label]
            fh.write(json.dumps(obj, sort_keys=True))
            fh.write("\n")


# --- stratified splitting ---------------------------------------------------------


def _canonical_key(m: RelationMention):
    return (m.tokens, m.e1_span, m.e2_span, m.gold_label)


def _largest_remainder(quotas: Sequence[float], total: int) -> list[int]:
    """Integer allocation summing to ``total`` that tracks fractional quotas."""
    base = [math.floor(q) for q in quotas]
    remainder = total - sum(base)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:remainder]:
        base[i] += 1
    return base


def _per_class(mentions: Sequence[RelationMention]) -> dict[int, list[RelationMention]]:
    groups: dict[int, list[RelationMention]] = {}
    for m in mentions:
        if m.gold_label is None:
            raise SplitError("stratified splitting requires gold labels on every mention")
        groups.setdefault(m.gold_label, []).append(m)
    for members in groups.values():
        members.sort(key=_canonical_key)
    return groups


def stratified_split(
    d: Dataset, spec: SplitSpec
) -> tuple[list[LabeledExample], UnlabeledSet, list[RelationMention]]:
    """Per-class proportional split into (labeled, unlabeled, rest).

    Counts per class follow largest-remainder rounding, selection within a
    class is a seeded permutation of the canonically sorted members, so the
    result is invariant under reordering of the input. A nonzero fraction
    that would leave some class empty raises SplitError, because the split
    would no longer preserve the label distribution.
    """
    groups = _per_class(d.mentions)
    classes = sorted(groups)
    sizes = [len(groups[c]) for c in classes]
    n = sum(sizes)

    labeled_counts = _largest_remainder(
        [spec.labeled_fraction * s for s in sizes], round(spec.labeled_fraction * n)
    )
    unlabeled_counts = _largest_remainder(
        [spec.unlabeled_fraction * s for s in sizes], round(spec.unlabeled_fraction * n)
    )
    for c, size, lab, unl in zip(classes, sizes, labeled_counts, unlabeled_counts):
        if lab + unl > size:
            raise SplitError(f"class {c} has {size} mentions, needs {lab + unl}")
        if spec.labeled_fraction > 0 and lab == 0:
            raise SplitError(f"labeled fraction leaves class {c} empty")
        if spec.unlabeled_fraction > 0 and unl == 0:
            raise SplitError(f"unlabeled fraction leaves class {c} empty")

    labeled: list[LabeledExample] = []
    unl_mentions: list[RelationMention] = []
    unl_shadows: list[int] = []
    rest: list[RelationMention] = []
    for c, lab, unl in zip(classes, labeled_counts, unlabeled_counts):
        members = groups[c]
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, c]))
        order = rng.permutation(len(members))
        for j, idx in enumerate(order):
            m = members[int(idx)]
            if j < lab:
                labeled.append(LabeledExample(mention=m, label=c))
            elif j < lab + unl:
                unl_mentions.append(replace(m, gold_label=None))
                unl_shadows.append(c)
            else:
                rest.append(m)
    return (
        labeled,
        UnlabeledSet(mentions=tuple(unl_mentions), shadow_golds=tuple(unl_shadows)),
        rest,
    )


def partition_unlabeled(unlabeled: UnlabeledSet, num_batches: int, seed: int) -> list[UnlabeledSet]:
    """Disjoint near-equal batches stratified by shadow gold label.

    Every batch gets a proportional slice of each class (round-robin with a
    rotating start so total sizes stay within one of each other); the union
    of the batches is exactly the input.
    """
    if num_batches < 1:
        raise SplitError("need at least one batch")
    if num_batches > len(unlabeled):
        raise SplitError(f"cannot split {len(unlabeled)} mentions into {num_batches} batches")

    groups: dict[int, list[int]] = {}
    for i, shadow in enumerate(unlabeled.shadow_golds):
        groups.setdefault(shadow, []).append(i)
    for members in groups.values():
        members.sort(key=lambda i: _canonical_key(unlabeled.mentions[i]))

    batches: list[list[int]] = [[] for _ in range(num_batches)]
    start = 0
    for c in sorted(groups):
        members = groups[c]
        rng = np.random.default_rng(np.random.SeedSequence([seed, c]))
        order = rng.permutation(len(members))
        for j, idx in enumerate(order):
            batches[(start + j) % num_batches].append(members[int(idx)])
        start = (start + len(members)) % num_batches

    return [
        UnlabeledSet(
            mentions=tuple(unlabeled.mentions[i] for i in batch),
            shadow_golds=tuple(unlabeled.shadow_golds[i] for i in batch),
        )
        for batch in batches
    ]


# --- synthetic corpora --------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Seeded synthetic relation-classification corpus.

    Sentences follow ``<noise>* <E1> <cue-phrase(class)> <E2> <noise>*``;
    each class owns three disjoint cue phrases, while mentions of the
    no-relation class carry neutral filler between the entities. With
    probability ``ambiguity`` a mention instead carries a misleading cue
    from a random other class, injecting irreducible label noise so pseudo
    labels are fallible.
    """

    num_classes: int
    num_mentions: int
    no_relation_share: float = 0.174
    vocab_size: int = 100
    ambiguity: float = 0.0
    min_len: int = 6
    max_len: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.num_mentions < self.num_classes:
            raise ConfigError("need at least one mention per class")
        if not 0.0 <= self.no_relation_share < 1.0:
            raise ConfigError("no_relation_share must be in [0, 1)")
        if not 0.0 <= self.ambiguity < 1.0:
            raise ConfigError("ambiguity must be in [0, 1)")
        if self.vocab_size < 8:
            raise ConfigError("vocab_size must be at least 8")
        if self.min_len < 4 or self.max_len < self.min_len:
            raise ConfigError("need max_len >= min_len >= 4")
        if self.max_len + 4 > 128:
            raise ConfigError("max_len exceeds the encoder's sequence limit")


def _cue_phrases(class_index: int) -> list[tuple[str, ...]]:
    tag = f"cue{class_index:02d}"
    return [(f"{tag}a",), (f"{tag}b",)]


def synth_generate(spec: SynthSpec) -> Dataset:
    """Deterministic synthetic corpus for the given spec.

    The no-relation class receives ``no_relation_share`` of the mentions
    (within one mention, by largest-remainder rounding) and the remaining
    classes share the rest evenly.
    """
    k = spec.num_classes
    label_names = tuple(sorted([NO_RELATION_NAME] + [f"rel{c:02d}" for c in range(1, k)]))
    norel = label_names.index(NO_RELATION_NAME)

    quotas = [
        spec.no_relation_share * spec.num_mentions
        if c == norel
        else (1.0 - spec.no_relation_share) * spec.num_mentions / (k - 1)
        for c in range(k)
    ]
    counts = _largest_remainder(quotas, spec.num_mentions)

    rng = np.random.default_rng(spec.seed)
    noise = [f"w{i:03d}" for i in range(spec.vocab_size)]
    entities = [f"ent{i:02d}" for i in range(max(8, spec.vocab_size // 4))]
    cues = {c: _cue_phrases(c) for c in range(k) if c != norel}
    relation_classes = [c for c in range(k) if c != norel]

    def pick_noise(count: int) -> list[str]:
        return [noise[int(rng.integers(0, len(noise)))] for _ in range(count)]

    mentions: list[RelationMention] = []
    for c in range(k):
        for _ in range(counts[c]):
            misleading = rng.random() < spec.ambiguity
            if c != norel:
                cue_class = c
                if misleading:
                    others = [o for o in relation_classes if o != c]
                    cue_class = int(rng.choice(others)) if others else c
                phrases = cues[cue_class]
                middle = list(phrases[int(rng.integers(0, len(phrases)))])
            elif misleading and relation_classes:
                cue_class = int(rng.choice(relation_classes))
                phrases = cues[cue_class]
                middle = list(phrases[int(rng.integers(0, len(phrases)))])
            else:
                middle = pick_noise(int(rng.integers(1, 3)))

            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            core = 2 + len(middle)
            outer = max(0, length - core)
            pre = int(rng.integers(0, outer + 1))
            post = outer - pre
            e1 = entities[int(rng.integers(0, len(entities)))]
            e2 = entities[int(rng.integers(0, len(entities)))]
            tokens = pick_noise(pre) + [e1] + middle + [e2] + pick_noise(post)
            s1 = pre
            s2 = pre + 1 + len(middle)
            mentions.append(make_mention(tokens, (s1, s1 + 1), (s2, s2 + 1), c))

    return Dataset(mentions=tuple(mentions), label_names=label_names, no_relation_index=norel)
