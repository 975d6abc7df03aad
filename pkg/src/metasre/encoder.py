"""Entity-marked token sequences and the contextualized pair encoder.

A relation mention is a tokenized sentence with two non-overlapping entity
spans. Four reserved marker tokens are inserted around the spans, and the
pair representation is the concatenation of the hidden states at the two
start markers, each produced by a small bidirectional recurrent context
network (embedding lookup followed by forward and backward tanh recurrences
of width ``hidden_size / 2``).

Vocabulary and parameter snapshots are immutable; encoding different
mentions against the same snapshot is safe to run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ConfigError, EmptyCorpus, SpanError, VocabError

E1_START_ID = 0
E1_END_ID = 1
E2_START_ID = 2
E2_END_ID = 3
UNKNOWN_ID = 4
RESERVED_TOKENS = ("[E1_START]", "[E1_END]", "[E2_START]", "[E2_END]", "[UNK]")
MARKER_IDS = frozenset((E1_START_ID, E1_END_ID, E2_START_ID, E2_END_ID))

#: marked sequences longer than this are rejected rather than truncated,
#: which keeps recorded marker positions valid
MAX_SEQUENCE_LEN = 128


@dataclass(frozen=True)
class RelationMention:
    """One sentence with two entity spans and an optional gold label."""

    tokens: tuple[str, ...]
    e1_span: tuple[int, int]  # [start, end) token indices
    e2_span: tuple[int, int]
    gold_label: int | None = None


def make_mention(
    tokens: Sequence[str],
    e1_span: Sequence[int],
    e2_span: Sequence[int],
    gold_label: int | None = None,
) -> RelationMention:
    return RelationMention(
        tokens=tuple(tokens),
        e1_span=(int(e1_span[0]), int(e1_span[1])),
        e2_span=(int(e2_span[0]), int(e2_span[1])),
        gold_label=None if gold_label is None else int(gold_label),
    )


def validate_mention(m: RelationMention) -> None:
    """Raise SpanError unless spans are in range, disjoint, and unnested."""
    t = len(m.tokens)
    for name, (start, end) in (("e1", m.e1_span), ("e2", m.e2_span)):
        if not (0 <= start < end <= t):
            raise SpanError(f"{name} span [{start},{end}) invalid for {t} tokens")
    (s1, e1), (s2, e2) = m.e1_span, m.e2_span
    if not (e1 <= s2 or e2 <= s1):
        raise SpanError(f"entity spans [{s1},{e1}) and [{s2},{e2}) overlap")
    if t + 4 > MAX_SEQUENCE_LEN:
        raise SpanError(f"marked sequence length {t + 4} exceeds {MAX_SEQUENCE_LEN}")


@dataclass(frozen=True)
class MarkedSequence:
    """Token ids with the four markers inserted and start positions recorded."""

    token_ids: tuple[int, ...]
    e1_start_pos: int
    e2_start_pos: int


@dataclass(frozen=True)
class Vocabulary:
    """Dense token-to-id map; ids 0..3 are markers, id 4 is the unknown token."""

    id_to_token: tuple[str, ...]
    token_to_id: Mapping[str, int]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNKNOWN_ID)


def build_vocab(corpus: Iterable[RelationMention]) -> Vocabulary:
    """Deterministic vocabulary: reserved ids, then tokens sorted lexically."""
    tokens: set[str] = set()
    count = 0
    for m in corpus:
        count += 1
        tokens.update(m.tokens)
    if count == 0:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    ordered = RESERVED_TOKENS + tuple(sorted(tokens))
    return Vocabulary(
        id_to_token=ordered,
        token_to_id={tok: i for i, tok in enumerate(ordered) if i >= len(RESERVED_TOKENS)},
    )


def insert_entity_markers(m: RelationMention, v: Vocabulary) -> MarkedSequence:
    """Insert the four reserved marker ids around the entity spans.

    The relative order of the original tokens is preserved and the output is
    exactly four ids longer, so deleting the marker ids recovers the original
    id sequence.
    """
    validate_mention(m)
    ids = [v.id_of(tok) for tok in m.tokens]
    first = m.e1_span[1] <= m.e2_span[0]
    (sa, ea) = m.e1_span if first else m.e2_span
    (sb, eb) = m.e2_span if first else m.e1_span
    (ma_s, ma_e) = (E1_START_ID, E1_END_ID) if first else (E2_START_ID, E2_END_ID)
    (mb_s, mb_e) = (E2_START_ID, E2_END_ID) if first else (E1_START_ID, E1_END_ID)
    out = (
        ids[:sa]
        + [ma_s]
        + ids[sa:ea]
        + [ma_e]
        + ids[ea:sb]
        + [mb_s]
        + ids[sb:eb]
        + [mb_e]
        + ids[eb:]
    )
    pos_a = sa
    pos_b = sb + 2
    e1_pos, e2_pos = (pos_a, pos_b) if first else (pos_b, pos_a)
    return MarkedSequence(token_ids=tuple(out), e1_start_pos=e1_pos, e2_start_pos=e2_pos)


def strip_markers(seq: MarkedSequence) -> tuple[int, ...]:
    """Original token ids with the four marker ids removed."""
    return tuple(t for t in seq.token_ids if t not in MARKER_IDS)


@dataclass(frozen=True)
class EncoderParams:
    """Embedding table plus forward/backward recurrent context weights."""

    embedding: np.ndarray  # V x d_emb
    fw_wx: np.ndarray  # d_emb x (h/2)
    fw_wh: np.ndarray  # (h/2) x (h/2)
    fw_b: np.ndarray  # 1 x (h/2)
    bw_wx: np.ndarray
    bw_wh: np.ndarray
    bw_b: np.ndarray

    def __post_init__(self):
        half = self.fw_wx.shape[1]
        d_emb = self.embedding.shape[1]
        ok = (
            self.fw_wx.shape == (d_emb, half)
            and self.fw_wh.shape == (half, half)
            and self.fw_b.shape == (1, half)
            and self.bw_wx.shape == (d_emb, half)
            and self.bw_wh.shape == (half, half)
            and self.bw_b.shape == (1, half)
        )
        if not ok:
            raise ConfigError("inconsistent encoder parameter shapes")

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def hidden_size(self) -> int:
        return 2 * self.fw_wx.shape[1]


ENCODER_PARAM_NAMES = ("embedding", "fw_wx", "fw_wh", "fw_b", "bw_wx", "bw_wh", "bw_b")


def init_encoder_params(
    rng: np.random.Generator, vocab_size: int, hidden_size: int, embedding_dim: int
) -> EncoderParams:
    if hidden_size < 2 or hidden_size % 2:
        raise ConfigError(f"hidden_size must be a positive even number, got {hidden_size}")
    if embedding_dim < 1:
        raise ConfigError(f"embedding_dim must be positive, got {embedding_dim}")
    if vocab_size < len(RESERVED_TOKENS):
        raise ConfigError(f"vocab_size must cover the {len(RESERVED_TOKENS)} reserved ids")
    half = hidden_size // 2
    u = lambda *shape: rng.uniform(-0.1, 0.1, size=shape)
    return EncoderParams(
        embedding=u(vocab_size, embedding_dim),
        fw_wx=u(embedding_dim, half),
        fw_wh=u(half, half),
        fw_b=u(1, half),
        bw_wx=u(embedding_dim, half),
        bw_wh=u(half, half),
        bw_b=u(1, half),
    )


def encoder_forward(
    seq: MarkedSequence,
    params: Mapping[str, Node],
    proj_cache: dict | None = None,
) -> Node:
    """Pair representation of a marked sequence: a 1 x hidden*2 node.

    Runs a forward and a backward tanh recurrence (zero initial state), takes
    the concatenated per-position state at each start marker, and concatenates
    the two. Differentiable with respect to every parameter node.

    ``proj_cache`` memoizes the per-token-id input projections so that
    repeated ids within one graph share subexpressions; pass one dict per
    loss graph when encoding a batch.
    """
    emb = params["embedding"]
    vocab_size = emb.shape[0]
    for tid in seq.token_ids:
        if not 0 <= tid < vocab_size:
            raise VocabError(f"token id {tid} outside embedding table of {vocab_size}")
    if proj_cache is None:
        proj_cache = {}

    def projected(tid: int, tag: str, wx: Node, b: Node) -> Node:
        key = (tid, tag)
        node = proj_cache.get(key)
        if node is None:
            node = ad.add(ad.matmul(ad.index_select_row(emb, tid), wx), b)
            proj_cache[key] = node
        return node

    def run(ids, wx, wh, b, tag):
        states = []
        prev = None
        for tid in ids:
            z = projected(tid, tag, wx, b)
            if prev is not None:
                z = ad.add(z, ad.matmul(prev, wh))
            prev = ad.tanh(z)
            states.append(prev)
        return states

    fwd = run(seq.token_ids, params["fw_wx"], params["fw_wh"], params["fw_b"], "f")
    bwd = run(
        tuple(reversed(seq.token_ids)),
        params["bw_wx"],
        params["bw_wh"],
        params["bw_b"],
        "b",
    )
    bwd.reverse()

    def state_at(pos: int) -> Node:
        return ad.concat([fwd[pos], bwd[pos]], axis=1)

    return ad.concat([state_at(seq.e1_start_pos), state_at(seq.e2_start_pos)], axis=1)


def encoder_leaves(p: EncoderParams, trainable: bool = True) -> dict[str, Node]:
    """Fresh graph leaves for each encoder tensor, in declaration order."""
    return {name: ad.leaf(getattr(p, name), trainable=trainable) for name in ENCODER_PARAM_NAMES}


def encode(seq: MarkedSequence, p: EncoderParams) -> Node:
    """Evaluate the pair representation against a parameter snapshot.

    For training, build leaves once with :func:`encoder_leaves` and call
    :func:`encoder_forward` so gradients can be taken against them.
    """
    return encoder_forward(seq, encoder_leaves(p, trainable=False))
