"""Shared test oracles: central finite differences and random mentions.

The finite-difference helpers re-evaluate the objective from scratch on
perturbed arrays, so they are independent of the reverse-mode path they
check.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from metasre.encoder import make_mention


def central_diff(f: Callable[[np.ndarray], float], x0: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of a scalar function of one array."""
    g = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        up = x0.copy()
        up[idx] += step
        dn = x0.copy()
        dn[idx] -= step
        g[idx] = (f(up) - f(dn)) / (2.0 * step)
    return g


def central_diff_named(
    f: Callable[[Mapping[str, np.ndarray]], float],
    arrays: Mapping[str, np.ndarray],
    step: float = 1e-5,
    names: list[str] | None = None,
    coords: dict[str, list[tuple]] | None = None,
) -> dict[str, np.ndarray]:
    """Finite differences of a function of several named arrays.

    ``coords`` restricts the differencing to the listed multi-indices per
    tensor (entries left at 0 elsewhere); otherwise every coordinate of the
    selected tensors is perturbed.
    """
    out = {}
    for name in names if names is not None else list(arrays):
        base = arrays[name]
        g = np.zeros_like(base)
        if coords is not None:
            indices = coords.get(name, [])
        else:
            it = np.nditer(base, flags=["multi_index"])
            indices = [it.multi_index for _ in it]
        for idx in indices:
            up = {k: v for k, v in arrays.items()}
            up[name] = base.copy()
            up[name][idx] += step
            dn = {k: v for k, v in arrays.items()}
            dn[name] = base.copy()
            dn[name][idx] -= step
            g[idx] = (f(up) - f(dn)) / (2.0 * step)
        out[name] = g
    return out


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-5) -> float:
    """Largest elementwise relative error with a small absolute floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def random_mention(rng: np.random.Generator, num_tokens_range=(4, 9), vocab_tokens=6, gold=None):
    """Random valid mention with two disjoint single-token entity spans."""
    n = int(rng.integers(*num_tokens_range))
    tokens = [f"w{int(rng.integers(0, vocab_tokens))}" for _ in range(n)]
    s1 = int(rng.integers(0, n))
    s2 = int(rng.choice([i for i in range(n) if i != s1]))
    return make_mention(tokens, (s1, s1 + 1), (s2, s2 + 1), gold)


def primitive_cases(rng: np.random.Generator):
    """One random input set per autodiff primitive, on tensors up to 8x8."""
    from metasre import autodiff as ad

    b = int(rng.integers(1, 8))
    n = int(rng.integers(1, 8))
    m = int(rng.integers(1, 8))
    mat = rng.normal(size=(b, n))
    mat2 = rng.normal(size=(b, n))
    return {
        "add": ((mat, mat2), lambda a, c: ad.add(a, c)),
        "sub": ((mat, mat2), lambda a, c: ad.sub(a, c)),
        "mul": ((mat, mat2), lambda a, c: ad.mul(a, c)),
        "scalar_mul": ((mat,), lambda a: ad.scalar_mul(1.7, a)),
        "matmul": ((rng.normal(size=(b, m)), rng.normal(size=(m, n))), ad.matmul),
        "transpose": ((mat,), ad.transpose),
        "tanh": ((mat,), ad.tanh),
        "exp": ((0.5 * mat,), ad.exp),
        "log": ((np.abs(mat) + 0.5,), ad.log),
        "reciprocal": ((np.abs(mat) + 0.5,), ad.reciprocal),
        "clamp_min": ((mat,), lambda a: ad.clamp_min(a, 0.1)),
        "softmax_rows": ((mat,), ad.softmax_rows),
        "concat_rows": ((mat, rng.normal(size=(2, n))), lambda a, c: ad.concat([a, c], 0)),
        "concat_cols": ((mat, rng.normal(size=(b, 3))), lambda a, c: ad.concat([a, c], 1)),
        "narrow": ((mat,), lambda a: ad.narrow(a, 1, 0, max(1, n // 2))),
        "index_select_row": ((mat,), lambda a: ad.index_select_row(a, b - 1)),
        "sum_rows": ((mat,), ad.sum_rows),
        "tile_cols": ((rng.normal(size=(b, 1)),), lambda a: ad.tile_cols(a, n)),
        "sum_cols": ((mat,), ad.sum_cols),
        "tile_rows": ((rng.normal(size=(1, n)),), lambda a: ad.tile_rows(a, b)),
        "mean": ((mat,), ad.mean),
        "weighted_sum": ((mat2[:, :1], mat[:, :1]), lambda a, c: ad.weighted_sum(a, c)),
    }


def primitive_probe(op):
    """Scalarize an op's output so it can be finite-differenced."""
    from metasre import autodiff as ad

    def build(values):
        leaves = [ad.leaf(v, trainable=True) for v in values]
        out = op(*leaves)
        mixer = ad.constant(np.random.default_rng(123).normal(size=out.value.shape))
        return ad.sum_all(ad.mul(ad.tanh(out), mixer)), leaves

    return build


def check_primitives_against_fd(seed: int) -> None:
    """Assert every primitive's gradient matches central differences once."""
    from metasre import autodiff as ad

    rng = np.random.default_rng(seed)
    cases = primitive_cases(rng)
    for name, (arrays, op) in cases.items():
        build = primitive_probe(op)
        loss, leaves = build(arrays)
        grads = ad.grad(loss, leaves)
        for i, arr in enumerate(arrays):

            def f(x, i=i):
                vals = list(arrays)
                vals[i] = x
                return build(vals)[0].item()

            fd = central_diff(f, np.asarray(arr, dtype=np.float64), step=1e-5)
            err = max_rel_err(grads[i].value, fd)
            assert err < 1e-4, f"{name} input {i}: rel err {err}"
