"""Adapter composition: linear averaging, factor concatenation, sign-elected
trimmed averaging, and random drop-with-rescale preprocessing.

All methods except concatenation work on dense per-target deltas, because
trimming, sign election, and random dropping are defined entrywise and have
no exact factorized form. Concatenation stays factorized: stacking factors
along the rank axis is its definition and the densified result is exactly
the sum of the inputs.

Adapters are accumulated in a canonical order (sorted by adapter name), so
every merge is exactly permutation-equivariant in (adapter, weight) pairs,
including the random masks, which are keyed by adapter name rather than by
list position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import adapterio
from .adapterio import Adapter, LowRankPair, MergedDelta
from .matcore import Matrix, Rng, ShapeMismatchError


class MergeError(ValueError):
    pass


class TargetMismatchError(MergeError):
    pass


class WeightError(MergeError):
    pass


class MergeMethod(str, Enum):
    LINEAR = "linear"
    CAT = "cat"
    TIES = "ties"
    DARE_LINEAR = "dare-linear"
    DARE_TIES = "dare-ties"


@dataclass(frozen=True)
class MergeSpec:
    """Method plus its knobs; weights None means uniform."""

    method: MergeMethod
    weights: tuple[float, ...] | None = None
    density: float = 1.0
    drop_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.density <= 1.0:
            raise MergeError(f"density must be in (0, 1], got {self.density}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise MergeError(f"drop_rate must be in [0, 1), got {self.drop_rate}")


def _check_weights(weights, n: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n,):
        raise WeightError(f"got {w.size} weights for {n} adapters")
    if (w < 0).any():
        raise WeightError(f"weights must be non-negative, got {w.tolist()}")
    if abs(float(w.sum()) - 1.0) > 1e-9:
        raise WeightError(f"weights must sum to 1, got sum {float(w.sum())!r}")
    return w


def _uniform_weights(n: int) -> tuple[float, ...]:
    return tuple([1.0 / n] * n)


def _canonical_order(adapters, weights=None):
    """Sort (adapter, weight) pairs by adapter name, keeping the pairing."""
    if weights is None:
        order = sorted(range(len(adapters)), key=lambda i: adapters[i].name)
        return [adapters[i] for i in order], None
    order = sorted(range(len(adapters)), key=lambda i: adapters[i].name)
    return [adapters[i] for i in order], np.asarray([weights[i] for i in order])


def _shared_targets(adapters) -> list[str]:
    """Target ids common to all adapters, in the first adapter's order."""
    if not adapters:
        raise MergeError("need at least one adapter to merge")
    base = adapters[0]
    base_ids = list(base.targets.keys())
    for other in adapters[1:]:
        if set(other.targets.keys()) != set(base_ids):
            raise TargetMismatchError(
                f"adapter {other.name!r} targets {sorted(other.targets)} "
                f"!= {sorted(base_ids)} of {base.name!r}"
            )
        for tid in base_ids:
            p, q = base.targets[tid], other.targets[tid]
            if (p.d_in, p.d_out) != (q.d_in, q.d_out):
                raise ShapeMismatchError(
                    f"target {tid!r}: ({p.d_out}x{p.d_in}) in {base.name!r} vs "
                    f"({q.d_out}x{q.d_in}) in {other.name!r}"
                )
    return base_ids


def _dense_deltas(adapters, target_ids) -> dict[str, list[np.ndarray]]:
    return {
        tid: [adapterio.delta(ad.targets[tid]).data for ad in adapters]
        for tid in target_ids
    }


def merge_linear(adapters: list[Adapter],
                 weights: list[float] | None = None) -> MergedDelta:
    """Weighted average of dense deltas; weights sum to 1."""
    target_ids = _shared_targets(adapters)
    if weights is None:
        weights = _uniform_weights(len(adapters))
    w = _check_weights(weights, len(adapters))
    adapters, w = _canonical_order(adapters, w)
    out: dict[str, LowRankPair | Matrix] = {}
    for tid, deltas in _dense_deltas(adapters, target_ids).items():
        acc = np.zeros_like(deltas[0])
        for wi, di in zip(w, deltas):
            acc += wi * di
        out[tid] = Matrix(acc)
    return MergedDelta(out)


def merge_cat(adapters: list[Adapter]) -> MergedDelta:
    """Concatenate factors along the rank axis.

    Each B factor absorbs its own alpha / rank scale first; the merged pair
    takes alpha == rank, so densifying it yields exactly the sum of the
    input deltas. Ranks may differ across inputs.
    """
    target_ids = _shared_targets(adapters)
    adapters, _ = _canonical_order(adapters)
    out: dict[str, LowRankPair | Matrix] = {}
    for tid in target_ids:
        pairs = [ad.targets[tid] for ad in adapters]
        a_cat = np.vstack([p.a.data for p in pairs])
        b_cat = np.hstack([(p.alpha / p.rank) * p.b.data for p in pairs])
        total_rank = sum(p.rank for p in pairs)
        out[tid] = LowRankPair(a=Matrix(a_cat), b=Matrix(b_cat),
                               alpha=float(total_rank), rank=total_rank)
    return MergedDelta(out)


def _trim(dense: np.ndarray, density: float) -> np.ndarray:
    """Keep the top ceil(density * n) entries by |value|, zero the rest.

    Magnitude ties at the cutoff are broken by row-major position (earlier
    entries kept), so trimming is deterministic.
    """
    n = dense.size
    keep = math.ceil(density * n)
    if keep >= n:
        return dense.copy()
    flat = np.abs(dense.ravel())
    order = np.argsort(-flat, kind="stable")
    mask = np.zeros(n, dtype=bool)
    mask[order[:keep]] = True
    return np.where(mask.reshape(dense.shape), dense, 0.0)


def _ties_combine(trimmed: list[np.ndarray], w: np.ndarray) -> np.ndarray:
    """Elect the dominant sign, then renormalized mean of agreeing survivors."""
    weighted_sum = np.zeros_like(trimmed[0])
    for wi, ti in zip(w, trimmed):
        weighted_sum += wi * ti
    elected = np.sign(weighted_sum)
    num = np.zeros_like(weighted_sum)
    den = np.zeros_like(weighted_sum)
    for wi, ti in zip(w, trimmed):
        agree = (np.sign(ti) == elected) & (ti != 0.0)
        num += np.where(agree, wi * ti, 0.0)
        den += np.where(agree, wi, 0.0)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0.0)


def merge_ties(adapters: list[Adapter], weights: list[float] | None = None,
               density: float = 1.0) -> MergedDelta:
    """Trim each delta, elect a per-entry sign, average agreeing survivors.

    Per entry: the elected sign is the sign of the weighted sum of trimmed
    values (the direction with the greater total weighted magnitude); the
    output is the weighted mean of the surviving values that carry that
    sign, with weights renormalized over the contributing subset. Exactly
    balanced magnitudes elect sign 0 and output 0.
    """
    if not 0.0 < density <= 1.0:
        raise MergeError(f"density must be in (0, 1], got {density}")
    target_ids = _shared_targets(adapters)
    if weights is None:
        weights = _uniform_weights(len(adapters))
    w = _check_weights(weights, len(adapters))
    adapters, w = _canonical_order(adapters, w)
    out: dict[str, LowRankPair | Matrix] = {}
    for tid, deltas in _dense_deltas(adapters, target_ids).items():
        trimmed = [_trim(d, density) for d in deltas]
        out[tid] = Matrix(_ties_combine(trimmed, w))
    return MergedDelta(out)


def _dare_mask(rng: Rng, shape: tuple[int, int], drop_rate: float) -> np.ndarray:
    return rng.bernoulli(shape[0] * shape[1], 1.0 - drop_rate).reshape(shape)


def _sparsify(adapters: list[Adapter], target_ids, spec: MergeSpec):
    """Per-adapter drop-and-rescale of dense deltas.

    Mask streams are keyed by (spec.seed, adapter name), so distinct
    adapters get independent masks and permuting the input list does not
    change any adapter's mask.
    """
    p = spec.drop_rate
    rescale = 1.0 / (1.0 - p)
    sparsified: dict[str, list[np.ndarray]] = {tid: [] for tid in target_ids}
    for ad in adapters:
        rng = Rng(spec.seed).derive("dare-mask", ad.name)
        for tid in target_ids:
            dense = adapterio.delta(ad.targets[tid]).data
            if p == 0.0:
                sparsified[tid].append(dense)
            else:
                mask = _dare_mask(rng, dense.shape, p)
                sparsified[tid].append(np.where(mask, dense * rescale, 0.0))
    return sparsified


def merge_dare(adapters: list[Adapter], spec: MergeSpec) -> MergedDelta:
    """Randomly drop delta entries at spec.drop_rate, rescale survivors by
    1 / (1 - p), then combine with the linear or ties rule."""
    if spec.method not in (MergeMethod.DARE_LINEAR, MergeMethod.DARE_TIES):
        raise MergeError(f"merge_dare called with method {spec.method}")
    target_ids = _shared_targets(adapters)
    weights = spec.weights or _uniform_weights(len(adapters))
    w = _check_weights(weights, len(adapters))
    adapters, w = _canonical_order(adapters, w)
    sparsified = _sparsify(adapters, target_ids, spec)
    out: dict[str, LowRankPair | Matrix] = {}
    if spec.method == MergeMethod.DARE_LINEAR:
        for tid, deltas in sparsified.items():
            acc = np.zeros_like(deltas[0])
            for wi, di in zip(w, deltas):
                acc += wi * di
            out[tid] = Matrix(acc)
    else:
        for tid, deltas in sparsified.items():
            trimmed = [_trim(d, spec.density) for d in deltas]
            out[tid] = Matrix(_ties_combine(trimmed, w))
    return MergedDelta(out)


def merge(adapters: list[Adapter], spec: MergeSpec) -> MergedDelta:
    """Dispatch on spec.method."""
    if spec.method == MergeMethod.LINEAR:
        return merge_linear(adapters, spec.weights)
    if spec.method == MergeMethod.CAT:
        return merge_cat(adapters)
    if spec.method == MergeMethod.TIES:
        return merge_ties(adapters, spec.weights, spec.density)
    return merge_dare(adapters, spec)
