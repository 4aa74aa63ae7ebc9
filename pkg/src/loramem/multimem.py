"""End-to-end multi-module experiments: partition a dataset into contiguous
shards, train one adapter per shard against a shared frozen base, then score
routed or merged recall.

All shards train under the same config, so they share the frozen base map
and differ only through their data. Routed evaluation applies merged deltas
transiently per query; selecting a single module bypasses merging entirely,
which makes oracle top-1 evaluation exactly equivalent to per-shard
evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import adapterio, matcore, memlab, merge as merge_mod, router
from .adapterio import Adapter
from .matcore import Matrix
from .memlab import D_OUT, KvDataset, MemoryModel, TrainConfig
from .merge import MergeSpec
from .router import EmbeddingIndex, PolicyKind, RoutingPolicy

TARGET_ID = "memory"


class ShardError(ValueError):
    pass


@dataclass(frozen=True)
class ShardPlan:
    """Record index -> shard id, contiguous blocks in dataset order."""

    shard_count: int
    assignment: tuple[int, ...]

    def indices_of(self, shard: int) -> list[int]:
        return [i for i, s in enumerate(self.assignment) if s == shard]


def partition(dataset: KvDataset, shard_count: int) -> ShardPlan:
    """Contiguous near-equal blocks; earlier shards take the remainder."""
    n = len(dataset)
    if shard_count < 1 or shard_count > n:
        raise ShardError(f"shard count {shard_count} out of range for {n} records")
    base, extra = divmod(n, shard_count)
    assignment = []
    for shard in range(shard_count):
        assignment.extend([shard] * (base + (1 if shard < extra else 0)))
    return ShardPlan(shard_count=shard_count, assignment=tuple(assignment))


def shard_datasets(dataset: KvDataset, plan: ShardPlan) -> list[KvDataset]:
    return [dataset.subset(plan.indices_of(s)) for s in range(plan.shard_count)]


def _shard_name(shard: int) -> str:
    return f"shard_{shard:03d}"


def train_shards(dataset: KvDataset, plan: ShardPlan,
                 config: TrainConfig) -> list[Adapter]:
    """One adapter per shard via the memory lab trainer.

    Metadata carries the training seed, geometry, and the shard's key
    centroid (for registry-side index building).
    """
    adapters = []
    for shard, shard_ds in enumerate(shard_datasets(dataset, plan)):
        try:
            result = memlab.train(shard_ds, config)
        except memlab.TrainingDiverged as exc:
            raise ShardError(
                f"shard {shard} diverged at step {exc.step}") from exc
        centroid = shard_ds.keys.data.mean(axis=0)
        norm = float(np.linalg.norm(centroid))
        metadata = {
            "seed": str(config.seed),
            "rank": str(config.rank),
            "alpha": repr(config.alpha),
            "d_in": str(shard_ds.d_in),
            "d_out": str(D_OUT),
            "centroid": json.dumps((centroid / norm).tolist()) if norm > 0 else "",
            "train_config": json.dumps({
                "rank": config.rank, "alpha": config.alpha,
                "learning_rate": config.learning_rate, "steps": config.steps,
                "batch_size": config.batch_size, "seed": config.seed,
                "init_stddev": config.init_stddev,
            }, sort_keys=True),
        }
        adapters.append(Adapter(name=_shard_name(shard),
                                targets={TARGET_ID: result.pair},
                                metadata=metadata))
    return adapters


def build_shard_index(dataset: KvDataset, plan: ShardPlan) -> EmbeddingIndex:
    shards = [(_shard_name(s), Matrix(dataset.keys.data[plan.indices_of(s)]))
              for s in range(plan.shard_count)]
    return router.build_index(shards)


@dataclass(frozen=True)
class SystemConfig:
    train: TrainConfig
    policy: RoutingPolicy
    merge: MergeSpec
    top_n: int = 1

    def __post_init__(self):
        if self.top_n < 1:
            raise ShardError(f"top_n must be >= 1, got {self.top_n}")


@dataclass
class SystemReport:
    em: float
    routing_accuracy: float
    per_shard_em: list[float]
    shard_count: int
    config_echo: dict = field(default_factory=dict)


class _MergeCache:
    """Dense merged weight per distinct module set; merges are order
    independent, so the sorted id tuple is a sound key."""

    def __init__(self, w0: np.ndarray, by_name: dict[str, Adapter],
                 spec: MergeSpec):
        self.w0 = w0
        self.by_name = by_name
        self.spec = spec
        self._cache: dict[tuple[str, ...], np.ndarray] = {}

    def weight_for(self, module_ids: list[str]) -> np.ndarray:
        key = tuple(sorted(module_ids))
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if len(key) == 1:
            delta = adapterio.delta(
                self.by_name[key[0]].targets[TARGET_ID]).data
        else:
            merged = merge_mod.merge([self.by_name[mid] for mid in key],
                                     self.spec)
            delta = merged.densify(TARGET_ID).data
        weight = self.w0 + delta
        self._cache[key] = weight
        return weight


def _record_correct(weight: np.ndarray, key: np.ndarray,
                    labels: np.ndarray) -> bool:
    logits = weight @ key
    blocks = logits.reshape(memlab.N_POSITIONS, 10)
    top = blocks.max(axis=1)
    if ((blocks == top[:, None]).sum(axis=1) != 1).any():
        return False
    return bool((blocks.argmax(axis=1) == labels).all())


def eval_system(dataset: KvDataset, adapters: list[Adapter],
                index: EmbeddingIndex, config: SystemConfig) -> SystemReport:
    """Route each query, merge the selected modules, apply the merged delta
    to the shared frozen base, and score strict exact match.

    Reports overall exact match, top-1 routing accuracy, and each shard
    adapter's exact match on its own shard.
    """
    plan = partition(dataset, len(adapters))
    if config.top_n > plan.shard_count:
        raise ShardError(
            f"top_n {config.top_n} exceeds {plan.shard_count} shards")
    w0 = memlab.frozen_base(config.train.seed, dataset.d_in)
    by_name = {ad.name: ad for ad in adapters}
    cache = _MergeCache(w0.data, by_name, config.merge)
    # The system's top_n is the retrieval depth; the policy keeps its noise
    # and seed. Oracle routing always returns exactly the true module.
    policy = replace(config.policy, k=min(config.top_n, len(index))) \
        if config.policy.kind == PolicyKind.COSINE_TOP_K else config.policy
    hits = routing_hits = 0
    for i in range(len(dataset)):
        truth = _shard_name(plan.assignment[i])
        ranked = router.route(index, dataset.keys.data[i], policy,
                              truth=truth, ordinal=i)
        routing_hits += ranked[0][0] == truth
        chosen = [mid for mid, _ in ranked[:config.top_n]]
        try:
            weight = cache.weight_for(chosen)
        except (merge_mod.MergeError, matcore.ShapeMismatchError) as exc:
            raise ShardError(f"query {i}: merge of {chosen} failed: {exc}") \
                from exc
        hits += _record_correct(weight, dataset.keys.data[i],
                                dataset.labels[i])
    per_shard = per_shard_em(dataset, plan, adapters, w0)
    return SystemReport(
        em=hits / len(dataset),
        routing_accuracy=routing_hits / len(dataset),
        per_shard_em=per_shard,
        shard_count=plan.shard_count,
    )


def per_shard_em(dataset: KvDataset, plan: ShardPlan,
                 adapters: list[Adapter], w0: Matrix) -> list[float]:
    """Each shard adapter scored on its own shard against the shared base."""
    scores = []
    for shard, shard_ds in enumerate(shard_datasets(dataset, plan)):
        model = MemoryModel(w0=w0, pair=adapters[shard].targets[TARGET_ID],
                            d_in=dataset.d_in)
        scores.append(memlab.evaluate(model, shard_ds))
    return scores


def interference_sweep(dataset: KvDataset, adapters: list[Adapter],
                       config: SystemConfig,
                       n_range: list[int]) -> dict[int, float]:
    """Exact match as a function of the merged module count.

    For each query, the ground-truth set is the query's own shard plus the
    next n-1 shards cyclically; routing error is excluded by construction,
    so any degradation is the merge's own doing.
    """
    plan = partition(dataset, len(adapters))
    s_count = plan.shard_count
    for n in n_range:
        if not 1 <= n <= s_count:
            raise ShardError(f"merge count {n} out of range [1, {s_count}]")
    w0 = memlab.frozen_base(config.train.seed, dataset.d_in)
    by_name = {ad.name: ad for ad in adapters}
    cache = _MergeCache(w0.data, by_name, config.merge)
    out: dict[int, float] = {}
    for n in n_range:
        hits = 0
        for i in range(len(dataset)):
            shard = plan.assignment[i]
            chosen = [_shard_name((shard + j) % s_count) for j in range(n)]
            weight = cache.weight_for(chosen)
            hits += _record_correct(weight, dataset.keys.data[i],
                                    dataset.labels[i])
        out[n] = hits / len(dataset)
    return out
