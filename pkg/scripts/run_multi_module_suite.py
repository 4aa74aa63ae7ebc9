#!/usr/bin/env python3
"""Multi-module experiment suite at desk scale.

Runs, in order:
  1. matched-budget comparison: one large adapter on the full load vs
     oracle-routed shards of the same total parameter count;
  2. the routing gap: oracle vs cosine recall and the accuracy-vs-noise
     curve over eta in {0, 0.5, 1, 2};
  3. interference: recall as the ground-truth merge count grows from 1 to 5.

Writes one JSON report with all three sections.

Usage:
  python scripts/run_multi_module_suite.py --out runs/multi_suite.json
"""

import argparse
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from loramem import __version__, adapterio, memlab, multimem, router
from loramem.matcore import Matrix
from loramem.memlab import TrainConfig
from loramem.merge import MergeMethod, MergeSpec
from loramem.multimem import SystemConfig
from loramem.router import PolicyKind, RoutingPolicy

NOISE_LEVELS = (0.0, 0.5, 1.0, 2.0)


def budget_comparison(seeds, shards=8, shard_rank=16, load=8000):
    records = memlab.gen_phonebook(800, seed=9)
    dataset = memlab.slice_by_budget(records, load)
    rows = []
    for seed in seeds:
        single_cfg = TrainConfig(rank=shard_rank * shards,
                                 alpha=float(shard_rank * shards), seed=seed)
        single = memlab.train(dataset, single_cfg)
        shard_cfg = TrainConfig(rank=shard_rank, alpha=float(shard_rank),
                                seed=seed)
        plan = multimem.partition(dataset, shards)
        adapters = multimem.train_shards(dataset, plan, shard_cfg)
        index = multimem.build_shard_index(dataset, plan)
        report = multimem.eval_system(
            dataset, adapters, index,
            SystemConfig(train=shard_cfg,
                         policy=RoutingPolicy(kind=PolicyKind.ORACLE),
                         merge=MergeSpec(method=MergeMethod.TIES), top_n=1))
        rows.append({
            "seed": seed,
            "single_em": memlab.evaluate(single.model, dataset),
            "multi_em": report.em,
            "params_each": adapterio.count_params(
                adapterio.Adapter(name="s", targets={"memory": single.pair})),
        })
    return {"load_tokens": load, "shards": shards, "shard_rank": shard_rank,
            "runs": rows}


def routing_gap(seeds, shards=8, load=700):
    records = memlab.gen_phonebook(120, seed=9)
    dataset = memlab.slice_by_budget(records, load)
    plan = multimem.partition(dataset, shards)
    index = multimem.build_shard_index(dataset, plan)
    truths = [f"shard_{plan.assignment[i]:03d}" for i in range(len(dataset))]
    tiled = Matrix(np.tile(dataset.keys.data, (5, 1)))
    labels = truths * 5

    em_rows, acc_curves = [], []
    for seed in seeds:
        cfg = TrainConfig(rank=8, alpha=8.0, seed=seed)
        adapters = multimem.train_shards(dataset, plan, cfg)
        oracle = multimem.eval_system(
            dataset, adapters, index,
            SystemConfig(train=cfg,
                         policy=RoutingPolicy(kind=PolicyKind.ORACLE),
                         merge=MergeSpec(method=MergeMethod.TIES), top_n=1))
        cosine = multimem.eval_system(
            dataset, adapters, index,
            SystemConfig(train=cfg,
                         policy=RoutingPolicy(kind=PolicyKind.COSINE_TOP_K,
                                              noise_stddev=0.5, seed=seed),
                         merge=MergeSpec(method=MergeMethod.TIES), top_n=1))
        em_rows.append({"seed": seed, "oracle_em": oracle.em,
                        "cosine_em": cosine.em,
                        "cosine_accuracy": cosine.routing_accuracy})
        accs = []
        for eta in NOISE_LEVELS:
            policy = RoutingPolicy(kind=PolicyKind.COSINE_TOP_K, k=1,
                                   noise_stddev=eta, seed=seed)
            accs.append(router.routing_accuracy(index, tiled, labels, policy))
        acc_curves.append(accs)
    mean_curve = [statistics.mean(c[i] for c in acc_curves)
                  for i in range(len(NOISE_LEVELS))]
    return {"noise_levels": list(NOISE_LEVELS), "recall": em_rows,
            "mean_accuracy_by_noise": mean_curve}


def interference(seeds, shards=8, load=700, density=0.3):
    records = memlab.gen_phonebook(120, seed=9)
    dataset = memlab.slice_by_budget(records, load)
    plan = multimem.partition(dataset, shards)
    curves = []
    for seed in seeds:
        cfg = TrainConfig(rank=8, alpha=8.0, seed=seed)
        adapters = multimem.train_shards(dataset, plan, cfg)
        sweep = multimem.interference_sweep(
            dataset, adapters,
            SystemConfig(train=cfg,
                         policy=RoutingPolicy(kind=PolicyKind.ORACLE),
                         merge=MergeSpec(method=MergeMethod.TIES,
                                         density=density), top_n=1),
            list(range(1, 6)))
        curves.append({str(n): sweep[n] for n in range(1, 6)})
    mean_curve = {str(n): statistics.mean(c[str(n)] for c in curves)
                  for n in range(1, 6)}
    return {"ties_density": density, "per_seed": curves, "mean": mean_curve}


def main() -> int:
    parser = argparse.ArgumentParser(
        description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--seeds", default="101,202,303")
    parser.add_argument("--out", default="runs/multi_suite.json")
    args = parser.parse_args()
    seeds = [int(x) for x in args.seeds.split(",")]

    report = {
        "artifact": {"name": "loramem", "version": __version__},
        "config": vars(args),
        "budget_comparison": budget_comparison(seeds),
        "routing_gap": routing_gap(seeds),
        "interference": interference(seeds),
    }
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report["routing_gap"]["mean_accuracy_by_noise"]))
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
