"""Serving-latency harness and a minimal adapter-registry service.

The bench replays a fixed question sequence against one of four serving
modes and reports a per-stage wall-clock breakdown from a closed stage
vocabulary. Preloaded mode reads every adapter file exactly once per
process; dynamic mode re-reads the routed files for every question, which
is the per-query I/O cost the comparison is about. Stage boundaries are
explicit monotonic-clock reads; there is no device queue at this scale, so
ordered clock reads are the whole synchronization story.

Retrieval stages map onto the router: query_embedding is the query-vector
encoding, index_search is the cosine top-k scan. Registry and index
construction from adapter headers is one-time setup outside the stage
vocabulary. The companion service speaks line-delimited JSON over a local
TCP socket; registration preloads, queries are concurrent and read-only.
"""

from __future__ import annotations

import hashlib
import json
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import adapterio, memlab, merge as merge_mod, router
from .adapterio import Adapter
from .matcore import Matrix
from .merge import MergeMethod, MergeSpec
from .multimem import TARGET_ID
from .router import EmbeddingIndex, PolicyKind, RoutingPolicy

STAGE_NAMES = (
    "model_loading",
    "all_lora_loading",
    "lora_loading",
    "lora_merge",
    "lora_activation",
    "query_embedding",
    "index_search",
    "tokenization",
    "inference",
)


class Mode(str, Enum):
    BASE_ONLY = "base"
    SINGLE_ADAPTER = "single"
    PRELOADED = "preloaded"
    DYNAMIC = "dynamic"


class BenchError(RuntimeError):
    pass


class ClockError(BenchError):
    """The monotonic clock went backwards; an environment fault."""


def _now_ms() -> float:
    return time.perf_counter_ns() / 1e6


class _Stopwatch:
    def __init__(self):
        self._t0 = _now_ms()

    def lap(self) -> float:
        t1 = _now_ms()
        if t1 < self._t0:
            raise ClockError(f"clock moved backwards: {self._t0} -> {t1}")
        dt = t1 - self._t0
        self._t0 = t1
        return dt


@dataclass
class BenchScenario:
    """One serving experiment: a question stream over on-disk adapters."""

    mode: Mode
    dataset: memlab.KvDataset
    adapter_paths: list[Path] = field(default_factory=list)
    single_adapter_path: Path | None = None
    question_count: int = 30
    top_n: int = 3
    merge_spec: MergeSpec = field(
        default_factory=lambda: MergeSpec(method=MergeMethod.TIES))
    base_seed: int = 0
    d_in: int = memlab.D_IN_DEFAULT

    def __post_init__(self):
        if self.question_count < 1:
            raise BenchError(
                f"question_count must be >= 1, got {self.question_count}")


@dataclass
class TimingReport:
    mode: Mode
    stages: list[tuple[str, float]]            # one-time stages, in order
    per_query: list[dict[str, float]]          # per-question stage maps
    totals: dict[str, float]                   # one-time + summed per-query
    read_counts: dict[str, int]                # adapter file -> disk reads
    em: float
    question_count: int

    def to_json(self) -> dict:
        return {
            "mode": self.mode.value,
            "stages": [[name, ms] for name, ms in self.stages],
            "per_query": self.per_query,
            "totals": self.totals,
            "read_counts": self.read_counts,
            "em": self.em,
            "question_count": self.question_count,
        }


def _validate_stage_names(report: TimingReport) -> None:
    seen = {name for name, _ in report.stages}
    for per_q in report.per_query:
        seen.update(per_q)
    unknown = seen.difference(STAGE_NAMES)
    if unknown:
        raise BenchError(f"stages outside the fixed vocabulary: {sorted(unknown)}")


def _totals(stages, per_query) -> dict[str, float]:
    totals: dict[str, float] = {}
    for name, ms in stages:
        totals[name] = totals.get(name, 0.0) + ms
    for per_q in per_query:
        for name, ms in per_q.items():
            totals[name] = totals.get(name, 0.0) + ms
    return totals


def _count_read(counts: dict[str, int], path) -> None:
    counts[str(path)] = counts.get(str(path), 0) + 1


def _load_adapter(path, counts) -> Adapter:
    _count_read(counts, path)
    return adapterio.load(path)


def _centroid_of(adapter: Adapter) -> np.ndarray:
    raw = adapter.metadata.get("centroid", "")
    if not raw:
        raise BenchError(f"adapter {adapter.name!r} has no centroid metadata")
    return np.asarray(json.loads(raw), dtype=np.float64)


def _index_from_centroids(entries: list[tuple[str, np.ndarray]]) -> EmbeddingIndex:
    return router.build_index(
        [(name, Matrix(vec.reshape(1, -1))) for name, vec in entries])


def _header_centroid(path, counts) -> tuple[str, np.ndarray]:
    _count_read(counts, path)
    header = adapterio.inspect_header(path)
    raw = header["metadata"].get("centroid", "")
    if not raw:
        raise BenchError(f"{path}: no centroid metadata in header")
    return header["name"], np.asarray(json.loads(raw), dtype=np.float64)


def _questions(scenario: BenchScenario) -> list[int]:
    n = len(scenario.dataset)
    if n == 0:
        raise BenchError("scenario dataset is empty")
    return [i % n for i in range(scenario.question_count)]


def _infer_digits(weight: np.ndarray, key: np.ndarray,
                  labels: np.ndarray) -> bool:
    logits = weight @ key
    blocks = logits.reshape(memlab.N_POSITIONS, 10)
    top = blocks.max(axis=1)
    if ((blocks == top[:, None]).sum(axis=1) != 1).any():
        return False
    return bool((blocks.argmax(axis=1) == labels).all())


def run_bench(scenario: BenchScenario) -> TimingReport:
    """Execute the scenario and measure every stage with explicit
    before/after clock reads. The report's structure is deterministic for a
    given scenario; only the measured times vary."""
    ds = scenario.dataset
    questions = _questions(scenario)
    read_counts: dict[str, int] = {}
    stages: list[tuple[str, float]] = []
    per_query: list[dict[str, float]] = []

    watch = _Stopwatch()
    w0 = memlab.frozen_base(scenario.base_seed, scenario.d_in).data
    stages.append(("model_loading", watch.lap()))

    mode = scenario.mode
    preloaded: dict[str, Adapter] = {}
    index = None
    weight = w0

    if mode == Mode.SINGLE_ADAPTER:
        if scenario.single_adapter_path is None:
            raise BenchError("single mode needs single_adapter_path")
        watch.lap()
        adapter = _load_adapter(scenario.single_adapter_path, read_counts)
        stages.append(("lora_loading", watch.lap()))
        weight = w0 + adapterio.delta(adapter.targets[TARGET_ID]).data
        stages.append(("lora_activation", watch.lap()))
    elif mode == Mode.PRELOADED:
        if not scenario.adapter_paths:
            raise BenchError("preloaded mode needs adapter_paths")
        watch.lap()
        loaded = [_load_adapter(p, read_counts) for p in scenario.adapter_paths]
        stages.append(("all_lora_loading", watch.lap()))
        preloaded = {ad.name: ad for ad in loaded}
        index = _index_from_centroids(
            [(ad.name, _centroid_of(ad)) for ad in loaded])
    paths_by_name: dict[str, Path] = {}
    if mode == Mode.DYNAMIC:
        if not scenario.adapter_paths:
            raise BenchError("dynamic mode needs adapter_paths")
        entries = []
        for path in scenario.adapter_paths:
            name, centroid = _header_centroid(path, read_counts)
            entries.append((name, centroid))
            paths_by_name[name] = Path(path)
        index = _index_from_centroids(entries)

    policy = RoutingPolicy(kind=PolicyKind.COSINE_TOP_K,
                           k=min(scenario.top_n, len(index)) if index else 1)
    hits = 0
    for ordinal, rec_idx in enumerate(questions):
        record = ds.records[rec_idx]
        q: dict[str, float] = {}
        watch.lap()

        if mode in (Mode.PRELOADED, Mode.DYNAMIC):
            key = memlab.encode_key(record.name, scenario.d_in)
            q["query_embedding"] = watch.lap()
            ranked = router.route(index, key, policy, ordinal=ordinal)
            chosen = [mid for mid, _ in ranked]
            q["index_search"] = watch.lap()
            if mode == Mode.DYNAMIC:
                selected = [_load_adapter(paths_by_name[mid], read_counts)
                            for mid in chosen]
                q["lora_loading"] = watch.lap()
            else:
                selected = [preloaded[mid] for mid in chosen]
            if len(selected) == 1:
                delta = adapterio.delta(selected[0].targets[TARGET_ID]).data
            else:
                merged = merge_mod.merge(selected, scenario.merge_spec)
                delta = merged.densify(TARGET_ID).data
            q["lora_merge"] = watch.lap()
            weight = w0 + delta
            q["lora_activation"] = watch.lap()
            watch.lap()
            question_text = (f"Question: What is the phone number of "
                             f"{record.name}? Answer:")
            _ = question_text.split()
            q["tokenization"] = watch.lap()
        else:
            # Closed-book modes: turning the prompt into the model input
            # (split + key encoding) is all tokenization-side work here.
            watch.lap()
            question_text = (f"Question: What is the phone number of "
                             f"{record.name}? Answer:")
            _ = question_text.split()
            key = memlab.encode_key(record.name, scenario.d_in)
            q["tokenization"] = watch.lap()

        correct = _infer_digits(weight, key, ds.labels[rec_idx])
        q["inference"] = watch.lap()
        hits += correct
        per_query.append(q)

    report = TimingReport(
        mode=mode,
        stages=stages,
        per_query=per_query,
        totals=_totals(stages, per_query),
        read_counts=read_counts,
        em=hits / len(questions),
        question_count=len(questions),
    )
    _validate_stage_names(report)
    return report


# --- registry service -------------------------------------------------------


@dataclass
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 0
    adapter_dir: Path | None = None


@dataclass
class _RegistryState:
    adapters: dict[str, Adapter]
    index: EmbeddingIndex | None
    w0: np.ndarray | None
    d_in: int | None
    seed: int | None


class AdapterRegistry:
    """Preloading registry: register swaps an immutable snapshot under a
    lock; queries read the current snapshot without locking."""

    def __init__(self):
        self._write_lock = threading.Lock()
        self._counter_lock = threading.Lock()
        self._state = _RegistryState({}, None, None, None, None)
        self._queries_served = 0

    def register(self, path) -> int:
        adapter = adapterio.load(path)
        centroid = _centroid_of(adapter)
        seed = int(adapter.metadata.get("seed", "0"))
        d_in = int(adapter.metadata.get("d_in", str(memlab.D_IN_DEFAULT)))
        with self._write_lock:
            state = self._state
            if state.d_in is not None and (d_in != state.d_in
                                           or seed != state.seed):
                raise BenchError(
                    f"adapter {adapter.name!r} geometry (seed={seed}, "
                    f"d_in={d_in}) disagrees with registry "
                    f"(seed={state.seed}, d_in={state.d_in})"
                )
            w0 = state.w0 if state.w0 is not None else \
                memlab.frozen_base(seed, d_in).data
            adapters = dict(state.adapters)
            adapters[adapter.name] = adapter
            centroids = sorted(
                (name, _centroid_of(ad)) for name, ad in adapters.items())
            index = _index_from_centroids(centroids)
            self._state = _RegistryState(adapters, index, w0, d_in, seed)
            return len(adapters)

    def snapshot(self) -> _RegistryState:
        return self._state

    def query(self, vector: list[float], top_n: int,
              merge_blob: dict | None,
              modules: list[str] | None = None) -> dict:
        state = self.snapshot()
        if not state.adapters:
            raise BenchError("no adapters registered")
        vec = np.asarray(vector, dtype=np.float64)
        if vec.size != state.d_in:
            raise BenchError(
                f"query dimension {vec.size} != registry d_in {state.d_in}")
        stage_times: dict[str, float] = {}
        watch = _Stopwatch()
        if modules is None:
            policy = RoutingPolicy(kind=PolicyKind.COSINE_TOP_K,
                                   k=min(top_n, len(state.index)))
            ranked = router.route(state.index, vec, policy)
            chosen = [mid for mid, _ in ranked]
        else:
            unknown = [m for m in modules if m not in state.adapters]
            if unknown:
                raise BenchError(f"unknown adapter id(s): {unknown}")
            chosen = list(modules)
            ranked = [(mid, 1.0) for mid in chosen]
        stage_times["index_search"] = watch.lap()
        spec = _merge_spec_from(merge_blob)
        if len(chosen) == 1:
            delta = adapterio.delta(
                state.adapters[chosen[0]].targets[TARGET_ID]).data
        else:
            merged = merge_mod.merge([state.adapters[m] for m in chosen], spec)
            delta = merged.densify(TARGET_ID).data
        stage_times["lora_merge"] = watch.lap()
        weight = state.w0 + delta
        stage_times["lora_activation"] = watch.lap()
        logits = weight @ vec
        digest = hashlib.sha256(
            np.ascontiguousarray(logits).astype("<f8").tobytes()).hexdigest()
        stage_times["inference"] = watch.lap()
        with self._counter_lock:
            self._queries_served += 1
        return {
            "route": [[mid, score] for mid, score in ranked],
            "em_logits_digest": digest,
            "stage_times": stage_times,
        }

    def stats(self) -> dict:
        state = self.snapshot()
        with self._counter_lock:
            served = self._queries_served
        return {
            "adapters": len(state.adapters),
            "queries_served": served,
            "d_in": state.d_in,
        }


def _merge_spec_from(blob: dict | None) -> MergeSpec:
    if not blob:
        return MergeSpec(method=MergeMethod.TIES)
    return MergeSpec(
        method=MergeMethod(blob.get("method", "ties")),
        weights=tuple(blob["weights"]) if blob.get("weights") else None,
        density=float(blob.get("density", 1.0)),
        drop_rate=float(blob.get("drop_rate", 0.0)),
        seed=int(blob.get("seed", 0)),
    )


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        registry: AdapterRegistry = self.server.registry
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            reply = self._dispatch(registry, line)
            self.wfile.write((json.dumps(reply) + "\n").encode("utf-8"))
            self.wfile.flush()

    @staticmethod
    def _dispatch(registry: AdapterRegistry, line: str) -> dict:
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            return {"error": {"code": "bad_json", "message": str(exc)}}
        if not isinstance(request, dict):
            return {"error": {"code": "bad_request",
                              "message": "request must be a JSON object"}}
        op = request.get("op")
        try:
            if op == "register":
                count = registry.register(request["path"])
                return {"ok": True, "adapters": count}
            if op == "query":
                result = registry.query(
                    vector=request["vector"],
                    top_n=int(request.get("top_n", 1)),
                    merge_blob=request.get("merge"),
                    modules=request.get("modules"),
                )
                return {"ok": True, **result}
            if op == "stats":
                return {"ok": True, **registry.stats()}
            return {"error": {"code": "unknown_op",
                              "message": f"unknown op {op!r}"}}
        except (KeyError, TypeError, ValueError, OSError,
                BenchError, adapterio.FormatError) as exc:
            return {"error": {"code": type(exc).__name__, "message": str(exc)}}


class RegistryServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, config: ServeConfig):
        super().__init__((config.host, config.port), _Handler)
        self.registry = AdapterRegistry()
        if config.adapter_dir is not None:
            for path in sorted(Path(config.adapter_dir).glob("*.lmem")):
                self.registry.register(path)

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve_in_thread(config: ServeConfig) -> tuple[RegistryServer, threading.Thread]:
    """Start a registry server on a background thread (tests, scripts)."""
    server = RegistryServer(config)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return server, thread


def request_line(host: str, port: int, payload: dict,
                 timeout: float = 10.0) -> dict:
    """One-shot client helper: send one JSON line, read one JSON line."""
    with socket.create_connection((host, port), timeout=timeout) as conn:
        conn.sendall((json.dumps(payload) + "\n").encode("utf-8"))
        with conn.makefile("r", encoding="utf-8") as fh:
            return json.loads(fh.readline())
