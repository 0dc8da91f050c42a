"""
Simulator - replays traces through the cache engine and tabulates the results.

Key responsibilities:
1. Build a store, index and engine from a RunConfig (or resume them from a snapshot)
2. Replay a trace: warm-up prefix unrecorded, then every request recorded
3. Summarize per-request outcomes and rolling windows as DataFrames
4. Sweep capacities x policies on one trace
5. Report codec size breakdowns and fidelity for one prompt's latents
"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import pandas as pd

from app.models import CACHED_STEPS, LatentState, MaskSet, Request
from app.services.cache_store import CacheStore
from app.services.codec import compress_latents, step_similarities
from app.services.engine import (
    CacheEngine, CostReport, Metrics, Mode, RequestOutcome, report
)
from app.services.entry_format import (
    decode_entry, encode_entry, entry_size, size_breakdown, uncompressed_size
)
from app.services.latent_source import LatentSource, SyntheticLatentSource
from app.services.replacement_policies import PolicyName, make_policy
from app.services.snapshot import load_snapshot
from app.services.vector_index import VectorIndex
from app.services.workload import Trace, to_request, working_set
from app.utils.errors import DataFormatError, InvariantViolation
from app.utils.validation import ValidationError

logger = logging.getLogger(__name__)

# Large enough to hold every template of the default traces.
SOURCE_MEMO_SIZE = 4096

WINDOW_COLUMNS = ['window', 'first_request', 'requests', 'hits', 'hit_rate',
                  'computation_savings', 'mean_latency', 'throughput_vs_nocache']


@dataclass
class SimulationResult:
    """Everything one replay produced."""
    policy: PolicyName
    mode: Mode
    capacity_bytes: int
    metrics: Metrics
    cost: CostReport
    outcomes: pd.DataFrame
    windows: pd.DataFrame
    store: CacheStore
    index: VectorIndex

    @property
    def throughput_vs_nocache(self) -> float:
        return self.cost.throughput_vs_nocache

    def to_dict(self) -> Dict[str, Any]:
        return {
            'policy': self.policy.value,
            'mode': self.mode.value,
            'capacity_bytes': self.capacity_bytes,
            'metrics': self.metrics.to_dict(),
            'cost': self.cost.to_dict(),
            'store': self.store.stats(),
            'cached_prompts': len(self.index),
        }


def make_source(run_config) -> SyntheticLatentSource:
    return SyntheticLatentSource(run_config.latent_spec, memo_size=SOURCE_MEMO_SIZE)


def build_engine(run_config, source: Optional[LatentSource] = None,
                 store: Optional[CacheStore] = None,
                 index: Optional[VectorIndex] = None) -> CacheEngine:
    """Engine over a fresh store and index unless existing ones are passed in."""
    if store is None:
        store = CacheStore(run_config.capacity_bytes, policy=run_config.policy,
                           check_invariants=run_config.check_invariants)
    if index is None:
        index = VectorIndex(run_config.embed_dim)
    if source is None:
        source = make_source(run_config)
    return CacheEngine(store, index, source, run_config.engine)


def resume_engine(run_config, snapshot: Union[str, Path],
                  source: Optional[LatentSource] = None) -> CacheEngine:
    """
    Engine over a saved store and index.

    The snapshot keeps its capacity; the replacement policy comes from the run config.

    Raises:
        DataFormatError: if the snapshot's embedding dimension differs from the run's
    """
    store, index = load_snapshot(snapshot, check_invariants=run_config.check_invariants)
    if index.dim is not None and index.dim != run_config.embed_dim:
        raise DataFormatError(f"Snapshot embeddings have {index.dim} dimensions, "
                              f"the run uses {run_config.embed_dim}")
    if store.capacity_limit != run_config.capacity_bytes:
        logger.warning(f"Resuming with the snapshot capacity {store.capacity_limit} "
                       f"instead of {run_config.capacity_bytes}")
    store.policy = make_policy(run_config.policy)
    store.check_invariants = run_config.check_invariants
    store.on_prompt_removed = index.remove
    return build_engine(run_config, source, store, index)


def rolling_windows(outcomes: pd.DataFrame, window: int = 1000,
                    total_steps: int = 50, full_generation: float = 242.0) -> pd.DataFrame:
    """Hit rate, savings, mean latency and throughput per block of `window` requests."""
    if window < 1:
        raise ValidationError("window must be >= 1", 'window')
    if outcomes.empty:
        return pd.DataFrame(columns=WINDOW_COLUMNS)

    frame = outcomes.reset_index(drop=True)
    frame = frame.assign(
        window=frame.index // window,
        position=frame.index,
        hit=(frame['served'] != 'miss').astype(int),
    )
    grouped = frame.groupby('window', sort=True)
    windows = pd.DataFrame({
        'first_request': grouped['position'].min(),
        'requests': grouped.size(),
        'hits': grouped['hit'].sum(),
        'skipped': grouped['skipped'].sum(),
        'mean_latency': grouped['latency'].mean(),
    })
    windows['hit_rate'] = windows['hits'] / windows['requests']
    windows['computation_savings'] = windows['skipped'] / (total_steps * windows['requests'])
    windows['throughput_vs_nocache'] = full_generation / windows['mean_latency']
    windows = windows.reset_index()
    return windows[WINDOW_COLUMNS]


def _requests(trace: Trace, embed_dim: int, seed: int,
              prompt_offset: int = 0) -> Iterable[Request]:
    for record in trace:
        request = to_request(record, dim=embed_dim, seed=seed)
        yield replace(request, prompt=request.prompt + prompt_offset) if prompt_offset else request


def simulate(trace: Trace, run_config, policy: Optional[Union[str, PolicyName]] = None,
             capacity_bytes: Optional[int] = None, resume: Optional[Union[str, Path]] = None,
             source: Optional[LatentSource] = None) -> SimulationResult:
    """
    Replay a trace and return metrics, cost and per-request tables.

    Args:
        trace: Requests in arrival order
        run_config: Validated RunConfig
        policy: Overrides run_config.policy
        capacity_bytes: Overrides run_config.capacity_bytes
        resume: Snapshot to start from instead of an empty cache
        source: Shared latent source (sweeps reuse one so latents are generated once)

    Raises:
        ReportError: if nothing was recorded (warm-up covers the whole trace)
    """
    changes = {}
    if policy is not None:
        changes['policy'] = PolicyName.parse(policy)
    if capacity_bytes is not None:
        changes['capacity_bytes'] = int(capacity_bytes)
    if changes:
        run_config = replace(run_config, **changes)

    prompt_offset = 0
    if resume is not None:
        engine = resume_engine(run_config, resume, source)
        # Trace ids restart at 0; keep them clear of every cached prompt
        prompt_offset = 1 + max(set(engine.store.records) | set(engine.index.prompts()), default=-1)
        logger.info(f"Resumed {len(engine.store.records)} prompts; trace ids start at {prompt_offset}")
    else:
        engine = build_engine(run_config, source)

    logger.info(f"Simulating {len(trace)} requests: mode={run_config.mode.value} "
                f"policy={run_config.policy.value} capacity={run_config.capacity_bytes}")

    rows: List[Dict[str, Any]] = []
    warmup = run_config.warmup_requests
    for position, request in enumerate(_requests(trace, run_config.embed_dim, trace.spec.seed,
                                                      prompt_offset)):
        recorded = position >= warmup
        outcome: RequestOutcome = engine.process_request(request, record=recorded)
        if recorded:
            rows.append(outcome.to_dict())

    if run_config.check_invariants:
        engine.store.verify()
        engine.index.check_consistency()
        if set(engine.store.records) != set(engine.index.prompts()):
            raise InvariantViolation("Store and index hold different prompts")

    latency = run_config.latency
    cost = report(engine.metrics, run_config.pricing, latency)
    outcomes = pd.DataFrame(rows)
    windows = rolling_windows(outcomes, run_config.window, latency.total_steps,
                              latency.full_generation)
    logger.info(f"Done: hit rate {engine.metrics.hit_rate:.4f}, savings "
                f"{engine.metrics.computation_savings:.4f}, throughput "
                f"{cost.throughput_vs_nocache:.4f}x")
    return SimulationResult(
        policy=run_config.policy,
        mode=run_config.mode,
        capacity_bytes=engine.store.capacity_limit,
        metrics=engine.metrics,
        cost=cost,
        outcomes=outcomes,
        windows=windows,
        store=engine.store,
        index=engine.index,
    )


def working_set_bytes(trace: Trace, run_config, source: Optional[LatentSource] = None) -> int:
    """Total entry bytes of every distinct prompt in the trace, all cacheable steps stored."""
    source = source or make_source(run_config)
    total = 0
    for seed, record in sorted(working_set(trace).items()):
        if run_config.mode == Mode.NIRVANA:
            entry = source.uncompressed(seed, CACHED_STEPS, record.prompt)
        else:
            entry = source.compressed(seed, CACHED_STEPS, run_config.engine.compress_threshold,
                                      record.prompt)
        total += entry_size(entry)
    logger.info(f"Working set: {len(working_set(trace))} prompts, {total} bytes")
    return total


def bench_policies(trace: Trace, run_config, capacities: Optional[Sequence[int]] = None,
                   fractions: Optional[Sequence[float]] = None,
                   policies: Optional[Sequence[Union[str, PolicyName]]] = None) -> pd.DataFrame:
    """
    Hit rate and computation savings for every capacity x policy cell.

    Capacities are given in bytes or as fractions of the trace's working set; cells run
    one after another over a shared latent source.
    """
    if not capacities and not fractions:
        raise ValidationError("Give capacities or capacity fractions", 'capacities')
    policies = [PolicyName.parse(p) for p in (policies or list(PolicyName))]
    source = make_source(run_config)

    cells = [(int(c), None) for c in (capacities or [])]
    if fractions:
        total = working_set_bytes(trace, run_config, source)
        cells += [(int(total * f), float(f)) for f in fractions]

    rows = []
    for capacity, fraction in cells:
        for policy in policies:
            result = simulate(trace, run_config, policy=policy, capacity_bytes=capacity,
                              source=source)
            metrics = result.metrics
            rows.append({
                'capacity_bytes': capacity,
                'capacity_fraction': fraction,
                'policy': policy.value,
                'requests': metrics.requests,
                'hit_rate': metrics.hit_rate,
                'computation_savings': metrics.computation_savings,
                'whole_hits': metrics.whole_hits,
                'decoupled_hits': metrics.decoupled_hits,
                'evictions': metrics.evictions,
                'throughput_vs_nocache': result.throughput_vs_nocache,
            })
    return pd.DataFrame(rows)


def codec_report(latents: Sequence[LatentState], masks: Optional[MaskSet] = None,
                 thresholds: Sequence[float] = (0.99,), prompt: int = 0) -> Dict[str, Any]:
    """
    Compress one prompt's latents at each threshold and measure the result.

    Each block carries the size breakdown, compression ratio and per-step similarity of
    the decoded entry against the originals.

    Raises:
        InvariantViolation: if the encoded size differs from the computed size
    """
    if not latents:
        raise ValidationError("No latents to compress", 'latents')
    first = latents[0]
    baseline = uncompressed_size(first.frame_count, first.frame_shape, len(latents))
    blocks = []
    for threshold in thresholds:
        entry = compress_latents(latents, threshold, masks=masks, prompt=prompt)
        data = encode_entry(entry)
        size = entry_size(entry)
        if len(data) != size:
            raise InvariantViolation(f"Encoded {len(data)} bytes, computed {size}")
        decoded = decode_entry(data)
        similarity = step_similarities(decoded, latents)
        blocks.append({
            'threshold': float(threshold),
            'base_step': entry.base_step,
            'common_key_frames': len(entry.diff_indices) + 1,
            'extra_frames': entry.extra_frame_count,
            'compressed_bytes': size,
            'ratio': baseline / size,
            'breakdown': size_breakdown(entry),
            'step_similarity': {str(s): v for s, v in sorted(similarity.items())},
            'min_similarity': min(similarity.values()),
        })
        logger.info(f"Threshold {threshold}: {size} bytes, ratio {baseline / size:.2f}, "
                    f"min similarity {min(similarity.values()):.6f}")
    return {
        'frame_count': first.frame_count,
        'frame_shape': list(first.frame_shape),
        'steps': [latent.step for latent in latents],
        'uncompressed_bytes': baseline,
        'thresholds': blocks,
    }


def breakdown_table(codec: Dict[str, Any]) -> pd.DataFrame:
    """One row per threshold x size category."""
    rows = []
    for block in codec['thresholds']:
        for category, size in block['breakdown'].items():
            rows.append({
                'threshold': block['threshold'],
                'category': category,
                'bytes': size,
                'share': size / block['compressed_bytes'],
            })
    return pd.DataFrame(rows, columns=['threshold', 'category', 'bytes', 'share'])
