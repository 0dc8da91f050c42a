"""
Cache Engine - the request pipeline and its latency and cost models.

Key responsibilities:
1. Look the request up in the whole/object/background index tables
2. Decide between a miss, a whole-prompt hit and a decoupled (object + background) hit
3. Map the hit score to a step, fetch it (falling back to earlier steps) and stitch
4. Account the simulated generation latency
5. Insert the prompt's remaining cacheable steps after generation

Modes:
- flexcache: decoupled lookup, compressed entries, insertion after misses and partial hits
- nirvana: whole-prompt lookup only, uncompressed entries, insertion after misses only
- nocache: every request runs the full schedule
"""
import bisect
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional, Tuple, Union

from app.models import CACHED_STEPS, TOTAL_STEPS, EmbeddingKind, LatentState, Request
from app.services.cache_store import CacheStore, OversizedEntry
from app.services.latent_source import LatentSource
from app.services.stitcher import StitchInput, stitch
from app.services.vector_index import VectorIndex
from app.utils.errors import CacheSimError
from app.utils.validation import ValidationError

logger = logging.getLogger(__name__)

HIT_THRESHOLD = 0.65
COMPRESS_THRESHOLD = 0.99
DEFAULT_BIN_EDGES = (0.65, 0.72, 0.79, 0.86, 0.93)
SECONDS_PER_MONTH = 30 * 24 * 3600
SKIP_BUCKETS = (0,) + CACHED_STEPS


class EngineError(CacheSimError):
    pass


class ReportError(EngineError):
    pass


class Mode(str, Enum):
    FLEXCACHE = 'flexcache'
    NIRVANA = 'nirvana'
    NOCACHE = 'nocache'

    @classmethod
    def parse(cls, value) -> 'Mode':
        try:
            return cls(str(getattr(value, 'value', value)).strip().lower())
        except ValueError:
            choices = ', '.join(m.value for m in cls)
            raise ValidationError(f"Unknown mode '{value}', expected one of: {choices}", 'mode')


# --- decisions -------------------------------------------------------------------------

@dataclass(frozen=True)
class Miss:
    kind = 'miss'
    score: Optional[float] = None


@dataclass(frozen=True)
class WholeHit:
    source: int
    score: float
    kind = 'whole'


@dataclass(frozen=True)
class DecoupledHit:
    object_source: int
    background_source: int
    score: float
    kind = 'decoupled'


Decision = Union[Miss, WholeHit, DecoupledHit]


def decide(sim_whole: float, sim_object: float, sim_background: float,
           threshold: float = HIT_THRESHOLD, whole_source: Optional[int] = None,
           object_source: Optional[int] = None,
           background_source: Optional[int] = None) -> Decision:
    """
    Combined score is max(sim_whole, min(sim_object, sim_background)).

    The decoupled score wins only when strictly above the whole score; both parts must clear
    the threshold for a decoupled hit.
    """
    part_score = min(sim_object, sim_background)
    if part_score > sim_whole and part_score >= threshold:
        return DecoupledHit(object_source=object_source, background_source=background_source,
                            score=part_score)
    if sim_whole >= threshold:
        return WholeHit(source=whole_source, score=sim_whole)
    return Miss(score=max(sim_whole, part_score))


@dataclass(frozen=True)
class StepBins:
    """Score lower edges and the step each bin maps to; edges ascend, steps never decrease."""
    edges: Tuple[float, ...] = DEFAULT_BIN_EDGES
    steps: Tuple[int, ...] = CACHED_STEPS

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        steps = tuple(int(s) for s in self.steps)
        object.__setattr__(self, 'edges', edges)
        object.__setattr__(self, 'steps', steps)
        if not edges or len(edges) != len(steps):
            raise ValidationError(f"{len(edges)} bin edges for {len(steps)} steps", 'bins')
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValidationError(f"Bin edges must ascend: {edges}", 'bins')
        if any(b < a for a, b in zip(steps, steps[1:])):
            raise ValidationError(f"Bin steps must not decrease: {steps}", 'bins')
        for step in steps:
            if step not in CACHED_STEPS:
                raise ValidationError(f"Bin step {step} is not a cached step", 'bins')


def similarity_to_step(score: float, bins: StepBins = StepBins()) -> int:
    """
    Step a hit with this score may skip to.

    Raises:
        EngineError: if the score is below the first bin
    """
    if score < bins.edges[0]:
        raise EngineError(f"Score {score} is below the first bin edge {bins.edges[0]}")
    return bins.steps[bisect.bisect_right(bins.edges, score) - 1]


# --- models ----------------------------------------------------------------------------

@dataclass(frozen=True)
class LatencyModel:
    t_per_step: float = 4.84
    total_steps: int = TOTAL_STEPS
    t_lookup: float = 0.14
    t_extract: float = 3.6
    t_stitch: float = 0.0

    def __post_init__(self):
        for name in ('t_per_step', 't_lookup', 't_extract', 't_stitch'):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0", name)
        if self.total_steps < max(CACHED_STEPS):
            raise ValidationError(f"total_steps must be >= {max(CACHED_STEPS)}", 'total_steps')

    @property
    def full_generation(self) -> float:
        return self.t_per_step * self.total_steps

    def request_latency(self, skipped: int, mode: 'Mode' = Mode.FLEXCACHE,
                        stitched: bool = False) -> float:
        diffusion = self.t_per_step * (self.total_steps - skipped)
        if mode == Mode.NOCACHE:
            return diffusion
        if mode == Mode.NIRVANA:
            return self.t_lookup + diffusion
        return self.t_extract + self.t_lookup + diffusion + (self.t_stitch if stitched else 0.0)


@dataclass(frozen=True)
class PricingModel:
    gpu_rate: float = 3.67
    storage_rate: Optional[float] = None
    provisioned_storage: float = 0.0

    def __post_init__(self):
        if self.gpu_rate < 0 or self.provisioned_storage < 0:
            raise ValidationError("Pricing values must be >= 0", 'pricing')
        if self.storage_rate is not None and self.storage_rate < 0:
            raise ValidationError("storage_rate must be >= 0", 'storage_rate')


@dataclass
class RequestOutcome:
    prompt: int
    arrival: int
    decision: Decision
    served: Decision
    sim_whole: float
    sim_object: float
    sim_background: float
    desired_step: int = 0
    actual_step: int = 0
    latency: float = 0.0
    fallback: bool = False
    inserted_steps: Tuple[int, ...] = ()
    evicted: int = 0
    rejected: bool = False
    latent: Optional[LatentState] = field(default=None, repr=False, compare=False)

    @property
    def skipped(self) -> int:
        return self.actual_step

    def to_dict(self) -> Dict[str, Any]:
        return {
            'prompt': self.prompt,
            'arrival': self.arrival,
            'decision': self.decision.kind,
            'served': self.served.kind,
            'score': self.decision.score,
            'sim_whole': self.sim_whole,
            'sim_object': self.sim_object,
            'sim_background': self.sim_background,
            'desired_step': self.desired_step,
            'actual_step': self.actual_step,
            'skipped': self.skipped,
            'latency': self.latency,
            'fallback': self.fallback,
            'inserted_steps': ' '.join(str(s) for s in self.inserted_steps),
            'evicted': self.evicted,
            'rejected': self.rejected,
        }


@dataclass
class Metrics:
    total_steps: int = TOTAL_STEPS
    requests: int = 0
    whole_hits: int = 0
    decoupled_hits: int = 0
    decoupled_fallbacks: int = 0
    skipped_histogram: Dict[int, int] = field(default_factory=lambda: {s: 0 for s in SKIP_BUCKETS})
    total_skipped: int = 0
    simulated_time: float = 0.0
    insertions: int = 0
    rejected_insertions: int = 0
    evictions: int = 0

    def record(self, outcome: RequestOutcome):
        self.requests += 1
        if isinstance(outcome.served, WholeHit):
            self.whole_hits += 1
        elif isinstance(outcome.served, DecoupledHit):
            self.decoupled_hits += 1
        if outcome.fallback:
            self.decoupled_fallbacks += 1
        self.skipped_histogram[outcome.skipped] = self.skipped_histogram.get(outcome.skipped, 0) + 1
        self.total_skipped += outcome.skipped
        self.simulated_time += outcome.latency
        if outcome.inserted_steps:
            self.insertions += 1
        if outcome.rejected:
            self.rejected_insertions += 1
        self.evictions += outcome.evicted

    @property
    def hits(self) -> int:
        return self.whole_hits + self.decoupled_hits

    @property
    def misses(self) -> int:
        return self.requests - self.hits

    @property
    def hit_rate(self) -> float:
        return self.hits / self.requests if self.requests else 0.0

    @property
    def computation_savings(self) -> float:
        if not self.requests:
            return 0.0
        return self.total_skipped / (self.total_steps * self.requests)

    @property
    def mean_latency(self) -> float:
        if not self.requests:
            raise ReportError("No requests were recorded")
        return self.simulated_time / self.requests

    def throughput_vs_nocache(self, latency: LatencyModel) -> float:
        return latency.full_generation / self.mean_latency

    def to_dict(self) -> Dict[str, Any]:
        requests = self.requests or 1
        return {
            'requests': self.requests,
            'hits': self.hits,
            'whole_hits': self.whole_hits,
            'decoupled_hits': self.decoupled_hits,
            'misses': self.misses,
            'hit_rate': self.hit_rate,
            'whole_hit_fraction': self.whole_hits / requests,
            'decoupled_hit_fraction': self.decoupled_hits / requests,
            'decoupled_fallbacks': self.decoupled_fallbacks,
            'skipped_histogram': {str(k): v for k, v in sorted(self.skipped_histogram.items())},
            'total_skipped': self.total_skipped,
            'computation_savings': self.computation_savings,
            'simulated_time': self.simulated_time,
            'insertions': self.insertions,
            'rejected_insertions': self.rejected_insertions,
            'evictions': self.evictions,
        }


@dataclass(frozen=True)
class CostReport:
    requests: int
    mean_latency: float
    throughput_vs_nocache: float
    gpu_cost_per_video: float
    storage_cost_per_video: Optional[float]
    videos_per_month: float

    @property
    def cost_per_video(self) -> float:
        return self.gpu_cost_per_video + (self.storage_cost_per_video or 0.0)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'requests': self.requests,
            'mean_latency': self.mean_latency,
            'throughput_vs_nocache': self.throughput_vs_nocache,
            'gpu_cost_per_video': self.gpu_cost_per_video,
            'storage_cost_per_video': self.storage_cost_per_video,
            'cost_per_video': self.cost_per_video,
            'videos_per_month': self.videos_per_month,
        }


def report(metrics: Metrics, pricing: PricingModel = PricingModel(),
           latency: LatencyModel = LatencyModel()) -> CostReport:
    """
    Cost per video and throughput relative to running every step.

    Storage cost is None when no storage rate is configured.

    Raises:
        ReportError: if no requests were recorded
    """
    if metrics.requests == 0:
        raise ReportError("Cannot report on a run with zero requests")
    mean_latency = metrics.mean_latency
    videos_per_month = SECONDS_PER_MONTH / mean_latency
    storage = None
    if pricing.storage_rate is not None:
        storage = pricing.provisioned_storage * pricing.storage_rate / videos_per_month
    return CostReport(
        requests=metrics.requests,
        mean_latency=mean_latency,
        throughput_vs_nocache=latency.full_generation / mean_latency,
        gpu_cost_per_video=pricing.gpu_rate * mean_latency / 3600.0,
        storage_cost_per_video=storage,
        videos_per_month=videos_per_month,
    )


# --- engine ----------------------------------------------------------------------------

@dataclass(frozen=True)
class EngineSettings:
    mode: Mode = Mode.FLEXCACHE
    hit_threshold: float = HIT_THRESHOLD
    compress_threshold: float = COMPRESS_THRESHOLD
    bins: StepBins = StepBins()
    latency: LatencyModel = LatencyModel()
    strict_admission: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'mode', Mode.parse(self.mode))
        if not 0.0 < self.compress_threshold <= 1.0:
            raise ValidationError("compress_threshold must be in (0, 1]", 'compress_threshold')
        if not -1.0 <= self.hit_threshold <= 1.0:
            raise ValidationError("hit_threshold must be in [-1, 1]", 'hit_threshold')
        if self.hit_threshold < self.bins.edges[0]:
            raise ValidationError(
                f"hit_threshold {self.hit_threshold} is below the first bin edge {self.bins.edges[0]}",
                'hit_threshold')


class CacheEngine:
    """
    Serves requests against a cache store and vector index.

    Usage:
        engine = CacheEngine(store, index, SyntheticLatentSource(LatentSpec()))
        outcome = engine.process_request(request)
        cost = report(engine.metrics, PricingModel())
    """

    def __init__(self, store: CacheStore, index: VectorIndex, source: LatentSource,
                 settings: EngineSettings = EngineSettings()):
        self.store = store
        self.index = index
        self.source = source
        self.settings = settings
        self.metrics = Metrics(total_steps=settings.latency.total_steps)
        self.clock = 1 + max((e.last_access for e in store.step_entries()), default=-1)
        if store.on_prompt_removed is None:
            store.on_prompt_removed = index.remove

    @property
    def mode(self) -> Mode:
        return self.settings.mode

    def _query(self, kind: EmbeddingKind, request: Request) -> Tuple[float, Optional[int]]:
        embedding = {
            EmbeddingKind.WHOLE: request.whole,
            EmbeddingKind.OBJECT: request.object,
            EmbeddingKind.BACKGROUND: request.background,
        }[kind]
        result = self.index.query_top1(kind, embedding)
        if result is None:
            return -1.0, None
        return result.score, result.prompt

    def lookup(self, request: Request) -> Tuple[Decision, Tuple[float, float, float], Optional[int]]:
        """Decision, the three scores and the best whole-prompt match."""
        sim_whole, whole_src = self._query(EmbeddingKind.WHOLE, request)
        if self.mode == Mode.FLEXCACHE:
            sim_object, object_src = self._query(EmbeddingKind.OBJECT, request)
            sim_background, background_src = self._query(EmbeddingKind.BACKGROUND, request)
        else:
            sim_object, object_src, sim_background, background_src = -1.0, None, -1.0, None
        decision = decide(sim_whole, sim_object, sim_background, self.settings.hit_threshold,
                          whole_src, object_src, background_src)
        return decision, (sim_whole, sim_object, sim_background), whole_src

    def _serve_whole(self, outcome: RequestOutcome, source: int, score: float, now: int):
        desired = similarity_to_step(score, self.settings.bins)
        outcome.desired_step = desired
        fetched = self.store.get_step(source, desired, now)
        if fetched is None:
            outcome.served = Miss(score=score)
            return
        outcome.latent, outcome.actual_step = fetched
        outcome.served = WholeHit(source=source, score=score)

    def _serve_decoupled(self, outcome: RequestOutcome, decision: DecoupledHit,
                         whole_source: Optional[int], now: int):
        desired = similarity_to_step(decision.score, self.settings.bins)
        outcome.desired_step = desired
        obj, bg = decision.object_source, decision.background_source
        common = set(self.store.cached_steps(obj)) & set(self.store.cached_steps(bg))
        usable = [s for s in common if s <= desired]
        obj_masks, bg_masks = self.store.masks(obj), self.store.masks(bg)

        if usable and obj_masks is not None and bg_masks is not None:
            step = max(usable)
            object_latent = self.store.fetch_step(obj, step, now)
            background_latent = (object_latent if bg == obj
                                 else self.store.fetch_step(bg, step, now))
            outcome.latent = stitch(StitchInput(object_latent, obj_masks,
                                                background_latent, bg_masks))
            outcome.actual_step = step
            outcome.served = decision
            return

        outcome.fallback = True
        logger.debug(f"Prompt {outcome.prompt}: no common step <= {desired} for sources "
                     f"{obj}/{bg}, falling back")
        if whole_source is not None and outcome.sim_whole >= self.settings.hit_threshold:
            self._serve_whole(outcome, whole_source, outcome.sim_whole, now)
        else:
            outcome.desired_step = 0
            outcome.served = Miss(score=decision.score)

    def process_request(self, request: Request, record: bool = True) -> RequestOutcome:
        """
        Look up, serve, account latency, then update the cache.

        Raises:
            OversizedEntry: only with strict admission
        """
        now = self.clock
        self.clock += 1

        if self.mode == Mode.NOCACHE:
            outcome = RequestOutcome(prompt=request.prompt, arrival=request.arrival,
                                     decision=Miss(), served=Miss(), sim_whole=-1.0,
                                     sim_object=-1.0, sim_background=-1.0)
            outcome.latency = self.settings.latency.request_latency(0, Mode.NOCACHE)
            if record:
                self.metrics.record(outcome)
            return outcome

        decision, (sim_whole, sim_object, sim_background), whole_src = self.lookup(request)
        outcome = RequestOutcome(prompt=request.prompt, arrival=request.arrival,
                                 decision=decision, served=Miss(score=decision.score),
                                 sim_whole=sim_whole, sim_object=sim_object,
                                 sim_background=sim_background)
        if isinstance(decision, WholeHit):
            self._serve_whole(outcome, decision.source, decision.score, now)
        elif isinstance(decision, DecoupledHit):
            self._serve_decoupled(outcome, decision, whole_src, now)

        if isinstance(outcome.served, Miss):
            outcome.actual_step = 0
        outcome.latency = self.settings.latency.request_latency(
            outcome.actual_step, self.mode, stitched=isinstance(outcome.served, DecoupledHit))
        logger.debug(f"Prompt {request.prompt}: {decision.kind} -> {outcome.served.kind} "
                     f"at step {outcome.actual_step}")

        self.update_after_generation(request, outcome, now)
        if record:
            self.metrics.record(outcome)
        return outcome

    def steps_to_insert(self, outcome: RequestOutcome) -> Tuple[int, ...]:
        if self.mode == Mode.NIRVANA:
            return CACHED_STEPS if outcome.actual_step == 0 else ()
        return tuple(s for s in CACHED_STEPS if s > outcome.actual_step)

    def update_after_generation(self, request: Request, outcome: RequestOutcome,
                                now: Optional[int] = None):
        """Insert the steps after the one served (all of them after a miss)."""
        now = self.clock - 1 if now is None else now
        steps = self.steps_to_insert(outcome)
        if not steps or self.mode == Mode.NOCACHE:
            return
        if request.prompt in self.store or request.prompt in self.index:
            logger.warning(f"Prompt {request.prompt} is already cached; skipping insertion")
            return

        if self.mode == Mode.NIRVANA:
            entry = self.source.uncompressed(request.latent_seed, steps, request.prompt)
        else:
            entry = self.source.compressed(request.latent_seed, steps,
                                           self.settings.compress_threshold, request.prompt)
        try:
            evicted = self.store.insert_steps(request.prompt, entry, steps, now)
        except OversizedEntry as e:
            if self.settings.strict_admission:
                raise
            logger.warning(f"Rejected insertion: {e}")
            outcome.rejected = True
            return
        self.index.insert(request.whole, request.object, request.background, request.prompt)
        outcome.inserted_steps = steps
        outcome.evicted = len(evicted)
