"""
Workload Generator - synthetic traces, embeddings and latents.

Key responsibilities:
1. Deterministic token-set embeddings (prompts sharing tokens are similar)
2. Trace generation over an object x background template grid with Zipf popularity
   and periodic popularity drift
3. Synthetic latents whose frame redundancy and inter-step differentials are set by knobs
4. Trace JSONL writing (reading lives in app.services.parsers.trace_parser)

Everything is a pure function of its spec and seed.
"""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from app.models import (
    CACHED_STEPS, Embedding, EmbeddingError, EmbeddingKind, LatentState, MaskSet, Request,
    TraceRecord
)
from app.utils.validation import ValidationError

logger = logging.getLogger(__name__)

TRACE_FORMAT = 'latent-cache-trace'
TRACE_VERSION = 1

DEFAULT_REDUNDANCY = {5: 0.9, 10: 0.8, 15: 0.6, 20: 0.4, 25: 0.25}
DEFAULT_ALPHA_SCHEDULE = {5: 1.0, 10: 0.9, 15: 0.8, 20: 0.7, 25: 0.6}


def stable_seed(*parts: Any) -> int:
    """63-bit seed derived from the parts' text, identical across runs and platforms."""
    text = ':'.join(str(p) for p in parts).encode('utf-8')
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), 'little') >> 1


# --- specs ----------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceSpec:
    """
    Knobs of the synthetic trace.

    decay_half_life=None disables popularity drift. burst_fraction=0 disables trending bursts.
    """
    n_requests: int = 1000
    n_objects: int = 32
    n_backgrounds: int = 32
    zipf_s: float = 1.0
    decay_half_life: Optional[int] = None
    embed_dim: int = 512
    seed: int = 0
    family_size: int = 4
    sticky_fraction: float = 0.01
    burst_fraction: float = 0.0
    burst_trends: int = 8
    burst_life: float = 10.0

    def __post_init__(self):
        for name in ('n_requests', 'n_objects', 'n_backgrounds', 'embed_dim', 'family_size'):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1", name)
        if self.zipf_s < 0:
            raise ValidationError("zipf_s must be >= 0", 'zipf_s')
        if self.decay_half_life is not None and self.decay_half_life < 1:
            raise ValidationError("decay_half_life must be >= 1", 'decay_half_life')
        if not 0.0 <= self.sticky_fraction <= 1.0:
            raise ValidationError("sticky_fraction must be in [0, 1]", 'sticky_fraction')
        if not 0.0 <= self.burst_fraction <= 1.0:
            raise ValidationError("burst_fraction must be in [0, 1]", 'burst_fraction')
        if self.burst_trends < 1:
            raise ValidationError("burst_trends must be >= 1", 'burst_trends')
        if self.burst_life <= 0:
            raise ValidationError("burst_life must be > 0", 'burst_life')
        if self.seed < 0:
            raise ValidationError("seed must be >= 0", 'seed')

    @property
    def n_templates(self) -> int:
        return self.n_objects * self.n_backgrounds

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class LatentSpec:
    """Geometry and structure of synthetic latents."""
    frames: int = 64
    height: int = 40
    width: int = 64
    channels: int = 4
    redundancy_by_step: Dict[int, float] = field(default_factory=lambda: dict(DEFAULT_REDUNDANCY))
    alpha_schedule: Dict[int, float] = field(default_factory=lambda: dict(DEFAULT_ALPHA_SCHEDULE))
    noise_sigma: float = 0.01
    seed: int = 0
    steps: Tuple[int, ...] = CACHED_STEPS

    def __post_init__(self):
        for name in ('frames', 'height', 'width', 'channels'):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1", name)
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0", 'noise_sigma')
        for step in self.steps:
            if step not in self.redundancy_by_step or step not in self.alpha_schedule:
                raise ValidationError(f"No redundancy/alpha given for step {step}",
                                      'redundancy_by_step')
            if not 0.0 <= self.redundancy_by_step[step] <= 1.0:
                raise ValidationError(f"Redundancy of step {step} must be in [0, 1]",
                                      'redundancy_by_step')

    @property
    def frame_shape(self) -> Tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def key_count(self, step: int) -> int:
        """Key frames per step, including frame 0."""
        redundant = int(round(self.redundancy_by_step[step] * (self.frames - 1)))
        return self.frames - redundant

    def with_overrides(self, **changes) -> 'LatentSpec':
        values = {**asdict(self), **changes}
        values['steps'] = tuple(values['steps'])
        return LatentSpec(**values)

    @classmethod
    def zero_motion(cls, **kwargs) -> 'LatentSpec':
        """Every frame of every step equals the step's first frame."""
        steps = kwargs.pop('steps', CACHED_STEPS)
        return cls(redundancy_by_step={s: 1.0 for s in steps}, noise_sigma=0.0, steps=steps,
                   **kwargs)

    @classmethod
    def no_redundancy(cls, noise_sigma: float = 1.0, **kwargs) -> 'LatentSpec':
        """Every frame is a key frame and the step differentials are dominated by noise."""
        steps = kwargs.pop('steps', CACHED_STEPS)
        return cls(redundancy_by_step={s: 0.0 for s in steps}, noise_sigma=noise_sigma,
                   steps=steps, **kwargs)

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        values['redundancy_by_step'] = {str(k): v for k, v in sorted(self.redundancy_by_step.items())}
        values['alpha_schedule'] = {str(k): v for k, v in sorted(self.alpha_schedule.items())}
        values['steps'] = list(self.steps)
        return values


@dataclass(frozen=True)
class Trace:
    spec: TraceSpec
    records: Tuple[TraceRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


# --- embeddings -----------------------------------------------------------------------

@lru_cache(maxsize=65536)
def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(stable_seed('token', seed, token))
    vector = rng.standard_normal(dim)
    vector /= np.linalg.norm(vector)
    vector.setflags(write=False)
    return vector


@lru_cache(maxsize=65536)
def _embedding_for(tokens: Tuple[str, ...], dim: int, seed: int, kind: EmbeddingKind) -> Embedding:
    total = np.zeros(dim, dtype=np.float64)
    for token in tokens:
        total += _token_vector(token, dim, seed)
    return Embedding.normalized(total, kind)


def synth_embedding(token_set: Iterable[str], dim: int = 512, seed: int = 0,
                    kind: EmbeddingKind = EmbeddingKind.WHOLE) -> Embedding:
    """
    Normalized sum of one pseudorandom unit vector per distinct token.

    Raises:
        EmbeddingError: if the token set is empty
    """
    tokens = tuple(sorted(set(token_set)))
    if not tokens:
        raise EmbeddingError("Cannot embed an empty token set")
    return _embedding_for(tokens, dim, seed, EmbeddingKind(kind))


def to_request(record: TraceRecord, dim: int = 512, seed: int = 0) -> Request:
    """Resolve a trace record's token sets into embeddings."""
    return Request(
        prompt=record.prompt,
        arrival=record.arrival,
        whole=synth_embedding(record.whole_tokens, dim, seed, EmbeddingKind.WHOLE),
        object=synth_embedding(record.object_tokens, dim, seed, EmbeddingKind.OBJECT),
        background=synth_embedding(record.background_tokens, dim, seed, EmbeddingKind.BACKGROUND),
        latent_seed=record.latent_seed,
    )


# --- traces ---------------------------------------------------------------------------

def object_tokens(index: int, family_size: int) -> Tuple[str, ...]:
    return (f'object:{index}', f'object-family:{index // family_size}')


def background_tokens(index: int, family_size: int) -> Tuple[str, ...]:
    return (f'background:{index}', f'background-family:{index // family_size}')


def zipf_weights(n: int, s: float) -> np.ndarray:
    """P(rank r) proportional to 1 / (r + 1)^s."""
    weights = 1.0 / np.power(np.arange(1, n + 1, dtype=np.float64), s)
    return weights / weights.sum()


def popularity_rankings(spec: TraceSpec) -> List[Tuple[int, np.ndarray]]:
    """
    (first request, ranking) for every popularity period of the trace.

    ranking[r] is the template at popularity rank r. At each period boundary all ranks below
    the sticky top fraction are reshuffled.
    """
    rng = np.random.default_rng(stable_seed('ranking', spec.seed))
    ranking = rng.permutation(spec.n_templates)
    periods = [(0, ranking.copy())]
    if spec.decay_half_life is None:
        return periods
    sticky = int(spec.sticky_fraction * spec.n_templates)
    for start in range(spec.decay_half_life, spec.n_requests, spec.decay_half_life):
        ranking[sticky:] = rng.permutation(ranking[sticky:])
        periods.append((start, ranking.copy()))
    return periods


def trending_bursts(spec: TraceSpec, templates: np.ndarray) -> np.ndarray:
    """
    Send a burst_fraction share of requests to short-lived trending templates.

    burst_trends templates trend at once, each drawn uniformly from the grid. A trend takes an
    exponentially distributed number of requests (mean burst_life, at least 1) and is then
    replaced by a fresh draw.
    """
    rng = np.random.default_rng(stable_seed('bursts', spec.seed))
    bursty = np.flatnonzero(rng.random(spec.n_requests) < spec.burst_fraction)
    result = templates.copy()
    trends: List[int] = []
    remaining: List[int] = []
    for arrival in bursty.tolist():
        while len(trends) < spec.burst_trends:
            trends.append(int(rng.integers(spec.n_templates)))
            remaining.append(max(1, int(round(rng.exponential(spec.burst_life)))))
        j = int(rng.integers(len(trends)))
        result[arrival] = trends[j]
        remaining[j] -= 1
        if remaining[j] == 0:
            del trends[j], remaining[j]
    logger.debug(f"Routed {len(bursty)} of {spec.n_requests} requests to trending templates")
    return result


def gen_trace(spec: TraceSpec) -> Trace:
    """
    Draw n_requests records; every record is a distinct prompt (its arrival index).

    Records with the same (object, background) template share token sets and latent seed.
    """
    rng = np.random.default_rng(stable_seed('draws', spec.seed))
    cdf = np.cumsum(zipf_weights(spec.n_templates, spec.zipf_s))
    cdf[-1] = 1.0
    ranks = np.searchsorted(cdf, rng.random(spec.n_requests), side='right')
    ranks = np.minimum(ranks, spec.n_templates - 1)

    periods = popularity_rankings(spec)
    templates = np.empty(spec.n_requests, dtype=np.int64)
    for i, (start, ranking) in enumerate(periods):
        end = periods[i + 1][0] if i + 1 < len(periods) else spec.n_requests
        templates[start:end] = ranking[ranks[start:end]]
    if spec.burst_fraction > 0:
        templates = trending_bursts(spec, templates)

    records = []
    for arrival, template in enumerate(templates.tolist()):
        obj, bg = divmod(template, spec.n_backgrounds)
        records.append(TraceRecord(
            prompt=arrival,
            arrival=arrival,
            object_tokens=object_tokens(obj, spec.family_size),
            background_tokens=background_tokens(bg, spec.family_size),
            latent_seed=stable_seed('latent', spec.seed, obj, bg),
            template=(obj, bg),
        ))
    logger.info(f"Generated trace of {len(records)} requests over {spec.n_templates} templates")
    return Trace(spec=spec, records=tuple(records))


def trace_header(spec: TraceSpec) -> Dict[str, Any]:
    return {'format': TRACE_FORMAT, 'version': TRACE_VERSION, 'spec': spec.to_dict()}


def write_trace(trace: Trace, path: Union[str, Path]) -> Path:
    """JSONL: one header line, then one record per line; keys sorted for byte-stable output."""
    path = Path(path)
    with path.open('w', encoding='utf-8', newline='\n') as fh:
        fh.write(json.dumps(trace_header(trace.spec), sort_keys=True) + '\n')
        for record in trace.records:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + '\n')
    logger.info(f"Wrote {len(trace)} requests to {path}")
    return path


def read_trace(path: Union[str, Path]) -> Trace:
    from app.services.parsers.trace_parser import TraceParser
    return TraceParser(path).read()


def working_set(trace: Trace) -> Dict[int, TraceRecord]:
    """First record of every distinct latent seed."""
    seen: Dict[int, TraceRecord] = {}
    for record in trace.records:
        seen.setdefault(record.latent_seed, record)
    return seen


# --- latents --------------------------------------------------------------------------

def _object_masks(rng: np.random.Generator, spec: LatentSpec) -> np.ndarray:
    """A rectangle per prompt, drifting horizontally across frames."""
    frames, height, width = spec.frames, spec.height, spec.width
    box_h = int(rng.integers(max(1, height // 4), max(2, height // 2 + 1)))
    box_w = int(rng.integers(max(1, width // 4), max(2, width // 2 + 1)))
    top = int(rng.integers(0, height - box_h + 1))
    left = int(rng.integers(0, width - box_w + 1))
    drift = float(rng.uniform(-0.25, 0.25))

    masks = np.zeros((frames, height, width), dtype=bool)
    for f in range(frames):
        x = int(np.clip(round(left + drift * f), 0, width - box_w))
        masks[f, top:top + box_h, x:x + box_w] = True
    return masks


def synth_latents(prompt_seed: int, spec: LatentSpec) -> Tuple[List[LatentState], MaskSet]:
    """
    One latent per step in spec.steps plus the prompt's masks.

    Each step has a random first frame. A key frame m of step s is
    first_s + alpha_s * D[m] + noise, with D a per-prompt differential field and noise of
    standard deviation noise_sigma * alpha_s. Key-frame sets are nested prefixes of one
    per-prompt random order, so more redundant steps have a subset of the key frames of
    less redundant ones; every other frame is an exact copy of the nearest earlier key frame.
    """
    rng = np.random.default_rng([spec.seed, prompt_seed])
    frames, shape = spec.frames, spec.frame_shape
    diff_field = rng.standard_normal((frames,) + shape).astype(np.float32)
    order = rng.permutation(np.arange(1, frames))
    masks = MaskSet.from_object(_object_masks(rng, spec))

    latents = []
    for step in spec.steps:
        alpha = np.float32(spec.alpha_schedule[step])
        first = rng.standard_normal(shape).astype(np.float32)
        keys = np.zeros(frames, dtype=bool)
        keys[0] = True
        keys[order[:spec.key_count(step) - 1]] = True

        data = np.empty((frames,) + shape, dtype=np.float32)
        data[0] = first
        noise_scale = np.float32(spec.noise_sigma * spec.alpha_schedule[step])
        nearest = 0
        for j in range(1, frames):
            if keys[j]:
                frame = first + alpha * diff_field[j]
                if noise_scale > 0:
                    frame = frame + noise_scale * rng.standard_normal(shape).astype(np.float32)
                data[j] = frame
                nearest = j
            else:
                data[j] = data[nearest]
        latents.append(LatentState(step=step, frames=data))
    return latents, masks
