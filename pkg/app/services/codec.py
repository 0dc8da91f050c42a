"""
Latent Codec - compresses the cached steps of one prompt into a single entry.

Two mechanisms, applied in order:
1. Intra-step: keep only key frames. Frames are visited from the last to the first; a frame
   that is similar enough to an earlier key frame is replaced by a reference to it.
2. Inter-step: for key frames common to every cached step, store the differential
   (key frame minus first frame) of one base step, and for every other step a single
   least-squares scale factor alpha per key frame. Key frames that are not common to all
   steps are kept verbatim as extra frames.

Decompression is exact for first frames and extra frames and approximate for common key
frames of non-base steps.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from app.models import LatentState, MaskSet
from app.services.similarity import frame_similarity_matrix, paired_frame_similarities
from app.utils.errors import CacheSimError, DataFormatError

logger = logging.getLogger(__name__)

# Base-step scores closer than this are treated as a tie (earliest step wins).
BASE_TIE_TOLERANCE = 1e-9


class CodecError(DataFormatError):
    """Invalid input to a codec operation or an inconsistent entry."""
    pass


class DegenerateBase(CacheSimError):
    """The base differential is all zeros, so no alpha can be fitted against it."""
    pass


class StepNotCached(CacheSimError):
    """The requested step is not stored in the entry."""
    pass


@dataclass(frozen=True)
class KeyFrameMap:
    """mapping[j] is the key frame that represents frame j; key frames map to themselves."""
    mapping: Tuple[int, ...]

    def __post_init__(self):
        mapping = tuple(int(m) for m in self.mapping)
        object.__setattr__(self, 'mapping', mapping)
        if not mapping:
            raise CodecError("Key frame map is empty")
        if mapping[0] != 0:
            raise CodecError("Frame 0 must be a key frame")
        for j, m in enumerate(mapping):
            if m > j or m < 0:
                raise CodecError(f"Frame {j} maps forward to {m}")
            if mapping[m] != m:
                raise CodecError(f"Frame {j} maps to {m}, which is not a key frame")

    @classmethod
    def identity(cls, frame_count: int) -> 'KeyFrameMap':
        return cls(tuple(range(frame_count)))

    def __len__(self) -> int:
        return len(self.mapping)

    def __getitem__(self, index: int) -> int:
        return self.mapping[index]

    @property
    def key_indices(self) -> Tuple[int, ...]:
        return tuple(j for j, m in enumerate(self.mapping) if m == j)

    def reference_counts(self) -> Dict[int, int]:
        """Number of frames (including itself) each key frame stands for."""
        counts: Dict[int, int] = {}
        for m in self.mapping:
            counts[m] = counts.get(m, 0) + 1
        return counts


@dataclass(frozen=True)
class IntraCompressed:
    """Key frames of one step plus the map that restores the others."""
    step: int
    key_indices: Tuple[int, ...]
    keyframes: np.ndarray  # (K, H, W, C), aligned with key_indices
    map: KeyFrameMap

    def __post_init__(self):
        if tuple(self.key_indices) != self.map.key_indices:
            raise CodecError(f"Step {self.step}: stored key frames disagree with the map")
        if self.keyframes.shape[0] != len(self.key_indices):
            raise CodecError(f"Step {self.step}: {self.keyframes.shape[0]} frames for "
                             f"{len(self.key_indices)} key indices")

    @property
    def frame_count(self) -> int:
        return len(self.map)

    @property
    def frame_shape(self) -> Tuple[int, int, int]:
        return tuple(self.keyframes.shape[1:])

    def keyframe(self, index: int) -> np.ndarray:
        return self.keyframes[self.key_indices.index(index)]

    def keyframe_dict(self) -> Dict[int, np.ndarray]:
        return {m: self.keyframes[i] for i, m in enumerate(self.key_indices)}


@dataclass(frozen=True)
class CompressedEntry:
    """
    Compressed cache record of one prompt.

    diff_indices lists the common key frames other than frame 0, ascending; base_diffs and
    every alphas[step] array are aligned with it. The base step has no alphas (alpha = 1).
    """
    prompt: int
    base_step: int
    frame_count: int
    frame_shape: Tuple[int, int, int]
    first_frames: Dict[int, np.ndarray]
    diff_indices: Tuple[int, ...]
    base_diffs: np.ndarray
    alphas: Dict[int, np.ndarray]
    extra_frames: Dict[int, Dict[int, np.ndarray]]
    maps: Dict[int, KeyFrameMap]
    masks: Optional[MaskSet] = None

    @property
    def steps(self) -> Tuple[int, ...]:
        return tuple(sorted(self.maps))

    @property
    def common_indices(self) -> Tuple[int, ...]:
        return (0,) + tuple(self.diff_indices)

    @property
    def extra_frame_count(self) -> int:
        return sum(len(frames) for frames in self.extra_frames.values())

    def alpha_for(self, step: int) -> np.ndarray:
        if step == self.base_step:
            return np.ones(len(self.diff_indices), dtype=np.float32)
        return self.alphas[step]


def _check_threshold(threshold: float):
    if not 0.0 < threshold <= 1.0:
        raise CodecError(f"Similarity threshold must be in (0, 1], got {threshold}")


def select_keyframes(latent: LatentState, threshold: float) -> KeyFrameMap:
    """
    Choose key frames and map every other frame onto one of them.

    A frame is a key frame when no earlier key frame reaches the threshold; frame 0 always is.
    Frames are then visited from the last to the first and each non-key frame is mapped to
    its most similar earlier key frame (ties go to the smaller index).
    """
    _check_threshold(threshold)
    sims = frame_similarity_matrix(latent.frames)
    frame_count = latent.frame_count
    is_key = np.zeros(frame_count, dtype=bool)
    is_key[0] = True
    for j in range(1, frame_count):
        earlier = np.flatnonzero(is_key[:j])
        is_key[j] = not bool((sims[j, earlier] >= threshold).any())

    mapping = list(range(frame_count))
    for j in range(frame_count - 1, 0, -1):
        if is_key[j]:
            continue
        earlier = np.flatnonzero(is_key[:j])
        mapping[j] = int(earlier[int(np.argmax(sims[j, earlier]))])

    return KeyFrameMap(tuple(mapping))


def intra_compress(latent: LatentState, threshold: float) -> IntraCompressed:
    """Keep bit-exact copies of the key frames and drop the rest."""
    key_map = select_keyframes(latent, threshold)
    key_indices = key_map.key_indices
    keyframes = latent.frames[list(key_indices)].copy()
    keyframes.setflags(write=False)
    return IntraCompressed(step=latent.step, key_indices=key_indices,
                           keyframes=keyframes, map=key_map)


def _expand(keyframes: Dict[int, np.ndarray], key_map: KeyFrameMap) -> np.ndarray:
    """Repeat key frames into every position that maps to them."""
    frames = np.stack([keyframes[key_map[j]] for j in range(len(key_map))])
    frames.setflags(write=False)
    return frames


def intra_decompress(compressed: IntraCompressed) -> LatentState:
    """Frame j of the result is the stored key frame map[j], bit-exact."""
    return LatentState(step=compressed.step,
                       frames=_expand(compressed.keyframe_dict(), compressed.map))


def compute_diffs(compressed: IntraCompressed,
                  indices: Optional[Iterable[int]] = None) -> Dict[int, np.ndarray]:
    """Differential of each key frame m > 0 against the first frame of the same step."""
    frames = compressed.keyframe_dict()
    first = frames[0]
    wanted = compressed.key_indices if indices is None else indices
    return {m: frames[m] - first for m in wanted if m != 0}


def solve_alpha(diff_s: np.ndarray, diff_base: np.ndarray) -> np.float32:
    """
    Least-squares scale so that alpha * diff_base best matches diff_s.

    alpha = sum(diff_s * diff_base) / sum(diff_base ** 2) over every element.

    Raises:
        CodecError: if the shapes differ
        DegenerateBase: if diff_base is all zeros
    """
    if np.shape(diff_s) != np.shape(diff_base):
        raise CodecError(f"Diff shape mismatch: {np.shape(diff_s)} vs {np.shape(diff_base)}")
    ds = np.asarray(diff_s, dtype=np.float64).reshape(-1)
    db = np.asarray(diff_base, dtype=np.float64).reshape(-1)
    denominator = float(np.dot(db, db))
    if denominator == 0.0:
        raise DegenerateBase("Base differential is all zeros")
    return np.float32(np.dot(ds, db) / denominator)


def _reconstruct_keyframes(first: np.ndarray, alphas: np.ndarray,
                           base_diffs: np.ndarray) -> np.ndarray:
    """first + alpha * base_diff for each common key frame, in float32."""
    scaled = alphas.astype(np.float32)[:, None, None, None] * base_diffs
    return (first[None, ...] + scaled).astype(np.float32)


def _build_entry(prompt: int, base_step: int, intras: Dict[int, IntraCompressed],
                 diff_indices: Tuple[int, ...], masks: Optional[MaskSet]) -> CompressedEntry:
    frame_shape = intras[base_step].frame_shape
    frame_count = intras[base_step].frame_count
    base_frames = intras[base_step].keyframe_dict()
    if diff_indices:
        base_diffs = np.stack([base_frames[m] - base_frames[0] for m in diff_indices])
    else:
        base_diffs = np.zeros((0,) + frame_shape, dtype=np.float32)
    base_diffs = base_diffs.astype(np.float32)
    base_diffs.setflags(write=False)

    common = set(diff_indices) | {0}
    first_frames: Dict[int, np.ndarray] = {}
    alphas: Dict[int, np.ndarray] = {}
    extra_frames: Dict[int, Dict[int, np.ndarray]] = {}
    maps: Dict[int, KeyFrameMap] = {}

    for step, intra in intras.items():
        frames = intra.keyframe_dict()
        first_frames[step] = frames[0]
        maps[step] = intra.map
        extras = {m: frames[m] for m in intra.key_indices if m not in common}

        if step != base_step:
            step_alphas = np.zeros(len(diff_indices), dtype=np.float32)
            for i, m in enumerate(diff_indices):
                diff_s = frames[m] - frames[0]
                try:
                    step_alphas[i] = solve_alpha(diff_s, base_diffs[i])
                except DegenerateBase:
                    # Nothing to scale; keep the frame itself when it actually moved.
                    if np.any(diff_s != 0):
                        extras[m] = frames[m]
            step_alphas.setflags(write=False)
            alphas[step] = step_alphas

        extra_frames[step] = dict(sorted(extras.items()))

    return CompressedEntry(
        prompt=prompt,
        base_step=base_step,
        frame_count=frame_count,
        frame_shape=frame_shape,
        first_frames=first_frames,
        diff_indices=diff_indices,
        base_diffs=base_diffs,
        alphas=alphas,
        extra_frames=extra_frames,
        maps=maps,
        masks=masks,
    )


def _reconstruction_score(entry: CompressedEntry, intras: Dict[int, IntraCompressed]) -> float:
    """Mean per-frame similarity of every decompressed step against its intra-compressed original."""
    total = 0.0
    frames_seen = 0
    for step, intra in intras.items():
        keys = intra.key_indices
        originals = intra.keyframes
        restored = _decompress_keyframes(entry, step)
        stacked = np.stack([restored[m] for m in keys])
        sims = paired_frame_similarities(originals, stacked)
        counts = intra.map.reference_counts()
        weights = np.array([counts[m] for m in keys], dtype=np.float64)
        total += float(np.dot(sims, weights))
        frames_seen += intra.frame_count
    return total / frames_seen


def inter_compress(steps: Sequence[IntraCompressed], masks: Optional[MaskSet] = None,
                   prompt: int = 0) -> CompressedEntry:
    """
    Merge the intra-compressed steps of one prompt into a single entry.

    Every step is tried as the base; the one whose full decompression is most similar to the
    intra-compressed originals wins, ties going to the earliest step.

    Raises:
        CodecError: on an empty list, duplicate steps or mismatched shapes
    """
    if not steps:
        raise CodecError("inter_compress needs at least one step")

    intras: Dict[int, IntraCompressed] = {}
    for intra in sorted(steps, key=lambda c: c.step):
        if intra.step in intras:
            raise CodecError(f"Step {intra.step} given twice")
        intras[intra.step] = intra

    first = next(iter(intras.values()))
    for intra in intras.values():
        if intra.frame_count != first.frame_count or intra.frame_shape != first.frame_shape:
            raise CodecError(
                f"Step {intra.step} has shape {(intra.frame_count,) + intra.frame_shape}, "
                f"expected {(first.frame_count,) + first.frame_shape}"
            )
    if masks is not None:
        masks.check_matches(first.frame_count, *first.frame_shape[:2])

    common = set(first.key_indices)
    for intra in intras.values():
        common &= set(intra.key_indices)
    diff_indices = tuple(sorted(common - {0}))

    best_entry: Optional[CompressedEntry] = None
    best_score = -np.inf
    for base_step in intras:
        candidate = _build_entry(prompt, base_step, intras, diff_indices, masks)
        score = _reconstruction_score(candidate, intras)
        logger.debug(f"Prompt {prompt}: base step {base_step} scores {score:.9f}")
        if best_entry is None or score > best_score + BASE_TIE_TOLERANCE:
            best_entry, best_score = candidate, score

    return best_entry


def compress_latents(latents: Sequence[LatentState], threshold: float,
                     masks: Optional[MaskSet] = None, prompt: int = 0) -> CompressedEntry:
    """Intra-compress each step, then merge them."""
    return inter_compress([intra_compress(latent, threshold) for latent in latents],
                          masks=masks, prompt=prompt)


def store_uncompressed(latents: Sequence[LatentState], masks: Optional[MaskSet] = None,
                       prompt: int = 0) -> CompressedEntry:
    """
    Entry that keeps every frame of every step verbatim (identity maps, no differentials).

    Used for the uncompressed baseline; decompression is bit-exact.
    """
    if not latents:
        raise CodecError("store_uncompressed needs at least one step")
    ordered = sorted(latents, key=lambda latent: latent.step)
    shape = ordered[0].shape
    for latent in ordered:
        if latent.shape != shape:
            raise CodecError(f"Step {latent.step} has shape {latent.shape}, expected {shape}")
    frame_count, frame_shape = shape[0], tuple(shape[1:])
    base_diffs = np.zeros((0,) + frame_shape, dtype=np.float32)
    base_diffs.setflags(write=False)
    empty_alpha = np.zeros(0, dtype=np.float32)
    empty_alpha.setflags(write=False)
    base_step = ordered[0].step
    return CompressedEntry(
        prompt=prompt,
        base_step=base_step,
        frame_count=frame_count,
        frame_shape=frame_shape,
        first_frames={latent.step: latent.frames[0] for latent in ordered},
        diff_indices=(),
        base_diffs=base_diffs,
        alphas={latent.step: empty_alpha for latent in ordered if latent.step != base_step},
        extra_frames={latent.step: {j: latent.frames[j] for j in range(1, frame_count)}
                      for latent in ordered},
        maps={latent.step: KeyFrameMap.identity(frame_count) for latent in ordered},
        masks=masks,
    )


def _decompress_keyframes(entry: CompressedEntry, step: int) -> Dict[int, np.ndarray]:
    key_map = entry.maps[step]
    first = entry.first_frames[step]
    extras = entry.extra_frames.get(step, {})
    position = {m: i for i, m in enumerate(entry.diff_indices)}

    needed = [m for m in key_map.key_indices if m != 0 and m not in extras]
    missing = [m for m in needed if m not in position]
    if missing:
        raise CodecError(f"Prompt {entry.prompt} step {step}: key frames {missing} "
                         f"are neither common nor stored as extra frames")

    restored: Dict[int, np.ndarray] = {0: first}
    restored.update(extras)
    if needed:
        rows = [position[m] for m in needed]
        alphas = entry.alpha_for(step)[rows]
        rebuilt = _reconstruct_keyframes(first, alphas, entry.base_diffs[rows])
        for m, frame in zip(needed, rebuilt):
            restored[m] = frame
    return {m: restored[m] for m in key_map.key_indices}


def decompress_step(entry: CompressedEntry, step: int) -> LatentState:
    """
    Rebuild the full latent of one stored step.

    Raises:
        StepNotCached: if the step is not in the entry
    """
    if step not in entry.maps:
        raise StepNotCached(f"Step {step} is not stored for prompt {entry.prompt}")
    keyframes = _decompress_keyframes(entry, step)
    return LatentState(step=step, frames=_expand(keyframes, entry.maps[step]))


def drop_step(entry: CompressedEntry, step: int) -> Optional[CompressedEntry]:
    """
    Entry without one step's private data (first frame, map, alphas, extra frames).

    The base differentials stay so that the remaining steps still decompress. Returns None
    when the dropped step was the last one.
    """
    if step not in entry.maps:
        raise StepNotCached(f"Step {step} is not stored for prompt {entry.prompt}")
    remaining = [s for s in entry.steps if s != step]
    if not remaining:
        return None
    return CompressedEntry(
        prompt=entry.prompt,
        base_step=entry.base_step,
        frame_count=entry.frame_count,
        frame_shape=entry.frame_shape,
        first_frames={s: entry.first_frames[s] for s in remaining},
        diff_indices=entry.diff_indices,
        base_diffs=entry.base_diffs,
        alphas={s: a for s, a in entry.alphas.items() if s in remaining},
        extra_frames={s: entry.extra_frames.get(s, {}) for s in remaining},
        maps={s: entry.maps[s] for s in remaining},
        masks=entry.masks,
    )


def restrict_steps(entry: CompressedEntry, steps: Iterable[int]) -> CompressedEntry:
    """Entry keeping only the given steps."""
    wanted = set(steps)
    unknown = wanted - set(entry.steps)
    if unknown:
        raise StepNotCached(f"Steps {sorted(unknown)} are not stored for prompt {entry.prompt}")
    restricted = entry
    for step in entry.steps:
        if step not in wanted:
            restricted = drop_step(restricted, step)
    return restricted


def with_prompt(entry: CompressedEntry, prompt: int) -> CompressedEntry:
    """Same entry filed under another prompt id."""
    if entry.prompt == prompt:
        return entry
    return CompressedEntry(
        prompt=prompt,
        base_step=entry.base_step,
        frame_count=entry.frame_count,
        frame_shape=entry.frame_shape,
        first_frames=entry.first_frames,
        diff_indices=entry.diff_indices,
        base_diffs=entry.base_diffs,
        alphas=entry.alphas,
        extra_frames=entry.extra_frames,
        maps=entry.maps,
        masks=entry.masks,
    )


def compressed_size(entry: CompressedEntry) -> int:
    """Exact serialized byte count of the entry."""
    from app.services.entry_format import entry_size
    return entry_size(entry)


def step_similarities(entry: CompressedEntry,
                      originals: Sequence[LatentState]) -> Dict[int, float]:
    """Cosine similarity of every decompressed step against the original latent, flattened."""
    from app.services.similarity import cosine_similarity
    result = {}
    for latent in originals:
        restored = decompress_step(entry, latent.step)
        result[latent.step] = cosine_similarity(latent.frames, restored.frames)
    return result
