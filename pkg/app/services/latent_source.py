"""
Latent Sources - where the engine gets a prompt's own latents and masks.

The engine never runs a model: the latents a prompt would produce are looked up by the
request's latent seed. Compressed entries are memoized per (seed, steps), since requests
for the same template produce identical latents.
"""
import logging
from collections import OrderedDict
from typing import Dict, List, Sequence, Tuple

from app.models import LatentState, MaskSet
from app.services.codec import CompressedEntry, compress_latents, store_uncompressed, with_prompt
from app.services.workload import LatentSpec, synth_latents
from app.utils.errors import DataFormatError

logger = logging.getLogger(__name__)

LatentBundle = Tuple[List[LatentState], MaskSet]


class LatentSource:
    """
    Base class: subclasses implement generate().

    Usage:
        source = SyntheticLatentSource(LatentSpec(frames=8, height=8, width=8))
        entry = source.compressed(seed, steps=(15, 20, 25), threshold=0.99, prompt=42)
    """

    def __init__(self, memo_size: int = 256):
        self.memo_size = memo_size
        self._latents: 'OrderedDict[int, LatentBundle]' = OrderedDict()
        self._entries: 'OrderedDict[tuple, CompressedEntry]' = OrderedDict()

    def generate(self, seed: int) -> LatentBundle:
        raise NotImplementedError

    def _remember(self, memo: OrderedDict, key, value):
        memo[key] = value
        if len(memo) > self.memo_size:
            memo.popitem(last=False)

    def latents(self, seed: int) -> LatentBundle:
        if seed in self._latents:
            self._latents.move_to_end(seed)
            return self._latents[seed]
        bundle = self.generate(seed)
        self._remember(self._latents, seed, bundle)
        return bundle

    def steps_for(self, seed: int, steps: Sequence[int]) -> List[LatentState]:
        latents, _ = self.latents(seed)
        by_step = {latent.step: latent for latent in latents}
        missing = [s for s in steps if s not in by_step]
        if missing:
            raise DataFormatError(f"Latent source has no steps {missing} for seed {seed}")
        return [by_step[s] for s in sorted(steps)]

    def compressed(self, seed: int, steps: Sequence[int], threshold: float,
                   prompt: int) -> CompressedEntry:
        """Compressed entry of the given steps, filed under `prompt`."""
        key = ('compressed', seed, tuple(sorted(steps)), threshold)
        entry = self._entries.get(key)
        if entry is None:
            _, masks = self.latents(seed)
            entry = compress_latents(self.steps_for(seed, steps), threshold, masks=masks)
            self._remember(self._entries, key, entry)
        else:
            self._entries.move_to_end(key)
        return with_prompt(entry, prompt)

    def uncompressed(self, seed: int, steps: Sequence[int], prompt: int) -> CompressedEntry:
        """Entry keeping every frame verbatim, without masks."""
        key = ('uncompressed', seed, tuple(sorted(steps)))
        entry = self._entries.get(key)
        if entry is None:
            entry = store_uncompressed(self.steps_for(seed, steps))
            self._remember(self._entries, key, entry)
        else:
            self._entries.move_to_end(key)
        return with_prompt(entry, prompt)


class SyntheticLatentSource(LatentSource):
    """Latents from synth_latents(seed, spec)."""

    def __init__(self, spec: LatentSpec, memo_size: int = 256):
        super().__init__(memo_size)
        self.spec = spec

    def generate(self, seed: int) -> LatentBundle:
        return synth_latents(seed, self.spec)


class MappingLatentSource(LatentSource):
    """Fixed latents per seed; unknown seeds are an error."""

    def __init__(self, bundles: Dict[int, LatentBundle], memo_size: int = 256):
        super().__init__(memo_size)
        self.bundles = dict(bundles)

    def generate(self, seed: int) -> LatentBundle:
        if seed not in self.bundles:
            raise DataFormatError(f"No latents registered for seed {seed}")
        latents, masks = self.bundles[seed]
        return list(latents), masks
