"""
Stitcher - combines an object-source latent with a background-source latent.

Per frame and pixel the result takes the object latent where the object source's object
mask is set or where the background source's own (stale) object sits, and the background
latent everywhere else. Pixels are copied, never blended.
"""
from dataclasses import dataclass

import numpy as np

from app.models import LatentState, MaskSet
from app.utils.errors import DataFormatError


class StitchError(DataFormatError):
    """Latents or masks do not line up."""
    pass


@dataclass(frozen=True)
class StitchInput:
    object_latent: LatentState
    object_masks: MaskSet
    background_latent: LatentState
    background_masks: MaskSet

    def __post_init__(self):
        if self.object_latent.step != self.background_latent.step:
            raise StitchError(f"Cannot stitch step {self.object_latent.step} "
                              f"with step {self.background_latent.step}")
        if self.object_latent.shape != self.background_latent.shape:
            raise StitchError(f"Latent shapes differ: {self.object_latent.shape} "
                              f"vs {self.background_latent.shape}")
        frames, height, width, _ = self.object_latent.shape
        for masks in (self.object_masks, self.background_masks):
            if masks.shape != (frames, height, width):
                raise StitchError(f"Masks of shape {masks.shape} do not match latents "
                                  f"{(frames, height, width)}")


def object_region(data: StitchInput) -> np.ndarray:
    """(F, H, W) bools: pixels taken from the object latent."""
    return data.object_masks.object_masks | data.background_masks.object_masks


def stitch(data: StitchInput) -> LatentState:
    take_object = object_region(data)[..., None]
    frames = np.where(take_object, data.object_latent.frames, data.background_latent.frames)
    return LatentState(step=data.object_latent.step, frames=frames.astype(np.float32))
