"""
Segmentation masks at latent resolution, one object and one background bitmap per frame.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from app.utils.errors import DataFormatError


class MaskShapeError(DataFormatError):
    """Mask bitmaps do not match each other or the latent."""
    pass


@dataclass(frozen=True)
class MaskSet:
    """
    Object and background bitmaps, each shaped (frames, height, width) of bools.

    Packed storage uses one bit per pixel: each frame's H*W bits are padded to whole bytes.
    """
    object_masks: np.ndarray
    background_masks: np.ndarray

    def __post_init__(self):
        obj = np.array(self.object_masks, dtype=bool)
        bg = np.array(self.background_masks, dtype=bool)
        if obj.ndim != 3 or min(obj.shape) <= 0:
            raise MaskShapeError(f"Object masks must be F x H x W, got shape {obj.shape}")
        if obj.shape != bg.shape:
            raise MaskShapeError(
                f"Object masks {obj.shape} and background masks {bg.shape} differ in shape"
            )
        obj.setflags(write=False)
        bg.setflags(write=False)
        object.__setattr__(self, 'object_masks', obj)
        object.__setattr__(self, 'background_masks', bg)

    @classmethod
    def empty(cls, frames: int, height: int, width: int) -> 'MaskSet':
        """Masks with no object anywhere; everything is background."""
        obj = np.zeros((frames, height, width), dtype=bool)
        return cls(object_masks=obj, background_masks=~obj)

    @classmethod
    def from_object(cls, object_masks: np.ndarray) -> 'MaskSet':
        """Background is the complement of the object."""
        obj = np.asarray(object_masks, dtype=bool)
        return cls(object_masks=obj, background_masks=~obj)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.object_masks.shape)

    def check_matches(self, frames: int, height: int, width: int):
        if self.shape != (frames, height, width):
            raise MaskShapeError(
                f"Masks of shape {self.shape} do not match latent frames {(frames, height, width)}"
            )

    @staticmethod
    def packed_frame_bytes(height: int, width: int) -> int:
        return (height * width + 7) // 8

    @property
    def packed_size(self) -> int:
        frames, height, width = self.shape
        return 2 * frames * self.packed_frame_bytes(height, width)

    def pack(self) -> bytes:
        """Object bitmaps for every frame, then background bitmaps (little bit order)."""
        frames = self.shape[0]
        obj = np.packbits(self.object_masks.reshape(frames, -1), axis=1, bitorder='little')
        bg = np.packbits(self.background_masks.reshape(frames, -1), axis=1, bitorder='little')
        return obj.tobytes() + bg.tobytes()

    @classmethod
    def unpack(cls, data: bytes, frames: int, height: int, width: int) -> 'MaskSet':
        per_frame = cls.packed_frame_bytes(height, width)
        expected = 2 * frames * per_frame
        if len(data) != expected:
            raise MaskShapeError(f"Packed masks hold {len(data)} bytes, expected {expected}")
        raw = np.frombuffer(data, dtype=np.uint8).reshape(2, frames, per_frame)
        bits = np.unpackbits(raw, axis=2, count=height * width, bitorder='little')
        bits = bits.reshape(2, frames, height, width).astype(bool)
        return cls(object_masks=bits[0], background_masks=bits[1])

    def equals(self, other: 'MaskSet') -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.object_masks, other.object_masks)
            and np.array_equal(self.background_masks, other.background_masks)
        )
