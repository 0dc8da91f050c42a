"""
Latent states - one denoising step's latent tensor.

A latent is stored as a single float32 array shaped (frames, height, width, channels);
a Frame is one (height, width, channels) slice of it.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from app.utils.errors import DataFormatError

# Steps whose latents may be cached, and the full denoising schedule.
CACHED_STEPS: Tuple[int, ...] = (5, 10, 15, 20, 25)
TOTAL_STEPS = 50

PromptId = int
StepId = int
Frame = np.ndarray


class LatentShapeError(DataFormatError):
    """Latent or frame has an invalid shape or non-finite values."""
    pass


def validate_step(step: int, cached_only: bool = True) -> int:
    """Check a denoising step index; cached steps are restricted to CACHED_STEPS."""
    if isinstance(step, bool) or not isinstance(step, (int, np.integer)):
        raise LatentShapeError(f"Step must be an integer, got {step!r}")
    step = int(step)
    if cached_only and step not in CACHED_STEPS:
        raise LatentShapeError(f"Step {step} is not cacheable; expected one of {CACHED_STEPS}")
    if not 1 <= step <= TOTAL_STEPS:
        raise LatentShapeError(f"Step {step} outside 1..{TOTAL_STEPS}")
    return step


def as_frame(data) -> Frame:
    """Return a read-only float32 (H, W, C) frame, rejecting NaN/Inf and empty dims."""
    frame = np.array(data, dtype=np.float32)
    if frame.ndim != 3 or min(frame.shape) <= 0:
        raise LatentShapeError(f"Frame must be a non-empty H x W x C array, got shape {frame.shape}")
    if not np.isfinite(frame).all():
        raise LatentShapeError("Frame contains NaN or Inf values")
    frame.setflags(write=False)
    return frame


@dataclass(frozen=True)
class LatentState:
    """
    Latent of one denoising step.

    Usage:
        latent = LatentState.from_frames(25, np.zeros((64, 40, 64, 4), dtype=np.float32))
        latent.frame_count, latent.frame_shape
    """
    step: int
    frames: np.ndarray

    def __post_init__(self):
        validate_step(self.step, cached_only=False)
        frames = self.frames
        if frames.dtype != np.float32 or frames.flags.writeable:
            frames = np.array(frames, dtype=np.float32)
            frames.setflags(write=False)
            object.__setattr__(self, 'frames', frames)
        if frames.ndim != 4 or min(frames.shape) <= 0:
            raise LatentShapeError(
                f"Latent must be a non-empty F x H x W x C array, got shape {frames.shape}"
            )
        if not np.isfinite(frames).all():
            raise LatentShapeError(f"Latent of step {self.step} contains NaN or Inf values")

    @classmethod
    def from_frames(cls, step: int, frames) -> 'LatentState':
        """Build a latent from a 4-D array or a sequence of equally shaped frames."""
        if isinstance(frames, np.ndarray):
            stacked = frames
        else:
            frame_list = [as_frame(f) for f in frames]
            if not frame_list:
                raise LatentShapeError("Latent needs at least one frame")
            shapes = {f.shape for f in frame_list}
            if len(shapes) != 1:
                raise LatentShapeError(f"Frames have different shapes: {sorted(shapes)}")
            stacked = np.stack(frame_list)
        return cls(step=step, frames=stacked)

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def frame_shape(self) -> Tuple[int, int, int]:
        return tuple(self.frames.shape[1:])

    @property
    def shape(self) -> Tuple[int, int, int, int]:
        return tuple(self.frames.shape)

    def frame(self, index: int) -> Frame:
        return self.frames[index]

    @property
    def nbytes(self) -> int:
        return int(self.frames.nbytes)

    def equals(self, other: 'LatentState') -> bool:
        """Bit-exact comparison of step and frame contents."""
        return (
            self.step == other.step
            and self.shape == other.shape
            and self.frames.tobytes() == other.frames.tobytes()
        )
