"""
Embeddings - unit-norm similarity vectors for a prompt and its two parts.
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np

from app.utils.errors import DataFormatError


class EmbeddingKind(str, Enum):
    """Which part of the prompt an embedding describes."""
    WHOLE = 'whole'
    OBJECT = 'object'
    BACKGROUND = 'background'


class EmbeddingError(DataFormatError):
    """Embedding vector is empty, non-finite or zero."""
    pass


@dataclass(frozen=True)
class Embedding:
    """
    D-dimensional float32 vector, normalized to unit length at construction.

    Usage:
        emb = Embedding.normalized([3.0, 4.0], EmbeddingKind.OBJECT)
        emb.values  # array([0.6, 0.8], dtype=float32)
    """
    values: np.ndarray
    kind: EmbeddingKind = EmbeddingKind.WHOLE

    def __post_init__(self):
        raw = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if raw.size == 0:
            raise EmbeddingError("Embedding must have at least one dimension")
        if not np.isfinite(raw).all():
            raise EmbeddingError("Embedding contains NaN or Inf values")
        norm = np.linalg.norm(raw)
        if norm == 0.0:
            raise EmbeddingError("Embedding has zero norm")
        unit = (raw / norm).astype(np.float32)
        unit.setflags(write=False)
        object.__setattr__(self, 'values', unit)
        object.__setattr__(self, 'kind', EmbeddingKind(self.kind))

    @classmethod
    def normalized(cls, values, kind: EmbeddingKind = EmbeddingKind.WHOLE) -> 'Embedding':
        return cls(values=np.asarray(values), kind=kind)

    @classmethod
    def from_stored(cls, values, kind: EmbeddingKind) -> 'Embedding':
        """Rebuild an already-normalized vector without renormalizing, so its bits stay stable."""
        unit = np.array(values, dtype=np.float32).reshape(-1)
        norm = float(np.linalg.norm(unit.astype(np.float64)))
        if unit.size == 0 or not np.isfinite(unit).all() or abs(norm - 1.0) > 1e-5:
            raise EmbeddingError(f"Stored embedding is not unit-norm (norm={norm:.8f})")
        unit.setflags(write=False)
        emb = object.__new__(cls)
        object.__setattr__(emb, 'values', unit)
        object.__setattr__(emb, 'kind', EmbeddingKind(kind))
        return emb

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return self.kind == other.kind and self.values.tobytes() == other.values.tobytes()

    def __hash__(self) -> int:
        return hash((self.kind, self.values.tobytes()))
