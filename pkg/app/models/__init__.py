from app.models.latent import (
    CACHED_STEPS, TOTAL_STEPS, Frame, LatentShapeError, LatentState, PromptId, StepId,
    as_frame, validate_step
)
from app.models.embedding import Embedding, EmbeddingError, EmbeddingKind
from app.models.masks import MaskSet, MaskShapeError
from app.models.request import Request, TraceRecord

__all__ = [
    'CACHED_STEPS',
    'TOTAL_STEPS',
    'Frame',
    'LatentShapeError',
    'LatentState',
    'PromptId',
    'StepId',
    'as_frame',
    'validate_step',
    'Embedding',
    'EmbeddingError',
    'EmbeddingKind',
    'MaskSet',
    'MaskShapeError',
    'Request',
    'TraceRecord',
]
