"""
Trace records and engine requests.

A TraceRecord is what the trace file stores (token sets and a latent seed); a Request is the
same record with its three embeddings resolved, ready for the engine.
"""
from dataclasses import dataclass
from typing import Any, Dict, Tuple

from app.models.embedding import Embedding


@dataclass(frozen=True)
class TraceRecord:
    """One line of a trace file."""
    prompt: int
    arrival: int
    object_tokens: Tuple[str, ...]
    background_tokens: Tuple[str, ...]
    latent_seed: int
    template: Tuple[int, int] = (0, 0)

    @property
    def whole_tokens(self) -> Tuple[str, ...]:
        return tuple(sorted(set(self.object_tokens) | set(self.background_tokens)))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'prompt': self.prompt,
            'arrival': self.arrival,
            'object_tokens': list(self.object_tokens),
            'background_tokens': list(self.background_tokens),
            'whole_tokens': list(self.whole_tokens),
            'latent_seed': self.latent_seed,
            'template': list(self.template),
        }


@dataclass(frozen=True)
class Request:
    """A request as the engine sees it."""
    prompt: int
    arrival: int
    whole: Embedding
    object: Embedding
    background: Embedding
    latent_seed: int
