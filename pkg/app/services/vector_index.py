"""
Vector Index - exact top-1 cosine lookup over three embedding tables.

One table per EmbeddingKind (whole, object, background). A prompt is always present in all
three tables or in none.
"""
import logging
import threading
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from app.models import Embedding, EmbeddingKind
from app.utils.errors import CacheSimError, InvariantViolation

logger = logging.getLogger(__name__)


class IndexError_(CacheSimError):
    """Base class for index errors."""
    pass


class DuplicatePrompt(IndexError_):
    pass


class UnknownPrompt(IndexError_):
    pass


@dataclass(frozen=True)
class QueryResult:
    prompt: int
    score: float


class IndexTable:
    """
    Embeddings of one kind, kept as rows of a float64 matrix.

    Removal swaps the last row into the freed slot, so rows are not in insertion order.
    """

    def __init__(self, kind: EmbeddingKind, dim: Optional[int] = None):
        self.kind = EmbeddingKind(kind)
        self.dim = dim
        self._matrix = np.zeros((0, dim or 0), dtype=np.float64)
        self._prompts = np.zeros(0, dtype=np.int64)
        self._norms = np.zeros(0, dtype=np.float64)
        self._embeddings: List[Embedding] = []
        self._slots: Dict[int, int] = {}
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def __contains__(self, prompt: int) -> bool:
        return prompt in self._slots

    def prompts(self) -> List[int]:
        return sorted(self._slots)

    def get(self, prompt: int) -> Embedding:
        if prompt not in self._slots:
            raise UnknownPrompt(f"Prompt {prompt} is not in the {self.kind.value} table")
        return self._embeddings[self._slots[prompt]]

    def _grow(self):
        capacity = max(16, 2 * self._matrix.shape[0])
        matrix = np.zeros((capacity, self.dim), dtype=np.float64)
        matrix[:self._size] = self._matrix[:self._size]
        prompts = np.zeros(capacity, dtype=np.int64)
        prompts[:self._size] = self._prompts[:self._size]
        norms = np.ones(capacity, dtype=np.float64)
        norms[:self._size] = self._norms[:self._size]
        self._matrix, self._prompts, self._norms = matrix, prompts, norms

    def check(self, embedding: Embedding):
        if embedding.kind != self.kind:
            raise IndexError_(f"{embedding.kind.value} embedding given for the "
                              f"{self.kind.value} table")
        if self.dim is not None and embedding.dim != self.dim:
            raise IndexError_(f"Embedding has {embedding.dim} dimensions, table has {self.dim}")

    def add(self, prompt: int, embedding: Embedding):
        self.check(embedding)
        if prompt in self._slots:
            raise DuplicatePrompt(f"Prompt {prompt} is already in the {self.kind.value} table")
        if self.dim is None:
            self.dim = embedding.dim
            self._matrix = np.zeros((0, self.dim), dtype=np.float64)
        if self._size == self._matrix.shape[0]:
            self._grow()
        slot = self._size
        self._matrix[slot] = embedding.values.astype(np.float64)
        self._prompts[slot] = prompt
        self._norms[slot] = np.linalg.norm(self._matrix[slot])
        self._embeddings.append(embedding)
        self._slots[prompt] = slot
        self._size += 1

    def discard(self, prompt: int):
        slot = self._slots.pop(prompt)
        last = self._size - 1
        if slot != last:
            moved = int(self._prompts[last])
            self._matrix[slot] = self._matrix[last]
            self._prompts[slot] = moved
            self._norms[slot] = self._norms[last]
            self._embeddings[slot] = self._embeddings[last]
            self._slots[moved] = slot
        self._embeddings.pop()
        self._size = last

    def scores(self, query: Embedding) -> np.ndarray:
        """Cosine similarity of the query against every live row."""
        q = query.values.astype(np.float64)
        q = q / np.linalg.norm(q)
        live = self._matrix[:self._size]
        return np.clip(live @ q / self._norms[:self._size], -1.0, 1.0)

    def top1(self, query: Embedding) -> Optional[QueryResult]:
        if self._size == 0:
            return None
        if self.dim is not None and query.dim != self.dim:
            raise IndexError_(f"Query has {query.dim} dimensions, table has {self.dim}")
        scores = self.scores(query)
        best = scores.max()
        tied = np.flatnonzero(scores == best)
        prompt = int(self._prompts[:self._size][tied].min())
        return QueryResult(prompt=prompt, score=float(best))

    def items(self) -> Iterator[Tuple[int, Embedding]]:
        """(prompt, embedding) pairs ordered by prompt."""
        for prompt in sorted(self._slots):
            yield prompt, self._embeddings[self._slots[prompt]]


class VectorIndex:
    """
    Whole/object/background tables with atomic insert and remove.

    Usage:
        index = VectorIndex()
        index.insert(whole, obj, bg, prompt=7)
        result = index.query_top1(EmbeddingKind.WHOLE, whole)   # QueryResult(7, 1.0)
    """

    def __init__(self, dim: Optional[int] = None):
        self.tables: Dict[EmbeddingKind, IndexTable] = {
            kind: IndexTable(kind, dim) for kind in EmbeddingKind
        }
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self.tables[EmbeddingKind.WHOLE])

    def __contains__(self, prompt: int) -> bool:
        return prompt in self.tables[EmbeddingKind.WHOLE]

    @property
    def dim(self) -> Optional[int]:
        return self.tables[EmbeddingKind.WHOLE].dim

    def insert(self, whole: Embedding, object: Embedding, background: Embedding, prompt: int):
        """
        Register a prompt's three embeddings.

        Raises:
            DuplicatePrompt: if the prompt is already indexed
        """
        by_kind = {
            EmbeddingKind.WHOLE: whole,
            EmbeddingKind.OBJECT: object,
            EmbeddingKind.BACKGROUND: background,
        }
        with self._lock:
            if prompt in self:
                raise DuplicatePrompt(f"Prompt {prompt} is already indexed")
            for kind, embedding in by_kind.items():
                self.tables[kind].check(embedding)
            for kind, embedding in by_kind.items():
                self.tables[kind].add(prompt, embedding)
        logger.debug(f"Indexed prompt {prompt}")

    def query_top1(self, kind: EmbeddingKind, query: Embedding) -> Optional[QueryResult]:
        """Most similar prompt in one table; ties go to the smaller PromptId. None when empty."""
        with self._lock:
            return self.tables[EmbeddingKind(kind)].top1(query)

    def remove(self, prompt: int):
        """
        Drop a prompt from all three tables.

        Raises:
            UnknownPrompt: if the prompt is not indexed
        """
        with self._lock:
            if prompt not in self:
                raise UnknownPrompt(f"Prompt {prompt} is not indexed")
            for table in self.tables.values():
                table.discard(prompt)
        logger.debug(f"Removed prompt {prompt} from the index")

    def embeddings(self, prompt: int) -> Tuple[Embedding, Embedding, Embedding]:
        with self._lock:
            return tuple(self.tables[kind].get(prompt) for kind in EmbeddingKind)

    def prompts(self) -> List[int]:
        with self._lock:
            return self.tables[EmbeddingKind.WHOLE].prompts()

    def check_consistency(self):
        """Raise InvariantViolation unless all three tables hold the same prompts."""
        with self._lock:
            sets = {kind: set(table.prompts()) for kind, table in self.tables.items()}
        reference = sets[EmbeddingKind.WHOLE]
        for kind, prompts in sets.items():
            if prompts != reference:
                raise InvariantViolation(
                    f"{kind.value} table differs from the whole table by "
                    f"{sorted(prompts ^ reference)[:5]}"
                )
