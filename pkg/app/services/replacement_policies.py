"""
Replacement Policies - eviction priorities for cached step entries.

The entry with the lowest priority is evicted; equal priorities fall back to insertion
order (oldest first).

Frequency counts as accesses + 1, so entries that were never reused still differ by step,
size and recency. Durations are in logical ticks (request sequence numbers) with a floor of 1.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List

import numpy as np

from app.utils.validation import ValidationError

logger = logging.getLogger(__name__)


class PolicyName(str, Enum):
    FIFO = 'fifo'
    LRU = 'lru'
    LCBFU = 'lcbfu'
    LRBU = 'lrbu'

    @classmethod
    def parse(cls, value) -> 'PolicyName':
        try:
            return cls(str(getattr(value, 'value', value)).strip().lower())
        except ValueError:
            choices = ', '.join(p.value for p in cls)
            raise ValidationError(f"Unknown policy '{value}', expected one of: {choices}",
                                  'policy')


@dataclass
class StepEntry:
    """Bookkeeping for one cached step of one prompt."""
    prompt: int
    step: int
    f: int
    last_access: int
    inserted_at: int
    capacity: float
    seq: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'prompt': self.prompt,
            'step': self.step,
            'f': self.f,
            'last_access': self.last_access,
            'inserted_at': self.inserted_at,
            'capacity': self.capacity,
            'seq': self.seq,
        }


def lrbu_priority(entry: StepEntry, now: int) -> float:
    """(f + 1) * step / (capacity * max(now - last_access, 1))."""
    duration = max(now - entry.last_access, 1)
    return (entry.f + 1) * entry.step / (entry.capacity * duration)


def lcbfu_priority(entry: StepEntry) -> float:
    """(f + 1) * step."""
    return float((entry.f + 1) * entry.step)


class ReplacementPolicy:
    """
    Scores every live entry at once.

    The arrays are aligned slot by slot: f, step, last_access, seq and the attributed
    capacity in bytes.
    """
    name: PolicyName

    def priority(self, entry: StepEntry, now: int) -> float:
        raise NotImplementedError

    def priorities(self, f: np.ndarray, step: np.ndarray, last_access: np.ndarray,
                   seq: np.ndarray, capacity: np.ndarray, now: int) -> np.ndarray:
        raise NotImplementedError

    def choose_victim(self, f, step, last_access, seq, capacity, now: int) -> int:
        """Slot of the minimum priority, oldest insertion on ties."""
        scores = self.priorities(f, step, last_access, seq, capacity, now)
        lowest = scores.min()
        tied = np.flatnonzero(scores == lowest)
        return int(tied[np.argmin(seq[tied])])


class FIFOPolicy(ReplacementPolicy):
    name = PolicyName.FIFO

    def priority(self, entry, now):
        return float(entry.seq)

    def priorities(self, f, step, last_access, seq, capacity, now):
        return seq.astype(np.float64)


class LRUPolicy(ReplacementPolicy):
    name = PolicyName.LRU

    def priority(self, entry, now):
        return float(entry.last_access)

    def priorities(self, f, step, last_access, seq, capacity, now):
        return last_access.astype(np.float64)


class LCBFUPolicy(ReplacementPolicy):
    name = PolicyName.LCBFU

    def priority(self, entry, now):
        return lcbfu_priority(entry)

    def priorities(self, f, step, last_access, seq, capacity, now):
        return (f + 1).astype(np.float64) * step


class LRBUPolicy(ReplacementPolicy):
    name = PolicyName.LRBU

    def priority(self, entry, now):
        return lrbu_priority(entry, now)

    def priorities(self, f, step, last_access, seq, capacity, now):
        duration = np.maximum(now - last_access, 1).astype(np.float64)
        return (f + 1).astype(np.float64) * step / (capacity * duration)


POLICIES = {
    PolicyName.FIFO: FIFOPolicy,
    PolicyName.LRU: LRUPolicy,
    PolicyName.LCBFU: LCBFUPolicy,
    PolicyName.LRBU: LRBUPolicy,
}


def make_policy(name) -> ReplacementPolicy:
    return POLICIES[PolicyName.parse(name)]()


def all_policies() -> List[PolicyName]:
    return list(PolicyName)
