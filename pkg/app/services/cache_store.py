"""
Cache Store - capacity-bounded store of compressed latent steps.

Key responsibilities:
1. Keep one CompressedEntry per cached prompt, pruned as its steps are evicted
2. Track per-step bookkeeping (access count, last access, insertion time) for the policy
3. Evict lowest-priority steps until a new entry fits
4. Serve the largest cached step at or below the one requested (hole fallback)

Byte accounting: every step owns its private bytes (first frame, map, alphas, extra
frames); the shared part of an entry (header, base differentials, masks) is counted once
while any of its steps is alive. For the policy each step is attributed its private bytes
plus the shared bytes divided by the number of live sibling steps.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from app.models import CACHED_STEPS, LatentState, MaskSet
from app.services.codec import CompressedEntry, decompress_step, drop_step, restrict_steps
from app.services.entry_format import entry_size, shared_size, step_size
from app.services.replacement_policies import (
    ReplacementPolicy, StepEntry, make_policy
)
from app.utils.errors import CacheSimError, InvariantViolation

logger = logging.getLogger(__name__)


class StoreError(CacheSimError):
    """Base class for store errors."""
    pass


class OversizedEntry(StoreError):
    """The entry alone is larger than the store's capacity."""

    def __init__(self, prompt: int, size: int, limit: int):
        self.prompt = prompt
        self.size = size
        self.limit = limit
        super().__init__(f"Entry for prompt {prompt} needs {size} bytes, capacity is {limit}")


class EmptyStore(StoreError):
    pass


class DuplicateStep(StoreError):
    pass


@dataclass
class CachedRecord:
    """The live part of one prompt's entry and the ledger slot of each live step."""
    prompt: int
    entry: CompressedEntry
    shared_bytes: int
    slots: Dict[int, int] = field(default_factory=dict)

    @property
    def steps(self) -> Tuple[int, ...]:
        return tuple(sorted(self.slots))


@dataclass(frozen=True)
class StepBookkeeping:
    """Restorable per-step state, as written to snapshots."""
    step: int
    f: int
    last_access: int
    inserted_at: int
    seq: int


class CacheStore:
    """
    Cache of step entries under a byte limit.

    Usage:
        store = CacheStore(capacity_limit=64 * 1024 * 1024, policy='lrbu')
        evicted = store.insert_steps(prompt, entry, entry.steps, now=0)
        hit = store.get_step(prompt, desired=20, now=1)   # (LatentState, 20) or None
    """

    def __init__(self, capacity_limit: int, policy='lrbu',
                 on_prompt_removed: Optional[Callable[[int], None]] = None,
                 check_invariants: bool = False):
        if capacity_limit < 0:
            raise StoreError(f"Capacity must be >= 0, got {capacity_limit}")
        self.capacity_limit = int(capacity_limit)
        self.policy: ReplacementPolicy = (
            policy if isinstance(policy, ReplacementPolicy) else make_policy(policy)
        )
        self.on_prompt_removed = on_prompt_removed
        self.check_invariants = check_invariants

        self.used = 0
        self.next_seq = 0
        self.evictions = 0
        self.records: Dict[int, CachedRecord] = {}

        # Ledger, one slot per live step; removal swaps the last slot into the gap.
        self._size = 0
        self._prompt = np.zeros(0, dtype=np.int64)
        self._step = np.zeros(0, dtype=np.int64)
        self._f = np.zeros(0, dtype=np.int64)
        self._last = np.zeros(0, dtype=np.int64)
        self._inserted = np.zeros(0, dtype=np.int64)
        self._seq = np.zeros(0, dtype=np.int64)
        self._private = np.zeros(0, dtype=np.int64)
        self._shared_share = np.zeros(0, dtype=np.float64)

    # --- ledger plumbing ---------------------------------------------------------------

    _COLUMNS = ('_prompt', '_step', '_f', '_last', '_inserted', '_seq', '_private',
                '_shared_share')

    def _grow(self):
        capacity = max(64, 2 * self._prompt.shape[0])
        for name in self._COLUMNS:
            old = getattr(self, name)
            new = np.zeros(capacity, dtype=old.dtype)
            new[:self._size] = old[:self._size]
            setattr(self, name, new)

    def _append_slot(self, prompt: int, step: int, private: int, bookkeeping: StepBookkeeping) -> int:
        if self._size == self._prompt.shape[0]:
            self._grow()
        slot = self._size
        self._prompt[slot] = prompt
        self._step[slot] = step
        self._f[slot] = bookkeeping.f
        self._last[slot] = bookkeeping.last_access
        self._inserted[slot] = bookkeeping.inserted_at
        self._seq[slot] = bookkeeping.seq
        self._private[slot] = private
        self._size += 1
        return slot

    def _remove_slot(self, slot: int):
        last = self._size - 1
        if slot != last:
            for name in self._COLUMNS:
                column = getattr(self, name)
                column[slot] = column[last]
            moved = self.records[int(self._prompt[slot])]
            moved.slots[int(self._step[slot])] = slot
        self._size = last

    def _refresh_shares(self, record: CachedRecord):
        if record.slots:
            share = record.shared_bytes / len(record.slots)
            for slot in record.slots.values():
                self._shared_share[slot] = share

    def _entry_at(self, slot: int) -> StepEntry:
        return StepEntry(
            prompt=int(self._prompt[slot]),
            step=int(self._step[slot]),
            f=int(self._f[slot]),
            last_access=int(self._last[slot]),
            inserted_at=int(self._inserted[slot]),
            capacity=float(self._private[slot] + self._shared_share[slot]),
            seq=int(self._seq[slot]),
        )

    # --- queries ---------------------------------------------------------------------

    def __len__(self) -> int:
        return self._size

    def __contains__(self, prompt: int) -> bool:
        return prompt in self.records

    @property
    def free(self) -> int:
        return self.capacity_limit - self.used

    def cached_steps(self, prompt: int) -> Tuple[int, ...]:
        record = self.records.get(prompt)
        return record.steps if record else ()

    def served_step(self, prompt: int, desired: int) -> Optional[int]:
        """Largest cached step <= desired for the prompt, without touching bookkeeping."""
        candidates = [s for s in self.cached_steps(prompt) if s <= desired]
        return max(candidates) if candidates else None

    def masks(self, prompt: int) -> Optional[MaskSet]:
        record = self.records.get(prompt)
        return record.entry.masks if record else None

    def entry(self, prompt: int) -> CompressedEntry:
        return self.records[prompt].entry

    def step_entries(self) -> List[StepEntry]:
        """Bookkeeping of every live step, ordered by (prompt, step)."""
        entries = [self._entry_at(slot) for slot in range(self._size)]
        return sorted(entries, key=lambda e: (e.prompt, e.step))

    def step_entry(self, prompt: int, step: int) -> StepEntry:
        return self._entry_at(self.records[prompt].slots[step])

    def priority_of(self, prompt: int, step: int, now: int) -> float:
        return self.policy.priority(self.step_entry(prompt, step), now)

    # --- mutations -------------------------------------------------------------------

    def insert_steps(self, prompt: int, entry: CompressedEntry, steps: Iterable[int],
                     now: int) -> List[StepEntry]:
        """
        Add the given steps of an entry, evicting lowest-priority steps until they fit.

        Returns:
            The evicted step entries, in eviction order

        Raises:
            OversizedEntry: if the entry alone exceeds capacity (nothing is evicted)
            DuplicateStep: if any listed step of the prompt is already cached
        """
        steps = sorted(set(int(s) for s in steps))
        if not steps:
            raise StoreError("insert_steps needs at least one step")
        for step in steps:
            if step not in CACHED_STEPS:
                raise StoreError(f"Step {step} is not cacheable")
        if prompt in self.records:
            overlap = set(steps) & set(self.records[prompt].slots)
            if overlap:
                raise DuplicateStep(f"Prompt {prompt} already caches steps {sorted(overlap)}")
            raise StoreError(f"Prompt {prompt} is already cached; entries cannot be merged")

        entry = restrict_steps(entry, steps) if tuple(steps) != entry.steps else entry
        size = entry_size(entry)
        if size > self.capacity_limit:
            raise OversizedEntry(prompt, size, self.capacity_limit)

        evicted = []
        while self.used + size > self.capacity_limit:
            evicted.append(self.evict_one(now))

        self._add_record(entry, {
            step: StepBookkeeping(step=step, f=0, last_access=now, inserted_at=now,
                                  seq=self.next_seq + i)
            for i, step in enumerate(steps)
        })
        self.next_seq += len(steps)
        logger.debug(f"Inserted prompt {prompt} steps {steps} ({size} bytes, "
                     f"{len(evicted)} evictions, used {self.used}/{self.capacity_limit})")
        self._maybe_check()
        return evicted

    def _add_record(self, entry: CompressedEntry, bookkeeping: Dict[int, StepBookkeeping]):
        record = CachedRecord(prompt=entry.prompt, entry=entry, shared_bytes=shared_size(entry))
        self.records[entry.prompt] = record
        for step in sorted(bookkeeping):
            private = step_size(entry, step)
            record.slots[step] = self._append_slot(entry.prompt, step, private, bookkeeping[step])
            self.used += private
        self.used += record.shared_bytes
        self._refresh_shares(record)

    def restore_record(self, entry: CompressedEntry, bookkeeping: Iterable[StepBookkeeping]):
        """Re-add a record with its saved bookkeeping (snapshot loading)."""
        books = {b.step: b for b in bookkeeping}
        if set(books) != set(entry.steps):
            raise InvariantViolation(
                f"Prompt {entry.prompt}: bookkeeping for {sorted(books)} but entry has {entry.steps}"
            )
        if entry.prompt in self.records:
            raise DuplicateStep(f"Prompt {entry.prompt} restored twice")
        self._add_record(entry, books)
        if self.used > self.capacity_limit:
            raise InvariantViolation(f"Restored store uses {self.used} of {self.capacity_limit} bytes")

    def get_step(self, prompt: int, desired: int, now: int) -> Optional[Tuple[LatentState, int]]:
        """
        Decompress the largest cached step <= desired and credit it with the access.

        Returns None (a miss) when no such step survives.
        """
        actual = self.served_step(prompt, desired)
        if actual is None:
            return None
        return self.fetch_step(prompt, actual, now), actual

    def fetch_step(self, prompt: int, step: int, now: int) -> LatentState:
        """Decompress one exact cached step and credit it with the access."""
        record = self.records[prompt]
        slot = record.slots[step]
        self._f[slot] += 1
        self._last[slot] = max(int(self._last[slot]), now)
        return decompress_step(record.entry, step)

    def evict_one(self, now: int) -> StepEntry:
        """
        Remove the lowest-priority step under the active policy.

        Raises:
            EmptyStore: if nothing is cached
        """
        if self._size == 0:
            raise EmptyStore("Cannot evict from an empty store")
        n = self._size
        capacity = self._private[:n] + self._shared_share[:n]
        slot = self.policy.choose_victim(self._f[:n], self._step[:n], self._last[:n],
                                         self._seq[:n], capacity, now)
        victim = self._entry_at(slot)
        record = self.records[victim.prompt]

        self.used -= int(self._private[slot])
        del record.slots[victim.step]
        self._remove_slot(slot)

        if record.slots:
            record.entry = drop_step(record.entry, victim.step)
            self._refresh_shares(record)
        else:
            self.used -= record.shared_bytes
            del self.records[victim.prompt]
            if self.on_prompt_removed is not None:
                self.on_prompt_removed(victim.prompt)

        self.evictions += 1
        logger.debug(f"Evicted prompt {victim.prompt} step {victim.step} "
                     f"({self.policy.name.value}, f={victim.f}, last={victim.last_access})")
        self._maybe_check()
        return victim

    # --- checks ----------------------------------------------------------------------

    def _maybe_check(self):
        if self.check_invariants:
            self.verify()

    def verify(self):
        """Recompute the byte accounting from scratch; raise InvariantViolation on drift."""
        total = 0
        slots_seen = 0
        for prompt, record in self.records.items():
            if record.steps != record.entry.steps:
                raise InvariantViolation(
                    f"Prompt {prompt}: live steps {record.steps} but entry holds {record.entry.steps}"
                )
            private = 0
            for step, slot in record.slots.items():
                if int(self._prompt[slot]) != prompt or int(self._step[slot]) != step:
                    raise InvariantViolation(f"Ledger slot {slot} does not belong to {prompt}/{step}")
                if int(self._last[slot]) < int(self._inserted[slot]):
                    raise InvariantViolation(f"Prompt {prompt} step {step} accessed before insertion")
                private += int(self._private[slot])
                slots_seen += 1
            if record.shared_bytes + private != entry_size(record.entry):
                raise InvariantViolation(f"Prompt {prompt}: attributed bytes disagree with entry size")
            total += record.shared_bytes + private
        if slots_seen != self._size:
            raise InvariantViolation(f"{self._size} ledger slots but {slots_seen} live steps")
        if total != self.used:
            raise InvariantViolation(f"Used bytes {self.used} but live entries hold {total}")
        if self.used > self.capacity_limit:
            raise InvariantViolation(f"Used bytes {self.used} exceed capacity {self.capacity_limit}")

    def stats(self) -> Dict[str, int]:
        return {
            'capacity_limit': self.capacity_limit,
            'used': self.used,
            'prompts': len(self.records),
            'steps': self._size,
            'evictions': self.evictions,
        }
