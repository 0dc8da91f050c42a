from collections import OrderedDict

import numpy as np
import pytest

from app.models import CACHED_STEPS
from app.services.cache_store import (
    CacheStore, DuplicateStep, EmptyStore, OversizedEntry, StepBookkeeping, StoreError
)
from app.services.codec import compress_latents, decompress_step, with_prompt
from app.services.entry_format import entry_size, shared_size, step_size
from app.services.workload import synth_latents
from app.utils.errors import InvariantViolation


@pytest.fixture
def entries(small_spec):
    """Compressed entries for prompts 0..5."""
    result = {}
    for prompt in range(6):
        latents, masks = synth_latents(prompt, small_spec)
        result[prompt] = compress_latents(latents, 0.99, masks=masks, prompt=prompt)
    return result


def store_for(policy, capacity, removed=None):
    return CacheStore(capacity, policy=policy, check_invariants=True,
                      on_prompt_removed=None if removed is None else removed.append)


class TestInsert:
    def test_insert_accounts_exact_bytes(self, entries):
        store = store_for('lrbu', 10 * 1024 * 1024)
        assert store.insert_steps(0, entries[0], CACHED_STEPS, now=0) == []
        assert store.used == entry_size(entries[0])
        assert store.cached_steps(0) == CACHED_STEPS
        assert len(store) == 5

    def test_insert_subset_of_steps(self, entries):
        store = store_for('lru', 10 * 1024 * 1024)
        store.insert_steps(0, entries[0], (10, 20), now=0)
        assert store.cached_steps(0) == (10, 20)
        assert store.entry(0).steps == (10, 20)

    def test_oversized_entry(self, entries):
        size = entry_size(entries[0])
        store = store_for('lrbu', size - 1)
        with pytest.raises(OversizedEntry) as excinfo:
            store.insert_steps(0, entries[0], CACHED_STEPS, now=0)
        assert excinfo.value.size == size
        assert store.used == 0

    def test_exact_fit(self, entries):
        store = store_for('lrbu', entry_size(entries[0]))
        store.insert_steps(0, entries[0], CACHED_STEPS, now=0)
        assert store.free == 0

    def test_zero_capacity(self, entries):
        with pytest.raises(OversizedEntry):
            store_for('fifo', 0).insert_steps(0, entries[0], CACHED_STEPS, now=0)

    def test_duplicate_step(self, entries):
        store = store_for('lrbu', 10 * 1024 * 1024)
        store.insert_steps(0, entries[0], (5, 10), now=0)
        with pytest.raises(DuplicateStep):
            store.insert_steps(0, entries[0], (10,), now=1)
        with pytest.raises(StoreError):
            store.insert_steps(0, entries[0], (15,), now=1)

    def test_uncacheable_step(self, entries):
        with pytest.raises(StoreError):
            store_for('lrbu', 10 * 1024 * 1024).insert_steps(0, entries[0], (30,), now=0)

    def test_negative_capacity(self):
        with pytest.raises(StoreError):
            CacheStore(-1)


class TestLookup:
    def test_exact_step(self, entries):
        store = store_for('lrbu', 10 * 1024 * 1024)
        store.insert_steps(0, entries[0], CACHED_STEPS, now=0)
        latent, actual = store.get_step(0, 15, now=1)
        assert actual == 15
        assert latent.equals(decompress_step(entries[0], 15))
        assert store.step_entry(0, 15).f == 1
        assert store.step_entry(0, 15).last_access == 1

    def test_rounds_down(self, entries):
        store = store_for('lrbu', 10 * 1024 * 1024)
        store.insert_steps(0, entries[0], (5, 20), now=0)
        assert store.get_step(0, 15, now=1)[1] == 5
        assert store.get_step(0, 25, now=1)[1] == 20

    def test_miss(self, entries):
        store = store_for('lrbu', 10 * 1024 * 1024)
        store.insert_steps(0, entries[0], (10,), now=0)
        assert store.get_step(0, 5, now=1) is None
        assert store.get_step(1, 25, now=1) is None

    def test_hole_falls_back_to_lower_step(self, entries):
        store = store_for('lru', 10 * 1024 * 1024)
        store.insert_steps(0, entries[0], CACHED_STEPS, now=0)
        for step in (5, 15, 20, 25):
            store.fetch_step(0, step, now=1)
        victim = store.evict_one(now=2)
        assert (victim.prompt, victim.step) == (0, 10)
        latent, actual = store.get_step(0, 10, now=2)
        assert actual == 5
        assert latent.equals(decompress_step(entries[0], 5))


class TestEviction:
    def test_evicts_until_fit(self, entries):
        capacity = sum(entry_size(entries[p]) for p in range(3)) - 1
        store = store_for('fifo', capacity)
        store.insert_steps(0, entries[0], CACHED_STEPS, now=0)
        store.insert_steps(1, entries[1], CACHED_STEPS, now=1)
        evicted = store.insert_steps(2, entries[2], CACHED_STEPS, now=2)
        assert [(e.prompt, e.step) for e in evicted] == [(0, 5)]
        assert store.cached_steps(0) == (10, 15, 20, 25)
        assert store.used <= capacity

    def test_prompt_removed_callback(self, entries):
        removed = []
        store = store_for('fifo', 10 * 1024 * 1024, removed)
        store.insert_steps(0, entries[0], (5, 10), now=0)
        store.evict_one(now=1)
        assert removed == []
        store.evict_one(now=1)
        assert removed == [0]
        assert 0 not in store
        assert store.used == 0

    def test_partial_eviction_keeps_remaining_steps_exact(self, entries):
        store = store_for('fifo', 10 * 1024 * 1024)
        store.insert_steps(0, entries[0], CACHED_STEPS, now=0)
        store.evict_one(now=1)
        store.evict_one(now=1)
        assert store.cached_steps(0) == (15, 20, 25)
        assert store.used == entry_size(store.entry(0))
        for step in (15, 20, 25):
            assert store.fetch_step(0, step, now=2).equals(decompress_step(entries[0], step))

    def test_empty_store(self):
        with pytest.raises(EmptyStore):
            CacheStore(100).evict_one(now=0)

    def test_lcbfu_keeps_frequently_used_steps(self, entries):
        store = store_for('lcbfu', 10 * 1024 * 1024)
        store.insert_steps(0, entries[0], (25,), now=0)
        store.insert_steps(1, entries[1], (5,), now=0)
        for now in range(1, 10):
            store.fetch_step(1, 5, now)
        # 25 * 1 < 5 * 10
        assert store.evict_one(now=10).prompt == 0

    def test_attributed_capacity_shares_the_header(self, entries):
        store = store_for('lrbu', 10 * 1024 * 1024)
        entry = entries[0]
        store.insert_steps(0, entry, CACHED_STEPS, now=0)
        expected = step_size(entry, 10) + shared_size(entry) / 5
        assert store.step_entry(0, 10).capacity == pytest.approx(expected)

    def test_many_prompts_stay_within_capacity(self, entries):
        capacity = 3 * max(entry_size(e) for e in entries.values())
        for policy in ('fifo', 'lru', 'lcbfu', 'lrbu'):
            store = store_for(policy, capacity)
            for now in range(30):
                prompt = now % 6
                if prompt in store:
                    store.get_step(prompt, 25, now)
                else:
                    store.insert_steps(prompt, with_prompt(entries[prompt], prompt),
                                       CACHED_STEPS, now)
                assert store.used <= capacity
            store.verify()


def victim_by_sorting(store, now):
    """(prompt, step) that sorts first by (priority, seq) over every cached step."""
    ranked = sorted(store.step_entries(),
                    key=lambda e: (store.priority_of(e.prompt, e.step, now), e.seq))
    return ranked[0].prompt, ranked[0].step


class ReferenceQueue:
    """Step keys in eviction order; with refresh, an access moves its key to the back."""

    def __init__(self, refresh):
        self.order = OrderedDict()
        self.refresh = refresh

    def insert(self, prompt, steps):
        for step in sorted(steps):
            self.order[(prompt, step)] = None

    def touch(self, key):
        if self.refresh:
            self.order.move_to_end(key)

    def pop(self):
        return self.order.popitem(last=False)[0]


class TestEvictionOrder:
    @pytest.mark.parametrize('policy, survivor', [('lrbu', 1), ('lcbfu', 0)])
    def test_stale_hot_entry(self, entries, policy, survivor):
        store = store_for(policy, 10 * 1024 * 1024)
        store.insert_steps(0, entries[0], (25,), now=0)
        for now in range(1, 21):
            store.fetch_step(0, 25, now)
        store.insert_steps(1, entries[1], (25,), now=1000)
        for now in range(1001, 1004):
            store.fetch_step(1, 25, now)

        expected = victim_by_sorting(store, now=1004)
        victim = store.evict_one(now=1004)
        assert (victim.prompt, victim.step) == expected
        assert victim.prompt == 1 - survivor
        assert list(store.records) == [survivor]

    @pytest.mark.parametrize('policy', ['fifo', 'lru', 'lcbfu', 'lrbu'])
    def test_victim_has_lowest_priority(self, entries, policy):
        rng = np.random.default_rng(3)
        capacity = 3 * entry_size(entries[0])
        store = store_for(policy, capacity)
        for now in range(200):
            prompt = int(rng.integers(0, 10))
            if prompt in store:
                store.fetch_step(prompt, int(rng.choice(store.cached_steps(prompt))), now)
                continue
            entry = with_prompt(entries[prompt % 6], prompt)
            while store.used + entry_size(entry) > capacity:
                priorities = {(e.prompt, e.step): store.priority_of(e.prompt, e.step, now)
                              for e in store.step_entries()}
                victim = store.evict_one(now)
                lowest = priorities.pop((victim.prompt, victim.step))
                assert all(lowest <= other for other in priorities.values())
            assert store.insert_steps(prompt, entry, CACHED_STEPS, now) == []

    @pytest.mark.parametrize('policy, refresh', [('fifo', False), ('lru', True)])
    def test_matches_reference_queue(self, entries, policy, refresh):
        rng = np.random.default_rng(11)
        store = store_for(policy, 3 * max(entry_size(e) for e in entries.values()))
        reference = ReferenceQueue(refresh)
        for now in range(600):
            prompt = int(rng.integers(0, 12))
            if prompt in store:
                step = int(rng.choice(store.cached_steps(prompt)))
                store.fetch_step(prompt, step, now)
                reference.touch((prompt, step))
                continue
            evicted = store.insert_steps(prompt, with_prompt(entries[prompt % 6], prompt),
                                         CACHED_STEPS, now)
            assert [(e.prompt, e.step) for e in evicted] == [reference.pop() for _ in evicted]
            reference.insert(prompt, CACHED_STEPS)
        assert set(reference.order) == {(e.prompt, e.step) for e in store.step_entries()}


class TestRestore:
    def test_restore_record(self, entries):
        store = store_for('lrbu', 10 * 1024 * 1024)
        books = [StepBookkeeping(step=s, f=2, last_access=7, inserted_at=3, seq=i)
                 for i, s in enumerate(entries[0].steps)]
        store.restore_record(entries[0], books)
        assert store.step_entry(0, 20).f == 2
        assert store.used == entry_size(entries[0])

    def test_restore_mismatched_bookkeeping(self, entries):
        store = store_for('lrbu', 10 * 1024 * 1024)
        with pytest.raises(InvariantViolation):
            store.restore_record(entries[0], [StepBookkeeping(5, 0, 0, 0, 0)])

    def test_restore_over_capacity(self, entries):
        store = CacheStore(10, policy='lrbu')
        books = [StepBookkeeping(step=s, f=0, last_access=0, inserted_at=0, seq=i)
                 for i, s in enumerate(entries[0].steps)]
        with pytest.raises(InvariantViolation):
            store.restore_record(entries[0], books)

    def test_stats(self, entries):
        store = store_for('lrbu', 10 * 1024 * 1024)
        store.insert_steps(0, entries[0], CACHED_STEPS, now=0)
        assert store.stats() == {'capacity_limit': 10 * 1024 * 1024,
                                 'used': entry_size(entries[0]), 'prompts': 1,
                                 'steps': 5, 'evictions': 0}
