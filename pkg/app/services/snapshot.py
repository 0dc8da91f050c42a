"""
Snapshot - save and restore a cache store together with its vector index.

File layout (little-endian):

    header   magic b'FLXC', version u16, policy u8, capacity u64, next_seq u64,
             embedding dim u16, n_prompts u32, n_records u32
    index    n_prompts x (prompt u64, whole/object/background: dim x f32 each),
             ordered by prompt, then CRC32 (u32) of the section
    records  n_records x (length u32, payload, CRC32 u32), ordered by prompt
             payload = n_steps u8, n_steps x (step u8, f u64, last_access u64,
                       inserted_at u64, seq u64), then the encoded entry

Saving the same store twice yields identical bytes.
"""
import logging
import struct
import zlib
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from app.models import Embedding, EmbeddingKind
from app.services.cache_store import CacheStore, StepBookkeeping
from app.services.entry_format import EntryFormatError, decode_entry, encode_entry
from app.services.replacement_policies import PolicyName
from app.services.vector_index import VectorIndex
from app.utils.errors import DataFormatError

logger = logging.getLogger(__name__)

MAGIC = b'FLXC'
VERSION = 1
HEADER = struct.Struct('<4sHBQQHII')
PROMPT = struct.Struct('<Q')
LENGTH = struct.Struct('<I')
CRC = struct.Struct('<I')
BOOK_COUNT = struct.Struct('<B')
BOOK = struct.Struct('<BQQQQ')

POLICY_CODES = {
    PolicyName.FIFO: 0,
    PolicyName.LRU: 1,
    PolicyName.LCBFU: 2,
    PolicyName.LRBU: 3,
}
POLICY_BY_CODE = {code: name for name, code in POLICY_CODES.items()}


class SnapshotError(DataFormatError):
    """Corrupt snapshot: bad magic, unsupported version, truncation or checksum mismatch."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at byte {position})")


def dumps(store: CacheStore, index: VectorIndex) -> bytes:
    """Serialize a store and its index."""
    prompts = index.prompts()
    dim = index.dim or 0
    records = [store.records[p] for p in sorted(store.records)]

    parts = [HEADER.pack(MAGIC, VERSION, POLICY_CODES[store.policy.name], store.capacity_limit,
                         store.next_seq, dim, len(prompts), len(records))]

    index_parts = []
    for prompt in prompts:
        index_parts.append(PROMPT.pack(prompt))
        for embedding in index.embeddings(prompt):
            index_parts.append(np.asarray(embedding.values, dtype='<f4').tobytes())
    index_section = b''.join(index_parts)
    parts.append(index_section)
    parts.append(CRC.pack(zlib.crc32(index_section)))

    for record in records:
        books = [BOOK_COUNT.pack(len(record.slots))]
        for step in record.steps:
            entry = store.step_entry(record.prompt, step)
            books.append(BOOK.pack(step, entry.f, entry.last_access, entry.inserted_at, entry.seq))
        payload = b''.join(books) + encode_entry(record.entry)
        parts.append(LENGTH.pack(len(payload)))
        parts.append(payload)
        parts.append(CRC.pack(zlib.crc32(payload)))

    return b''.join(parts)


def save_snapshot(store: CacheStore, index: VectorIndex, path: Union[str, Path]) -> int:
    """Write a snapshot file. Returns its size in bytes."""
    data = dumps(store, index)
    Path(path).write_bytes(data)
    logger.info(f"Saved snapshot of {len(store.records)} prompts to {path} ({len(data)} bytes)")
    return len(data)


def _take(data: bytes, pos: int, size: int, what: str) -> bytes:
    if pos + size > len(data):
        raise SnapshotError(f"Truncated while reading {what}", pos)
    return data[pos:pos + size]


def loads(data: bytes, check_invariants: bool = False) -> Tuple[CacheStore, VectorIndex]:
    """
    Rebuild a store and index from snapshot bytes.

    Raises:
        SnapshotError: with the byte position of the first problem found
    """
    magic, version, policy_code, capacity, next_seq, dim, n_prompts, n_records = \
        HEADER.unpack(_take(data, 0, HEADER.size, 'header'))
    if magic != MAGIC:
        raise SnapshotError(f"Bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise SnapshotError(f"Unsupported snapshot version {version}", 4)
    if policy_code not in POLICY_BY_CODE:
        raise SnapshotError(f"Unknown policy code {policy_code}", 6)
    pos = HEADER.size

    index = VectorIndex(dim or None)
    section_start = pos
    row_bytes = PROMPT.size + 3 * dim * 4
    section = _take(data, pos, n_prompts * row_bytes, 'index section')
    pos += len(section)
    (stored_crc,) = CRC.unpack(_take(data, pos, CRC.size, 'index checksum'))
    if zlib.crc32(section) != stored_crc:
        raise SnapshotError("Index section checksum mismatch", section_start)
    pos += CRC.size

    kinds = list(EmbeddingKind)
    for row in range(n_prompts):
        base = row * row_bytes
        (prompt,) = PROMPT.unpack_from(section, base)
        vectors = []
        for k, kind in enumerate(kinds):
            start = base + PROMPT.size + k * dim * 4
            values = np.frombuffer(section[start:start + dim * 4], dtype='<f4')
            try:
                vectors.append(Embedding.from_stored(values, kind))
            except DataFormatError as e:
                raise SnapshotError(f"Prompt {prompt}: {e}", section_start + base)
        index.insert(*vectors, prompt=prompt)

    store = CacheStore(capacity, policy=POLICY_BY_CODE[policy_code],
                       on_prompt_removed=index.remove, check_invariants=check_invariants)
    for _ in range(n_records):
        record_start = pos
        (length,) = LENGTH.unpack(_take(data, pos, LENGTH.size, 'record length'))
        pos += LENGTH.size
        payload = _take(data, pos, length, 'record payload')
        payload_start = pos
        pos += length
        (stored_crc,) = CRC.unpack(_take(data, pos, CRC.size, 'record checksum'))
        pos += CRC.size
        if zlib.crc32(payload) != stored_crc:
            raise SnapshotError("Record checksum mismatch", record_start)

        (n_books,) = BOOK_COUNT.unpack(_take(payload, 0, BOOK_COUNT.size, 'step count'))
        books = []
        offset = BOOK_COUNT.size
        for _ in range(n_books):
            step, f, last, inserted, seq = BOOK.unpack(
                _take(payload, offset, BOOK.size, 'step bookkeeping'))
            books.append(StepBookkeeping(step=step, f=f, last_access=last,
                                         inserted_at=inserted, seq=seq))
            offset += BOOK.size
        try:
            entry = decode_entry(payload[offset:], offset=payload_start + offset)
        except EntryFormatError as e:
            raise SnapshotError(e.detail, e.position)
        if entry.prompt not in index:
            raise SnapshotError(f"Record for prompt {entry.prompt} has no index entry", record_start)
        store.restore_record(entry, books)

    if pos != len(data):
        raise SnapshotError(f"{len(data) - pos} trailing bytes", pos)
    store.next_seq = next_seq
    if check_invariants:
        store.verify()
    return store, index


def load_snapshot(path: Union[str, Path],
                  check_invariants: bool = False) -> Tuple[CacheStore, VectorIndex]:
    data = Path(path).read_bytes()
    store, index = loads(data, check_invariants=check_invariants)
    logger.info(f"Loaded snapshot of {len(store.records)} prompts from {path}")
    return store, index
