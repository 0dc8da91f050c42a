"""
Entry Format - byte layout of a CompressedEntry and of latent files.

Entry layout (little-endian):

    header      prompt u64, base_step u8, flags u8 (bit 0: masks present),
                frames u16, height u16, width u16, channels u16,
                n_diff u16 (common key frames other than frame 0), n_steps u8
    shared      n_diff x u16 diff indices
                n_diff x frame  base differentials (float32, H*W*C each)
                masks (optional): object bitmaps then background bitmaps,
                                  ceil(H*W/8) bytes per frame each
    per step    step u8, n_extra u16           (ascending step order)
                first frame
                key-frame map: frames x u16
                alphas: n_diff x f32           (omitted for the base step)
                n_extra x (u16 index + frame)  (ascending index order)

compressed_size() of an entry is exactly len(encode_entry(entry)).

Latent files hold raw latents for the codec command:

    magic b'FLXL', version u16, n_steps u8, flags u8, frames u16, height u16,
    width u16, channels u16, then per step: step u8 + frames x frame,
    then packed masks if flagged, then CRC32 (u32) of everything before it.
"""
import logging
import struct
import zlib
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.models import LatentState, MaskSet
from app.services.codec import CodecError, CompressedEntry, KeyFrameMap
from app.utils.errors import DataFormatError

logger = logging.getLogger(__name__)

ENTRY_HEADER = struct.Struct('<QBBHHHHHB')
STEP_HEADER = struct.Struct('<BH')
INDEX = struct.Struct('<H')
ALPHA_BYTES = 4
FLOAT_BYTES = 4
FLAG_MASKS = 0x01

LATENT_MAGIC = b'FLXL'
LATENT_VERSION = 1
LATENT_HEADER = struct.Struct('<4sHBBHHHH')
CRC = struct.Struct('<I')


class EntryFormatError(DataFormatError):
    """Serialized entry or latent file is truncated or inconsistent."""

    def __init__(self, message: str, position: int = 0):
        self.detail = message
        self.position = position
        super().__init__(f"{message} (at byte {position})")


def frame_bytes(frame_shape: Tuple[int, int, int]) -> int:
    height, width, channels = frame_shape
    return height * width * channels * FLOAT_BYTES


def uncompressed_size(frame_count: int, frame_shape: Tuple[int, int, int], steps: int = 5) -> int:
    """Raw float32 bytes of `steps` full latents; 13,107,200 for the default geometry."""
    return steps * frame_count * frame_bytes(frame_shape)


def _mask_bytes(entry: CompressedEntry) -> int:
    if entry.masks is None:
        return 0
    return entry.masks.packed_size


def shared_size(entry: CompressedEntry) -> int:
    """Header plus everything that belongs to the prompt rather than to one step."""
    n_diff = len(entry.diff_indices)
    return (ENTRY_HEADER.size + n_diff * INDEX.size
            + n_diff * frame_bytes(entry.frame_shape) + _mask_bytes(entry))


def step_size(entry: CompressedEntry, step: int) -> int:
    """Bytes owned by one step of the entry."""
    fb = frame_bytes(entry.frame_shape)
    n_extra = len(entry.extra_frames.get(step, {}))
    size = STEP_HEADER.size + fb + entry.frame_count * INDEX.size + n_extra * (INDEX.size + fb)
    if step != entry.base_step:
        size += len(entry.diff_indices) * ALPHA_BYTES
    return size


def entry_size(entry: CompressedEntry) -> int:
    return shared_size(entry) + sum(step_size(entry, s) for s in entry.steps)


def size_breakdown(entry: CompressedEntry) -> Dict[str, int]:
    """Byte count per layout category; the values sum to entry_size(entry)."""
    fb = frame_bytes(entry.frame_shape)
    n_diff = len(entry.diff_indices)
    steps = entry.steps
    n_extra = entry.extra_frame_count
    alpha_steps = sum(1 for s in steps if s != entry.base_step)
    return {
        'header': ENTRY_HEADER.size + n_diff * INDEX.size + len(steps) * STEP_HEADER.size,
        'first_frames': len(steps) * fb,
        'base_diffs': n_diff * fb,
        'alphas': alpha_steps * n_diff * ALPHA_BYTES,
        'extra_frames': n_extra * (INDEX.size + fb),
        'keyframe_maps': len(steps) * entry.frame_count * INDEX.size,
        'masks': _mask_bytes(entry),
    }


def _check_u16(value: int, what: str):
    if not 0 <= value <= 0xFFFF:
        raise CodecError(f"{what} {value} does not fit the entry format")


def encode_entry(entry: CompressedEntry) -> bytes:
    """Serialize an entry; steps and extra frames are written in ascending order."""
    height, width, channels = entry.frame_shape
    for value, what in ((entry.frame_count, 'frame count'), (height, 'height'),
                        (width, 'width'), (channels, 'channels'),
                        (len(entry.diff_indices), 'common key frame count')):
        _check_u16(value, what)

    parts: List[bytes] = [ENTRY_HEADER.pack(
        entry.prompt, entry.base_step, FLAG_MASKS if entry.masks is not None else 0,
        entry.frame_count, height, width, channels, len(entry.diff_indices), len(entry.steps),
    )]
    parts.append(np.asarray(entry.diff_indices, dtype='<u2').tobytes())
    parts.append(np.ascontiguousarray(entry.base_diffs, dtype='<f4').tobytes())
    if entry.masks is not None:
        parts.append(entry.masks.pack())

    for step in entry.steps:
        extras = entry.extra_frames.get(step, {})
        parts.append(STEP_HEADER.pack(step, len(extras)))
        parts.append(np.ascontiguousarray(entry.first_frames[step], dtype='<f4').tobytes())
        parts.append(np.asarray(entry.maps[step].mapping, dtype='<u2').tobytes())
        if step != entry.base_step:
            parts.append(np.asarray(entry.alphas[step], dtype='<f4').tobytes())
        for index in sorted(extras):
            parts.append(INDEX.pack(index))
            parts.append(np.ascontiguousarray(extras[index], dtype='<f4').tobytes())

    return b''.join(parts)


class _Reader:
    """Cursor over a bytes buffer that reports truncation with a position."""

    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.pos = 0
        self.offset = offset

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.data):
            raise EntryFormatError(f"Truncated while reading {what}", self.offset + self.pos)
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> tuple:
        return fmt.unpack(self.take(fmt.size, what))

    def array(self, dtype: str, count: int, shape: tuple, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        arr = np.frombuffer(self.take(itemsize * count, what), dtype=dtype)
        arr = arr.astype(dtype.replace('<', '='), copy=True).reshape(shape)
        arr.setflags(write=False)
        return arr


def decode_entry(data: bytes, offset: int = 0) -> CompressedEntry:
    """
    Inverse of encode_entry.

    Args:
        data: exactly one serialized entry
        offset: absolute position of data in its file, for error messages

    Raises:
        EntryFormatError: on truncation, trailing bytes or inconsistent content
    """
    reader = _Reader(data, offset)
    (prompt, base_step, flags, frame_count, height, width, channels,
     n_diff, n_steps) = reader.unpack(ENTRY_HEADER, 'entry header')
    frame_shape = (height, width, channels)
    values = height * width * channels
    if min(frame_count, height, width, channels) == 0 or n_steps == 0:
        raise EntryFormatError("Entry header has an empty dimension", offset)

    diff_indices = tuple(int(i) for i in reader.array('<u2', n_diff, (n_diff,), 'diff indices'))
    base_diffs = reader.array('<f4', n_diff * values, (n_diff,) + frame_shape, 'base diffs')

    masks: Optional[MaskSet] = None
    if flags & FLAG_MASKS:
        mask_len = 2 * frame_count * MaskSet.packed_frame_bytes(height, width)
        masks = MaskSet.unpack(reader.take(mask_len, 'masks'), frame_count, height, width)

    first_frames: Dict[int, np.ndarray] = {}
    alphas: Dict[int, np.ndarray] = {}
    extra_frames: Dict[int, Dict[int, np.ndarray]] = {}
    maps: Dict[int, KeyFrameMap] = {}
    for _ in range(n_steps):
        step_pos = offset + reader.pos
        step, n_extra = reader.unpack(STEP_HEADER, 'step header')
        if step in maps:
            raise EntryFormatError(f"Step {step} appears twice", step_pos)
        first_frames[step] = reader.array('<f4', values, frame_shape, f'first frame of step {step}')
        mapping = reader.array('<u2', frame_count, (frame_count,), f'map of step {step}')
        try:
            maps[step] = KeyFrameMap(tuple(int(m) for m in mapping))
        except CodecError as e:
            raise EntryFormatError(f"Invalid map for step {step}: {e}", step_pos)
        if step != base_step:
            alphas[step] = reader.array('<f4', n_diff, (n_diff,), f'alphas of step {step}')
        extras: Dict[int, np.ndarray] = {}
        for _ in range(n_extra):
            (index,) = reader.unpack(INDEX, f'extra frame index of step {step}')
            extras[index] = reader.array('<f4', values, frame_shape, f'extra frame {index}')
        extra_frames[step] = extras

    if reader.pos != len(data):
        raise EntryFormatError(f"{len(data) - reader.pos} trailing bytes after entry",
                               offset + reader.pos)
    return CompressedEntry(
        prompt=prompt,
        base_step=base_step,
        frame_count=frame_count,
        frame_shape=frame_shape,
        first_frames=first_frames,
        diff_indices=diff_indices,
        base_diffs=base_diffs,
        alphas=alphas,
        extra_frames=extra_frames,
        maps=maps,
        masks=masks,
    )


def write_latent_file(path: Union[str, Path], latents: Sequence[LatentState],
                      masks: Optional[MaskSet] = None) -> int:
    """Write raw latents (and optional masks) to a latent file. Returns the byte count."""
    if not latents:
        raise DataFormatError("Latent file needs at least one step")
    ordered = sorted(latents, key=lambda latent: latent.step)
    frame_count, height, width, channels = ordered[0].shape
    for latent in ordered:
        if latent.shape != ordered[0].shape:
            raise DataFormatError(f"Step {latent.step} has shape {latent.shape}, "
                                  f"expected {ordered[0].shape}")
    if masks is not None:
        masks.check_matches(frame_count, height, width)

    parts = [LATENT_HEADER.pack(LATENT_MAGIC, LATENT_VERSION, len(ordered),
                                FLAG_MASKS if masks is not None else 0,
                                frame_count, height, width, channels)]
    for latent in ordered:
        parts.append(struct.pack('<B', latent.step))
        parts.append(np.ascontiguousarray(latent.frames, dtype='<f4').tobytes())
    if masks is not None:
        parts.append(masks.pack())
    body = b''.join(parts)
    data = body + CRC.pack(zlib.crc32(body))

    Path(path).write_bytes(data)
    logger.info(f"Wrote {len(ordered)} latent steps to {path} ({len(data)} bytes)")
    return len(data)


def read_latent_file(path: Union[str, Path]) -> Tuple[List[LatentState], Optional[MaskSet]]:
    """
    Read a latent file written by write_latent_file.

    Raises:
        EntryFormatError: bad magic, unsupported version, truncation or checksum mismatch
    """
    data = Path(path).read_bytes()
    if len(data) < LATENT_HEADER.size + CRC.size:
        raise EntryFormatError("Latent file is too short", len(data))
    body, (stored_crc,) = data[:-CRC.size], CRC.unpack(data[-CRC.size:])

    reader = _Reader(body)
    magic, version, n_steps, flags, frame_count, height, width, channels = \
        reader.unpack(LATENT_HEADER, 'latent header')
    if magic != LATENT_MAGIC:
        raise EntryFormatError(f"Bad magic {magic!r}, expected {LATENT_MAGIC!r}", 0)
    if version != LATENT_VERSION:
        raise EntryFormatError(f"Unsupported latent file version {version}", 4)
    if zlib.crc32(body) != stored_crc:
        raise EntryFormatError("Checksum mismatch", len(body))

    shape = (frame_count, height, width, channels)
    latents = []
    for _ in range(n_steps):
        (step,) = reader.unpack(struct.Struct('<B'), 'step id')
        frames = reader.array('<f4', int(np.prod(shape)), shape, f'frames of step {step}')
        latents.append(LatentState(step=step, frames=frames))

    masks = None
    if flags & FLAG_MASKS:
        mask_len = 2 * frame_count * MaskSet.packed_frame_bytes(height, width)
        masks = MaskSet.unpack(reader.take(mask_len, 'masks'), frame_count, height, width)
    if reader.pos != len(body):
        raise EntryFormatError("Trailing bytes in latent file", reader.pos)

    logger.info(f"Read {len(latents)} latent steps from {path}")
    return latents, masks
