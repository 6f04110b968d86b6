"""Little-endian binary layout of a cycle frame.

header  = [channel u32][cycle u64][entry count u32]
entry   = [item_id u32][offset u32][size u32][last_updated_cycle u64][updated_flag u8]
payload = ``size`` u32 words per item, in index order; the first word of an
          item carries its value, the rest are zero.

The entry count is wire framing only. It lets a decoder find where the
payload starts, and it is not charged to the air: a frame's header still
costs ``header_length`` units (channel and cycle), whatever the count.
"""

import struct

from app.core.errors import FrameDecodeError
from app.services.frames import CycleFrame, IndexEntry

HEADER = struct.Struct("<IQI")
ENTRY = struct.Struct("<IIIQB")
WORD = struct.Struct("<I")


def encode_frame(frame: CycleFrame) -> bytes:
    parts = [HEADER.pack(frame.channel, frame.cycle, len(frame.index))]
    for entry in frame.index:
        parts.append(
            ENTRY.pack(
                entry.item_id,
                entry.offset,
                entry.size,
                entry.last_updated_cycle,
                int(entry.updated_flag),
            )
        )
    for entry, value in zip(frame.index, frame.values, strict=True):
        parts.append(WORD.pack(value))
        parts.append(bytes(WORD.size * (entry.size - 1)))
    return b"".join(parts)


def decode_frame(
    data: bytes,
    *,
    header_units: int = 2,
    entry_units: int = 2,
    index_units: int | None = None,
) -> CycleFrame:
    """Rebuild a frame from ``encode_frame`` output.

    Unit costs are not part of the wire format, so the layout parameters the
    frame was built with have to be supplied again.
    """
    if len(data) < HEADER.size:
        raise FrameDecodeError(f"frame of {len(data)} bytes is shorter than its header")
    channel, cycle, count = HEADER.unpack_from(data, 0)
    pos = HEADER.size
    if len(data) < pos + count * ENTRY.size:
        raise FrameDecodeError(f"frame declares {count} entries but is truncated")

    entries: list[IndexEntry] = []
    expected_offset = 0
    for _ in range(count):
        item_id, offset, size, last_updated, flag = ENTRY.unpack_from(data, pos)
        pos += ENTRY.size
        if offset != expected_offset or size < 1:
            raise FrameDecodeError(
                f"entry for item {item_id} at offset {offset}, expected {expected_offset}"
            )
        if flag not in (0, 1):
            raise FrameDecodeError(f"entry for item {item_id} has flag byte {flag}")
        entries.append(
            IndexEntry(
                item_id=item_id,
                offset=offset,
                size=size,
                last_updated_cycle=last_updated,
                updated_flag=bool(flag),
            )
        )
        expected_offset += size

    if len(data) - pos != expected_offset * WORD.size:
        raise FrameDecodeError(
            f"payload has {len(data) - pos} bytes, index describes {expected_offset} words"
        )
    values: list[int] = []
    for entry in entries:
        (value,) = WORD.unpack_from(data, pos)
        values.append(value)
        pos += entry.size * WORD.size

    return CycleFrame(
        channel=channel,
        cycle=cycle,
        index=tuple(entries),
        values=tuple(values),
        payload_length=expected_offset,
        header_length=header_units,
        index_length=count * entry_units if index_units is None else index_units,
    )
