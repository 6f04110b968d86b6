"""Content provider: item database, S/X lock manager and backchannel validation."""

from __future__ import annotations

import itertools
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Literal

import numpy as np

from app.core.errors import InvariantViolation, ProtocolViolation, UnknownItemError
from app.models import SimConfig
from app.services.frames import CycleFrame, DataItem

logger = logging.getLogger(__name__)

CP_WRITER = "cp"


@dataclass(frozen=True)
class VersionRecord:
    item_id: int
    cycle: int
    value: int
    seq: int
    writer: str = CP_WRITER


@dataclass
class CpDatabase:
    items: dict[int, DataItem]
    history: dict[int, list[VersionRecord]]
    # Per-channel cycle counter (pass counter under fresh)
    current_cycle: dict[int, int] = field(default_factory=dict)
    # Items rejected at validation, to lead the next cycle of their channel
    priority: list[int] = field(default_factory=list)
    # Round-robin fill position per channel
    cursors: dict[int, int] = field(default_factory=dict)
    seq: int = 0

    def item(self, item_id: int) -> DataItem:
        try:
            return self.items[item_id]
        except KeyError:
            raise UnknownItemError(item_id) from None

    def stamps(self) -> dict[int, int]:
        return {item_id: item.last_updated_cycle for item_id, item in self.items.items()}

    def updated_since_dissemination(self, item_id: int) -> bool:
        item = self.item(item_id)
        return item.last_updated_cycle > item.last_disseminated_cycle

    def record_frame(self, frame: CycleFrame) -> None:
        for item_id in frame.item_ids:
            self.items[item_id] = replace(self.item(item_id), last_disseminated_cycle=frame.cycle)
        self.current_cycle[frame.channel] = frame.cycle

    def enqueue_priority(self, item_ids: Iterable[int]) -> None:
        for item_id in item_ids:
            self.item(item_id)
            if item_id not in self.priority:
                self.priority.append(item_id)

    def take_priority(self, group: Iterable[int]) -> list[int]:
        members = set(group)
        taken = [item_id for item_id in self.priority if item_id in members]
        self.priority = [item_id for item_id in self.priority if item_id not in members]
        return taken

    def version_log(self) -> list[VersionRecord]:
        """Every history entry across items, in commit order."""
        return sorted(itertools.chain.from_iterable(self.history.values()), key=lambda r: r.seq)


def create_database(config: SimConfig) -> CpDatabase:
    items = {i: DataItem(id=i, size=config.size_of(i)) for i in range(config.n_items)}
    history = {i: [VersionRecord(item_id=i, cycle=0, value=0, seq=0)] for i in items}
    return CpDatabase(items=items, history=history)


def apply_local_update(
    db: CpDatabase, *, item_id: int, cycle: int, writer: str = CP_WRITER
) -> CpDatabase:
    """Commit one update: bump the version, stamp it with ``cycle``, log it.

    The caller picks the stamp; during cycle c the engine passes c + 1, the
    first cycle that will carry the new value.
    """
    item = db.item(item_id)
    if cycle < item.last_updated_cycle:
        raise ProtocolViolation(
            f"item {item_id} stamped {cycle} after a stamp of {item.last_updated_cycle}"
        )
    db.seq += 1
    updated = replace(item, value=item.value + 1, last_updated_cycle=cycle)
    db.items[item_id] = updated
    db.history[item_id].append(
        VersionRecord(item_id=item_id, cycle=cycle, value=updated.value, seq=db.seq, writer=writer)
    )
    return db


# ---------------------------------------------------------------------------
# Locks
# ---------------------------------------------------------------------------
class LockGrant(str, Enum):
    GRANTED = "granted"
    QUEUED = "queued"


class LockMode(str, Enum):
    FREE = "free"
    SHARED = "shared"
    EXCLUSIVE = "exclusive"


@dataclass(frozen=True)
class LockRequest:
    txn_id: str
    shared: frozenset[int]
    exclusive: frozenset[int]
    arrival: int

    @property
    def items(self) -> frozenset[int]:
        return self.shared | self.exclusive

    def conflicts_with(self, other: LockRequest) -> bool:
        return bool(self.exclusive & other.items or other.exclusive & self.items)


@dataclass
class ItemLock:
    shared: set[str] = field(default_factory=set)
    exclusive: str | None = None

    @property
    def mode(self) -> LockMode:
        if self.exclusive is not None:
            return LockMode.EXCLUSIVE
        return LockMode.SHARED if self.shared else LockMode.FREE


@dataclass(frozen=True)
class GrantRecord:
    txn_id: str
    arrival: int
    items: frozenset[int]
    exclusive: frozenset[int]


class LockEventKind(str, Enum):
    REQUEST = "request"
    GRANT = "grant"
    RELEASE = "release"
    CANCEL = "cancel"


# One step of the lock table, in the order it happened
@dataclass(frozen=True)
class LockEvent:
    kind: LockEventKind
    txn_id: str
    arrival: int
    shared: frozenset[int]
    exclusive: frozenset[int]


class LockTable:
    """All-or-nothing S/X lock manager with a single FIFO wait queue.

    A request is granted only when every lock it needs is compatible with
    the current holders and no earlier waiter conflicts with it, so a
    waiting request is never overtaken by a later conflicting one.
    """

    def __init__(self) -> None:
        self._locks: dict[int, ItemLock] = {}
        self._held: dict[str, LockRequest] = {}
        self._queue: list[LockRequest] = []
        self._arrivals = itertools.count()
        self.grant_log: list[GrantRecord] = []
        self.events: list[LockEvent] = []

    def lock(self, item_id: int) -> ItemLock:
        return self._locks.setdefault(item_id, ItemLock())

    def holds(self, txn_id: str) -> bool:
        return txn_id in self._held

    def is_queued(self, txn_id: str) -> bool:
        return any(req.txn_id == txn_id for req in self._queue)

    def queue_for(self, item_id: int) -> list[str]:
        return [req.txn_id for req in self._queue if item_id in req.items]

    @property
    def waiting(self) -> list[LockRequest]:
        return list(self._queue)

    def acquire(
        self, txn_id: str, *, shared: Iterable[int] = (), exclusive: Iterable[int] = ()
    ) -> LockGrant:
        if txn_id in self._held or self.is_queued(txn_id):
            raise ProtocolViolation(f"{txn_id} already holds or awaits locks")
        x_items = frozenset(exclusive)
        request = LockRequest(
            txn_id=txn_id,
            shared=frozenset(shared) - x_items,
            exclusive=x_items,
            arrival=next(self._arrivals),
        )
        self._log(LockEventKind.REQUEST, request)
        if self._grantable(request) and not any(
            request.conflicts_with(waiter) for waiter in self._queue
        ):
            self._grant(request)
            return LockGrant.GRANTED
        self._queue.append(request)
        logger.debug("lock request %s queued behind %d waiters", txn_id, len(self._queue) - 1)
        return LockGrant.QUEUED

    def release(self, txn_id: str) -> list[str]:
        request = self._held.pop(txn_id, None)
        if request is None:
            raise ProtocolViolation(f"{txn_id} holds no locks")
        self._log(LockEventKind.RELEASE, request)
        for item_id in request.shared:
            self.lock(item_id).shared.discard(txn_id)
        for item_id in request.exclusive:
            self.lock(item_id).exclusive = None
        return self._promote()

    def cancel(self, txn_id: str) -> list[str]:
        remaining = [req for req in self._queue if req.txn_id != txn_id]
        if len(remaining) == len(self._queue):
            raise ProtocolViolation(f"{txn_id} is not waiting for locks")
        for request in self._queue:
            if request.txn_id == txn_id:
                self._log(LockEventKind.CANCEL, request)
        self._queue = remaining
        return self._promote()

    def assert_safe(self) -> None:
        for item_id, item_lock in self._locks.items():
            if item_lock.exclusive is not None and item_lock.shared:
                raise InvariantViolation(
                    f"item {item_id}: X held by {item_lock.exclusive} "
                    f"while S held by {sorted(item_lock.shared)}"
                )
        owners: dict[int, str] = {}
        for request in self._held.values():
            for item_id in request.exclusive:
                if item_id in owners:
                    raise InvariantViolation(
                        f"item {item_id}: X held by {owners[item_id]} and {request.txn_id}"
                    )
                owners[item_id] = request.txn_id

    def _grantable(self, request: LockRequest) -> bool:
        for item_id in request.exclusive:
            item_lock = self.lock(item_id)
            if item_lock.exclusive is not None or item_lock.shared:
                return False
        return all(self.lock(item_id).exclusive is None for item_id in request.shared)

    def _grant(self, request: LockRequest) -> None:
        for item_id in request.shared:
            self.lock(item_id).shared.add(request.txn_id)
        for item_id in request.exclusive:
            self.lock(item_id).exclusive = request.txn_id
        self._held[request.txn_id] = request
        self._log(LockEventKind.GRANT, request)
        self.grant_log.append(
            GrantRecord(
                txn_id=request.txn_id,
                arrival=request.arrival,
                items=request.items,
                exclusive=request.exclusive,
            )
        )

    def _log(self, kind: LockEventKind, request: LockRequest) -> None:
        self.events.append(
            LockEvent(kind, request.txn_id, request.arrival, request.shared, request.exclusive)
        )

    def _promote(self) -> list[str]:
        granted: list[str] = []
        still_waiting: list[LockRequest] = []
        for request in self._queue:
            blocked = any(request.conflicts_with(earlier) for earlier in still_waiting)
            if not blocked and self._grantable(request):
                self._grant(request)
                granted.append(request.txn_id)
            else:
                still_waiting.append(request)
        self._queue = still_waiting
        return granted


def acquire_locks(
    table: LockTable, *, rs: Iterable[int], ws: Iterable[int], txn_id: str
) -> LockGrant:
    """X for the write set, S for the rest of the read set, all or nothing."""
    return table.acquire(txn_id, shared=rs, exclusive=ws)


def release_locks(table: LockTable, txn_id: str) -> list[str]:
    return table.release(txn_id)


# ---------------------------------------------------------------------------
# Validation over the backchannel
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ReadRecord:
    item_id: int
    value: int
    stamp: int


@dataclass(frozen=True)
class ValidationRequest:
    """VALIDATE{txn, [(item, value, stamp)], [(item, new_value)]}"""

    txn_id: str
    client_id: int
    reads: tuple[ReadRecord, ...]
    writes: tuple[tuple[int, int], ...]

    @property
    def read_items(self) -> frozenset[int]:
        return frozenset(read.item_id for read in self.reads)

    @property
    def write_items(self) -> frozenset[int]:
        return frozenset(item_id for item_id, _ in self.writes)


@dataclass(frozen=True)
class StaleItem:
    item_id: int
    value: int
    cycle: int


@dataclass(frozen=True)
class ValidationOutcome:
    """RESULT{txn, Committed | Rejected[(item, value, cycle)]}"""

    txn_id: str
    committed: bool
    stale: tuple[StaleItem, ...] = ()
    confirmation_tick: int = 0

    def __post_init__(self) -> None:
        if not self.committed and not self.stale:
            raise ProtocolViolation(f"{self.txn_id}: a rejection must name stale items")

    @property
    def stale_items(self) -> frozenset[int]:
        return frozenset(stale.item_id for stale in self.stale)


def begin_validation(table: LockTable, request: ValidationRequest) -> LockGrant:
    return acquire_locks(
        table, rs=request.read_items, ws=request.write_items, txn_id=request.txn_id
    )


def finish_validation(
    db: CpDatabase,
    table: LockTable,
    request: ValidationRequest,
    *,
    cycle: int,
    tick: int,
    prioritize: bool = True,
) -> tuple[ValidationOutcome, list[str]]:
    """Compare, apply and release for a request that holds its locks.

    Returns the outcome and the transactions promoted by the release.
    """
    if not table.holds(request.txn_id):
        raise ProtocolViolation(f"{request.txn_id} validated without holding its locks")
    stale = tuple(
        StaleItem(item_id=read.item_id, value=current.value, cycle=current.last_updated_cycle)
        for read in request.reads
        if (current := db.item(read.item_id)).value != read.value
    )
    if stale:
        if prioritize:
            db.enqueue_priority(item.item_id for item in stale)
        outcome = ValidationOutcome(
            txn_id=request.txn_id, committed=False, stale=stale, confirmation_tick=tick
        )
    else:
        for item_id, new_value in request.writes:
            if new_value != db.item(item_id).value + 1:
                raise ProtocolViolation(
                    f"{request.txn_id}: write of {new_value} to item {item_id} "
                    f"skips versions (current {db.item(item_id).value})"
                )
            apply_local_update(db, item_id=item_id, cycle=cycle, writer=request.txn_id)
        outcome = ValidationOutcome(txn_id=request.txn_id, committed=True, confirmation_tick=tick)
    promoted = table.release(request.txn_id)
    return outcome, promoted


def reject_timed_out(
    db: CpDatabase,
    table: LockTable,
    request: ValidationRequest,
    *,
    tick: int,
    prioritize: bool = True,
) -> tuple[ValidationOutcome, list[str]]:
    """Give up on a queued request: the whole read set comes back stale."""
    promoted = table.cancel(request.txn_id)
    stale = tuple(
        StaleItem(item_id=read.item_id, value=current.value, cycle=current.last_updated_cycle)
        for read in request.reads
        for current in (db.item(read.item_id),)
    )
    if prioritize:
        db.enqueue_priority(item.item_id for item in stale)
    outcome = ValidationOutcome(
        txn_id=request.txn_id, committed=False, stale=stale, confirmation_tick=tick
    )
    return outcome, promoted


def validate_and_commit(
    db: CpDatabase,
    table: LockTable,
    request: ValidationRequest,
    *,
    cycle: int,
    tick: int,
    prioritize: bool = True,
) -> ValidationOutcome:
    """Validate with a zero lock-wait budget: queueing counts as a timeout."""
    if begin_validation(table, request) is LockGrant.QUEUED:
        outcome, _ = reject_timed_out(
            db, table, request, tick=tick, prioritize=prioritize
        )
        return outcome
    outcome, _ = finish_validation(
        db, table, request, cycle=cycle, tick=tick, prioritize=prioritize
    )
    return outcome


# ---------------------------------------------------------------------------
# Channel assignment
# ---------------------------------------------------------------------------
def assign_channels(
    n_items: int,
    n_channels: int,
    *,
    strategy: Literal["round_robin", "block"] = "round_robin",
) -> tuple[int, ...]:
    """Channel of every item id; round robin puts item i on channel i mod C."""
    if n_channels < 1:
        raise ProtocolViolation("at least one channel is required")
    if strategy == "round_robin":
        return tuple(i % n_channels for i in range(n_items))
    blocks = np.array_split(np.arange(n_items), n_channels)
    assignment = np.empty(n_items, dtype=np.int64)
    for channel, block in enumerate(blocks):
        assignment[block] = channel
    return tuple(int(channel) for channel in assignment)


def channel_groups(assignment: Sequence[int], n_channels: int) -> list[list[int]]:
    groups: list[list[int]] = [[] for _ in range(n_channels)]
    for item_id, channel in enumerate(assignment):
        groups[channel].append(item_id)
    return groups
