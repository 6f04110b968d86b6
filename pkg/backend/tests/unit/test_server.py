"""Unit tests for the content provider: database, locks and validation."""

import pytest

from app.core.errors import InvariantViolation, ProtocolViolation, UnknownItemError
from app.models import ProtocolId
from app.services.frames import DataItem, build_cycle_frame
from app.services.server import (
    CpDatabase,
    LockEventKind,
    LockGrant,
    LockMode,
    LockTable,
    ReadRecord,
    ValidationOutcome,
    ValidationRequest,
    acquire_locks,
    apply_local_update,
    assign_channels,
    begin_validation,
    channel_groups,
    create_database,
    finish_validation,
    reject_timed_out,
    release_locks,
    validate_and_commit,
)
from tests.utils.factories import make_config


def _db(n_items: int = 4) -> CpDatabase:
    return create_database(make_config(ProtocolId.MCD, n_items=n_items, rs_max=1))


def _request(
    txn_id: str, reads: dict[int, int], writes: dict[int, int] | None = None
) -> ValidationRequest:
    return ValidationRequest(
        txn_id=txn_id,
        client_id=0,
        reads=tuple(ReadRecord(item_id=i, value=v, stamp=0) for i, v in sorted(reads.items())),
        writes=tuple(sorted((writes or {}).items())),
    )


# ---------------------------------------------------------------------------
# CpDatabase
# ---------------------------------------------------------------------------
class TestCpDatabase:
    def test_history_opens_with_initial_version(self) -> None:
        db = _db(3)
        assert all(len(records) == 1 for records in db.history.values())
        assert db.history[2][0].value == 0
        assert db.history[2][0].seq == 0

    def test_sizes_follow_config(self) -> None:
        config = make_config(ProtocolId.MCD, n_items=3, rs_max=1, item_sizes=[1, 5, 2])
        db = create_database(config)
        assert [db.item(i).size for i in range(3)] == [1, 5, 2]

    def test_unknown_item(self) -> None:
        with pytest.raises(UnknownItemError) as exc:
            _db().item(99)
        assert exc.value.item_id == 99

    def test_update_bumps_value_and_logs_version(self) -> None:
        db = _db()
        apply_local_update(db, item_id=1, cycle=3)
        apply_local_update(db, item_id=1, cycle=3)
        assert db.item(1).value == 2
        assert db.item(1).last_updated_cycle == 3
        assert [r.seq for r in db.history[1]] == [0, 1, 2]
        assert db.updated_since_dissemination(1)

    def test_stamp_cannot_go_backwards(self) -> None:
        db = _db()
        apply_local_update(db, item_id=0, cycle=5)
        with pytest.raises(ProtocolViolation):
            apply_local_update(db, item_id=0, cycle=4)

    def test_record_frame_stamps_dissemination(self) -> None:
        db = _db()
        apply_local_update(db, item_id=0, cycle=2)
        frame = build_cycle_frame([db.item(0)], channel=0, cycle=2)
        db.record_frame(frame)
        assert db.item(0).last_disseminated_cycle == 2
        assert not db.updated_since_dissemination(0)
        assert db.current_cycle[0] == 2

    def test_priority_deduplicates_and_filters_by_group(self) -> None:
        db = _db()
        db.enqueue_priority([3, 1, 3, 2])
        assert db.priority == [3, 1, 2]
        assert db.take_priority([1, 3]) == [3, 1]
        assert db.priority == [2]

    def test_version_log_is_in_commit_order(self) -> None:
        db = _db()
        apply_local_update(db, item_id=2, cycle=1)
        apply_local_update(db, item_id=0, cycle=1)
        assert [r.item_id for r in db.version_log() if r.seq > 0] == [2, 0]


# ---------------------------------------------------------------------------
# LockTable
# ---------------------------------------------------------------------------
class TestLockTable:
    def test_shared_locks_coexist(self) -> None:
        table = LockTable()
        assert table.acquire("a", shared=[1, 2]) is LockGrant.GRANTED
        assert table.acquire("b", shared=[2]) is LockGrant.GRANTED
        assert table.lock(2).mode is LockMode.SHARED

    def test_exclusive_waits_for_shared(self) -> None:
        table = LockTable()
        table.acquire("a", shared=[1])
        assert table.acquire("b", exclusive=[1]) is LockGrant.QUEUED
        assert table.queue_for(1) == ["b"]
        assert table.release("a") == ["b"]
        assert table.lock(1).mode is LockMode.EXCLUSIVE

    def test_all_or_nothing(self) -> None:
        table = LockTable()
        table.acquire("a", exclusive=[2])
        assert table.acquire("b", shared=[1, 2]) is LockGrant.QUEUED
        assert table.lock(1).mode is LockMode.FREE

    def test_later_request_does_not_overtake_conflicting_waiter(self) -> None:
        table = LockTable()
        table.acquire("a", shared=[1])
        table.acquire("b", exclusive=[1])
        assert table.acquire("c", shared=[1]) is LockGrant.QUEUED
        assert table.waiting[0].txn_id == "b"

    def test_non_conflicting_request_passes_the_queue(self) -> None:
        table = LockTable()
        table.acquire("a", exclusive=[1])
        table.acquire("b", shared=[1])
        assert table.acquire("c", shared=[2]) is LockGrant.GRANTED

    def test_promotion_is_fifo(self) -> None:
        table = LockTable()
        table.acquire("a", exclusive=[1])
        table.acquire("b", exclusive=[1])
        table.acquire("c", shared=[1])
        assert table.release("a") == ["b"]
        assert table.release("b") == ["c"]
        assert [g.txn_id for g in table.grant_log] == ["a", "b", "c"]

    def test_read_and_write_of_same_item_is_exclusive(self) -> None:
        table = LockTable()
        acquire_locks(table, rs=[1, 2], ws=[2], txn_id="a")
        assert table.lock(2).mode is LockMode.EXCLUSIVE
        assert table.lock(1).mode is LockMode.SHARED
        table.assert_safe()

    def test_double_acquire(self) -> None:
        table = LockTable()
        table.acquire("a", shared=[1])
        with pytest.raises(ProtocolViolation):
            table.acquire("a", shared=[2])

    def test_release_without_locks(self) -> None:
        with pytest.raises(ProtocolViolation):
            release_locks(LockTable(), "ghost")

    def test_cancel_unblocks_followers(self) -> None:
        table = LockTable()
        table.acquire("a", shared=[1])
        table.acquire("b", exclusive=[1])
        table.acquire("c", exclusive=[2, 1])
        assert table.cancel("b") == []
        assert not table.is_queued("b")
        with pytest.raises(ProtocolViolation):
            table.cancel("b")

    def test_event_log_keeps_requests_grants_and_exits_in_order(self) -> None:
        table = LockTable()
        table.acquire("a", shared=[1])
        table.acquire("b", exclusive=[1, 3])
        table.acquire("c", exclusive=[2])
        table.cancel("b")
        table.release("a")
        steps = [(e.kind, e.txn_id, e.arrival) for e in table.events]
        assert steps == [
            (LockEventKind.REQUEST, "a", 0),
            (LockEventKind.GRANT, "a", 0),
            (LockEventKind.REQUEST, "b", 1),
            (LockEventKind.REQUEST, "c", 2),
            (LockEventKind.GRANT, "c", 2),
            (LockEventKind.CANCEL, "b", 1),
            (LockEventKind.RELEASE, "a", 0),
        ]
        assert table.events[2].exclusive == frozenset({1, 3})

    def test_assert_safe_detects_mixed_holders(self) -> None:
        table = LockTable()
        table.acquire("a", shared=[1])
        table.lock(1).exclusive = "intruder"
        with pytest.raises(InvariantViolation):
            table.assert_safe()


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------
class TestValidation:
    def test_current_reads_commit_and_apply_writes(self) -> None:
        db, table = _db(), LockTable()
        request = _request("t1", {0: 0, 1: 0}, {1: 1})
        assert begin_validation(table, request) is LockGrant.GRANTED
        outcome, promoted = finish_validation(db, table, request, cycle=4, tick=10)
        assert outcome.committed
        assert promoted == []
        assert db.item(1).value == 1
        assert db.history[1][-1].writer == "t1"
        assert db.history[1][-1].cycle == 4
        assert not table.holds("t1")

    def test_stale_read_is_rejected_and_prioritized(self) -> None:
        db, table = _db(), LockTable()
        apply_local_update(db, item_id=2, cycle=1)
        request = _request("t1", {0: 0, 2: 0}, {0: 1})
        outcome = validate_and_commit(db, table, request, cycle=2, tick=5)
        assert not outcome.committed
        assert outcome.stale_items == frozenset({2})
        assert outcome.stale[0].value == 1
        assert db.item(0).value == 0
        assert db.priority == [2]

    def test_rejection_without_prioritizing(self) -> None:
        db, table = _db(), LockTable()
        apply_local_update(db, item_id=2, cycle=1)
        validate_and_commit(db, table, _request("t1", {2: 0}), cycle=2, tick=5, prioritize=False)
        assert db.priority == []

    def test_finishing_without_locks(self) -> None:
        db, table = _db(), LockTable()
        with pytest.raises(ProtocolViolation):
            finish_validation(db, table, _request("t1", {0: 0}), cycle=1, tick=1)

    def test_write_must_not_skip_versions(self) -> None:
        db, table = _db(), LockTable()
        request = _request("t1", {0: 0}, {0: 3})
        begin_validation(table, request)
        with pytest.raises(ProtocolViolation):
            finish_validation(db, table, request, cycle=1, tick=1)

    def test_timeout_rejects_whole_read_set(self) -> None:
        db, table = _db(), LockTable()
        table.acquire("cp-1", exclusive=[1])
        request = _request("t1", {0: 0, 1: 0})
        assert begin_validation(table, request) is LockGrant.QUEUED
        outcome, _ = reject_timed_out(db, table, request, tick=30)
        assert outcome.stale_items == frozenset({0, 1})
        assert db.priority == [0, 1]
        assert not table.is_queued("t1")

    def test_queued_request_times_out_immediately(self) -> None:
        db, table = _db(), LockTable()
        table.acquire("cp-1", exclusive=[0])
        outcome = validate_and_commit(db, table, _request("t1", {0: 0}), cycle=1, tick=1)
        assert not outcome.committed

    def test_rejection_must_name_stale_items(self) -> None:
        with pytest.raises(ProtocolViolation):
            ValidationOutcome(txn_id="t", committed=False)


# ---------------------------------------------------------------------------
# Channel assignment
# ---------------------------------------------------------------------------
class TestAssignChannels:
    def test_round_robin(self) -> None:
        assert assign_channels(5, 2) == (0, 1, 0, 1, 0)

    def test_block(self) -> None:
        assert assign_channels(5, 2, strategy="block") == (0, 0, 0, 1, 1)

    def test_groups(self) -> None:
        assert channel_groups((0, 1, 0, 1, 0), 2) == [[0, 2, 4], [1, 3]]

    def test_needs_a_channel(self) -> None:
        with pytest.raises(ProtocolViolation):
            assign_channels(3, 0)


def test_database_items_are_plain_values() -> None:
    db = _db(2)
    assert db.item(0) == DataItem(id=0, size=16)
