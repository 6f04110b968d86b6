"""Deterministic discrete-event engine.

Everything that happens in a run is an event on one priority queue ordered
by (tick, ordinal). Ordinals are handed out in scheduling order, so two
runs of the same configuration replay the same events in the same order.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from heapq import heappop, heappush
from typing import Any

import numpy as np

from app.core.config import settings
from app.core.errors import InvariantViolation, ProtocolViolation
from app.models import ProtocolId, SimConfig, TraceRecord
from app.services.client import (
    DriveResult,
    PowerModel,
    TunePlan,
    WcState,
    drive_mt,
    generate_mt,
)
from app.services.frames import CycleFrame, TxnState
from app.services.metrics import CycleSample, MetricsRecord, MtSample
from app.services.protocols import FreshProtocol, NxnProtocol, get_protocol
from app.services.protocols.base import (
    ClientEvent,
    CycleStarted,
    IndexDecoded,
    ItemReceived,
    ListenItem,
    MatrixDecoded,
    MtStarted,
    NxnMatrix,
    ResultReceived,
)
from app.services.protocols.fresh import FreshCursor, fresh_server_step, start_pass
from app.services.server import (
    CpDatabase,
    GrantRecord,
    LockEvent,
    LockGrant,
    LockTable,
    ValidationOutcome,
    ValidationRequest,
    VersionRecord,
    apply_local_update,
    begin_validation,
    channel_groups,
    create_database,
    finish_validation,
    reject_timed_out,
)

logger = logging.getLogger(__name__)

# Independent random streams, keyed by purpose, each split per channel or client
STREAM_UPDATES = 1
STREAM_WORKLOAD = 2
STREAM_ARRIVALS = 3


def random_stream(seed: int, purpose: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose, index)))


class EventKind(str, Enum):
    CYCLE_START = "cycle_start"
    PASS_START = "pass_start"
    WORD_TX = "word_tx"
    ITEM_BOUNDARY = "item_boundary"
    UPDATE_COMMIT = "update_commit"
    MT_ARRIVAL = "mt_arrival"
    BACKCHANNEL_TO_SERVER = "backchannel_to_server"
    BACKCHANNEL_TO_CLIENT = "backchannel_to_client"
    VALIDATION_FINISH = "validation_finish"
    LOCK_TIMEOUT = "lock_timeout"


@dataclass(order=True, frozen=True)
class SimEvent:
    tick: int
    ordinal: int
    kind: EventKind = field(compare=False)
    payload: Any = field(compare=False, default=None)


class SegmentKind(str, Enum):
    CONTROL = "control"
    ITEM = "item"


@dataclass(frozen=True)
class Segment:
    """A contiguous run of words on one channel."""

    channel: int
    cycle: int
    start: int
    length: int
    kind: SegmentKind
    item_id: int | None = None
    value: int = 0
    update_cycle: int = 0
    fresh: bool = False

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass
class ChannelState:
    channel: int
    busy_until: int = 0
    frame: CycleFrame | None = None
    frame_start: int = 0
    sample: CycleSample | None = None
    control_listeners: set[int] = field(default_factory=set)
    item_listeners: dict[tuple[int, int], set[int]] = field(default_factory=dict)
    # client -> first tick it hears (fresh)
    continuous: dict[int, int] = field(default_factory=dict)
    cursor: FreshCursor | None = None
    finished: bool = False


@dataclass(frozen=True)
class RunResult:
    config: SimConfig
    metrics: MetricsRecord
    history: dict[int, list[VersionRecord]]
    grant_log: list[GrantRecord]
    lock_events: list[LockEvent]
    trace: list[TraceRecord]
    end_tick: int
    events_processed: int

    @property
    def samples(self) -> list[MtSample]:
        return self.metrics.mt_samples


class World:
    """The whole simulated system: CP, channels, clients and the event queue.

    Acts as the ``ClientContext`` clients use to tune in and send requests.
    """

    def __init__(self, config: SimConfig) -> None:
        self.config = config
        self.protocol = get_protocol(config)
        self.assignment = self.protocol.assignment
        self.groups = channel_groups(self.assignment, config.n_channels)
        self.db: CpDatabase = create_database(config)
        self.locks = LockTable()
        self.power = PowerModel.from_config(config)
        self.metrics = MetricsRecord(protocol=config.protocol, seed=config.seed)
        self.trace_records: list[TraceRecord] = []
        self._trace_dropped = 0

        self.queue: list[SimEvent] = []
        self._ordinals = itertools.count()
        self.now = 0
        self.events_processed = 0
        self.end_tick: int | None = config.horizon_ticks

        self.cycle = 0
        self.cycle_start = 0
        self.cycle_length = 0
        self.frames: dict[int, CycleFrame] = {}
        self.cycle_stamps: dict[int, int] = {}
        self.matrix: NxnMatrix | None = None
        self.closed_samples: list[CycleSample] = []

        self.channels = [ChannelState(channel=ch) for ch in range(config.n_channels)]
        if isinstance(self.protocol, FreshProtocol):
            for state, cursor in zip(
                self.channels, self.protocol.cursors(self.groups), strict=True
            ):
                state.cursor = cursor
        self.update_rngs = [
            random_stream(config.seed, STREAM_UPDATES, ch) for ch in range(config.n_channels)
        ]
        self.arrival_rngs = [
            random_stream(config.seed, STREAM_ARRIVALS, k) for k in range(config.n_clients)
        ]
        self.clients = [
            WcState(
                client_id=k,
                rng=random_stream(config.seed, STREAM_WORKLOAD, k),
                tune_plan=TunePlan(continuous_allowed=not self.protocol.cyclic),
            )
            for k in range(config.n_clients)
        ]

        self.validations: dict[str, ValidationRequest] = {}
        self.cp_updates: dict[str, int] = {}
        self._cp_txns = itertools.count(1)

        if config.horizon_cycles == 0 or config.horizon_ticks == 0:
            return
        for client in self.clients:
            self.schedule(
                self._first_arrival(client.client_id), EventKind.MT_ARRIVAL, client.client_id
            )
        if self.protocol.cyclic:
            self.schedule(0, EventKind.CYCLE_START, 1)
        else:
            for state in self.channels:
                self.schedule(0, EventKind.PASS_START, state.channel)

    # ------------------------------------------------------------------
    # Queue
    # ------------------------------------------------------------------
    def schedule(self, tick: int, kind: EventKind, payload: Any = None) -> SimEvent:
        if tick < self.now:
            raise ProtocolViolation(f"{kind.value} scheduled at {tick}, before now ({self.now})")
        event = SimEvent(tick=tick, ordinal=next(self._ordinals), kind=kind, payload=payload)
        heappush(self.queue, event)
        return event

    def beyond_horizon(self, event: SimEvent) -> bool:
        # A segment that ends exactly at the horizon is still delivered
        if self.end_tick is None:
            return False
        if event.tick == self.end_tick:
            return event.kind is not EventKind.ITEM_BOUNDARY
        return event.tick > self.end_tick

    def _limit_end(self, tick: int) -> None:
        self.end_tick = tick if self.end_tick is None else min(self.end_tick, tick)

    # ------------------------------------------------------------------
    # ClientContext
    # ------------------------------------------------------------------
    def listen_control(self, client_id: int, channel: int) -> None:
        self.channels[channel].control_listeners.add(client_id)

    def listen_item(self, client_id: int, plan: ListenItem) -> None:
        state = self.channels[plan.channel]
        if plan.start < self.now or plan.cycle != self.cycle:
            raise ProtocolViolation(
                f"client {client_id} plans item {plan.item_id} of cycle {plan.cycle} "
                f"at {plan.start}; now is cycle {self.cycle}, tick {self.now}"
            )
        state.item_listeners.setdefault((plan.cycle, plan.item_id), set()).add(client_id)

    def listen_continuous(self, client_id: int, channel: int, since: int) -> None:
        self.channels[channel].continuous[client_id] = since

    def stop_listening(self, client_id: int, channel: int | None = None) -> None:
        states = self.channels if channel is None else [self.channels[channel]]
        for state in states:
            state.control_listeners.discard(client_id)
            state.continuous.pop(client_id, None)
            for listeners in state.item_listeners.values():
                listeners.discard(client_id)

    def send_validation(self, client_id: int, request: ValidationRequest) -> None:
        self.schedule(
            self.now + self.config.backchannel_latency, EventKind.BACKCHANNEL_TO_SERVER, request
        )

    def trace(self, actor: str, event: str, **fields: Any) -> None:
        if not self.config.trace:
            return
        if len(self.trace_records) >= settings.TRACE_MAX_RECORDS:
            self._trace_dropped += 1
            return
        self.trace_records.append(
            TraceRecord(tick=self.now, actor=actor, event=event, fields=fields)
        )

    # ------------------------------------------------------------------
    # Clients
    # ------------------------------------------------------------------
    def _first_arrival(self, client_id: int) -> int:
        if self.config.arrival == "start":
            return 0
        rng = self.arrival_rngs[client_id]
        return math.ceil(rng.exponential(self.config.mean_interarrival_ticks))

    def _next_arrival(self, client_id: int, committed_tick: float) -> int:
        if self.config.arrival == "start":
            return math.ceil(committed_tick)
        think = self.arrival_rngs[client_id].exponential(self.config.mean_interarrival_ticks)
        return math.ceil(committed_tick + think)

    def _drive(self, client_id: int, event: ClientEvent) -> DriveResult:
        wc = self.clients[client_id]
        result = drive_mt(wc, self.protocol, event, self, power=self.power)
        if result.sample is not None:
            sample = result.sample
            self.metrics.mt_samples.append(sample)
            self.trace(
                f"wc{client_id}",
                "COMMIT",
                txn=sample.txn_id,
                committed_tick=sample.committed_tick,
                local=sample.local,
                reads=[list(pair) for pair in sample.reads],
                writes=[list(pair) for pair in sample.writes],
            )
            if wc.mts_started < self.config.mts_per_client:
                tick = self._next_arrival(client_id, sample.committed_tick)
                self.schedule(tick, EventKind.MT_ARRIVAL, client_id)
        return result

    def _active_clients(self) -> list[int]:
        return [
            wc.client_id
            for wc in self.clients
            if wc.active_mt is not None
            and wc.active_mt.state in (TxnState.LISTENING, TxnState.REREADING)
        ]

    def _on_mt_arrival(self, client_id: int) -> None:
        wc = self.clients[client_id]
        mt = generate_mt(
            wc.rng,
            self.config,
            txn_id=f"mt-{client_id}-{wc.mts_started + 1}",
            client_id=client_id,
            created_tick=self.now,
            channel_zero=self.groups[0],
        )
        wc.begin(mt)
        self.metrics.mts_total += 1
        self.trace(
            f"wc{client_id}",
            "MT_ARRIVAL",
            txn=mt.txn_id,
            read_set=sorted(mt.read_set),
            write_set=sorted(mt.write_items),
        )
        omniscient = self.protocol.omniscient
        self._drive(
            client_id,
            MtStarted(
                tick=self.now,
                cycle=self.cycle,
                frames=dict(self.frames) if omniscient else {},
                frame_start=self.cycle_start,
                stamps=dict(self.cycle_stamps) if omniscient else {},
            ),
        )

    # ------------------------------------------------------------------
    # Cyclic dissemination
    # ------------------------------------------------------------------
    def _on_cycle_start(self, cycle: int) -> None:
        self.closed_samples.extend(
            state.sample for state in self.channels if state.sample is not None
        )
        priority_before = list(self.db.priority)
        schedules = self.protocol.schedule_cycle(self.db, self.groups, cycle)
        if isinstance(self.protocol, NxnProtocol):
            self.matrix = self.protocol.matrix_for(self.db, cycle)
        frames = {
            ch: self.protocol.build_frame(self.db, schedule, channel=ch, cycle=cycle)
            for ch, schedule in sorted(schedules.items())
        }
        for frame in frames.values():
            self.db.record_frame(frame)

        length = max(1, max(frame.length for frame in frames.values()))
        self.cycle = cycle
        self.cycle_start = self.now
        self.cycle_length = length
        self.frames = frames
        self.cycle_stamps = self.db.stamps() if self.protocol.omniscient else {}
        logger.debug("cycle %d starts at %d, length %d", cycle, self.now, length)
        self.trace("cp", "CYCLE_START", cycle=cycle, length=length)

        for ch, frame in frames.items():
            self._start_frame(self.channels[ch], frame, length, priority_before)
            self._draw_updates(ch, length)

        for client_id in self._active_clients():
            self._drive(
                client_id,
                CycleStarted(
                    tick=self.now,
                    cycle=cycle,
                    frames=frames,
                    stamps=dict(self.cycle_stamps),
                ),
            )

        next_start = self.now + length
        horizon = self.config.horizon_cycles
        if horizon is not None and cycle >= horizon:
            self._limit_end(next_start)
        elif self.end_tick is None or next_start < self.end_tick:
            self.schedule(next_start, EventKind.CYCLE_START, cycle + 1)

    def _start_frame(
        self, state: ChannelState, frame: CycleFrame, length: int, priority_before: list[int]
    ) -> None:
        state.frame = frame
        state.frame_start = self.now
        state.control_listeners = set()
        state.item_listeners = {}
        state.sample = CycleSample(
            channel=frame.channel,
            cycle=frame.cycle,
            start_tick=self.now,
            length=length,
            control_units=frame.control_length,
            payload_units=frame.payload_length,
            n_items=len(frame.index),
        )
        self.metrics.cycle_samples.append(state.sample)
        self.trace(
            "cp",
            "FRAME",
            channel=frame.channel,
            cycle=frame.cycle,
            schedule=list(frame.item_ids),
            priority=[i for i in frame.item_ids if i in priority_before],
            control=frame.control_length,
            payload=frame.payload_length,
        )
        if frame.control_length:
            self._send(
                Segment(
                    channel=frame.channel,
                    cycle=frame.cycle,
                    start=self.now,
                    length=frame.control_length,
                    kind=SegmentKind.CONTROL,
                )
            )
        for entry in frame.index:
            self._send(
                Segment(
                    channel=frame.channel,
                    cycle=frame.cycle,
                    start=frame.item_start(entry, self.now),
                    length=entry.size,
                    kind=SegmentKind.ITEM,
                    item_id=entry.item_id,
                    value=frame.value_of(entry.item_id),
                    update_cycle=entry.last_updated_cycle,
                )
            )

    def _send(self, segment: Segment) -> None:
        self.schedule(segment.start, EventKind.WORD_TX, segment)
        self.schedule(segment.end, EventKind.ITEM_BOUNDARY, segment)

    def _draw_updates(self, channel: int, span: int) -> None:
        """Each item of the channel is updated in this cycle (or pass) with
        probability ``update_rate``, at a uniform offset within ``span``."""
        group = self.groups[channel]
        draws = self.update_rngs[channel].random((len(group), 2))
        for item_id, (u_fire, u_offset) in zip(group, draws, strict=True):
            if u_fire < self.config.update_rate:
                self.schedule(
                    self.now + math.floor(u_offset * span), EventKind.UPDATE_COMMIT, item_id
                )

    def _on_word_tx(self, segment: Segment) -> None:
        state = self.channels[segment.channel]
        if self.config.check_invariants and segment.start < state.busy_until:
            raise InvariantViolation(
                f"channel {segment.channel} sends at {segment.start} while busy until "
                f"{state.busy_until}"
            )
        state.busy_until = segment.end
        if state.sample is not None:
            state.sample.busy_units += segment.length
        self.trace(
            "cp",
            "TX",
            channel=segment.channel,
            cycle=segment.cycle,
            kind=segment.kind.value,
            item=segment.item_id,
            length=segment.length,
        )

    def _on_item_boundary(self, segment: Segment) -> None:
        state = self.channels[segment.channel]
        if segment.kind is SegmentKind.CONTROL:
            listeners = sorted(state.control_listeners)
            state.control_listeners = set()
            assert state.frame is not None
            for client_id in listeners:
                event: ClientEvent
                if self.matrix is not None:
                    event = MatrixDecoded(
                        tick=self.now,
                        channel=segment.channel,
                        frame=state.frame,
                        frame_start=state.frame_start,
                        matrix=self.matrix,
                    )
                else:
                    event = IndexDecoded(
                        tick=self.now,
                        channel=segment.channel,
                        frame=state.frame,
                        frame_start=state.frame_start,
                    )
                self._drive(client_id, event)
            return

        assert segment.item_id is not None
        if state.cursor is not None:
            listeners = sorted(
                client_id
                for client_id, since in state.continuous.items()
                if since <= segment.start
            )
        else:
            listeners = sorted(
                state.item_listeners.pop((segment.cycle, segment.item_id), set())
            )
        for client_id in listeners:
            wc = self.clients[client_id]
            if wc.active_mt is None or wc.active_mt.finished:
                continue
            self._drive(
                client_id,
                ItemReceived(
                    tick=self.now,
                    channel=segment.channel,
                    cycle=segment.cycle,
                    item_id=segment.item_id,
                    value=segment.value,
                    update_cycle=segment.update_cycle,
                    start=segment.start,
                    continuous=state.cursor is not None,
                    fresh=segment.fresh,
                ),
            )
        if state.cursor is not None:
            self._fresh_transmit(state)

    # ------------------------------------------------------------------
    # Fresh dissemination
    # ------------------------------------------------------------------
    def _on_pass_start(self, channel: int) -> None:
        state = self.channels[channel]
        cursor = state.cursor
        assert cursor is not None
        start_pass(cursor)
        group = self.groups[channel]
        state.frame_start = self.now
        state.sample = CycleSample(
            channel=channel,
            cycle=cursor.pass_no,
            start_tick=self.now,
            length=0,
            control_units=0,
            payload_units=0,
            n_items=len(group),
        )
        self.metrics.cycle_samples.append(state.sample)
        self.trace("cp", "CYCLE_START", channel=channel, cycle=cursor.pass_no)

        nominal = sum(self.config.fresh_header_units + self.db.item(i).size for i in group)
        self._draw_updates(channel, nominal)
        self._fresh_transmit(state)

    def _fresh_transmit(self, state: ChannelState) -> None:
        cursor = state.cursor
        sample = state.sample
        assert cursor is not None and sample is not None
        segment = fresh_server_step(
            self.db, cursor, header_units=self.config.fresh_header_units
        )
        if segment is None:
            sample.length = self.now - sample.start_tick
            self.closed_samples.append(sample)
            self.trace("cp", "PASS_END", channel=state.channel, cycle=cursor.pass_no)
            horizon = self.config.horizon_cycles
            more = horizon is None or cursor.pass_no < horizon
            if more and (self.end_tick is None or self.now < self.end_tick):
                self.schedule(self.now, EventKind.PASS_START, state.channel)
            else:
                state.finished = True
                if all(channel.finished for channel in self.channels):
                    self._limit_end(self.now)
            return
        if segment.fresh:
            sample.interrupt_retx_units += segment.length
        else:
            sample.payload_units += segment.length
        self._send(
            Segment(
                channel=state.channel,
                cycle=cursor.pass_no,
                start=self.now,
                length=segment.length,
                kind=SegmentKind.ITEM,
                item_id=segment.item_id,
                value=segment.value,
                update_cycle=segment.update_cycle,
                fresh=segment.fresh,
            )
        )

    # ------------------------------------------------------------------
    # CP updates and locks
    # ------------------------------------------------------------------
    def _stamp_for(self, item_id: int) -> int:
        cursor = self.channels[self.assignment[item_id]].cursor
        if cursor is not None:
            return cursor.pass_no + 1
        return self.cycle + 1

    def _on_update_commit(self, item_id: int) -> None:
        txn_id = f"cp-{next(self._cp_txns)}"
        grant = self.locks.acquire(txn_id, exclusive={item_id})
        self.trace("cp", "LOCK_" + grant.name, txn=txn_id, items=[item_id])
        self.cp_updates[txn_id] = item_id
        if grant is LockGrant.GRANTED:
            self._apply_cp_update(txn_id)
        self._check_locks()

    def _apply_cp_update(self, txn_id: str) -> None:
        item_id = self.cp_updates.pop(txn_id)
        stamp = self._stamp_for(item_id)
        apply_local_update(self.db, item_id=item_id, cycle=stamp)
        item = self.db.item(item_id)
        self.trace(
            "cp",
            "UPDATE",
            item=item_id,
            value=item.value,
            cycle=stamp,
            seq=self.db.seq,
            writer="cp",
        )
        state = self.channels[self.assignment[item_id]]
        if state.cursor is not None and not state.finished:
            fresh_server_step(self.db, state.cursor, update=item_id)
        self._promoted(self.locks.release(txn_id))

    def _promoted(self, txn_ids: list[str]) -> None:
        for txn_id in txn_ids:
            self.trace("cp", "LOCK_GRANTED", txn=txn_id, promoted=True)
            if txn_id in self.cp_updates:
                self._apply_cp_update(txn_id)
            elif txn_id in self.validations:
                self.schedule(
                    self.now + self.config.validation_ticks, EventKind.VALIDATION_FINISH, txn_id
                )

    def _check_locks(self) -> None:
        if self.config.check_invariants:
            self.locks.assert_safe()

    # ------------------------------------------------------------------
    # Validation over the backchannel
    # ------------------------------------------------------------------
    def _on_validation_request(self, request: ValidationRequest) -> None:
        self.validations[request.txn_id] = request
        self.trace(
            "cp",
            "VALIDATE",
            txn=request.txn_id,
            client=request.client_id,
            reads=[[r.item_id, r.value, r.stamp] for r in request.reads],
            writes=[list(pair) for pair in request.writes],
        )
        grant = begin_validation(self.locks, request)
        self.trace("cp", "LOCK_" + grant.name, txn=request.txn_id)
        if grant is LockGrant.GRANTED:
            self.schedule(
                self.now + self.config.validation_ticks,
                EventKind.VALIDATION_FINISH,
                request.txn_id,
            )
        else:
            wait = math.ceil(self.config.lock_timeout_cycles * max(1, self.cycle_length))
            self.schedule(self.now + wait, EventKind.LOCK_TIMEOUT, request)
        self._check_locks()

    def _pending(self, txn_id: str) -> ValidationRequest:
        request = self.validations.get(txn_id)
        if request is None:
            raise ProtocolViolation(f"no validation pending for {txn_id}")
        return request

    def _on_validation_finish(self, txn_id: str) -> None:
        request = self._pending(txn_id)
        outcome, promoted = finish_validation(
            self.db,
            self.locks,
            request,
            cycle=self.cycle + 1,
            tick=self.now,
            prioritize=self.protocol.prioritizes,
        )
        if outcome.committed:
            for item_id, value in request.writes:
                self.trace(
                    "cp",
                    "UPDATE",
                    item=item_id,
                    value=value,
                    cycle=self.cycle + 1,
                    seq=self.db.history[item_id][-1].seq,
                    writer=txn_id,
                )
        self._respond(request, outcome)
        self._promoted(promoted)
        self._check_locks()

    def _on_lock_timeout(self, request: ValidationRequest) -> None:
        txn_id = request.txn_id
        # a re-validation reuses the txn id; only the attempt that armed this timeout counts
        if self.validations.get(txn_id) is not request or not self.locks.is_queued(txn_id):
            return
        outcome, promoted = reject_timed_out(
            self.db, self.locks, request, tick=self.now, prioritize=self.protocol.prioritizes
        )
        self.trace("cp", "LOCK_TIMEOUT", txn=txn_id)
        self._respond(request, outcome)
        self._promoted(promoted)
        self._check_locks()

    def _respond(self, request: ValidationRequest, outcome: ValidationOutcome) -> None:
        del self.validations[request.txn_id]
        if not outcome.committed:
            self.metrics.rejections += 1
        self.trace(
            "cp",
            "RESULT",
            txn=outcome.txn_id,
            committed=outcome.committed,
            stale=[[s.item_id, s.value, s.cycle] for s in outcome.stale],
        )
        self.schedule(
            self.now + self.config.backchannel_latency,
            EventKind.BACKCHANNEL_TO_CLIENT,
            (request.client_id, outcome),
        )

    def _on_result(self, client_id: int, outcome: ValidationOutcome) -> None:
        self._drive(client_id, ResultReceived(tick=self.now, outcome=outcome))

    # ------------------------------------------------------------------
    # Dispatch
    # ------------------------------------------------------------------
    def dispatch(self, event: SimEvent) -> None:
        match event.kind:
            case EventKind.CYCLE_START:
                self._on_cycle_start(event.payload)
            case EventKind.PASS_START:
                self._on_pass_start(event.payload)
            case EventKind.WORD_TX:
                self._on_word_tx(event.payload)
            case EventKind.ITEM_BOUNDARY:
                self._on_item_boundary(event.payload)
            case EventKind.UPDATE_COMMIT:
                self._on_update_commit(event.payload)
            case EventKind.MT_ARRIVAL:
                self._on_mt_arrival(event.payload)
            case EventKind.BACKCHANNEL_TO_SERVER:
                self._on_validation_request(event.payload)
            case EventKind.BACKCHANNEL_TO_CLIENT:
                self._on_result(*event.payload)
            case EventKind.VALIDATION_FINISH:
                self._on_validation_finish(event.payload)
            case EventKind.LOCK_TIMEOUT:
                self._on_lock_timeout(event.payload)

    def finish(self) -> RunResult:
        end = self.end_tick if self.end_tick is not None else self.now
        for state in self.channels:
            sample = state.sample
            if sample is None or any(sample is closed for closed in self.closed_samples):
                continue
            if state.cursor is not None:
                # a pass cut by the horizon keeps the ticks it used
                sample.length = max(0, min(end, self.now) - sample.start_tick)
            elif sample.start_tick + sample.length <= end:
                self.closed_samples.append(sample)
        if self.config.check_invariants:
            self.check_accounting()
        if self._trace_dropped:
            logger.warning(
                "trace capped at %d records, %d dropped",
                settings.TRACE_MAX_RECORDS,
                self._trace_dropped,
            )
        return RunResult(
            config=self.config,
            metrics=self.metrics,
            history=self.db.history,
            grant_log=list(self.locks.grant_log),
            lock_events=list(self.locks.events),
            trace=self.trace_records,
            end_tick=end,
            events_processed=self.events_processed,
        )

    def check_accounting(self) -> None:
        """Every finished cycle carried exactly its frame and nothing else."""
        for sample in self.closed_samples:
            if sample.busy_units != sample.frame_units:
                raise InvariantViolation(
                    f"channel {sample.channel} cycle {sample.cycle}: busy {sample.busy_units} "
                    f"units but the frame holds {sample.frame_units}"
                )
            if sample.idle_units < 0:
                raise InvariantViolation(
                    f"channel {sample.channel} cycle {sample.cycle} overran its length"
                )


def step(world: World) -> World:
    """Pop and handle the earliest event; events past the horizon are dropped."""
    if not world.queue:
        raise ProtocolViolation("step called with an empty event queue")
    event = heappop(world.queue)
    if event.tick < world.now:
        raise InvariantViolation(f"event at {event.tick} popped after tick {world.now}")
    if world.beyond_horizon(event):
        return world
    world.now = event.tick
    world.events_processed += 1
    world.dispatch(event)
    return world


def run(config: SimConfig) -> RunResult:
    """Run one configuration to its horizon."""
    world = World(config)
    logger.info(
        "run %s seed=%d: %d items, %d channels, %d clients",
        config.protocol.value,
        config.seed,
        config.n_items,
        config.n_channels,
        config.n_clients,
    )
    while world.queue:
        step(world)
    result = world.finish()
    logger.info(
        "run %s seed=%d done at tick %d: %d/%d MTs committed, %d events",
        config.protocol.value,
        config.seed,
        result.end_tick,
        len(result.metrics.mt_samples),
        result.metrics.mts_total,
        result.events_processed,
    )
    return result


def run_protocol(config: SimConfig, protocol: ProtocolId) -> RunResult:
    return run(SimConfig.model_validate({**config.model_dump(), "protocol": protocol}))
