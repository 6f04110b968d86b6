"""Wireless client: query generation, energy accounting, tuning log and the
MT lifecycle driven through a protocol's client step."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Protocol as TypingProtocol

import numpy as np

from app.core.errors import ConfigurationError, ProtocolViolation
from app.models import ProtocolId, SimConfig
from app.services.frames import MobileTransaction, TxnState
from app.services.metrics import MtSample
from app.services.protocols.base import (
    AbortRestart,
    Check,
    ClientAction,
    ClientEvent,
    CommitConfirmed,
    CommitLocal,
    CycleStarted,
    Doze,
    FlagStale,
    Forget,
    IndexDecoded,
    IndexView,
    ItemReceived,
    ListenContinuous,
    ListenIndex,
    ListenItem,
    ListenMatrix,
    MatrixDecoded,
    MtStarted,
    Observe,
    Protocol,
    RecordView,
    RereadPending,
    ResultReceived,
    SendValidation,
)
from app.services.server import ReadRecord, ValidationRequest

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Energy
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PowerModel:
    p_listen: float = 1.0
    p_check: float = 0.1
    p_tx: float = 5.0
    count_tx: bool = True

    @classmethod
    def from_config(cls, config: SimConfig) -> PowerModel:
        return cls(
            p_listen=config.p_listen,
            p_check=config.check_cost,
            p_tx=config.p_tx,
            count_tx=config.count_tx_energy,
        )


class ActivityKind(str, Enum):
    DOZE = "doze"
    LISTEN = "listen"
    LISTEN_CHECK = "listen_check"
    BACKCHANNEL_TX = "backchannel_tx"


@dataclass(frozen=True)
class TickActivity:
    kind: ActivityKind
    ticks: float = 0.0
    checks: int = 0
    messages: int = 0


@dataclass(frozen=True)
class EnergyMeter:
    listen_units: float = 0.0
    check_units: float = 0.0
    tx_units: float = 0.0

    @property
    def total(self) -> float:
        return self.listen_units + self.check_units + self.tx_units


def charge_energy(
    meter: EnergyMeter, activity: TickActivity, power: PowerModel | None = None
) -> EnergyMeter:
    power = power or PowerModel()
    if activity.ticks < 0 or activity.checks < 0 or activity.messages < 0:
        raise ProtocolViolation(f"negative activity {activity}")
    if activity.kind is ActivityKind.DOZE:
        return meter
    if activity.kind is ActivityKind.BACKCHANNEL_TX:
        if not power.count_tx:
            return meter
        return replace(meter, tx_units=meter.tx_units + activity.messages * power.p_tx)
    return replace(
        meter,
        listen_units=meter.listen_units + activity.ticks * power.p_listen,
        check_units=meter.check_units + activity.checks * power.p_check,
    )


# ---------------------------------------------------------------------------
# Tuning log
# ---------------------------------------------------------------------------
class TunePurpose(str, Enum):
    INDEX = "index"
    MATRIX = "matrix"
    ITEM = "item"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class TuneInterval:
    wake_tick: float
    sleep_tick: float
    purpose: TunePurpose
    channel: int
    item_id: int | None = None


@dataclass
class TunePlan:
    """Awake intervals of one client, increasing and disjoint per channel."""

    intervals: list[TuneInterval] = field(default_factory=list)
    continuous_allowed: bool = False

    def add(self, interval: TuneInterval) -> None:
        if interval.sleep_tick < interval.wake_tick:
            raise ProtocolViolation(f"interval ends before it starts: {interval}")
        if interval.purpose is TunePurpose.CONTINUOUS and not self.continuous_allowed:
            raise ProtocolViolation("continuous listening is only used by fresh clients")
        for previous in reversed(self.intervals):
            if previous.channel == interval.channel:
                if interval.wake_tick < previous.sleep_tick:
                    raise ProtocolViolation(
                        f"overlapping tune intervals on channel {interval.channel}: "
                        f"{previous} then {interval}"
                    )
                break
        self.intervals.append(interval)

    def awake_ticks(self) -> float:
        return sum(i.sleep_tick - i.wake_tick for i in self.intervals)


# ---------------------------------------------------------------------------
# Client state
# ---------------------------------------------------------------------------
@dataclass
class WcState:
    client_id: int
    rng: np.random.Generator
    tuned_channels: set[int] = field(default_factory=set)
    active_mt: MobileTransaction | None = None
    energy: EnergyMeter = field(default_factory=EnergyMeter)
    mt_energy: EnergyMeter = field(default_factory=EnergyMeter)
    mt_awake: float = 0.0
    # listening spent on index and matrix blocks
    mt_control: float = 0.0
    pending_reread: frozenset[int] = frozenset()
    index_views: dict[int, IndexView] = field(default_factory=dict)
    flagged: frozenset[int] = frozenset()
    listen_marks: dict[int, float] = field(default_factory=dict)
    tune_plan: TunePlan = field(default_factory=TunePlan)
    mts_started: int = 0

    @property
    def listening_channels(self) -> frozenset[int]:
        return frozenset(self.tuned_channels)

    def begin(self, mt: MobileTransaction) -> None:
        if self.active_mt is not None and not self.active_mt.finished:
            raise ProtocolViolation(f"client {self.client_id} already runs {self.active_mt.txn_id}")
        self.active_mt = mt
        self.mts_started += 1
        self.mt_energy = EnergyMeter()
        self.mt_awake = 0.0
        self.mt_control = 0.0
        self.pending_reread = frozenset()
        self.index_views = {}
        self.flagged = frozenset()
        self.listen_marks = {}
        self.tuned_channels = set()


class ClientContext(TypingProtocol):
    """Engine services a client needs while applying actions."""

    def listen_control(self, client_id: int, channel: int) -> None: ...

    def listen_item(self, client_id: int, plan: ListenItem) -> None: ...

    def listen_continuous(self, client_id: int, channel: int, since: int) -> None: ...

    def stop_listening(self, client_id: int, channel: int | None = None) -> None: ...

    def send_validation(self, client_id: int, request: ValidationRequest) -> None: ...

    def trace(self, actor: str, event: str, **fields: object) -> None: ...


@dataclass(frozen=True)
class DriveResult:
    actions: list[ClientAction]
    sample: MtSample | None = None


# ---------------------------------------------------------------------------
# Query generation
# ---------------------------------------------------------------------------
def zipf_weights(n_items: int, theta: float) -> np.ndarray:
    weights = 1.0 / np.power(np.arange(1, n_items + 1, dtype=np.float64), theta)
    return weights / weights.sum()


def generate_mt(
    rng: np.random.Generator,
    config: SimConfig,
    *,
    txn_id: str,
    client_id: int,
    created_tick: int = 0,
    channel_zero: Sequence[int] | None = None,
) -> MobileTransaction:
    """Draw one MT: read set, optional write set, from the client's stream.

    Every draw happens whatever the configuration so that changing one
    workload knob does not shift the rest of the stream.
    """
    if config.rs_max > config.n_items:
        raise ConfigurationError("rs_max must not exceed n_items", fields=["rs_max"])
    size = int(rng.integers(config.rs_min, config.rs_max + 1))
    probabilities = None
    if config.access == "zipf":
        probabilities = zipf_weights(config.n_items, config.zipf_theta)
    drawn = rng.choice(config.n_items, size=size, replace=False, p=probabilities)
    write_coin = float(rng.random())
    write_draw = rng.random(size)

    if config.rs_position is not None:
        if channel_zero is None:
            raise ConfigurationError(
                "rs_position needs the channel 0 order", fields=["rs_position"]
            )
        read_set = frozenset({int(channel_zero[config.rs_position - 1])})
    else:
        read_set = frozenset(int(item_id) for item_id in drawn)

    write_items: frozenset[int] = frozenset()
    if write_coin < config.write_prob:
        ordered = sorted(read_set)
        n_writes = 1 + int(write_draw[0] * len(ordered)) % len(ordered)
        order = np.argsort(write_draw[: len(ordered)], kind="stable")
        write_items = frozenset(ordered[int(k)] for k in order[:n_writes])

    return MobileTransaction(
        txn_id=txn_id,
        client_id=client_id,
        read_set=read_set,
        write_items=write_items,
        created_tick=created_tick,
    )


# ---------------------------------------------------------------------------
# Driving an MT
# ---------------------------------------------------------------------------
def _charge(wc: WcState, activity: TickActivity, power: PowerModel) -> None:
    wc.energy = charge_energy(wc.energy, activity, power)
    wc.mt_energy = charge_energy(wc.mt_energy, activity, power)
    if activity.kind in (ActivityKind.LISTEN, ActivityKind.LISTEN_CHECK):
        wc.mt_awake += activity.ticks


def _charge_reception(wc: WcState, event: ClientEvent, power: PowerModel) -> None:
    if isinstance(event, IndexDecoded | MatrixDecoded):
        control = event.frame.control_length
        purpose = TunePurpose.INDEX if isinstance(event, IndexDecoded) else TunePurpose.MATRIX
        wc.tune_plan.add(
            TuneInterval(event.frame_start, event.frame_start + control, purpose, event.channel)
        )
        _charge(wc, TickActivity(ActivityKind.LISTEN, ticks=control), power)
        wc.mt_control += control * power.p_listen
    elif isinstance(event, ItemReceived) and event.continuous:
        mark = wc.listen_marks.get(event.channel, event.start)
        wc.tune_plan.add(TuneInterval(mark, event.tick, TunePurpose.CONTINUOUS, event.channel))
        _charge(wc, TickActivity(ActivityKind.LISTEN, ticks=event.tick - mark), power)
        wc.listen_marks[event.channel] = event.tick
    elif isinstance(event, ItemReceived):
        wc.tune_plan.add(
            TuneInterval(event.start, event.tick, TunePurpose.ITEM, event.channel, event.item_id)
        )
        _charge(wc, TickActivity(ActivityKind.LISTEN, ticks=event.tick - event.start), power)


def _validation_request(mt: MobileTransaction, client_id: int) -> ValidationRequest:
    reads = tuple(
        ReadRecord(item_id=item_id, value=obs.value, stamp=obs.update_cycle)
        for item_id, obs in sorted(mt.observed.items())
    )
    return ValidationRequest(
        txn_id=mt.txn_id,
        client_id=client_id,
        reads=reads,
        writes=tuple(mt.write_set.items()),
    )


def _sample(wc: WcState, mt: MobileTransaction, protocol: ProtocolId) -> MtSample:
    assert mt.committed_tick is not None
    return MtSample(
        client_id=wc.client_id,
        txn_id=mt.txn_id,
        protocol=protocol,
        created_tick=mt.created_tick,
        committed_tick=mt.committed_tick,
        rt=mt.committed_tick - mt.created_tick,
        pc_listen=wc.mt_energy.listen_units,
        pc_check=wc.mt_energy.check_units,
        pc_tx=wc.mt_energy.tx_units,
        pc_control=wc.mt_control,
        pc=wc.mt_energy.total,
        awake_ticks=wc.mt_awake,
        restarts=mt.restarts,
        rereads=mt.rereads,
        validations=mt.validations,
        checks=mt.checks,
        rs_size=len(mt.read_set),
        ws_size=len(mt.write_items),
        local=mt.committed_locally,
        reads=tuple(sorted((item_id, obs.value) for item_id, obs in mt.observed.items())),
        writes=tuple(sorted(mt.write_set.items())) if not mt.committed_locally else (),
    )


def drive_mt(
    wc: WcState,
    protocol: Protocol,
    event: ClientEvent,
    ctx: ClientContext,
    *,
    power: PowerModel | None = None,
) -> DriveResult:
    """Feed one event to the client's active MT and apply what it decides.

    Returns the actions taken and, when the MT committed, its sample.
    """
    power = power or PowerModel.from_config(protocol.config)
    mt = wc.active_mt
    if mt is None or mt.finished:
        raise ProtocolViolation(f"client {wc.client_id} has no active MT")
    if isinstance(event, ResultReceived) and (
        event.outcome.txn_id != mt.txn_id or mt.state is not TxnState.VALIDATING
    ):
        raise ProtocolViolation(f"RESULT for unknown txn {event.outcome.txn_id}")
    if (
        isinstance(event, IndexDecoded | MatrixDecoded | ItemReceived)
        and event.channel not in wc.tuned_channels
    ):
        raise ProtocolViolation(f"client {wc.client_id} is not tuned to channel {event.channel}")

    _charge_reception(wc, event, power)
    if isinstance(event, MtStarted):
        mt.transition(TxnState.LISTENING)
    elif isinstance(event, CycleStarted) and protocol.cyclic:
        wc.tuned_channels = set()

    actions = protocol.client_step(mt, wc, event)
    actor = f"wc{wc.client_id}"
    for action in actions:
        _apply(wc, mt, action, ctx, protocol, power, tick=event.tick, actor=actor)

    sample = None
    if mt.state is TxnState.COMMITTED:
        sample = _sample(wc, mt, protocol.id)
        ctx.stop_listening(wc.client_id)
        wc.tuned_channels = set()
        wc.listen_marks = {}
    return DriveResult(actions=actions, sample=sample)


def _apply(
    wc: WcState,
    mt: MobileTransaction,
    action: ClientAction,
    ctx: ClientContext,
    protocol: Protocol,
    power: PowerModel,
    *,
    tick: int,
    actor: str,
) -> None:
    match action:
        case Doze():
            pass
        case ListenIndex(channel=channel) | ListenMatrix(channel=channel):
            wc.tuned_channels.add(channel)
            ctx.listen_control(wc.client_id, channel)
            ctx.trace(actor, "TUNE", txn=mt.txn_id, channel=channel, purpose="control")
        case ListenItem():
            wc.tuned_channels.add(action.channel)
            ctx.listen_item(wc.client_id, action)
        case ListenContinuous(channel=channel):
            if protocol.config.single_tuner:
                for previous in sorted(wc.tuned_channels - {channel}):
                    ctx.stop_listening(wc.client_id, previous)
                    wc.listen_marks.pop(previous, None)
                wc.tuned_channels = set()
            wc.tuned_channels.add(channel)
            wc.listen_marks[channel] = tick
            ctx.listen_continuous(wc.client_id, channel, tick)
            ctx.trace(actor, "TUNE", txn=mt.txn_id, channel=channel, purpose="continuous")
        case Check(count=count):
            mt.checks += count
            _charge(wc, TickActivity(ActivityKind.LISTEN_CHECK, checks=count), power)
        case Observe(item_id=item_id, observation=observation):
            mt.observe(item_id, observation)
            ctx.trace(
                actor,
                "READ",
                txn=mt.txn_id,
                item=item_id,
                value=observation.value,
                stamp=observation.update_cycle,
                cycle=observation.read_cycle,
            )
            if mt.state is TxnState.REREADING:
                wc.pending_reread = wc.pending_reread - {item_id}
                if not wc.pending_reread:
                    mt.transition(TxnState.LISTENING)
        case RecordView(channel=channel, cycle=cycle, stamps=stamps):
            wc.index_views[channel] = IndexView(cycle=cycle, stamps=dict(stamps))
        case FlagStale(items=items):
            wc.flagged = wc.flagged | items
        case Forget(items=items):
            for item_id in items:
                mt.observed.pop(item_id, None)
        case CommitLocal(tick=commit_tick):
            if wc.listen_marks:
                # fresh clients stay awake through their decision checks
                _charge(wc, TickActivity(ActivityKind.LISTEN, ticks=commit_tick - tick), power)
            mt.committed_tick = commit_tick
            mt.committed_locally = True
            mt.transition(TxnState.COMMITTED)
            ctx.trace(actor, "COMMIT_LOCAL", txn=mt.txn_id, tick=commit_tick)
        case CommitConfirmed(tick=commit_tick):
            mt.committed_tick = commit_tick
            mt.transition(TxnState.COMMITTED)
        case SendValidation():
            request = _validation_request(mt, wc.client_id)
            mt.validations += 1
            mt.transition(TxnState.VALIDATING)
            _charge(wc, TickActivity(ActivityKind.BACKCHANNEL_TX, messages=1), power)
            ctx.stop_listening(wc.client_id)
            wc.tuned_channels = set()
            ctx.send_validation(wc.client_id, request)
            ctx.trace(actor, "VALIDATE_SENT", txn=mt.txn_id)
        case RereadPending(items=items):
            mt.transition(TxnState.REREADING)
            mt.rereads += 1
            wc.pending_reread = frozenset(items)
            ctx.trace(actor, "REREAD", txn=mt.txn_id, items=sorted(items))
        case AbortRestart():
            mt.observed.clear()
            mt.restarts += 1
            wc.flagged = frozenset()
            wc.pending_reread = frozenset()
            mt.transition(TxnState.LISTENING)
            if protocol.cyclic:
                ctx.stop_listening(wc.client_id)
                wc.tuned_channels = set()
            ctx.trace(actor, "RESTART", txn=mt.txn_id, restarts=mt.restarts)
