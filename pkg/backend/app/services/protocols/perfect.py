"""Perfect: the zero-overhead baseline. Clients know every frame and every
stamp for free and wake only for the payloads they need."""

from __future__ import annotations

from collections.abc import Iterable, Mapping

from app.models import ProtocolId
from app.services.frames import CycleFrame, MobileTransaction, TxnState
from app.services.protocols.base import (
    ClientAction,
    ClientEvent,
    ClientView,
    CommitConfirmed,
    CycleStarted,
    Forget,
    ItemReceived,
    ListenItem,
    MtStarted,
    Observe,
    Protocol,
    RecordView,
    RereadPending,
    ResultReceived,
    decide_from_views,
    observation_of,
    planned_items,
    still_needed,
    with_doze,
)


def perfect_oracle_plan(
    wanted: Iterable[int],
    frames: Mapping[int, CycleFrame],
    assignment: tuple[int, ...],
    *,
    frame_start: int,
    now: int,
) -> list[ListenItem]:
    """Wake exactly for the payload ticks of the wanted items still ahead."""
    plans: list[ListenItem] = []
    by_channel: dict[int, list[int]] = {}
    for item_id in sorted(wanted):
        by_channel.setdefault(assignment[item_id], []).append(item_id)
    for channel, items in sorted(by_channel.items()):
        frame = frames.get(channel)
        if frame is not None:
            plans.extend(planned_items(frame, frame_start, items, after=now))
    return sorted(plans, key=lambda plan: (plan.start, plan.channel))


class PerfectProtocol(Protocol):
    id = ProtocolId.PERFECT
    omniscient = True

    @property
    def header_units(self) -> int:
        return 0

    def control_overhead(self, n_items_in_cycle: int, n_database: int) -> int:
        return 0

    def _views(self, cycle: int, stamps: Mapping[int, int]) -> list[ClientAction]:
        per_channel: dict[int, dict[int, int]] = {}
        for item_id, stamp in stamps.items():
            per_channel.setdefault(self.assignment[item_id], {})[item_id] = stamp
        return [
            RecordView(channel=channel, cycle=cycle, stamps=view)
            for channel, view in sorted(per_channel.items())
        ]

    def client_step(
        self, mt: MobileTransaction, wc: ClientView, event: ClientEvent
    ) -> list[ClientAction]:
        if isinstance(event, ResultReceived):
            if event.outcome.committed:
                return [CommitConfirmed(tick=event.tick)]
            return [RereadPending(items=event.outcome.stale_items)]
        if mt.state not in (TxnState.LISTENING, TxnState.REREADING):
            return []
        if isinstance(event, MtStarted):
            if not event.frames:
                return []
            actions = self._views(event.cycle, event.stamps)
            plans = perfect_oracle_plan(
                mt.read_set,
                event.frames,
                self.assignment,
                frame_start=event.frame_start,
                now=event.tick,
            )
            return actions + with_doze(plans, event.tick)
        if isinstance(event, CycleStarted):
            actions = self._views(event.cycle, event.stamps)
            stale = frozenset(
                item_id
                for item_id, obs in mt.observed.items()
                if event.stamps.get(item_id, obs.update_cycle) != obs.update_cycle
            )
            if stale and mt.state is TxnState.LISTENING:
                actions.append(Forget(items=stale))
            if mt.state is TxnState.LISTENING:
                wanted = still_needed(mt, wc) | stale
            else:
                wanted = wc.pending_reread
            plans = perfect_oracle_plan(
                wanted, event.frames, self.assignment, frame_start=event.tick, now=event.tick
            )
            return actions + with_doze(plans, event.tick)
        if isinstance(event, ItemReceived):
            observation = observation_of(event)
            actions = [Observe(item_id=event.item_id, observation=observation)]
            if still_needed(mt, wc) - {event.item_id}:
                return actions
            observed = {**mt.observed, event.item_id: observation}
            decision = decide_from_views(mt, observed, wc, cycle=event.cycle, tick=event.tick)
            return actions + decision
        return []
