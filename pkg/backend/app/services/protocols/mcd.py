"""MCD: per-cycle air index, local commit of consistent read-only MTs,
backchannel validation otherwise, and partial re-read of rejected items."""

from __future__ import annotations

from app.models import ProtocolId
from app.services.frames import MobileTransaction, TxnState
from app.services.protocols.base import (
    ClientAction,
    ClientEvent,
    ClientView,
    CommitConfirmed,
    CycleStarted,
    IndexDecoded,
    ItemReceived,
    ListenIndex,
    Observe,
    Protocol,
    RecordView,
    RereadPending,
    ResultReceived,
    decide_from_views,
    observation_of,
    planned_items,
    still_needed,
    tuned_channels,
    with_doze,
)

ACTIVE = (TxnState.LISTENING, TxnState.REREADING)


class McdProtocol(Protocol):
    id = ProtocolId.MCD

    def control_overhead(self, n_items_in_cycle: int, n_database: int) -> int:
        return self.config.header_units + n_items_in_cycle * self.config.entry_units

    def client_step(
        self, mt: MobileTransaction, wc: ClientView, event: ClientEvent
    ) -> list[ClientAction]:
        if isinstance(event, ResultReceived):
            if event.outcome.committed:
                return [CommitConfirmed(tick=event.tick)]
            return [RereadPending(items=event.outcome.stale_items)]
        if mt.state not in ACTIVE:
            return []
        if isinstance(event, CycleStarted):
            # Listening keeps every read-set channel tuned so the decision has
            # this cycle's stamps; rereading only needs the stale items
            items = mt.read_set if mt.state is TxnState.LISTENING else wc.pending_reread
            channels = tuned_channels(
                items,
                self.assignment,
                single_tuner=self.config.single_tuner,
                cycle=event.cycle,
            )
            return [ListenIndex(channel=channel) for channel in channels]
        if isinstance(event, IndexDecoded):
            actions: list[ClientAction] = [
                RecordView(
                    channel=event.channel, cycle=event.frame.cycle, stamps=event.frame.stamps()
                )
            ]
            wanted = sorted(
                item_id
                for item_id in still_needed(mt, wc)
                if self.assignment[item_id] == event.channel
            )
            plans = planned_items(event.frame, event.frame_start, wanted, after=event.tick)
            actions.extend(with_doze(plans, event.tick))
            return actions
        if isinstance(event, ItemReceived):
            return self._on_item(mt, wc, event)
        return []

    def _on_item(
        self, mt: MobileTransaction, wc: ClientView, event: ItemReceived
    ) -> list[ClientAction]:
        observation = observation_of(event)
        actions: list[ClientAction] = [Observe(item_id=event.item_id, observation=observation)]
        remaining = still_needed(mt, wc) - {event.item_id}
        if remaining:
            return actions
        observed = {**mt.observed, event.item_id: observation}
        actions.extend(decide_from_views(mt, observed, wc, cycle=event.cycle, tick=event.tick))
        return actions
