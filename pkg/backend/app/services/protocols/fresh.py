"""fresh: no index, updated items pushed at the next item boundary, clients
listen continuously and check every item header."""

from __future__ import annotations

from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass, field

from app.models import ProtocolId
from app.services.frames import DataItem, MobileTransaction, TxnState
from app.services.protocols.base import (
    AbortRestart,
    Check,
    ClientAction,
    ClientEvent,
    ClientView,
    CommitLocal,
    ItemReceived,
    ListenContinuous,
    MtStarted,
    Observe,
    Protocol,
    observation_of,
)
from app.services.server import CpDatabase


@dataclass
class FreshCursor:
    """Broadcast position of one fresh channel."""

    channel: int
    order: tuple[int, ...]
    position: int = 0
    pass_no: int = 0
    # Versions waiting for retransmission, in commit order
    pending: deque[DataItem] = field(default_factory=deque)

    @property
    def pass_done(self) -> bool:
        return self.position >= len(self.order)


@dataclass(frozen=True)
class FreshSegment:
    channel: int
    item_id: int
    value: int
    update_cycle: int
    header_units: int
    size: int
    fresh: bool

    @property
    def length(self) -> int:
        return self.header_units + self.size


def fresh_server_step(
    db: CpDatabase,
    cursor: FreshCursor,
    *,
    update: int | None = None,
    header_units: int = 1,
) -> FreshSegment | None:
    """Advance the fresh broadcaster of one channel.

    With ``update`` the just-committed version of the item joins the
    interrupt queue and nothing is sent yet. Otherwise, at an item boundary,
    the oldest queued version goes out first, then the cyclic sequence
    resumes with current values; ``None`` ends the pass.
    """
    if update is not None:
        cursor.pending.append(db.item(update))
        return None
    if cursor.pending:
        item = cursor.pending.popleft()
        fresh = True
    elif not cursor.pass_done:
        item = db.item(cursor.order[cursor.position])
        cursor.position += 1
        fresh = False
    else:
        return None
    return FreshSegment(
        channel=cursor.channel,
        item_id=item.id,
        value=item.value,
        update_cycle=item.last_updated_cycle,
        header_units=header_units,
        size=item.size,
        fresh=fresh,
    )


def start_pass(cursor: FreshCursor) -> None:
    cursor.position = 0
    cursor.pass_no += 1


class FreshProtocol(Protocol):
    id = ProtocolId.FRESH
    cyclic = False
    prioritizes = False

    def control_overhead(self, n_items_in_cycle: int, n_database: int) -> int:
        # Interrupt retransmissions are accounted as payload overhead
        return 0

    def cursors(self, groups: Sequence[Sequence[int]]) -> list[FreshCursor]:
        return [FreshCursor(channel=ch, order=tuple(group)) for ch, group in enumerate(groups)]

    def channels_for(self, mt: MobileTransaction) -> list[int]:
        channels = sorted({self.assignment[item_id] for item_id in mt.missing or mt.read_set})
        if self.config.single_tuner:
            return channels[:1]
        return channels

    def client_step(
        self, mt: MobileTransaction, wc: ClientView, event: ClientEvent
    ) -> list[ClientAction]:
        if isinstance(event, MtStarted):
            return [ListenContinuous(channel=channel) for channel in self.channels_for(mt)]
        if not isinstance(event, ItemReceived) or mt.state is not TxnState.LISTENING:
            return []

        actions: list[ClientAction] = [Check(count=1)]
        checks = mt.checks + 1
        observed = dict(mt.observed)
        if event.item_id in mt.read_set:
            previous = observed.get(event.item_id)
            observation = observation_of(event)
            if previous is not None and event.value > previous.value:
                actions.append(AbortRestart())
                observed = {}
            if previous is None or event.value > previous.value:
                actions.append(Observe(item_id=event.item_id, observation=observation))
                observed[event.item_id] = observation

        missing = mt.read_set - observed.keys()
        if not missing:
            actions.append(CommitLocal(tick=event.tick + checks * self.config.check_cost))
        elif self.config.single_tuner:
            channel = min(self.assignment[item_id] for item_id in missing)
            if channel not in wc.listening_channels:
                actions.append(ListenContinuous(channel=channel))
        return actions
