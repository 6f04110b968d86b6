"""nxn: an n x n conflict matrix at the head of every cycle, a static
round-robin program instead of an index, and full restarts on conflict."""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np

from app.models import ProtocolId
from app.services.frames import MobileTransaction, Observation, TxnState
from app.services.protocols.base import (
    AbortRestart,
    ClientAction,
    ClientEvent,
    ClientView,
    CommitConfirmed,
    CommitLocal,
    CycleStarted,
    FlagStale,
    ItemReceived,
    ListenItem,
    ListenMatrix,
    MatrixDecoded,
    NxnMatrix,
    Observe,
    Protocol,
    ResultReceived,
    SendValidation,
    matrix_size_units,
    observation_of,
    planned_items,
    static_schedule,
    tuned_channels,
    with_doze,
)
from app.services.server import CpDatabase


def nxn_build_matrix(
    db: CpDatabase, cycle: int, *, cell_bits: int = 1, unit_bits: int = 32
) -> NxnMatrix:
    """Cell (i, j) is set when item i was updated after item j last went out.

    Stamps and dissemination cycles are read before ``cycle`` is recorded,
    so the matrix describes the database as the cycle begins. The diagonal
    is always clear.
    """
    n = len(db.items)
    updated = np.array([db.item(i).last_updated_cycle for i in range(n)], dtype=np.int64)
    disseminated = np.array(
        [min(db.item(i).last_disseminated_cycle, cycle - 1) for i in range(n)], dtype=np.int64
    )
    cells = updated[:, None] > disseminated[None, :]
    np.fill_diagonal(cells, False)
    rows, cols = np.nonzero(cells)
    return NxnMatrix(
        n=n,
        cells=frozenset(zip(rows.tolist(), cols.tolist(), strict=True)),
        last_disseminated=tuple(disseminated.tolist()),
        size_units=matrix_size_units(n, cell_bits=cell_bits, unit_bits=unit_bits),
    )


def nxn_flagged(matrix: NxnMatrix, observed: Mapping[int, Observation]) -> frozenset[int]:
    """Observed items the matrix shows as updated after they were read."""
    flagged: set[int] = set()
    for item_id, observation in observed.items():
        for j in range(matrix.n):
            if (
                j != item_id
                and matrix.cell(item_id, j)
                and matrix.last_disseminated[j] >= observation.read_cycle
            ):
                flagged.add(item_id)
                break
    return frozenset(flagged)


def nxn_client_decide(
    matrix: NxnMatrix, mt: MobileTransaction, *, flagged: frozenset[int] = frozenset()
) -> bool:
    """True to commit, False to abort and restart the whole MT."""
    return not ((flagged | nxn_flagged(matrix, mt.observed)) & mt.observed.keys())


class NxnProtocol(Protocol):
    id = ProtocolId.NXN
    prioritizes = False

    def control_overhead(self, n_items_in_cycle: int, n_database: int) -> int:
        return self.config.header_units + matrix_size_units(
            n_database, cell_bits=self.config.cell_bits, unit_bits=self.config.unit_bits
        )

    def schedule_cycle(
        self, db: CpDatabase, groups: Sequence[Sequence[int]], cycle: int
    ) -> dict[int, list[int]]:
        return static_schedule(groups)

    def matrix_for(self, db: CpDatabase, cycle: int) -> NxnMatrix:
        return nxn_build_matrix(
            db, cycle, cell_bits=self.config.cell_bits, unit_bits=self.config.unit_bits
        )

    def client_step(
        self, mt: MobileTransaction, wc: ClientView, event: ClientEvent
    ) -> list[ClientAction]:
        if isinstance(event, ResultReceived):
            if event.outcome.committed:
                return [CommitConfirmed(tick=event.tick)]
            return [AbortRestart()]
        if mt.state is not TxnState.LISTENING:
            return []
        if isinstance(event, CycleStarted):
            channels = tuned_channels(
                mt.read_set,
                self.assignment,
                single_tuner=self.config.single_tuner,
                cycle=event.cycle,
            )
            if not channels:
                return []
            actions: list[ClientAction] = [ListenMatrix(channel=channels[0])]
            plans: list[ListenItem] = []
            for channel in channels:
                frame = event.frames.get(channel)
                if frame is None:
                    continue
                wanted = sorted(i for i in mt.missing if self.assignment[i] == channel)
                plans.extend(planned_items(frame, event.tick, wanted, after=event.tick))
            actions.extend(with_doze(sorted(plans, key=lambda plan: plan.start), event.tick))
            return actions
        if isinstance(event, MatrixDecoded):
            flagged = nxn_flagged(event.matrix, mt.observed)
            return [FlagStale(items=flagged)] if flagged else []
        if isinstance(event, ItemReceived):
            observation = observation_of(event)
            actions = [Observe(item_id=event.item_id, observation=observation)]
            if mt.missing - {event.item_id}:
                return actions
            if wc.flagged & mt.observed.keys():
                actions.append(AbortRestart())
            elif mt.read_only:
                actions.append(CommitLocal(tick=event.tick))
            else:
                actions.append(SendValidation())
            return actions
        return []
