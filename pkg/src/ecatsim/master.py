"""The fieldbus master: ring scan, process-data domain, bring-up, exchange.

One logical domain aggregates every slave's cyclic data into a single byte
image, exchanged with one logical read-write datagram per cycle. Working
counter mismatches never raise inside the cyclic path; they surface as a
``degraded`` flag for the control layer to act on.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .codec import (
    Command,
    Datagram,
    DatagramHeader,
    positional_address,
)
from .slaves import (
    AlState,
    BusTopology,
    REG_AL_CONTROL,
    REG_AL_STATUS,
    REG_STATION,
    REG_VENDOR,
    bus_cycle,
)

BASE_STATION_ADDRESS = 0x1000

_AL_ORDER = [AlState.INIT, AlState.PREOP, AlState.SAFEOP, AlState.OP]


class MasterError(Exception):
    pass


class BusScanError(MasterError):
    pass


class AlTransitionError(MasterError):
    pass


class MasterPhase(enum.Enum):
    IDLE = "Idle"
    SCANNED = "Scanned"
    CONFIGURED = "Configured"
    OPERATIONAL = "Operational"


@dataclass
class SlaveInfo:
    ring_position: int
    station_address: int
    vendor_id: int
    product_code: int
    al_state: AlState
    rx_bytes: int
    tx_bytes: int


@dataclass(frozen=True)
class DomainEntry:
    ring_position: int
    direction: str  # "out" (master->slave) or "in" (slave->master)
    offset: int
    length: int


@dataclass
class ExchangeResult:
    wkc: int
    degraded: bool


class Domain:
    """Contiguous process image plus the offset table describing it."""

    def __init__(self, entries: list[DomainEntry], expected_wkc: int) -> None:
        self.entries = entries
        self.total_size = sum(e.length for e in entries)
        self.expected_wkc = expected_wkc
        self.image = bytearray(self.total_size)
        self.last_wkc = 0
        self._index = {(e.ring_position, e.direction): e for e in entries}

    def entry(self, ring_position: int, direction: str) -> DomainEntry:
        return self._index[(ring_position, direction)]

    def output_view(self, ring_position: int) -> memoryview:
        e = self.entry(ring_position, "out")
        return memoryview(self.image)[e.offset:e.offset + e.length]

    def input_view(self, ring_position: int) -> memoryview:
        e = self.entry(ring_position, "in")
        return memoryview(self.image)[e.offset:e.offset + e.length]

    def dump_layout(self) -> str:
        lines = [f"domain: {self.total_size} bytes, expected wkc {self.expected_wkc}"]
        for e in self.entries:
            lines.append(f"  slave {e.ring_position} {e.direction:>3}: "
                         f"offset {e.offset:3d} length {e.length}")
        return "\n".join(lines)


class Master:
    def __init__(self, topology: BusTopology) -> None:
        self.topology = topology
        self.phase = MasterPhase.IDLE
        self.cycle_counter = 0
        self.degraded = False
        self.slaves: list[SlaveInfo] = []
        self.domain: Domain | None = None
        self._index = 0
        self._al_level = AlState.INIT

    # -- plumbing ---------------------------------------------------------

    def _next_index(self) -> int:
        self._index = (self._index + 1) & 0xFF
        return self._index

    def _roundtrip(self, command: Command, address: int,
                   payload: bytes) -> Datagram:
        header = DatagramHeader(command, self._next_index(), address,
                                len(payload))
        [reply] = bus_cycle([Datagram(header, payload)], self.topology)
        return reply

    def _reg_read(self, position: int, register: int, length: int) -> bytes:
        reply = self._roundtrip(
            Command.APRD, positional_address((-position) & 0xFFFF, register),
            bytes(length))
        if reply.wkc != 1:
            raise BusScanError(
                f"slave at ring position {position} did not answer register "
                f"read {register:#06x} (wkc {reply.wkc})")
        return reply.payload

    def _reg_write(self, position: int, register: int, data: bytes) -> None:
        reply = self._roundtrip(
            Command.APWR, positional_address((-position) & 0xFFFF, register),
            data)
        if reply.wkc != 1:
            raise BusScanError(
                f"slave at ring position {position} did not accept register "
                f"write {register:#06x} (wkc {reply.wkc})")

    # -- bring-up ---------------------------------------------------------

    def scan_bus(self) -> list[SlaveInfo]:
        """Count the ring, assign station addresses, and read identities."""
        reply = self._roundtrip(Command.BRD, positional_address(0, REG_VENDOR),
                                bytes(2))
        count = reply.wkc
        if count == 0:
            raise BusScanError("no slaves responded on the bus")
        slaves = []
        for position in range(count):
            station = BASE_STATION_ADDRESS + position
            self._reg_write(position, REG_STATION,
                            station.to_bytes(2, "little"))
            ident = self._reg_read(position, REG_VENDOR, 12)
            al = int.from_bytes(self._reg_read(position, REG_AL_STATUS, 2),
                                "little") & 0x0F
            slaves.append(SlaveInfo(
                ring_position=position,
                station_address=station,
                vendor_id=int.from_bytes(ident[0:4], "little"),
                product_code=int.from_bytes(ident[4:8], "little"),
                al_state=AlState(al),
                rx_bytes=int.from_bytes(ident[8:10], "little"),
                tx_bytes=int.from_bytes(ident[10:12], "little"),
            ))
        self.slaves = slaves
        if self.phase == MasterPhase.IDLE:
            self.phase = MasterPhase.SCANNED
        return slaves

    def build_domain(self) -> Domain:
        """Pack every slave's cyclic data, outputs then inputs, in ring order."""
        if not self.slaves:
            raise MasterError("scan the bus before building the domain")
        entries = []
        offset = 0
        pdo_slaves = 0
        for info in self.slaves:
            if info.rx_bytes == 0 and info.tx_bytes == 0:
                continue
            pdo_slaves += 1
            entries.append(DomainEntry(info.ring_position, "out", offset,
                                       info.rx_bytes))
            offset += info.rx_bytes
            entries.append(DomainEntry(info.ring_position, "in", offset,
                                       info.tx_bytes))
            offset += info.tx_bytes
        self.domain = Domain(entries, expected_wkc=3 * pdo_slaves)
        return self.domain

    def configure_mappings(self) -> None:
        """Install the domain's offsets into the slaves' cyclic mapping units."""
        if self.domain is None:
            raise MasterError("build the domain before configuring mappings")
        for info in self.slaves:
            slave = self.topology.slaves[info.ring_position]
            out = self.domain.entry(info.ring_position, "out")
            inp = self.domain.entry(info.ring_position, "in")
            slave.configure_logical(out.offset, inp.offset)
        self.phase = MasterPhase.CONFIGURED

    def request_al_state(self, target: AlState) -> None:
        """Move every slave to `target`; only stepwise-up or any-to-INIT."""
        if not self.slaves:
            raise MasterError("scan the bus before AL transitions")
        if target != AlState.INIT:
            step = _AL_ORDER.index(target) - _AL_ORDER.index(self._al_level)
            if step > 1:
                raise AlTransitionError(
                    f"cannot skip from {self._al_level.name} to {target.name}")
        for info in self.slaves:
            reply = self._roundtrip(
                Command.FPWR,
                positional_address(info.station_address, REG_AL_CONTROL),
                int(target).to_bytes(2, "little"))
            if reply.wkc != 1:
                raise AlTransitionError(
                    f"slave at ring position {info.ring_position} did not "
                    f"acknowledge AL request {target.name}")
            status = self._roundtrip(
                Command.FPRD,
                positional_address(info.station_address, REG_AL_STATUS),
                bytes(2))
            got = int.from_bytes(status.payload, "little") & 0x0F
            if got != target:
                raise AlTransitionError(
                    f"slave at ring position {info.ring_position} refused "
                    f"{target.name}, reports {AlState(got).name}")
            info.al_state = target
        self._al_level = target
        if target == AlState.OP:
            self.phase = MasterPhase.OPERATIONAL
        elif self.phase == MasterPhase.OPERATIONAL:
            self.phase = MasterPhase.CONFIGURED

    def bring_up(self) -> Domain:
        """Full bring-up: scan, map, and walk the ring to OP."""
        self.scan_bus()
        self.build_domain()
        self.configure_mappings()
        for state in (AlState.PREOP, AlState.SAFEOP, AlState.OP):
            self.request_al_state(state)
        return self.domain

    # -- cyclic path ------------------------------------------------------

    def exchange(self, domain: Domain | None = None) -> ExchangeResult:
        """One cyclic logical read-write over the whole process image."""
        domain = domain or self.domain
        if domain is None:
            raise MasterError("no domain to exchange")
        if self._al_level not in (AlState.SAFEOP, AlState.OP):
            raise MasterError(
                f"exchange requires SAFEOP or OP, bus is {self._al_level.name}")
        header = DatagramHeader(Command.LRW, self._next_index(), 0,
                                domain.total_size)
        [reply] = bus_cycle([Datagram(header, bytes(domain.image))],
                            self.topology)
        domain.image[:] = reply.payload
        domain.last_wkc = reply.wkc
        degraded = reply.wkc != domain.expected_wkc
        self.degraded = degraded
        self.cycle_counter += 1
        return ExchangeResult(reply.wkc, degraded)
