"""Simulated slave ring: servo drives, a digital-IO slave, and the bus.

Each slave owns a small register space for bring-up (station address,
application-layer state, identity) plus a logical mapping for cyclic process
data. ``bus_cycle`` pushes a frame through the ring in order and applies
the working-counter rules: a successful read adds 1, a pure write adds 1,
and the write half of a read-write command adds 2 (so a slave handling both
halves of an LRW adds 3).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .codec import (
    BIT_ESTOP,
    BIT_LIMIT_MAX,
    BIT_LIMIT_MIN,
    Command,
    Datagram,
    IoRxPdo,
    IoTxPdo,
    ServoRxPdo,
    ServoTxPdo,
    split_address,
)

# Register offsets (u16 unless noted).
REG_TYPE = 0x0000
REG_STATION = 0x0010
REG_AL_CONTROL = 0x0120
REG_AL_STATUS = 0x0130
REG_VENDOR = 0x0E00   # u32
REG_PRODUCT = 0x0E04  # u32
REG_RX_BYTES = 0x0E08
REG_TX_BYTES = 0x0E0A
REG_SPACE = 0x1000

VENDOR_SERVO = 0x000000FB
PRODUCT_SERVO = 0x00010001
VENDOR_IO = 0x0000079A
PRODUCT_IO = 0x00020001

MODE_NONE = 0
MODE_CSV = 9  # cyclic synchronous velocity

FAULT_NONE = 0x00
FAULT_BAD_MODE = 0x01

CW_DISABLE_VOLTAGE = 0x00
CW_SHUTDOWN = 0x06
CW_SWITCH_ON = 0x07
CW_ENABLE_OPERATION = 0x0F
CW_FAULT_RESET_BIT = 0x80


class SlaveError(Exception):
    pass


class AlState(enum.IntEnum):
    INIT = 1
    PREOP = 2
    SAFEOP = 4
    OP = 8


_AL_ORDER = [AlState.INIT, AlState.PREOP, AlState.SAFEOP, AlState.OP]


class Cia402State(enum.Enum):
    SWITCH_ON_DISABLED = "SwitchOnDisabled"
    READY_TO_SWITCH_ON = "ReadyToSwitchOn"
    SWITCHED_ON = "SwitchedOn"
    OPERATION_ENABLED = "OperationEnabled"
    FAULT = "Fault"


STATUSWORD = {
    Cia402State.SWITCH_ON_DISABLED: 0x0040,
    Cia402State.READY_TO_SWITCH_ON: 0x0021,
    Cia402State.SWITCHED_ON: 0x0023,
    Cia402State.OPERATION_ENABLED: 0x0027,
    Cia402State.FAULT: 0x0008,
}

# Power-path rank used for one-step-up promotion.
_POWER_RANK = {
    Cia402State.SWITCH_ON_DISABLED: 0,
    Cia402State.READY_TO_SWITCH_ON: 1,
    Cia402State.SWITCHED_ON: 2,
    Cia402State.OPERATION_ENABLED: 3,
}
_POWER_PATH = [Cia402State.SWITCH_ON_DISABLED, Cia402State.READY_TO_SWITCH_ON,
               Cia402State.SWITCHED_ON, Cia402State.OPERATION_ENABLED]

# Controlword command nibble -> requested power state.
_CW_TARGET = {
    CW_DISABLE_VOLTAGE: Cia402State.SWITCH_ON_DISABLED,
    CW_SHUTDOWN: Cia402State.READY_TO_SWITCH_ON,
    CW_SWITCH_ON: Cia402State.SWITCHED_ON,
    CW_ENABLE_OPERATION: Cia402State.OPERATION_ENABLED,
}


def cia402_next(state: Cia402State, controlword: int) -> Cia402State:
    """One drive-profile transition for a controlword seen this cycle.

    Upward moves advance one state per cycle; downward moves (and disable)
    take effect immediately. A fault is left only through the reset bit.
    """
    if state is Cia402State.FAULT:
        if controlword & CW_FAULT_RESET_BIT:
            return Cia402State.SWITCH_ON_DISABLED
        return state
    target = _CW_TARGET.get(controlword & 0x0F)
    if target is None:
        return state
    cur = _POWER_RANK[state]
    tgt = _POWER_RANK[target]
    if tgt > cur:
        return _POWER_PATH[cur + 1]
    return target


class IoBit(enum.IntEnum):
    LIMIT_MIN = BIT_LIMIT_MIN
    LIMIT_MAX = BIT_LIMIT_MAX
    EMERGENCY_STOP = BIT_ESTOP


class SimSlave:
    """Common register space, AL state machine, and logical mapping."""

    rx_pdo_bytes = 0
    tx_pdo_bytes = 0
    vendor_id = 0
    product_code = 0

    def __init__(self) -> None:
        self.station_address = 0
        self.online = True
        self.refuse_states: set[AlState] = set()
        self.rx_logical: tuple[int, int] | None = None  # (offset, length)
        self.tx_logical: tuple[int, int] | None = None
        self._regs = bytearray(REG_SPACE)
        self._al_state = AlState.INIT
        self._poke_u16(REG_AL_STATUS, self._al_state)
        self._poke_u32(REG_VENDOR, self.vendor_id)
        self._poke_u32(REG_PRODUCT, self.product_code)
        self._poke_u16(REG_RX_BYTES, self.rx_pdo_bytes)
        self._poke_u16(REG_TX_BYTES, self.tx_pdo_bytes)

    @property
    def al_state(self) -> AlState:
        return self._al_state

    @al_state.setter
    def al_state(self, value: AlState) -> None:
        self._al_state = AlState(value)
        self._poke_u16(REG_AL_STATUS, self._al_state)

    def _poke_u16(self, offset: int, value: int) -> None:
        self._regs[offset:offset + 2] = int(value).to_bytes(2, "little")

    def _poke_u32(self, offset: int, value: int) -> None:
        self._regs[offset:offset + 4] = int(value).to_bytes(4, "little")

    def read_reg(self, offset: int, length: int) -> bytes:
        if offset < 0 or offset + length > REG_SPACE:
            raise SlaveError(f"register read [{offset:#x}, +{length}) out of range")
        return bytes(self._regs[offset:offset + length])

    def write_reg(self, offset: int, data: bytes) -> None:
        if offset < 0 or offset + len(data) > REG_SPACE:
            raise SlaveError(f"register write [{offset:#x}, +{len(data)}) out of range")
        self._regs[offset:offset + len(data)] = data
        if offset <= REG_STATION < offset + len(data):
            self.station_address = int.from_bytes(
                self._regs[REG_STATION:REG_STATION + 2], "little")
        if offset <= REG_AL_CONTROL < offset + len(data):
            self._handle_al_request()

    def _handle_al_request(self) -> None:
        raw = int.from_bytes(self._regs[REG_AL_CONTROL:REG_AL_CONTROL + 2],
                             "little") & 0x0F
        try:
            target = AlState(raw)
        except ValueError:
            return  # malformed request, status unchanged
        if target in self.refuse_states:
            return
        if target == self._al_state or target == AlState.INIT:
            self.al_state = target
            return
        step = abs(_AL_ORDER.index(target) - _AL_ORDER.index(self._al_state))
        if step == 1:
            self.al_state = target
        # non-adjacent requests are refused: status register unchanged

    def configure_logical(self, rx_offset: int, tx_offset: int) -> None:
        """Install the cyclic mapping assigned by the master's domain."""
        self.rx_logical = (rx_offset, self.rx_pdo_bytes)
        self.tx_logical = (tx_offset, self.tx_pdo_bytes)

    # Cyclic data hooks, overridden by concrete slaves.
    def consume_outputs(self, data: bytes, dt: float) -> None:
        raise NotImplementedError

    def produce_inputs(self) -> bytes:
        raise NotImplementedError


class ServoDrive(SimSlave):
    """Servo drive with the velocity-mode subset of the drive profile.

    Position is the exact discrete integral of the commanded velocity while
    the power stage is enabled; there is no acceleration model.
    """

    rx_pdo_bytes = 14
    tx_pdo_bytes = 14
    vendor_id = VENDOR_SERVO
    product_code = PRODUCT_SERVO

    def __init__(self) -> None:
        super().__init__()
        self.cia402_state = Cia402State.SWITCH_ON_DISABLED
        self.position = 0
        self.velocity = 0
        self.fault_code = FAULT_NONE
        self.mode_display = MODE_NONE
        self.torque_actual = 0

    def produce_tx(self) -> ServoTxPdo:
        return ServoTxPdo(
            statusword=STATUSWORD[self.cia402_state],
            position_actual=_clip_i32(self.position),
            velocity_actual=self.velocity,
            torque_actual=self.torque_actual,
            mode_display=self.mode_display,
            fault_code=self.fault_code,
        )

    def consume_outputs(self, data: bytes, dt: float) -> None:
        servo_step(self, ServoRxPdo.unpack(data), dt)

    def produce_inputs(self) -> bytes:
        return self.produce_tx().pack()


def _clip_i32(value: int) -> int:
    """Wrap the 64-bit integrator into the 32-bit feedback field."""
    v = value & 0xFFFFFFFF
    return v - 0x100000000 if v >= 0x80000000 else v


def servo_step(drive: ServoDrive, rx: ServoRxPdo, dt: float) -> ServoTxPdo:
    """Apply one cycle's command image to a drive and return its status."""
    if dt <= 0:
        raise SlaveError(f"dt must be positive, got {dt}")
    prev = drive.cia402_state
    drive.cia402_state = cia402_next(prev, rx.controlword)
    if drive.cia402_state is not Cia402State.FAULT and prev is Cia402State.FAULT:
        drive.fault_code = FAULT_NONE
    if drive.cia402_state is Cia402State.OPERATION_ENABLED:
        if rx.mode_of_operation == MODE_CSV:
            drive.mode_display = MODE_CSV
            drive.velocity = rx.target_velocity
            drive.position += round(drive.velocity * dt)
        elif rx.mode_of_operation == MODE_NONE:
            drive.mode_display = MODE_NONE
            drive.velocity = 0
        else:
            drive.cia402_state = Cia402State.FAULT
            drive.fault_code = FAULT_BAD_MODE
            drive.velocity = 0
    else:
        drive.velocity = 0
    return drive.produce_tx()


class DigitalIoSlave(SimSlave):
    """Digital-IO slave carrying the limit switches and the emergency stop."""

    rx_pdo_bytes = 4
    tx_pdo_bytes = 4
    vendor_id = VENDOR_IO
    product_code = PRODUCT_IO

    def __init__(self) -> None:
        super().__init__()
        self.input_bits = 0
        self.outputs = IoRxPdo()

    @property
    def inputs(self) -> IoTxPdo:
        return IoTxPdo(self.input_bits)

    def consume_outputs(self, data: bytes, dt: float) -> None:
        io_step(self, IoRxPdo.unpack(data))

    def produce_inputs(self) -> bytes:
        return self.inputs.pack()


def io_step(slave: DigitalIoSlave, rx: IoRxPdo) -> IoTxPdo:
    """Latch the output image and report the current inputs."""
    slave.outputs = rx
    return slave.inputs


def inject_input(slave: DigitalIoSlave, bit: IoBit | str, value: bool) -> None:
    """Test/operator stimulus: force one digital input bit."""
    if isinstance(bit, str):
        try:
            bit = IoBit[bit.upper()]
        except KeyError:
            raise SlaveError(f"unknown input bit {bit!r}") from None
    if not isinstance(bit, IoBit):
        raise SlaveError(f"unknown input bit {bit!r}")
    if value:
        slave.input_bits |= 1 << bit
    else:
        slave.input_bits &= ~(1 << bit)


class BusTopology:
    """The slave ring in wiring order."""

    def __init__(self, slaves: list[SimSlave], per_hop_latency_ns: int = 0,
                 cycle_dt_s: float = 0.001) -> None:
        if cycle_dt_s <= 0:
            raise SlaveError("cycle_dt_s must be positive")
        self.slaves = list(slaves)
        self.per_hop_latency_ns = per_hop_latency_ns
        self.cycle_dt_s = cycle_dt_s

    def __len__(self) -> int:
        return len(self.slaves)

    def round_trip_ns(self) -> int:
        """Simulated propagation for one full ring traversal and back."""
        return 2 * self.per_hop_latency_ns * len(self.slaves)


def _contained(inner: tuple[int, int], start: int, length: int) -> bool:
    off, n = inner
    return n > 0 and off >= start and off + n <= start + length


def _process_logical(slave: SimSlave, payload: bytearray, start: int,
                     length: int, read: bool, write: bool, dt: float) -> int:
    """Apply the logical halves a slave is mapped into; returns wkc delta."""
    wkc = 0
    if write and slave.al_state == AlState.OP and slave.rx_logical \
            and _contained(slave.rx_logical, start, length):
        off, n = slave.rx_logical
        rel = off - start
        slave.consume_outputs(bytes(payload[rel:rel + n]), dt)
        wkc += 2 if read else 1
    if read and slave.al_state in (AlState.SAFEOP, AlState.OP) \
            and slave.tx_logical and _contained(slave.tx_logical, start, length):
        off, n = slave.tx_logical
        rel = off - start
        payload[rel:rel + n] = slave.produce_inputs()
        wkc += 1
    return wkc


def bus_cycle(frame: list[Datagram], topology: BusTopology) -> list[Datagram]:
    """Run one frame through the ring and return the updated datagrams.

    Slaves that are offline, unaddressed, or gated by their AL state simply
    leave the working counter untouched; the master detects shortfalls by
    comparing the returned wkc to its expectation.
    """
    out: list[Datagram] = []
    dt = topology.cycle_dt_s
    for d in frame:
        d.validate()
        payload = bytearray(d.payload)
        wkc = d.wkc
        cmd = d.header.command
        adp, ado = split_address(d.header.address)
        for position, slave in enumerate(topology.slaves):
            if not slave.online:
                continue
            if cmd == Command.BRD:
                data = slave.read_reg(ado, len(payload))
                for i, b in enumerate(data):
                    payload[i] |= b
                wkc += 1
            elif cmd in (Command.APRD, Command.APWR):
                if (adp + position) & 0xFFFF != 0:
                    continue
                if cmd == Command.APRD:
                    payload[:] = slave.read_reg(ado, len(payload))
                else:
                    slave.write_reg(ado, bytes(payload))
                wkc += 1
            elif cmd in (Command.FPRD, Command.FPWR):
                if slave.station_address != adp:
                    continue
                if cmd == Command.FPRD:
                    payload[:] = slave.read_reg(ado, len(payload))
                else:
                    slave.write_reg(ado, bytes(payload))
                wkc += 1
            elif cmd == Command.LRD:
                wkc += _process_logical(slave, payload, d.header.address,
                                        d.header.length, True, False, dt)
            elif cmd == Command.LWR:
                wkc += _process_logical(slave, payload, d.header.address,
                                        d.header.length, False, True, dt)
            elif cmd == Command.LRW:
                wkc += _process_logical(slave, payload, d.header.address,
                                        d.header.length, True, True, dt)
        out.append(Datagram(d.header, bytes(payload), wkc & 0xFFFF))
    return out
