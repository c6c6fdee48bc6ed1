"""Wire codecs for the simulated fieldbus.

All multi-byte fields are little-endian.

Datagram header (10 bytes):
    command   u8    see Command
    index     u8    master-assigned sequence tag
    address   u32   positional/configured commands: low u16 position or
                    station, high u16 register offset; logical commands:
                    32-bit offset into the process image
    lenflags  u16   bits 0..10 payload byte count, bit 15 set when another
                    datagram follows in the same frame, other bits zero
    irq       u16   reserved, zero

A frame is the plain concatenation of datagrams. Each datagram on the wire
is header + payload + u16 working counter.

Cyclic process data images:
    servo RxPDO (14 bytes): controlword u16, target_position i32,
        target_velocity i32, mode_of_operation i8, pad u8, torque_offset i16
    servo TxPDO (14 bytes): statusword u16, position_actual i32,
        velocity_actual i32, torque_actual i16, mode_display i8, fault_code u8
    IO TxPDO / RxPDO (4 bytes): bitfield u8, 3 reserved zero bytes
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

HEADER_SIZE = 10
WKC_SIZE = 2
MAX_PAYLOAD = 1486

SERVO_PDO_SIZE = 14
IO_PDO_SIZE = 4

# Digital input bit assignment on the IO slave.
BIT_LIMIT_MIN = 0
BIT_LIMIT_MAX = 1
BIT_ESTOP = 2

_HEADER = struct.Struct("<BBIHH")
_WKC = struct.Struct("<H")
_SERVO_RX = struct.Struct("<HiibBh")
_SERVO_TX = struct.Struct("<HiihbB")
_IO = struct.Struct("<B3s")


class CodecError(Exception):
    """Base for wire encode/decode failures."""


class EncodeError(CodecError):
    pass


class DecodeError(CodecError):
    pass


class Command(enum.IntEnum):
    """Datagram command byte."""

    APRD = 0x01  # auto-increment positional read
    APWR = 0x02  # auto-increment positional write
    FPRD = 0x04  # configured-address read
    FPWR = 0x05  # configured-address write
    BRD = 0x07   # broadcast read
    LRD = 0x0A   # logical read
    LWR = 0x0B   # logical write
    LRW = 0x0C   # logical read-write


READ_COMMANDS = {Command.BRD, Command.APRD, Command.FPRD, Command.LRD}
WRITE_COMMANDS = {Command.APWR, Command.FPWR, Command.LWR}


def positional_address(position_or_station: int, register: int) -> int:
    """Pack a 16-bit position/station and 16-bit register offset into the
    32-bit address field."""
    return (position_or_station & 0xFFFF) | ((register & 0xFFFF) << 16)


def split_address(address: int) -> tuple[int, int]:
    """Inverse of :func:`positional_address`."""
    return address & 0xFFFF, (address >> 16) & 0xFFFF


@dataclass(frozen=True)
class DatagramHeader:
    command: Command
    index: int = 0
    address: int = 0
    length: int = 0
    more: bool = False

    def validate(self) -> None:
        if not 0 <= self.index <= 0xFF:
            raise EncodeError(f"index {self.index} outside 8-bit range")
        if not 0 <= self.address <= 0xFFFFFFFF:
            raise EncodeError(f"address {self.address:#x} outside 32-bit range")
        if not 0 <= self.length <= MAX_PAYLOAD:
            raise EncodeError(
                f"payload length {self.length} exceeds {MAX_PAYLOAD}")


@dataclass(frozen=True)
class Datagram:
    header: DatagramHeader
    payload: bytes = b""
    wkc: int = 0

    def validate(self) -> None:
        self.header.validate()
        if len(self.payload) != self.header.length:
            raise EncodeError(
                f"payload is {len(self.payload)} bytes, "
                f"header says {self.header.length}")
        if not 0 <= self.wkc <= 0xFFFF:
            raise EncodeError(f"wkc {self.wkc} outside 16-bit range")


def encode_datagram(d: Datagram) -> bytes:
    """Serialize one datagram to its wire bytes."""
    d.validate()
    lenflags = d.header.length | (0x8000 if d.header.more else 0)
    head = _HEADER.pack(d.header.command, d.header.index, d.header.address,
                        lenflags, 0)
    return head + d.payload + _WKC.pack(d.wkc)


def encode_frame(datagrams: list[Datagram]) -> bytes:
    """Serialize datagrams into one frame, fixing up the `more` flags."""
    if not datagrams:
        raise EncodeError("frame must contain at least one datagram")
    out = bytearray()
    last = len(datagrams) - 1
    for i, d in enumerate(datagrams):
        hdr = DatagramHeader(d.header.command, d.header.index,
                             d.header.address, d.header.length, more=i < last)
        out += encode_datagram(Datagram(hdr, d.payload, d.wkc))
    return bytes(out)


def decode_datagram(data: bytes, offset: int = 0) -> tuple[Datagram, int]:
    """Decode one datagram starting at `offset`; returns it and the offset
    just past its working counter."""
    if len(data) - offset < HEADER_SIZE:
        raise DecodeError(
            f"truncated header: {len(data) - offset} of {HEADER_SIZE} bytes")
    cmd, index, address, lenflags, _irq = _HEADER.unpack_from(data, offset)
    try:
        command = Command(cmd)
    except ValueError:
        raise DecodeError(f"unknown command byte {cmd:#04x}") from None
    length = lenflags & 0x07FF
    more = bool(lenflags & 0x8000)
    end = offset + HEADER_SIZE + length + WKC_SIZE
    if end > len(data):
        raise DecodeError(
            f"truncated datagram: need {end - offset} bytes from offset "
            f"{offset}, have {len(data) - offset}")
    payload = data[offset + HEADER_SIZE:offset + HEADER_SIZE + length]
    (wkc,) = _WKC.unpack_from(data, end - WKC_SIZE)
    header = DatagramHeader(command, index, address, length, more)
    return Datagram(header, bytes(payload), wkc), end


def decode_frame(data: bytes) -> list[Datagram]:
    """Decode a frame into its datagrams, honoring the `more` flag chain."""
    if not data:
        raise DecodeError("empty frame")
    datagrams: list[Datagram] = []
    offset = 0
    while True:
        d, offset = decode_datagram(data, offset)
        datagrams.append(d)
        if not d.header.more:
            break
        if offset >= len(data):
            raise DecodeError("`more` flag set on final datagram")
    if offset != len(data):
        raise DecodeError(
            f"{len(data) - offset} trailing bytes after last datagram")
    return datagrams


@dataclass(frozen=True)
class ServoRxPdo:
    """Cyclic command image, master to drive."""

    controlword: int = 0
    target_position: int = 0
    target_velocity: int = 0
    mode_of_operation: int = 0
    torque_offset: int = 0

    def pack(self) -> bytes:
        try:
            return _SERVO_RX.pack(self.controlword, self.target_position,
                                  self.target_velocity,
                                  self.mode_of_operation, 0,
                                  self.torque_offset)
        except struct.error as exc:
            raise EncodeError(f"servo RxPDO field out of range: {exc}") from None

    @classmethod
    def unpack(cls, data: bytes) -> "ServoRxPdo":
        if len(data) != SERVO_PDO_SIZE:
            raise DecodeError(
                f"servo RxPDO must be {SERVO_PDO_SIZE} bytes, got {len(data)}")
        cw, tp, tv, mode, pad, toff = _SERVO_RX.unpack(data)
        if pad != 0:
            raise DecodeError(f"servo RxPDO pad byte is {pad:#04x}, not zero")
        return cls(cw, tp, tv, mode, toff)


@dataclass(frozen=True)
class ServoTxPdo:
    """Cyclic status image, drive to master."""

    statusword: int = 0
    position_actual: int = 0
    velocity_actual: int = 0
    torque_actual: int = 0
    mode_display: int = 0
    fault_code: int = 0

    def pack(self) -> bytes:
        try:
            return _SERVO_TX.pack(self.statusword, self.position_actual,
                                  self.velocity_actual, self.torque_actual,
                                  self.mode_display, self.fault_code)
        except struct.error as exc:
            raise EncodeError(f"servo TxPDO field out of range: {exc}") from None

    @classmethod
    def unpack(cls, data: bytes) -> "ServoTxPdo":
        if len(data) != SERVO_PDO_SIZE:
            raise DecodeError(
                f"servo TxPDO must be {SERVO_PDO_SIZE} bytes, got {len(data)}")
        return cls(*_SERVO_TX.unpack(data))


def _pack_io(bits: int) -> bytes:
    if not 0 <= bits <= 0xFF:
        raise EncodeError(f"IO bitfield {bits} outside 8-bit range")
    return _IO.pack(bits, b"\x00\x00\x00")


def _unpack_io(data: bytes, what: str) -> int:
    if len(data) != IO_PDO_SIZE:
        raise DecodeError(f"{what} must be {IO_PDO_SIZE} bytes, got {len(data)}")
    bits, reserved = _IO.unpack(data)
    if reserved != b"\x00\x00\x00":
        raise DecodeError(f"{what} reserved bytes not zero: {reserved.hex()}")
    return bits


@dataclass(frozen=True)
class IoTxPdo:
    """Digital input image, IO slave to master.

    bit0 limit_min, bit1 limit_max, bit2 emergency_stop.
    """

    digital_inputs: int = 0

    def pack(self) -> bytes:
        return _pack_io(self.digital_inputs)

    @classmethod
    def unpack(cls, data: bytes) -> "IoTxPdo":
        return cls(_unpack_io(data, "IO TxPDO"))

    @property
    def limit_min(self) -> bool:
        return bool(self.digital_inputs & (1 << BIT_LIMIT_MIN))

    @property
    def limit_max(self) -> bool:
        return bool(self.digital_inputs & (1 << BIT_LIMIT_MAX))

    @property
    def emergency_stop(self) -> bool:
        return bool(self.digital_inputs & (1 << BIT_ESTOP))


@dataclass(frozen=True)
class IoRxPdo:
    """Digital output image, master to IO slave."""

    digital_outputs: int = 0

    def pack(self) -> bytes:
        return _pack_io(self.digital_outputs)

    @classmethod
    def unpack(cls, data: bytes) -> "IoRxPdo":
        return cls(_unpack_io(data, "IO RxPDO"))


def dump_frame(data: bytes) -> str:
    """Human-readable rendering of a hex frame, one block per datagram."""
    lines = []
    for i, d in enumerate(decode_frame(data)):
        adp, ado = split_address(d.header.address)
        lines.append(f"datagram {i}: {d.header.command.name}"
                     f" index={d.header.index}"
                     f" address={d.header.address:#010x}"
                     f" (adp={adp:#06x} ado={ado:#06x})"
                     f" len={d.header.length}"
                     f" more={str(d.header.more).lower()}"
                     f" wkc={d.wkc}")
        payload = d.payload.hex(" ") if d.payload else "(empty)"
        lines.append(f"  payload: {payload}")
    return "\n".join(lines)
