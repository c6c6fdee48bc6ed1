"""Multi-axis velocity control and the setpoint handoff between contexts.

The input side (script player, jog terminal) pushes setpoints into a
latest-wins mailbox; the cyclic side polls it without blocking, walks each
drive up the enable ladder, and applies the safety reactions from the IO
slave's inputs and the bus health flag.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from .codec import IoTxPdo, ServoRxPdo, ServoTxPdo
from .slaves import (
    CW_DISABLE_VOLTAGE,
    CW_ENABLE_OPERATION,
    CW_FAULT_RESET_BIT,
    CW_SHUTDOWN,
    CW_SWITCH_ON,
    Cia402State,
    MODE_CSV,
)

DEFAULT_V_MAX = 50_000  # counts/s

# Statusword state-bit mask and the values it selects (bits 0-3, 5, 6).
_SW_MASK = 0x006F
_SW_STATES = {
    0x0040: Cia402State.SWITCH_ON_DISABLED,
    0x0021: Cia402State.READY_TO_SWITCH_ON,
    0x0023: Cia402State.SWITCHED_ON,
    0x0027: Cia402State.OPERATION_ENABLED,
    0x0008: Cia402State.FAULT,
}

_LADDER = {
    Cia402State.SWITCH_ON_DISABLED: CW_SHUTDOWN,
    Cia402State.READY_TO_SWITCH_ON: CW_SWITCH_ON,
    Cia402State.SWITCHED_ON: CW_ENABLE_OPERATION,
    Cia402State.OPERATION_ENABLED: CW_ENABLE_OPERATION,
    Cia402State.FAULT: CW_FAULT_RESET_BIT,
}


class ControlError(Exception):
    pass


class EnableTimeout(ControlError):
    """Raised when drives fail to reach OperationEnabled in time."""

    def __init__(self, stuck: list[tuple[int, int]]) -> None:
        self.stuck = stuck
        detail = ", ".join(f"axis {a} statusword {sw:#06x}" for a, sw in stuck)
        super().__init__(f"enable sequence timed out: {detail}")


def state_from_statusword(statusword: int) -> Cia402State | None:
    return _SW_STATES.get(statusword & _SW_MASK)


@dataclass(frozen=True)
class AxisSetpoint:
    axis: int
    target_velocity: int
    timestamp: float = 0.0
    clamped: bool = False


@dataclass(frozen=True)
class SafetyStatus:
    e_stop: bool = False
    limit_min: bool = False
    limit_max: bool = False
    degraded_comm: bool = False

    @classmethod
    def from_io(cls, inputs: IoTxPdo, degraded: bool) -> "SafetyStatus":
        return cls(e_stop=inputs.emergency_stop,
                   limit_min=inputs.limit_min,
                   limit_max=inputs.limit_max,
                   degraded_comm=degraded)

    @property
    def motion_inhibited(self) -> bool:
        return self.e_stop or self.degraded_comm


class SetpointMailbox:
    """One latest-wins slot per axis.

    Single producer, single consumer. A push replaces the whole slot with a
    freshly built immutable setpoint, so the cyclic reader can never observe
    a half-written value; polling is a plain reference comparison and never
    blocks.
    """

    def __init__(self, axes: int, v_max: int = DEFAULT_V_MAX) -> None:
        if axes < 1:
            raise ControlError("mailbox needs at least one axis")
        self.axes = axes
        self.v_max = v_max
        self.clamp_count = 0
        self._slots: list[AxisSetpoint | None] = [None] * axes
        self._consumed: list[AxisSetpoint | None] = [None] * axes

    def push(self, axis: int, target_velocity: int,
             timestamp: float | None = None) -> AxisSetpoint:
        if not 0 <= axis < self.axes:
            raise ControlError(f"axis {axis} out of range 0..{self.axes - 1}")
        clamped = False
        if target_velocity > self.v_max:
            target_velocity, clamped = self.v_max, True
        elif target_velocity < -self.v_max:
            target_velocity, clamped = -self.v_max, True
        if clamped:
            self.clamp_count += 1
        sp = AxisSetpoint(axis, target_velocity,
                          time.monotonic() if timestamp is None else timestamp,
                          clamped)
        self._slots[axis] = sp
        return sp

    def push_setpoint(self, sp: AxisSetpoint) -> AxisSetpoint:
        return self.push(sp.axis, sp.target_velocity, sp.timestamp)

    def poll(self, axis: int) -> AxisSetpoint | None:
        """Return the newest unseen setpoint for `axis`, or None."""
        sp = self._slots[axis]
        if sp is None or sp is self._consumed[axis]:
            return None
        self._consumed[axis] = sp
        return sp


@dataclass
class ControlStatus:
    """Per-cycle anomalies surfaced instead of raising in the cyclic path."""

    inhibited: bool = False
    limited_axes: list[int] = field(default_factory=list)
    faulted_axes: list[int] = field(default_factory=list)


class VelocityController:
    """Cyclic controller for N velocity axes."""

    def __init__(self, mailbox: SetpointMailbox) -> None:
        self.mailbox = mailbox
        self.axes = mailbox.axes
        self.held = [0] * self.axes
        self.last_status = ControlStatus()

    def control_step(self, safety: SafetyStatus,
                     axes_status: list[ServoTxPdo]) -> list[ServoRxPdo]:
        """Produce this cycle's command image for every axis.

        Safety dominates: an emergency stop or a degraded bus zeroes every
        commanded velocity and drops the power stages in the same cycle.
        """
        status = ControlStatus(inhibited=safety.motion_inhibited)
        if safety.motion_inhibited:
            self.held = [0] * self.axes
        commands = []
        for axis in range(self.axes):
            sp = self.mailbox.poll(axis)
            if sp is not None and not safety.motion_inhibited:
                self.held[axis] = sp.target_velocity
            if safety.motion_inhibited:
                commands.append(ServoRxPdo(controlword=CW_DISABLE_VOLTAGE,
                                           target_velocity=0,
                                           mode_of_operation=MODE_CSV))
                continue
            tv = self.held[axis]
            if safety.limit_min and tv < 0:
                tv = 0
                status.limited_axes.append(axis)
            if safety.limit_max and tv > 0:
                tv = 0
                status.limited_axes.append(axis)
            state = state_from_statusword(axes_status[axis].statusword)
            if state is Cia402State.FAULT:
                status.faulted_axes.append(axis)
            cw = _LADDER.get(state, CW_SHUTDOWN)
            if state is not Cia402State.OPERATION_ENABLED:
                tv = 0
            commands.append(ServoRxPdo(controlword=cw, target_velocity=tv,
                                       mode_of_operation=MODE_CSV))
        self.last_status = status
        return commands


@dataclass(frozen=True)
class ScriptEvent:
    time_ms: int
    kind: str          # "setpoint" or "estop"
    axis: int = 0
    velocity: int = 0
    value: bool = True


def parse_script(text: str) -> list[ScriptEvent]:
    """Parse a trajectory script.

    One event per line: ``<time_ms> <axis> <velocity>`` for a setpoint, or
    ``<time_ms> estop [on|off]`` to operate the emergency stop. Blank lines
    and ``#`` comments are ignored.
    """
    events = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            t = int(parts[0])
            if t < 0:
                raise ValueError("negative time")
            if parts[1] == "estop":
                value = True
                if len(parts) > 2:
                    if parts[2] not in ("on", "off"):
                        raise ValueError(f"bad estop argument {parts[2]!r}")
                    value = parts[2] == "on"
                events.append(ScriptEvent(t, "estop", value=value))
            else:
                events.append(ScriptEvent(t, "setpoint", axis=int(parts[1]),
                                          velocity=int(parts[2])))
        except (IndexError, ValueError) as exc:
            raise ControlError(f"script line {lineno}: {raw!r}: {exc}") from None
    events.sort(key=lambda e: e.time_ms)
    return events


class ScriptSource:
    """Deterministic setpoint source replaying a parsed script by time."""

    def __init__(self, events: list[ScriptEvent]) -> None:
        self.events = events
        self._next = 0

    @property
    def exhausted(self) -> bool:
        return self._next >= len(self.events)

    @property
    def end_time_ms(self) -> int:
        return self.events[-1].time_ms if self.events else 0

    def due(self, now_ms: float) -> list[ScriptEvent]:
        """Events whose time has arrived, in order; each returned once."""
        out = []
        while self._next < len(self.events) \
                and self.events[self._next].time_ms <= now_ms:
            out.append(self.events[self._next])
            self._next += 1
        return out
